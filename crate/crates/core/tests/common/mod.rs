#![allow(dead_code)]

use painforge::model::{Model, ModelConfig, Mode};
use painforge::synth::NUM_AUS;
use painforge::tensor::{gradcheck_with_floor, DropoutKey, GradcheckReport, Tape, Tensor, Var};
use painforge::train::{compose_loss, LossWeights, TeacherVars};
use painforge::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// D=16, one layer, 2x2 patches of 8 pixels.
pub fn tiny_config(channels: usize) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        channels,
        hidden_dim: 16,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 17,
        num_aus: NUM_AUS,
        dropout_p: 0.1,
    }
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Gradcheck of the full distillation loss with respect to every parameter
/// of a tiny model, flattened into one vector.
/// Elements whose gradient magnitude is below `floor` are skipped.
pub fn full_model_gradcheck(seed: u64, h: f64, floor: f64) -> Result<GradcheckReport> {
    let cfg = tiny_config(3);
    let model = Model::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // move parameters away from the init (biases of exactly zero, unit gains)
    let flat: Vec<f64> = model
        .params
        .iter()
        .flat_map(|p| p.value.data().iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect::<Vec<_>>())
        .collect();
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.value.shape().to_vec()).collect();
    let b = 3;
    let images = random_tensor(&[b, 16, 16, 3], 1.0, &mut rng);
    let t_logits = random_tensor(&[b, 17], 2.0, &mut rng);
    let t_au = random_tensor(&[b, NUM_AUS], 2.0, &mut rng);
    let t_cls = random_tensor(&[b, 16], 1.0, &mut rng);
    let au = random_tensor(&[b, NUM_AUS], 3.0, &mut rng);
    let pspi = [3usize, 0, 12];
    let x = Tensor::new(vec![flat.len()], flat)?;
    let f = |tape: &mut Tape, x: Var| -> Result<Var> {
        let mut vars = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for s in &shapes {
            let n: usize = s.iter().product();
            let part = tape.narrow(x, 0, offset, n)?;
            vars.push(tape.reshape(part, s)?);
            offset += n;
        }
        let out = model.forward_on(tape, &vars, &images, Mode::Train { seed: 5, step: 0 })?;
        let teacher = TeacherVars {
            pspi_logits: tape.constant(t_logits.clone())?,
            au_pred: tape.constant(t_au.clone())?,
            cls_feature: tape.constant(t_cls.clone())?,
        };
        let au = tape.constant(au.clone())?;
        let (loss, _) = compose_loss(tape, &out, Some(teacher), &pspi, au, &LossWeights::default())?;
        Ok(loss)
    };
    gradcheck_with_floor(f, &x, h, floor)
}

/// Random labelled examples shaped for [`tiny_config`].
pub fn random_examples(n: usize, channels: usize, seed: u64) -> painforge::train::Examples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    painforge::train::Examples {
        images: random_tensor(&[n, 16, 16, channels], 1.0, &mut rng),
        pspi: (0..n).map(|i| i % 17).collect(),
        au: (0..n)
            .map(|_| {
                let mut a = [0.0; NUM_AUS];
                for v in &mut a {
                    *v = rng.gen_range(0.0..5.0);
                }
                a
            })
            .collect(),
        subjects: (0..n).map(|i| i / 4).collect(),
    }
}

/// Builds a dataset into `dir` and loads its manifest.
pub fn build(dir: &std::path::Path, spec: &painforge::synth::DatasetSpec) -> painforge::synth::Manifest {
    let s = painforge::synth::build_dataset(spec, dir, false).unwrap();
    painforge::synth::Manifest::load(&s.manifest_path).unwrap()
}

/// Every differentiable op, reduced to a scalar with a fixed random projection
/// so the check covers full Jacobians rather than just sums.
pub fn op_cases() -> Vec<(
    &'static str,
    Vec<usize>,
    Box<dyn Fn(&mut Tape, Var) -> Result<Var>>,
)> {
    fn project(tape: &mut Tape, y: Var) -> Result<Var> {
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n)
            .map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0 + 0.05)
            .collect();
        let w = tape.constant(Tensor::new(shape, w)?)?;
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }
    let other = |shape: &[usize], seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_tensor(shape, 1.0, &mut rng)
    };
    let b23 = other(&[3, 2], 11);
    let b_bmm = other(&[2, 3, 4], 12);
    let b_nt = other(&[2, 5, 4], 13);
    let gamma = other(&[4], 14);
    let beta = other(&[4], 15);
    let bias = other(&[4], 16);
    let zt = other(&[3, 5], 17);
    let target = other(&[2, 4], 18);
    vec![
        (
            "matmul",
            vec![2, 3],
            Box::new(move |tp: &mut Tape, x: Var| {
                let b = tp.leaf(b23.clone())?;
                let y = tp.matmul(x, b)?;
                project(tp, y)
            }),
        ),
        (
            "matmul_rhs",
            vec![3, 2],
            Box::new(|tp: &mut Tape, x: Var| {
                let a = tp.leaf(Tensor::new([2, 3], vec![0.1, -0.5, 0.9, 0.3, 0.7, -0.2])?)?;
                let y = tp.matmul(a, x)?;
                project(tp, y)
            }),
        ),
        (
            "bmm",
            vec![2, 2, 3],
            Box::new(move |tp: &mut Tape, x: Var| {
                let b = tp.leaf(b_bmm.clone())?;
                let y = tp.bmm(x, b)?;
                project(tp, y)
            }),
        ),
        (
            "bmm_nt",
            vec![2, 3, 4],
            Box::new(move |tp: &mut Tape, x: Var| {
                let b = tp.leaf(b_nt.clone())?;
                let y = tp.bmm_nt(x, b)?;
                let z = tp.bmm_nt(b, x)?;
                let (py, pz) = (project(tp, y)?, project(tp, z)?);
                tp.add(py, pz)
            }),
        ),
        (
            "softmax",
            vec![2, 3, 4],
            Box::new(|tp: &mut Tape, x: Var| {
                let y = tp.softmax(x, 1)?;
                project(tp, y)
            }),
        ),
        (
            "layer_norm",
            vec![3, 4],
            Box::new(move |tp: &mut Tape, x: Var| {
                let g = tp.leaf(gamma.clone())?;
                let b = tp.leaf(beta.clone())?;
                let y = tp.layer_norm(x, g, b, 1e-5)?;
                project(tp, y)
            }),
        ),
        (
            "gelu",
            vec![2, 5],
            Box::new(|tp: &mut Tape, x: Var| {
                let y = tp.gelu(x)?;
                project(tp, y)
            }),
        ),
        (
            "relu",
            vec![2, 5],
            Box::new(|tp: &mut Tape, x: Var| {
                let y = tp.relu(x)?;
                project(tp, y)
            }),
        ),
        (
            "dropout",
            vec![2, 5],
            Box::new(|tp: &mut Tape, x: Var| {
                let y = tp.dropout(
                    x,
                    0.3,
                    true,
                    DropoutKey {
                        seed: 1,
                        layer: 2,
                        step: 3,
                    },
                )?;
                project(tp, y)
            }),
        ),
        (
            "add_bcast+sub+scale",
            vec![3, 4],
            Box::new(move |tp: &mut Tape, x: Var| {
                let b = tp.leaf(bias.clone())?;
                let y = tp.add_bcast(x, b)?;
                let s = tp.scale(x, -0.7)?;
                let z = tp.sub(y, s)?;
                let w = tp.mul(z, x)?;
                project(tp, w)
            }),
        ),
        (
            "permute+reshape",
            vec![2, 3, 4],
            Box::new(|tp: &mut Tape, x: Var| {
                let y = tp.permute(x, &[2, 0, 1])?;
                let r = tp.reshape(y, &[8, 3])?;
                project(tp, r)
            }),
        ),
        (
            "concat+narrow+repeat",
            vec![2, 3],
            Box::new(|tp: &mut Tape, x: Var| {
                let sq = tp.mul(x, x)?;
                let c = tp.concat(&[x, sq, x], 1)?;
                let n = tp.narrow(c, 1, 2, 5)?;
                let r = tp.repeat_batch(n, 3)?;
                let m = tp.mean(r)?;
                let p = project(tp, n)?;
                tp.add(m, p)
            }),
        ),
        (
            "linear",
            vec![2, 3, 3],
            Box::new(move |tp: &mut Tape, x: Var| {
                let w = tp.leaf(Tensor::new([3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?)?;
                let b = tp.leaf(Tensor::new([4], vec![0.1, -0.2, 0.3, 0.05])?)?;
                let y = tp.linear(x, w, b)?;
                project(tp, y)
            }),
        ),
        (
            "cross_entropy",
            vec![3, 5],
            Box::new(|tp: &mut Tape, x: Var| tp.cross_entropy(x, &[0, 4, 2])),
        ),
        (
            "kl_temperature",
            vec![3, 5],
            Box::new(move |tp: &mut Tape, x: Var| {
                let t = tp.constant(zt.clone())?;
                tp.kl_temperature(t, x, 4.0)
            }),
        ),
        (
            "mse",
            vec![2, 4],
            Box::new(move |tp: &mut Tape, x: Var| {
                let t = tp.leaf(target.clone())?;
                tp.mse(x, t)
            }),
        ),
    ]
}
