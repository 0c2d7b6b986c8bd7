//! Dual-branch vision transformer: a CLS-token PSPI classifier and an AU
//! regressor fed by learnable query tokens cross-attending to patch features.

mod checkpoint;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::synth::{NUM_AUS, NUM_PSPI_CLASSES};
use crate::tensor::{mix_seed, DropoutKey, Tape, Tensor, Var};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_CONFIG, CHECKPOINT_INDEX};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// 1 for heatmaps, 3 for RGB.
    pub channels: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub num_aus: usize,
    /// Dropout inside the PSPI head.
    pub dropout_p: f64,
}

impl ModelConfig {
    /// Small default used at desk scale.
    pub fn tiny(image_size: usize, channels: usize) -> Self {
        ModelConfig {
            image_size,
            patch_size: 16,
            channels,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: NUM_PSPI_CLASSES,
            num_aus: NUM_AUS,
            dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden dim {} is not divisible by {} heads",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.hidden_dim < 4 || self.hidden_dim % 4 != 0 {
            return bad(format!("hidden dim {} must be a positive multiple of 4", self.hidden_dim));
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.num_aus != NUM_AUS || self.num_classes < 2 || self.mlp_ratio == 0 {
            return bad("num_aus must be 6, num_classes at least 2, mlp_ratio positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Parameter groups with separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    /// Patch projection, positional embeddings, CLS token and encoder blocks.
    Backbone,
    /// AU queries, AU head and PSPI head.
    Heads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// A model instance: config plus named parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Tensors produced by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// `[B, classes]`
    pub pspi_logits: Tensor,
    /// `[B, 6]`, non-negative.
    pub au_pred: Tensor,
    /// `[B, D]`
    pub cls_feature: Tensor,
    /// `[B, N, D]`
    pub patch_features: Tensor,
    /// `[B, 6, N]`, rows sum to 1.
    pub attention_maps: Tensor,
}

/// Tape handles for the same quantities as [`ModelOutput`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub pspi_logits: Var,
    pub au_pred: Var,
    pub cls_feature: Var,
    pub patch_features: Var,
    pub attention_maps: Var,
}

impl ForwardVars {
    pub fn to_output(&self, tape: &Tape) -> ModelOutput {
        ModelOutput {
            pspi_logits: tape.value(self.pspi_logits).clone(),
            au_pred: tape.value(self.au_pred).clone(),
            cls_feature: tape.value(self.cls_feature).clone(),
            patch_features: tape.value(self.patch_features).clone(),
            attention_maps: tape.value(self.attention_maps).clone(),
        }
    }
}

/// Whether dropout is active, and the stream it draws from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}

fn param_layout(cfg: &ModelConfig) -> Vec<(String, Group, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let h = d * cfg.mlp_ratio;
    let mut out = vec![
        ("patch.weight".into(), Group::Backbone, vec![cfg.patch_dim(), d]),
        ("patch.bias".into(), Group::Backbone, vec![d]),
        ("cls".into(), Group::Backbone, vec![d]),
        ("pos".into(), Group::Backbone, vec![cfg.num_patches() + 1, d]),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("enc.{l}.{s}");
        out.extend([
            (p("ln1.gamma"), Group::Backbone, vec![d]),
            (p("ln1.beta"), Group::Backbone, vec![d]),
            (p("attn.qkv.weight"), Group::Backbone, vec![d, 3 * d]),
            (p("attn.qkv.bias"), Group::Backbone, vec![3 * d]),
            (p("attn.proj.weight"), Group::Backbone, vec![d, d]),
            (p("attn.proj.bias"), Group::Backbone, vec![d]),
            (p("ln2.gamma"), Group::Backbone, vec![d]),
            (p("ln2.beta"), Group::Backbone, vec![d]),
            (p("mlp.fc1.weight"), Group::Backbone, vec![d, h]),
            (p("mlp.fc1.bias"), Group::Backbone, vec![h]),
            (p("mlp.fc2.weight"), Group::Backbone, vec![h, d]),
            (p("mlp.fc2.bias"), Group::Backbone, vec![d]),
        ]);
    }
    out.extend([
        ("au.queries".into(), Group::Heads, vec![cfg.num_aus, d]),
        ("au.fc1.weight".into(), Group::Heads, vec![d, d / 2]),
        ("au.fc1.bias".into(), Group::Heads, vec![d / 2]),
        ("au.fc2.weight".into(), Group::Heads, vec![d / 2, 1]),
        ("au.fc2.bias".into(), Group::Heads, vec![1]),
        ("pspi.ln.gamma".into(), Group::Heads, vec![d]),
        ("pspi.ln.beta".into(), Group::Heads, vec![d]),
        ("pspi.fc1.weight".into(), Group::Heads, vec![d, d / 2]),
        ("pspi.fc1.bias".into(), Group::Heads, vec![d / 2]),
        ("pspi.fc2.weight".into(), Group::Heads, vec![d / 2, d / 4]),
        ("pspi.fc2.bias".into(), Group::Heads, vec![d / 4]),
        ("pspi.fc3.weight".into(), Group::Heads, vec![d / 4, cfg.num_classes]),
        ("pspi.fc3.bias".into(), Group::Heads, vec![cfg.num_classes]),
    ]);
    out
}

/// Normal(0, std) truncated to two standard deviations by resampling.
fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_value(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if name.ends_with("gamma") {
        return Tensor::full(shape.to_vec(), 1.0);
    }
    if name == "au.fc2.bias" {
        // a positive start keeps the final ReLU from beginning dead
        return Tensor::full(shape.to_vec(), 1.0);
    }
    if name.ends_with("bias") || name.ends_with("beta") {
        return Tensor::zeros(shape.to_vec());
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| trunc_normal(rng, INIT_STD)).collect();
    Tensor::new(shape.to_vec(), data).expect("layout shape")
}

impl Model {
    /// Fresh parameters: truncated normal (std 0.02) weights, unit norms, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x1417]));
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, group, shape)| {
                let value = init_value(&name, &shape, &mut rng);
                Param { name, group, value }
            })
            .collect();
        Ok(Model::from_params(config, params))
    }

    pub(crate) fn from_params(config: ModelConfig, params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Model {
            config,
            params,
            index,
        }
    }

    /// Names, groups and shapes every parameter set for `config` must have.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Group, Vec<usize>)> {
        param_layout(config)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape`; those in groups where `trainable`
    /// is true become gradient leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Group) -> bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                if trainable(p.group) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.index[name]]
    }

    /// Splits `[B, H, W, C]` images into `[B, N, P·P·C]` row-major patches.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        patchify(images, self.config.patch_size, self.config.channels)
    }

    /// Patch projection, CLS prepend and positional embeddings: `[B, N+1, D]`.
    pub fn embed(&self, tape: &mut Tape, vars: &[Var], images: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.channels {
            return Err(Error::Dimension(format!(
                "model expects [B, {0}, {0}, {1}] images, got {s:?}",
                cfg.image_size, cfg.channels
            )));
        }
        let b = s[0];
        let patches = tape.constant(self.patchify(images)?)?;
        let tokens = tape.linear(
            patches,
            self.var(vars, "patch.weight"),
            self.var(vars, "patch.bias"),
        )?;
        let cls = tape.reshape(self.var(vars, "cls"), &[1, cfg.hidden_dim])?;
        let cls = tape.repeat_batch(cls, b)?;
        let seq = tape.concat(&[cls, tokens], 1)?;
        tape.add_bcast(seq, self.var(vars, "pos"))
    }

    /// Pre-norm transformer blocks. Without a final norm, zero layers is the identity.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for l in 0..self.config.num_layers {
            x = self.block(tape, vars, x, l).map_err(|e| match e {
                Error::Numeric(what) => Error::Numeric(format!("encoder layer {l} ({what})")),
                other => other,
            })?;
        }
        Ok(x)
    }

    fn block(&self, tape: &mut Tape, vars: &[Var], x: Var, l: usize) -> Result<Var> {
        let cfg = &self.config;
        let p = |s: &str| self.var(vars, &format!("enc.{l}.{s}"));
        let (b, t) = (tape.shape(x)[0], tape.shape(x)[1]);
        let (d, nh) = (cfg.hidden_dim, cfg.num_heads);
        let dh = d / nh;

        let h = tape.layer_norm(x, p("ln1.gamma"), p("ln1.beta"), LN_EPS)?;
        let qkv = tape.linear(h, p("attn.qkv.weight"), p("attn.qkv.bias"))?;
        let mut heads = [qkv; 3];
        for (i, slot) in heads.iter_mut().enumerate() {
            let part = tape.narrow(qkv, 2, i * d, d)?;
            let part = tape.reshape(part, &[b, t, nh, dh])?;
            *slot = tape.permute(part, &[0, 2, 1, 3])?;
        }
        let [q, k, v] = heads;
        let scores = tape.bmm_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores, 3)?;
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let out = tape.linear(ctx, p("attn.proj.weight"), p("attn.proj.bias"))?;
        let x = tape.add(x, out)?;

        let h = tape.layer_norm(x, p("ln2.gamma"), p("ln2.beta"), LN_EPS)?;
        let h = tape.linear(h, p("mlp.fc1.weight"), p("mlp.fc1.bias"))?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, p("mlp.fc2.weight"), p("mlp.fc2.bias"))?;
        tape.add(x, h)
    }

    /// Shared per-AU regressor: Linear, ReLU, Linear, ReLU. `[B, 6, D] -> [B, 6]`.
    pub fn au_head(&self, tape: &mut Tape, vars: &[Var], features: Var) -> Result<Var> {
        au_head(
            tape,
            features,
            [
                self.var(vars, "au.fc1.weight"),
                self.var(vars, "au.fc1.bias"),
                self.var(vars, "au.fc2.weight"),
                self.var(vars, "au.fc2.bias"),
            ],
        )
    }

    /// LayerNorm then D -> D/2 -> D/4 -> classes with GELU and dropout between.
    pub fn pspi_head(&self, tape: &mut Tape, vars: &[Var], cls: Var, mode: Mode) -> Result<Var> {
        let p = |s: &str| self.var(vars, s);
        let x = tape.layer_norm(cls, p("pspi.ln.gamma"), p("pspi.ln.beta"), LN_EPS)?;
        let mut x = x;
        for (i, layer) in ["pspi.fc1", "pspi.fc2"].iter().enumerate() {
            x = tape.linear(x, p(&format!("{layer}.weight")), p(&format!("{layer}.bias")))?;
            x = tape.gelu(x)?;
            x = match mode {
                Mode::Eval => x,
                Mode::Train { seed, step } => {
                    let key = DropoutKey {
                        seed,
                        layer: i as u64,
                        step,
                    };
                    tape.dropout(x, self.config.dropout_p, true, key)?
                }
            };
        }
        tape.linear(x, p("pspi.fc3.weight"), p("pspi.fc3.bias"))
    }

    /// Full forward pass over `[B, H, W, C]` images.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], images: &Tensor, mode: Mode) -> Result<ForwardVars> {
        let cfg = &self.config;
        let b = images.shape().first().copied().unwrap_or(0);
        let tokens = self.embed(tape, vars, images)?;
        let encoded = self.encode(tape, vars, tokens)?;
        let cls = tape.narrow(encoded, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[b, cfg.hidden_dim])?;
        let patches = tape.narrow(encoded, 1, 1, cfg.num_patches())?;
        let pspi_logits = self.pspi_head(tape, vars, cls, mode)?;
        let (features, attention) = au_cross_attention(tape, patches, self.var(vars, "au.queries"))?;
        let au_pred = self.au_head(tape, vars, features)?;
        Ok(ForwardVars {
            pspi_logits,
            au_pred,
            cls_feature: cls,
            patch_features: patches,
            attention_maps: attention,
        })
    }

    /// Inference without gradients.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false)?;
        let out = self.forward_on(&mut tape, &vars, images, mode)?;
        Ok(out.to_output(&tape))
    }

    /// Eval-mode inference in chunks of `batch` images.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<ModelOutput> {
        let n = images.shape()[0];
        let per: usize = images.shape()[1..].iter().product();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            parts.push(self.forward(&chunk, Mode::Eval)?);
            start = end;
        }
        concat_outputs(&parts)
    }
}

fn concat_rows(parts: Vec<&Tensor>) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn concat_outputs(parts: &[ModelOutput]) -> Result<ModelOutput> {
    if parts.is_empty() {
        return Err(Error::Data("no images to run inference on".into()));
    }
    Ok(ModelOutput {
        pspi_logits: concat_rows(parts.iter().map(|p| &p.pspi_logits).collect())?,
        au_pred: concat_rows(parts.iter().map(|p| &p.au_pred).collect())?,
        cls_feature: concat_rows(parts.iter().map(|p| &p.cls_feature).collect())?,
        patch_features: concat_rows(parts.iter().map(|p| &p.patch_features).collect())?,
        attention_maps: concat_rows(parts.iter().map(|p| &p.attention_maps).collect())?,
    })
}

/// `[B, H, W, C] -> [B, N, P·P·C]`, patches in raster order.
pub fn patchify(images: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[3] != channels {
        return Err(Error::Dimension(format!(
            "expected [B, H, W, {channels}] images, got {s:?}"
        )));
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * channels;
    let src = images.data();
    let mut out = vec![0.0; b * gh * gw * pd];
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                let dst = ((bi * gh + py) * gw + px) * pd;
                for r in 0..patch {
                    let row = ((bi * h + py * patch + r) * w + px * patch) * channels;
                    out[dst + r * patch * channels..dst + (r + 1) * patch * channels]
                        .copy_from_slice(&src[row..row + patch * channels]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

/// Single-head cross-attention of query tokens over patches, no projections:
/// `A = Q·Pᵀ/√D`, `α = softmax(A)` over patches, `F = α·P`.
/// Returns `(F [B, Q, D], α [B, Q, N])`.
pub fn au_cross_attention(tape: &mut Tape, patches: Var, queries: Var) -> Result<(Var, Var)> {
    let (ps, qs) = (tape.shape(patches).to_vec(), tape.shape(queries).to_vec());
    if ps.len() != 3 || qs.len() != 2 || ps[2] != qs[1] {
        return Err(Error::Dimension(format!(
            "cross-attention: patches {ps:?} and queries {qs:?} disagree"
        )));
    }
    let q = tape.repeat_batch(queries, ps[0])?;
    let logits = tape.bmm_nt(q, patches)?;
    let logits = tape.scale(logits, 1.0 / (ps[2] as f64).sqrt())?;
    let alpha = tape.softmax(logits, 2)?;
    let features = tape.bmm(alpha, patches)?;
    Ok((features, alpha))
}

/// `relu(relu(F·W1 + b1)·W2 + b2)` applied to each AU feature row, squeezed to `[B, Q]`.
pub fn au_head(tape: &mut Tape, features: Var, [w1, b1, w2, b2]: [Var; 4]) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 3 || tape.shape(w2).last() != Some(&1) {
        return Err(Error::Dimension(format!("AU head: bad feature shape {s:?}")));
    }
    let h = tape.linear(features, w1, b1)?;
    let h = tape.relu(h)?;
    let y = tape.linear(h, w2, b2)?;
    let y = tape.relu(y)?;
    tape.reshape(y, &[s[0], s[1]])
}

/// Row-wise softmax of `[B, C]` logits.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            hidden_dim: 16,
            num_layers: layers,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: NUM_PSPI_CLASSES,
            num_aus: NUM_AUS,
            dropout_p: 0.1,
        }
    }

    fn images(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.image_size * cfg.image_size * cfg.channels;
        Tensor::new(
            vec![b, cfg.image_size, cfg.image_size, cfg.channels],
            (0..n).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patch_counts() {
        let mut c = ModelConfig::tiny(224, 3);
        assert_eq!(c.num_patches(), 196);
        c = ModelConfig::tiny(64, 3);
        assert_eq!(c.num_patches(), 16);
        c = ModelConfig::tiny(60, 3);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let img = Tensor::zeros(vec![1, 60, 60, 3]);
        assert!(matches!(patchify(&img, 16, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn patchify_layout() {
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let img = Tensor::new(vec![1, 4, 4, 1], data).unwrap();
        let p = patchify(&img, 2, 1).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn output_shapes() {
        let cfg = ModelConfig::tiny(64, 3);
        let m = Model::init(cfg.clone(), 1).unwrap();
        let out = m.forward(&images(2, &cfg, 0), Mode::Eval).unwrap();
        assert_eq!(out.pspi_logits.shape(), &[2, 17]);
        assert_eq!(out.au_pred.shape(), &[2, 6]);
        assert_eq!(out.attention_maps.shape(), &[2, 6, 16]);
        assert_eq!(out.cls_feature.shape(), &[2, 64]);
        assert_eq!(out.patch_features.shape(), &[2, 16, 64]);
        for row in out.attention_maps.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&a| a > 0.0 && a < 1.0));
        }
        assert!(out.au_pred.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let cfg = tiny(1);
        let m = Model::init(cfg.clone(), 4).unwrap();
        let one = images(1, &cfg, 3);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 8, 8, 1], data).unwrap();
        let out = m.forward(&two, Mode::Eval).unwrap();
        assert_eq!(out.pspi_logits.row(0), out.pspi_logits.row(1));
        assert_eq!(out.au_pred.row(0), out.au_pred.row(1));
        let again = m.forward(&two, Mode::Eval).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn zero_layer_encoder_is_identity() {
        let cfg = tiny(0);
        let m = Model::init(cfg.clone(), 2).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, |_| false).unwrap();
        let tokens = m.embed(&mut tape, &vars, &images(2, &cfg, 1)).unwrap();
        let out = m.encode(&mut tape, &vars, tokens).unwrap();
        assert_eq!(tape.value(tokens), tape.value(out));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let cfg = tiny(2);
        let m = Model::init(cfg.clone(), 8).unwrap();
        let n = cfg.num_patches();
        let d = cfg.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens: Vec<f64> = (0..2 * (n + 1) * d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = tokens.clone();
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                let (o, i) = ((b * (n + 1) + 1 + dst) * d, (b * (n + 1) + 1 + src) * d);
                permuted[o..o + d].copy_from_slice(&tokens[i..i + d]);
            }
        }
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape, |_| false).unwrap();
            let x = tape.constant(Tensor::new(vec![2, n + 1, d], data).unwrap()).unwrap();
            let y = m.encode(&mut tape, &vars, x).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(tokens), run(permuted));
        for bi in 0..2 {
            let cls = |t: &Tensor| t.data()[bi * (n + 1) * d..bi * (n + 1) * d + d].to_vec();
            for (x, y) in cls(&a).iter().zip(cls(&b)) {
                assert!((x - y).abs() < 1e-12);
            }
            for (dst, &src) in perm.iter().enumerate() {
                let (o, i) = ((bi * (n + 1) + 1 + dst) * d, (bi * (n + 1) + 1 + src) * d);
                for k in 0..d {
                    assert!((b.data()[o + k] - a.data()[i + k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cross_attention_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap()).unwrap();
        let q = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        let (f, a) = au_cross_attention(&mut tape, p, q).unwrap();
        let alpha = tape.value(a).data();
        assert!((alpha[0] - 0.017986209962091555).abs() < 1e-12);
        assert!((alpha[1] - 0.9820137900379085).abs() < 1e-12);
        assert!((tape.value(f).item() - 2.9640275800758173).abs() < 1e-12);

        // single patch: every query copies it
        let p = tape.constant(Tensor::new(vec![1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let q = tape.constant(Tensor::new(vec![6, 3], (0..18).map(f64::from).collect()).unwrap()).unwrap();
        let (f, a) = au_cross_attention(&mut tape, p, q).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v == 1.0));
        for row in tape.value(f).data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }

        // zero queries attend uniformly
        let p = tape.constant(Tensor::new(vec![1, 4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap()).unwrap();
        let q = tape.constant(Tensor::zeros(vec![6, 2])).unwrap();
        let (f, a) = au_cross_attention(&mut tape, p, q).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for row in tape.value(f).data().chunks(2) {
            assert!((row[0] - 4.0).abs() < 1e-12 && (row[1] - 5.0).abs() < 1e-12);
        }

        let bad = tape.constant(Tensor::zeros(vec![6, 3])).unwrap();
        assert!(matches!(au_cross_attention(&mut tape, p, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn au_head_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap()).unwrap();
        let w1 = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        let b1 = tape.constant(Tensor::zeros(vec![1])).unwrap();
        let w2 = tape.constant(Tensor::new(vec![1, 1], vec![-1.0]).unwrap()).unwrap();
        let y = au_head(&mut tape, f, [w1, b1, w2, b1]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);

        let cfg = tiny(1);
        let mut m = Model::init(cfg.clone(), 3).unwrap();
        for name in ["au.fc1.weight", "au.fc1.bias", "au.fc2.weight", "au.fc2.bias"] {
            m.param_mut(name).unwrap().data_mut().fill(0.0);
        }
        let out = m.forward(&images(3, &cfg, 9), Mode::Eval).unwrap();
        assert!(out.au_pred.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pspi_head_bias_passthrough_and_dropout() {
        let cfg = tiny(1);
        let mut m = Model::init(cfg.clone(), 3).unwrap();
        m.param_mut("pspi.fc3.weight").unwrap().data_mut().fill(0.0);
        let bias: Vec<f64> = (0..17).map(|i| i as f64 * 0.1).collect();
        m.param_mut("pspi.fc3.bias").unwrap().data_mut().copy_from_slice(&bias);
        let out = m.forward(&images(2, &cfg, 1), Mode::Eval).unwrap();
        assert_eq!(out.pspi_logits.row(0), &bias[..]);
        assert_eq!(out.pspi_logits.row(1), &bias[..]);

        let m = Model::init(cfg.clone(), 3).unwrap();
        let x = images(4, &cfg, 2);
        let eval = m.forward(&x, Mode::Eval).unwrap();
        let train = m.forward(&x, Mode::Train { seed: 1, step: 0 }).unwrap();
        assert_ne!(eval.pspi_logits, train.pspi_logits);
        assert_eq!(eval.au_pred, train.au_pred);
    }

    #[test]
    fn predict_matches_forward() {
        let cfg = tiny(1);
        let m = Model::init(cfg.clone(), 6).unwrap();
        let x = images(5, &cfg, 4);
        let whole = m.forward(&x, Mode::Eval).unwrap();
        let chunked = m.predict(&x, 2).unwrap();
        for (a, b) in whole.pspi_logits.data().iter().zip(chunked.pspi_logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny(1);
        assert_eq!(Model::init(cfg.clone(), 1).unwrap(), Model::init(cfg.clone(), 1).unwrap());
        assert_ne!(Model::init(cfg.clone(), 1).unwrap(), Model::init(cfg, 2).unwrap());
    }
}
