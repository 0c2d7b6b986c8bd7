mod common;

#[test]
fn full_tiny_model_loss_passes_gradcheck() {
    for seed in [1, 2] {
        let rep = common::full_model_gradcheck(seed, 1e-4, 1e-6).unwrap();
        assert!(rep.passes(1e-4), "seed {seed}: max rel error {:e} at {:?}", rep.max_rel_error, rep.worst_index);
        assert!(rep.skipped * 10 < rep.analytic.len());
    }
}

use painforge::model::{load_checkpoint, save_checkpoint, Group, Model, ModelOutput};
use painforge::synth::{DatasetSpec, Manifest, NUM_AUS};
use painforge::tensor::{cosine_lr, Tensor};
use painforge::train::*;
use painforge::Error;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick(epochs: usize, freeze: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        freeze_epochs: freeze,
        lr_backbone: 1e-3,
        lr_heads: 1e-2,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn teacher_targets(n: usize, d: usize, seed: u64) -> TeacherTargets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TeacherTargets {
        pspi_logits: common::random_tensor(&[n, 17], 2.0, &mut rng),
        au_pred: common::random_tensor(&[n, NUM_AUS], 2.0, &mut rng),
        cls_feature: common::random_tensor(&[n, d], 1.0, &mut rng),
    }
}

#[test]
fn frozen_backbone_is_bit_identical_during_freeze() {
    let ex = common::random_examples(20, 3, 1);
    let model = Model::init(common::tiny_config(3), 9).unwrap();
    let backbone = |m: &Model| -> Vec<Tensor> {
        m.params.iter().filter(|p| p.group == Group::Backbone).map(|p| p.value.clone()).collect()
    };
    let heads = |m: &Model| -> Vec<Tensor> {
        m.params.iter().filter(|p| p.group == Group::Heads).map(|p| p.value.clone()).collect()
    };
    let start_b = backbone(&model);
    let start_h = heads(&model);
    let mut snapshots: Vec<(usize, Vec<Tensor>, Vec<Tensor>)> = Vec::new();
    let mut hook = |epoch: usize, m: &Model| snapshots.push((epoch, backbone(m), heads(m)));
    fit(model, &ex, None, None, Role::Student, &quick(3, 2), &LossWeights::default(), None, Some(&mut hook)).unwrap();
    assert_eq!(snapshots.len(), 9);
    for (epoch, b, h) in &snapshots {
        if *epoch < 2 {
            assert_eq!(b, &start_b, "epoch {epoch}");
            assert_ne!(h, &start_h);
        } else {
            assert_ne!(b, &start_b);
        }
    }
}

#[test]
fn zero_distill_weights_match_no_teacher_run() {
    let ex = common::random_examples(16, 3, 2);
    let model = Model::init(common::tiny_config(3), 3).unwrap();
    let targets = teacher_targets(16, 16, 5);
    let w = LossWeights {
        pspi_distill: 0.0,
        au_distill: 0.0,
        feature_distill: 0.0,
        ..LossWeights::default()
    };
    let cfg = quick(3, 1);
    let a = fit(model.clone(), &ex, None, Some(&targets), Role::Student, &cfg, &w, None, None).unwrap();
    let b = fit(model, &ex, None, None, Role::Student, &cfg, &w, None, None).unwrap();
    assert_eq!(a.model, b.model);
    for (x, y) in a.report.epochs.iter().zip(&b.report.epochs) {
        assert_eq!(x.total, y.total);
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let ex = common::random_examples(8, 1, 3);
    let model = Model::init(common::tiny_config(1), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = fit(model.clone(), &ex, None, None, Role::Teacher, &quick(0, 0), &LossWeights::default(), Some(dir.path()), None)
        .unwrap();
    assert_eq!(out.model, model);
    assert_eq!(load_checkpoint(dir.path()).unwrap(), model);
}

#[test]
fn report_bookkeeping_and_learning_rates() {
    let ex = common::random_examples(24, 3, 4);
    let val = common::random_examples(12, 3, 5);
    let model = Model::init(common::tiny_config(3), 2).unwrap();
    let targets = teacher_targets(24, 16, 6);
    let cfg = quick(4, 1);
    let out = fit(model, &ex, Some(&val), Some(&targets), Role::Student, &cfg, &LossWeights::default(), None, None).unwrap();
    let r = &out.report;
    assert_eq!(r.epochs.len(), 4);
    for e in &r.epochs {
        assert!((e.total - e.terms.weighted_total(&r.weights)).abs() < 1e-6);
        assert_eq!(e.lr_backbone, cosine_lr(e.epoch, 4, cfg.lr_backbone, cfg.floor_fraction));
        assert_eq!(e.lr_heads, cosine_lr(e.epoch, 4, cfg.lr_heads, cfg.floor_fraction));
        assert!((e.lr_heads / e.lr_backbone - 10.0).abs() < 1e-9);
        assert_eq!(e.backbone_frozen, e.epoch < 1);
        assert!(e.val_macro_auroc.is_some());
    }
    let best = r.best_epoch.unwrap();
    assert_eq!(r.best_val_macro_auroc, r.epochs[best].val_macro_auroc);
    let text = r.to_jsonl().unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["kind"], "epoch");
    assert_eq!(lines[4]["kind"], "summary");
}

#[test]
fn teacher_loss_decreases_on_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = DatasetSpec::new(24, 3, vec![0.0], 8);
    spec.resolution = 16;
    let m = common::build(dir.path(), &spec);
    let out = train_role(&TrainRequest {
        manifest: &m,
        subjects: None,
        role: Role::Teacher,
        teacher: None,
        model: common::tiny_config(1),
        train: quick(6, 1),
        weights: LossWeights::default(),
        out_dir: None,
        config_hash: None,
    })
    .unwrap();
    let e = &out.report.epochs;
    assert!(e.last().unwrap().total <= e[0].total, "{} > {}", e.last().unwrap().total, e[0].total);
}

#[test]
fn compose_loss_is_the_weighted_sum_of_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let b = rng.gen_range(1..4);
        let d = rng.gen_range(1..6);
        let mut out = || ModelOutput {
            pspi_logits: common::random_tensor(&[b, 17], 5.0, &mut rng),
            au_pred: common::random_tensor(&[b, NUM_AUS], 5.0, &mut rng),
            cls_feature: common::random_tensor(&[b, d], 2.0, &mut rng),
            patch_features: Tensor::zeros(vec![b, 1, d]),
            attention_maps: Tensor::full(vec![b, NUM_AUS, 1], 1.0),
        };
        let (s, t) = (out(), out());
        let w = LossWeights {
            pspi: rng.gen_range(0.0..2.0),
            au: rng.gen_range(0.0..2.0),
            pspi_distill: rng.gen_range(0.0..2.0),
            au_distill: rng.gen_range(0.0..2.0),
            feature_distill: rng.gen_range(0.0..2.0),
            temperature: rng.gen_range(0.5..8.0),
        };
        let pspi: Vec<usize> = (0..b).map(|_| rng.gen_range(0..17)).collect();
        let au = common::random_tensor(&[b, NUM_AUS], 5.0, &mut rng);
        let (total, terms) = compose_loss_values(&s, Some(&t), &pspi, &au, &w).unwrap();
        assert!((total - terms.weighted_total(&w)).abs() < 1e-6);
    }
}

#[test]
fn pairing_follows_identity_and_expression() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = DatasetSpec::new(1, 1, vec![-30.0, 0.0, 30.0], 2);
    spec.resolution = 16;
    let m = common::build(dir.path(), &spec);
    let pairs = pair_modalities(&m).unwrap();
    let rigged: Vec<&Pair> = pairs.iter().filter(|p| p.expression_id > 0).collect();
    assert_eq!(rigged.len(), 3);
    assert!(rigged.iter().all(|p| p.heatmap_path == rigged[0].heatmap_path && p.heatmap_path.is_some()));
    assert!(pairs.iter().filter(|p| p.expression_id == 0).all(|p| p.heatmap_path.is_none()));

    let hm = load_heatmaps(&m, &pairs, false).unwrap();
    let per = 16 * 16;
    for (i, p) in pairs.iter().enumerate() {
        let img = &hm.images.data()[i * per..(i + 1) * per];
        if p.expression_id == 0 {
            assert!(img.iter().all(|&v| v == 0.0));
        }
    }

    let mut broken = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
    let row = broken.rows.iter().position(|r| r.expression_id > 0).unwrap();
    broken.rows[row].heatmap_path = None;
    match pair_modalities(&broken) {
        Err(Error::Data(msg)) => assert!(msg.contains(&format!("row {}", row + 1)), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
    // a teacher cannot train without heatmaps
    for r in &mut broken.rows {
        r.heatmap_path = None;
    }
    broken.rows.retain(|r| r.expression_id == 0);
    let err = train_role(&TrainRequest {
        manifest: &broken,
        subjects: None,
        role: Role::Teacher,
        teacher: None,
        model: common::tiny_config(1),
        train: quick(1, 0),
        weights: LossWeights::default(),
        out_dir: None,
        config_hash: None,
    });
    assert!(matches!(err, Err(Error::Data(_))), "{:?}", err.err());
}

#[test]
fn teacher_width_must_match_student() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = DatasetSpec::new(4, 1, vec![0.0], 2);
    spec.resolution = 16;
    let m = common::build(dir.path(), &spec);
    let mut wide = common::tiny_config(1);
    wide.hidden_dim = 32;
    wide.num_heads = 4;
    let teacher = Model::init(wide, 1).unwrap();
    let err = train_role(&TrainRequest {
        manifest: &m,
        subjects: None,
        role: Role::Student,
        teacher: Some(&teacher),
        model: common::tiny_config(3),
        train: quick(1, 0),
        weights: LossWeights::default(),
        out_dir: None,
        config_hash: None,
    });
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let data = tempfile::tempdir().unwrap();
    let mut spec = DatasetSpec::new(10, 2, vec![0.0], 6);
    spec.resolution = 16;
    let m = common::build(data.path(), &spec);
    let run = |dir: &std::path::Path| {
        let t = train_role(&TrainRequest {
            manifest: &m,
            subjects: None,
            role: Role::Teacher,
            teacher: None,
            model: common::tiny_config(1),
            train: quick(2, 1),
            weights: LossWeights::default(),
            out_dir: Some(&dir.join("teacher")),
            config_hash: None,
        })
        .unwrap();
        train_role(&TrainRequest {
            manifest: &m,
            subjects: None,
            role: Role::Student,
            teacher: Some(&t.model),
            model: common::tiny_config(3),
            train: quick(2, 1),
            weights: LossWeights::default(),
            out_dir: Some(&dir.join("student")),
            config_hash: None,
        })
        .unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    for sub in ["teacher", "student"] {
        let model_a = load_checkpoint(&a.path().join(sub)).unwrap();
        for p in &model_a.params {
            let rel = format!("{sub}/params/{}.p3dt", p.name);
            assert_eq!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap(), "{rel}");
        }
        for f in ["index.json", "config.json", "subjects.json"] {
            let rel = format!("{sub}/{f}");
            assert_eq!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap());
        }
    }
    // a saved checkpoint reloads to the same parameters
    let m1 = load_checkpoint(&a.path().join("student")).unwrap();
    let c = tempfile::tempdir().unwrap();
    save_checkpoint(&m1, c.path()).unwrap();
    assert_eq!(load_checkpoint(c.path()).unwrap(), m1);
}
