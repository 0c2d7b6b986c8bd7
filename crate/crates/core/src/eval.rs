//! Checkpoint evaluation over held-out or fold-grouped subjects.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::{aggregate, check_disjoint, compute_metrics, subject_kfold, AggregateMetrics, MetricsBlock, PredictionSet};
use crate::model::{load_checkpoint, softmax_rows, Model};
use crate::synth::{Manifest, NUM_AUS};
use crate::train::{load_heatmaps, load_rgb, pair_modalities, Examples, SubjectSplit};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvalProtocol {
    /// Every manifest subject not recorded as a training or validation subject.
    Holdout,
    /// Subject-grouped folds over all manifest subjects, one block per fold.
    Folds { k: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldBlock {
    pub fold: usize,
    pub subjects: Vec<usize>,
    pub metrics: MetricsBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modality: String,
    pub manifest_sha256: String,
    pub protocol: EvalProtocol,
    pub thresholds: Vec<usize>,
    pub folds: Vec<FoldBlock>,
    pub aggregate: AggregateMetrics,
}

/// Eval-mode predictions for every example.
pub fn predict_set(model: &Model, examples: &Examples, batch: usize) -> Result<PredictionSet> {
    let out = model.predict(&examples.images, batch)?;
    let au_pred = out
        .au_pred
        .data()
        .chunks(NUM_AUS)
        .map(|c| {
            let mut a = [0.0; NUM_AUS];
            a.copy_from_slice(c);
            a
        })
        .collect();
    PredictionSet::new(
        softmax_rows(&out.pspi_logits),
        au_pred,
        examples.pspi.clone(),
        examples.au.clone(),
        examples.subjects.clone(),
    )
}

/// Loads the modality the model consumes (heatmaps for one channel, RGB for three).
pub fn load_examples_for(model: &Model, manifest: &Manifest) -> Result<Examples> {
    let pairs = pair_modalities(manifest)?;
    let ex = if model.config.channels == 1 {
        load_heatmaps(manifest, &pairs, true)?
    } else {
        load_rgb(manifest, &pairs)?
    };
    let c = &model.config;
    let expected = [c.image_size, c.image_size, c.channels];
    if ex.image_shape() != expected {
        return Err(Error::Config(format!(
            "checkpoint expects {expected:?} images, data has {:?}",
            ex.image_shape()
        )));
    }
    Ok(ex)
}

/// Evaluates an in-memory model; `trained_on` lists subjects it has seen.
/// Those subjects count only when the split refers to this same manifest.
pub fn evaluate_loaded(
    model: &Model,
    manifest: &Manifest,
    trained_on: Option<&SubjectSplit>,
    protocol: EvalProtocol,
    thresholds: &[usize],
) -> Result<EvalReport> {
    if let Some(&t) = thresholds.iter().find(|&&t| t == 0 || t > 16) {
        return Err(Error::Config(format!("PSPI threshold {t} outside 1..=16")));
    }
    let examples = load_examples_for(model, manifest)?;
    let set = predict_set(model, &examples, 64)?;
    let seen = trained_on
        .filter(|s| s.manifest_sha256.as_deref().map_or(true, |h| h == manifest.sha256))
        .map(SubjectSplit::all)
        .unwrap_or_default();
    let groups: Vec<Vec<usize>> = match protocol {
        EvalProtocol::Holdout => {
            let test: Vec<usize> = manifest.subjects().into_iter().filter(|s| seen.binary_search(s).is_err()).collect();
            if test.is_empty() {
                return Err(Error::Data("no held-out subjects left in the manifest".into()));
            }
            vec![test]
        }
        EvalProtocol::Folds { k, seed } => subject_kfold(&manifest.subjects(), k, seed)?.folds,
    };
    let mut folds = Vec::with_capacity(groups.len());
    for (i, subjects) in groups.into_iter().enumerate() {
        check_disjoint(&seen, &subjects)?;
        let metrics = compute_metrics(&set.select_subjects(&subjects), thresholds)?;
        folds.push(FoldBlock {
            fold: i,
            subjects,
            metrics,
        });
    }
    let blocks: Vec<MetricsBlock> = folds.iter().map(|f| f.metrics.clone()).collect();
    Ok(EvalReport {
        modality: if model.config.channels == 1 { "heatmap" } else { "rgb" }.into(),
        manifest_sha256: manifest.sha256.clone(),
        protocol,
        thresholds: thresholds.to_vec(),
        folds,
        aggregate: aggregate(&blocks),
    })
}

/// Loads a checkpoint directory (with its recorded subject split) and evaluates it.
pub fn evaluate_model(
    checkpoint: &Path,
    manifest: &Manifest,
    protocol: EvalProtocol,
    thresholds: &[usize],
) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?;
    let split = SubjectSplit::load(checkpoint)?;
    evaluate_loaded(&model, manifest, split.as_ref(), protocol, thresholds)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

impl EvalReport {
    /// Plain-text table, one line per fold plus the mean.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<6} {:>7} {:>9} {:>8} {:>8} {:>8} {:>8}", "fold", "n", "macroAUC", "acc", "acc±1", "acc±2", "AU-MSE");
        for t in &self.thresholds {
            let _ = write!(s, " {:>8} {:>8}", format!("AUC@{t}"), format!("F1@{t}"));
        }
        s.push('\n');
        let mut line = |name: String, n: usize, m: Option<f64>, acc: [f64; 4], bin: Vec<(Option<f64>, f64)>| {
            let _ = write!(
                s,
                "{name:<6} {n:>7} {:>9} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                opt(m),
                acc[0],
                acc[1],
                acc[2],
                acc[3]
            );
            for (a, f) in bin {
                let _ = write!(s, " {:>8} {:>8.4}", opt(a), f);
            }
            s.push('\n');
        };
        for f in &self.folds {
            let m = &f.metrics;
            line(
                f.fold.to_string(),
                m.samples,
                m.macro_auroc,
                [m.accuracy, m.accuracy_pm1, m.accuracy_pm2, m.au_mse],
                m.binary.iter().map(|b| (b.auroc, b.f1_at_0_5)).collect(),
            );
        }
        let a = &self.aggregate;
        line(
            "mean".into(),
            self.folds.iter().map(|f| f.metrics.samples).sum(),
            a.macro_auroc,
            [a.accuracy, a.accuracy_pm1, a.accuracy_pm2, a.au_mse],
            a.binary.iter().map(|b| (b.auroc, b.f1_at_0_5)).collect(),
        );
        s
    }
}
