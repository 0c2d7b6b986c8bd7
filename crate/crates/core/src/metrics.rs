//! Ranking, accuracy and F1 metrics, subject-grouped splits, and model evaluation reports.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::mix_seed;
use crate::{Error, Result};

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from average ranks (Mann-Whitney U).
pub fn binary_auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative labels".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("AUROC scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps tied (half-integer) ranks exact
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled
        let twice_avg = (i + 1 + j + 1) as u64;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_avg * tied_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    // 2U = 2R - p(p+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAuroc {
    pub value: f64,
    /// One-vs-rest AUROC per class; `None` where the class is absent (or is every label).
    pub per_class: Vec<Option<f64>>,
}

/// Unweighted mean of one-vs-rest AUROC over the classes that have both
/// positives and negatives in `labels`.
pub fn macro_auroc(probs: &[Vec<f64>], labels: &[usize]) -> Result<MacroAuroc> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if labels.len() < 2 {
        return Err(Error::UndefinedMetric("macro AUROC needs at least two samples".into()));
    }
    let classes = probs[0].len();
    if probs.iter().any(|r| r.len() != classes) {
        return Err(Error::Dimension("ragged probability rows".into()));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Label { label, classes, row });
    }
    let mut per_class = vec![None; classes];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        match binary_auroc(&scores, &bin) {
            Ok(v) => *slot = Some(v),
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has both positives and negatives".into(),
        ));
    }
    Ok(MacroAuroc {
        value: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}

/// Fraction of predictions within `tol` of the label.
pub fn tolerance_accuracy(preds: &[usize], labels: &[usize], tol: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(&p, &l)| p.abs_diff(l) <= tol).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `label >= threshold`.
pub fn binarize_pspi(labels: &[usize], threshold: usize) -> Vec<bool> {
    labels.iter().map(|&l| l >= threshold).collect()
}

/// `2PR / (P + R)`, or 0 when both precision and recall are 0 or undefined.
pub fn f1_binary(preds: &[bool], labels: &[bool]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let tp = preds.iter().zip(labels).filter(|(&p, &l)| p && l).count() as f64;
    let fp = preds.iter().zip(labels).filter(|(&p, &l)| p && !l).count() as f64;
    let fal_neg = preds.iter().zip(labels).filter(|(&p, &l)| !p && l).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fal_neg > 0.0 { tp / (tp + fal_neg) } else { 0.0 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Disjoint groups of subjects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Subjects of every fold except `i`.
    pub fn train_subjects(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Seeded shuffle of the distinct subjects, then `k` contiguous groups whose
/// sizes differ by at most one.
pub fn subject_kfold(subject_ids: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    let mut subjects: Vec<usize> = subject_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if k == 0 || k > subjects.len() {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} subjects",
            subjects.len()
        )));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xF01D])));
    let n = subjects.len();
    let folds = (0..k)
        .map(|i| {
            let (lo, hi) = (i * n / k, (i + 1) * n / k);
            let mut f = subjects[lo..hi].to_vec();
            f.sort_unstable();
            f
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// Splits distinct subjects into `(kept, held_out)` with `round(fraction · n)`
/// held out (at least one when `fraction > 0` and there are two or more subjects).
pub fn holdout_split(subject_ids: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let mut subjects: Vec<usize> = subject_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x401D])));
    let n = subjects.len();
    let mut held = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        held = held.clamp(1, n - 1);
    }
    let mut kept = subjects[held..].to_vec();
    let mut out = subjects[..held].to_vec();
    kept.sort_unstable();
    out.sort_unstable();
    Ok((kept, out))
}

/// Fails with an integrity error if any subject appears in both sets.
pub fn check_disjoint(train: &[usize], test: &[usize]) -> Result<()> {
    let train: BTreeSet<usize> = train.iter().copied().collect();
    let leaked: Vec<usize> = test.iter().copied().filter(|s| train.contains(s)).collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Integrity(format!(
            "subjects {leaked:?} appear in both training and test sets"
        )))
    }
}

/// Per-sample model outputs paired with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub pspi_probs: Vec<Vec<f64>>,
    pub pspi_pred: Vec<usize>,
    pub au_pred: Vec<[f64; 6]>,
    pub true_pspi: Vec<usize>,
    pub true_au: Vec<[f64; 6]>,
    pub subject_id: Vec<usize>,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl PredictionSet {
    pub fn new(
        pspi_probs: Vec<Vec<f64>>,
        au_pred: Vec<[f64; 6]>,
        true_pspi: Vec<usize>,
        true_au: Vec<[f64; 6]>,
        subject_id: Vec<usize>,
    ) -> Result<Self> {
        let n = pspi_probs.len();
        if [au_pred.len(), true_pspi.len(), true_au.len(), subject_id.len()].iter().any(|&m| m != n) {
            return Err(Error::Dimension("prediction set columns differ in length".into()));
        }
        for (i, row) in pspi_probs.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!("row {i}: probabilities do not form a distribution")));
            }
        }
        let pspi_pred = pspi_probs.iter().map(|r| argmax(r)).collect();
        Ok(PredictionSet {
            pspi_probs,
            pspi_pred,
            au_pred,
            true_pspi,
            true_au,
            subject_id,
        })
    }

    pub fn len(&self) -> usize {
        self.true_pspi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_pspi.is_empty()
    }

    /// Rows whose subject is in `subjects`.
    pub fn select_subjects(&self, subjects: &[usize]) -> PredictionSet {
        let keep: BTreeSet<usize> = subjects.iter().copied().collect();
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.subject_id[i])).collect();
        PredictionSet {
            pspi_probs: idx.iter().map(|&i| self.pspi_probs[i].clone()).collect(),
            pspi_pred: idx.iter().map(|&i| self.pspi_pred[i]).collect(),
            au_pred: idx.iter().map(|&i| self.au_pred[i]).collect(),
            true_pspi: idx.iter().map(|&i| self.true_pspi[i]).collect(),
            true_au: idx.iter().map(|&i| self.true_au[i]).collect(),
            subject_id: idx.iter().map(|&i| self.subject_id[i]).collect(),
        }
    }
}

/// Binary pain detection at one PSPI threshold. The score is the predicted
/// probability mass on classes at or above the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub threshold: usize,
    pub positive_rate: f64,
    pub auroc: Option<f64>,
    /// F1 with the score cut at 0.5.
    pub f1_at_0_5: f64,
    /// Best F1 over cut points, with the cut chosen on this same set.
    pub f1_best_on_set: f64,
    pub best_cut: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub samples: usize,
    pub macro_auroc: Option<f64>,
    pub per_class_auroc: Vec<Option<f64>>,
    pub accuracy: f64,
    pub accuracy_pm1: f64,
    pub accuracy_pm2: f64,
    pub au_mse: f64,
    pub binary: Vec<BinaryMetrics>,
}

fn binary_metrics(set: &PredictionSet, threshold: usize) -> Result<BinaryMetrics> {
    let labels = binarize_pspi(&set.true_pspi, threshold);
    let scores: Vec<f64> = set.pspi_probs.iter().map(|r| r.iter().skip(threshold).sum()).collect();
    let auroc = match binary_auroc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let at = |cut: f64| -> Vec<bool> { scores.iter().map(|&s| s >= cut).collect() };
    let f1_half = f1_binary(&at(0.5), &labels)?;
    let mut cuts: Vec<f64> = scores.clone();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let (mut best, mut best_cut) = (f1_half, 0.5);
    for &c in &cuts {
        let f = f1_binary(&at(c), &labels)?;
        if f > best {
            best = f;
            best_cut = c;
        }
    }
    Ok(BinaryMetrics {
        threshold,
        positive_rate: labels.iter().filter(|&&l| l).count() as f64 / labels.len().max(1) as f64,
        auroc,
        f1_at_0_5: f1_half,
        f1_best_on_set: best,
        best_cut,
    })
}

/// Every metric for one set of predictions.
pub fn compute_metrics(set: &PredictionSet, thresholds: &[usize]) -> Result<MetricsBlock> {
    if set.is_empty() {
        return Err(Error::UndefinedMetric("no predictions to evaluate".into()));
    }
    let (macro_auroc, per_class) = match macro_auroc(&set.pspi_probs, &set.true_pspi) {
        Ok(m) => (Some(m.value), m.per_class),
        Err(Error::UndefinedMetric(_)) => (None, vec![None; set.pspi_probs[0].len()]),
        Err(e) => return Err(e),
    };
    let au_mse = set
        .au_pred
        .iter()
        .zip(&set.true_au)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        / (6 * set.len()) as f64;
    Ok(MetricsBlock {
        samples: set.len(),
        macro_auroc,
        per_class_auroc: per_class,
        accuracy: tolerance_accuracy(&set.pspi_pred, &set.true_pspi, 0)?,
        accuracy_pm1: tolerance_accuracy(&set.pspi_pred, &set.true_pspi, 1)?,
        accuracy_pm2: tolerance_accuracy(&set.pspi_pred, &set.true_pspi, 2)?,
        au_mse,
        binary: thresholds.iter().map(|&t| binary_metrics(set, t)).collect::<Result<_>>()?,
    })
}

/// Unweighted means across folds; optional metrics average over the folds where defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub folds: usize,
    pub macro_auroc: Option<f64>,
    pub accuracy: f64,
    pub accuracy_pm1: f64,
    pub accuracy_pm2: f64,
    pub au_mse: f64,
    pub binary: Vec<AggregateBinary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateBinary {
    pub threshold: usize,
    pub auroc: Option<f64>,
    pub f1_at_0_5: f64,
    pub f1_best_on_set: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| mean(vals.into_iter()))
}

pub fn aggregate(blocks: &[MetricsBlock]) -> AggregateMetrics {
    let thresholds: Vec<usize> = blocks.first().map(|b| b.binary.iter().map(|x| x.threshold).collect()).unwrap_or_default();
    AggregateMetrics {
        folds: blocks.len(),
        macro_auroc: mean_defined(blocks.iter().map(|b| b.macro_auroc)),
        accuracy: mean(blocks.iter().map(|b| b.accuracy)),
        accuracy_pm1: mean(blocks.iter().map(|b| b.accuracy_pm1)),
        accuracy_pm2: mean(blocks.iter().map(|b| b.accuracy_pm2)),
        au_mse: mean(blocks.iter().map(|b| b.au_mse)),
        binary: thresholds
            .iter()
            .enumerate()
            .map(|(i, &threshold)| AggregateBinary {
                threshold,
                auroc: mean_defined(blocks.iter().map(|b| b.binary[i].auroc)),
                f1_at_0_5: mean(blocks.iter().map(|b| b.binary[i].f1_at_0_5)),
                f1_best_on_set: mean(blocks.iter().map(|b| b.binary[i].f1_best_on_set)),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let l = [false, false, true, true];
        assert_eq!(binary_auroc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(binary_auroc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 0.0);
        assert_eq!(binary_auroc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(binary_auroc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(binary_auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn macro_examples() {
        let labels = [0, 1, 2, 1];
        let onehot: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..4).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let m = macro_auroc(&onehot, &labels).unwrap();
        assert_eq!(m.value, 1.0);
        assert_eq!(m.per_class[3], None);
        let uniform = vec![vec![0.25; 4]; 4];
        assert_eq!(macro_auroc(&uniform, &labels).unwrap().value, 0.5);
        assert!(matches!(macro_auroc(&uniform[..2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn macro_two_class_hand_case() {
        // class 1 scores [0.3, 0.6, 0.6, 0.9] with labels [0, 1, 0, 1]:
        // pairs (pos, neg): (0.6, 0.3)=1 (0.6, 0.6)=0.5 (0.9, 0.3)=1 (0.9, 0.6)=1 -> 3.5/4
        let probs = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.4, 0.6], vec![0.1, 0.9]];
        let m = macro_auroc(&probs, &[0, 1, 0, 1]).unwrap();
        assert_eq!(m.per_class[1], Some(0.875));
        assert_eq!(m.per_class[0], Some(0.875));
        assert_eq!(m.value, 0.875);
    }

    #[test]
    fn tolerance_examples() {
        let (p, l) = ([3, 0, 10], [4, 0, 16]);
        assert_eq!(tolerance_accuracy(&p, &l, 0).unwrap(), 1.0 / 3.0);
        assert_eq!(tolerance_accuracy(&p, &l, 1).unwrap(), 2.0 / 3.0);
        assert_eq!(tolerance_accuracy(&p, &l, 2).unwrap(), 2.0 / 3.0);
        assert!(tolerance_accuracy(&[], &[], 0).is_err());
    }

    #[test]
    fn binarize_and_f1() {
        assert_eq!(binarize_pspi(&[3, 2, 0, 16], 3), vec![true, false, false, true]);
        let labels = [true, true, true, false, false];
        let preds = [true, true, false, true, false];
        assert!((f1_binary(&preds, &labels).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_binary(&labels, &labels).unwrap(), 1.0);
        assert_eq!(f1_binary(&[false; 5], &labels).unwrap(), 0.0);
    }

    #[test]
    fn kfold_examples() {
        let subjects: Vec<usize> = (0..25).collect();
        let plan = subject_kfold(&subjects, 5, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 5));
        let mut all: Vec<usize> = plan.folds.concat();
        all.sort_unstable();
        assert_eq!(all, subjects);
        assert_eq!(plan, subject_kfold(&subjects, 5, 1).unwrap());
        let loso = subject_kfold(&subjects, 25, 1).unwrap();
        assert!(loso.folds.iter().all(|f| f.len() == 1));
        assert!(matches!(subject_kfold(&subjects, 26, 1), Err(Error::Config(_))));
        for i in 0..5 {
            check_disjoint(&plan.train_subjects(i), &plan.folds[i]).unwrap();
        }
        assert!(matches!(check_disjoint(&[1, 2], &[2, 3]), Err(Error::Integrity(_))));
    }

    #[test]
    fn holdout_is_disjoint() {
        let ids: Vec<usize> = (0..10).flat_map(|s| [s, s]).collect();
        let (kept, held) = holdout_split(&ids, 0.2, 3).unwrap();
        assert_eq!(held.len(), 2);
        assert_eq!(kept.len(), 8);
        check_disjoint(&kept, &held).unwrap();
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let labels: Vec<usize> = (0..40).map(|i| i % 17).collect();
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..17).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let n = labels.len();
        let set = PredictionSet::new(probs, vec![[0.0; 6]; n], labels, vec![[0.0; 6]; n], (0..n).collect()).unwrap();
        let m = compute_metrics(&set, &[2, 3]).unwrap();
        assert_eq!(m.macro_auroc, Some(1.0));
        assert_eq!((m.accuracy, m.accuracy_pm1, m.accuracy_pm2), (1.0, 1.0, 1.0));
        assert_eq!(m.binary.len(), 2);
        assert!(m.binary.iter().all(|b| b.auroc == Some(1.0) && b.f1_at_0_5 == 1.0));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
