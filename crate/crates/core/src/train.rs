//! Loss composition, modality pairing and the teacher/student training loops.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{holdout_split, macro_auroc};
use crate::model::{save_checkpoint, softmax_rows, ForwardVars, Group, Model, ModelConfig, ModelOutput, Mode};
use crate::synth::{AuVector, Manifest, NUM_AUS};
use crate::tensor::{adamw_step, cosine_lr, mix_seed, AdamWConfig, Moments, Tape, Tensor, Var};
use crate::tensor_file::{write_atomic, TensorFile};
use crate::{Error, Result};

pub const TRAIN_REPORT_FILE: &str = "train_report.jsonl";
pub const SUBJECTS_FILE: &str = "subjects.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pspi: f64,
    pub au: f64,
    pub pspi_distill: f64,
    pub au_distill: f64,
    pub feature_distill: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pspi: 1.0,
            au: 1.0,
            pspi_distill: 0.1,
            au_distill: 0.3,
            feature_distill: 0.5,
            temperature: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.pspi, self.au, self.pspi_distill, self.au_distill, self.feature_distill];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {ws:?}")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.pspi, self.au, self.pspi_distill, self.au_distill, self.feature_distill]
    }
}

/// The five loss terms, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pspi_ce: f64,
    pub au_mse: f64,
    pub pspi_distill: f64,
    pub au_distill: f64,
    pub feature_distill: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 5] {
        [self.pspi_ce, self.au_mse, self.pspi_distill, self.au_distill, self.feature_distill]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.as_array().iter().zip(w.as_array()).map(|(t, w)| t * w).sum()
    }

    fn scaled_add(&mut self, other: &LossTerms, s: f64) {
        self.pspi_ce += s * other.pspi_ce;
        self.au_mse += s * other.au_mse;
        self.pspi_distill += s * other.pspi_distill;
        self.au_distill += s * other.au_distill;
        self.feature_distill += s * other.feature_distill;
    }
}

/// Teacher outputs recorded on a tape as constants.
#[derive(Clone, Copy, Debug)]
pub struct TeacherVars {
    pub pspi_logits: Var,
    pub au_pred: Var,
    pub cls_feature: Var,
}

/// Weighted sum of the supervised and distillation terms. Teacher inputs
/// must be constants; terms with zero weight are reported but do not enter
/// the returned loss node.
pub fn compose_loss(
    tape: &mut Tape,
    student: &ForwardVars,
    teacher: Option<TeacherVars>,
    pspi: &[usize],
    au: Var,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    w.validate()?;
    let b = tape.shape(student.pspi_logits)[0];
    if pspi.len() != b || tape.shape(au) != tape.shape(student.au_pred) {
        return Err(Error::Dimension(format!(
            "labels ({} PSPI, AU {:?}) do not match a batch of {b} with AU {:?}",
            pspi.len(),
            tape.shape(au),
            tape.shape(student.au_pred)
        )));
    }
    let ce = tape.cross_entropy(student.pspi_logits, pspi)?;
    let au_mse = tape.mse(student.au_pred, au)?;
    let mut parts = vec![(w.pspi, ce), (w.au, au_mse)];
    let mut terms = LossTerms {
        pspi_ce: tape.value(ce).item(),
        au_mse: tape.value(au_mse).item(),
        ..Default::default()
    };
    if let Some(t) = teacher {
        if tape.requires_grad(t.pspi_logits) || tape.requires_grad(t.au_pred) || tape.requires_grad(t.cls_feature) {
            return Err(Error::Parameter("teacher outputs must be detached".into()));
        }
        if tape.shape(t.cls_feature) != tape.shape(student.cls_feature) {
            return Err(Error::Config(format!(
                "teacher feature {:?} does not match student feature {:?}",
                tape.shape(t.cls_feature),
                tape.shape(student.cls_feature)
            )));
        }
        let kl = tape.kl_temperature(t.pspi_logits, student.pspi_logits, w.temperature)?;
        let au_d = tape.mse(student.au_pred, t.au_pred)?;
        let feat = tape.mse(student.cls_feature, t.cls_feature)?;
        terms.pspi_distill = tape.value(kl).item();
        terms.au_distill = tape.value(au_d).item();
        terms.feature_distill = tape.value(feat).item();
        parts.extend([(w.pspi_distill, kl), (w.au_distill, au_d), (w.feature_distill, feat)]);
    }
    let mut total: Option<Var> = None;
    for (weight, term) in parts {
        if weight == 0.0 {
            continue;
        }
        let scaled = tape.scale(term, weight)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.scale(ce, 0.0)?,
    };
    Ok((total, terms))
}

/// [`compose_loss`] on plain output tensors; returns `(total, terms)`.
pub fn compose_loss_values(
    student: &ModelOutput,
    teacher: Option<&ModelOutput>,
    pspi: &[usize],
    au: &Tensor,
    w: &LossWeights,
) -> Result<(f64, LossTerms)> {
    let mut tape = Tape::new();
    let mut c = |t: &Tensor| tape.constant(t.clone());
    let s = ForwardVars {
        pspi_logits: c(&student.pspi_logits)?,
        au_pred: c(&student.au_pred)?,
        cls_feature: c(&student.cls_feature)?,
        patch_features: c(&student.patch_features)?,
        attention_maps: c(&student.attention_maps)?,
    };
    let t = match teacher {
        Some(t) => Some(TeacherVars {
            pspi_logits: c(&t.pspi_logits)?,
            au_pred: c(&t.au_pred)?,
            cls_feature: c(&t.cls_feature)?,
        }),
        None => None,
    };
    let au = c(au)?;
    let (total, terms) = compose_loss(&mut tape, &s, t, pspi, au, w)?;
    Ok((tape.value(total).item(), terms))
}

// ---- data -----------------------------------------------------------------

/// A manifest RGB row with the heatmap of the same expression.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub row: usize,
    pub identity_id: usize,
    pub expression_id: usize,
    pub view_id: usize,
    pub subject: usize,
    pub rgb_path: String,
    /// `None` stands for an all-zero heatmap (neutral frames).
    pub heatmap_path: Option<String>,
    pub pspi: u8,
    pub au: AuVector,
}

/// Pairs every frame with its expression's frontal heatmap; neutral frames
/// get a zero heatmap.
pub fn pair_modalities(manifest: &Manifest) -> Result<Vec<Pair>> {
    manifest
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.expression_id > 0 && r.heatmap_path.is_none() {
                return Err(Error::Data(format!(
                    "manifest row {} (identity {}, expression {}, view {}) has no heatmap",
                    i + 1,
                    r.identity_id,
                    r.expression_id,
                    r.view_id
                )));
            }
            Ok(Pair {
                row: i,
                identity_id: r.identity_id,
                expression_id: r.expression_id,
                view_id: r.view_id,
                subject: r.split_subject_id,
                rgb_path: r.rgb_path.clone(),
                heatmap_path: r.heatmap_path.clone(),
                pspi: r.pspi,
                au: r.au,
            })
        })
        .collect()
}

/// Images with PSPI and AU labels, row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Examples {
    /// `[N, H, W, C]`
    pub images: Tensor,
    pub pspi: Vec<usize>,
    pub au: Vec<[f64; NUM_AUS]>,
    pub subjects: Vec<usize>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.pspi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pspi.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn per_image(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// `(images, pspi, au)` for the given rows.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>, Tensor)> {
        let per = self.per_image();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let au: Vec<f64> = idx.iter().flat_map(|&i| self.au[i]).collect();
        Ok((
            Tensor::new(shape, data)?,
            idx.iter().map(|&i| self.pspi[i]).collect(),
            Tensor::new(vec![idx.len(), NUM_AUS], au)?,
        ))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Examples> {
        let (images, pspi, _) = self.gather(idx)?;
        Ok(Examples {
            images,
            pspi,
            au: idx.iter().map(|&i| self.au[i]).collect(),
            subjects: idx.iter().map(|&i| self.subjects[i]).collect(),
        })
    }

    /// Row indices whose subject is in `subjects`.
    pub fn rows_for(&self, subjects: &[usize]) -> Vec<usize> {
        let keep: BTreeSet<usize> = subjects.iter().copied().collect();
        (0..self.len()).filter(|&i| keep.contains(&self.subjects[i])).collect()
    }
}

fn read_image(manifest: &Manifest, rel: &str, channels: usize) -> Result<Tensor> {
    let path = manifest.resolve(rel);
    let t = TensorFile::read(&path)?.to_tensor()?;
    let s = t.shape().to_vec();
    match (s.len(), channels) {
        (3, 3) if s[2] == 3 => Ok(t),
        (2, 1) => t.reshape(vec![s[0], s[1], 1]),
        _ => Err(Error::Format {
            path,
            msg: format!("expected a {channels}-channel image, found shape {s:?}"),
        }),
    }
}

fn stack(images: Vec<Tensor>) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Data("no examples selected".into()))?.shape().to_vec();
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&first);
    let mut data = Vec::with_capacity(images.len() * first.iter().product::<usize>());
    for (i, im) in images.iter().enumerate() {
        if im.shape() != first.as_slice() {
            return Err(Error::Data(format!("image {i} has shape {:?}, expected {first:?}", im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(shape, data)
}

fn labels_of(pairs: &[&Pair]) -> (Vec<usize>, Vec<[f64; NUM_AUS]>, Vec<usize>) {
    (
        pairs.iter().map(|p| p.pspi as usize).collect(),
        pairs.iter().map(|p| *p.au.values()).collect(),
        pairs.iter().map(|p| p.subject).collect(),
    )
}

/// RGB frames for `pairs`.
pub fn load_rgb(manifest: &Manifest, pairs: &[Pair]) -> Result<Examples> {
    let images = pairs.iter().map(|p| read_image(manifest, &p.rgb_path, 3)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Pair> = pairs.iter().collect();
    let (pspi, au, subjects) = labels_of(&refs);
    Ok(Examples {
        images: stack(images)?,
        pspi,
        au,
        subjects,
    })
}

/// Heatmaps for `pairs`, one row per pair (zeros for neutral frames). With
/// `unique`, repeated `(identity, expression)` pairs keep only their first view.
pub fn load_heatmaps(manifest: &Manifest, pairs: &[Pair], unique: bool) -> Result<Examples> {
    let mut seen = BTreeSet::new();
    let chosen: Vec<&Pair> = pairs
        .iter()
        .filter(|p| !unique || seen.insert((p.identity_id, p.expression_id)))
        .collect();
    let template = chosen
        .iter()
        .find_map(|p| p.heatmap_path.as_deref())
        .ok_or_else(|| Error::Data("manifest has no heatmaps; the heatmap branch needs them".into()))?;
    let zero = Tensor::zeros(read_image(manifest, template, 1)?.shape().to_vec());
    let mut cache: HashMap<&str, Tensor> = HashMap::new();
    let mut images = Vec::with_capacity(chosen.len());
    for p in &chosen {
        let img = match p.heatmap_path.as_deref() {
            None => zero.clone(),
            Some(rel) => {
                if !cache.contains_key(rel) {
                    cache.insert(rel, read_image(manifest, rel, 1)?);
                }
                cache[rel].clone()
            }
        };
        images.push(img);
    }
    let (pspi, au, subjects) = labels_of(&chosen);
    Ok(Examples {
        images: stack(images)?,
        pspi,
        au,
        subjects,
    })
}

/// Precomputed eval-mode teacher outputs, row-aligned with the student's examples.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    pub pspi_logits: Tensor,
    pub au_pred: Tensor,
    pub cls_feature: Tensor,
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let w: usize = t.shape()[1..].iter().product();
    let data = idx.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].iter().copied()).collect();
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

impl TeacherTargets {
    pub fn compute(teacher: &Model, heatmaps: &Examples, batch: usize) -> Result<Self> {
        let out = teacher.predict(&heatmaps.images, batch)?;
        Ok(TeacherTargets {
            pspi_logits: out.pspi_logits,
            au_pred: out.au_pred,
            cls_feature: out.cls_feature,
        })
    }

    pub fn len(&self) -> usize {
        self.pspi_logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(TeacherTargets {
            pspi_logits: gather_rows(&self.pspi_logits, idx)?,
            au_pred: gather_rows(&self.au_pred, idx)?,
            cls_feature: gather_rows(&self.cls_feature, idx)?,
        })
    }
}

// ---- training ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Heatmap input, supervised only.
    Teacher,
    /// RGB input, PSPI supervision only; the AU branch is left untrained.
    Baseline,
    /// RGB input with AU supervision, and distillation when a teacher is given.
    Student,
}

impl Role {
    pub fn channels(self) -> usize {
        match self {
            Role::Teacher => 1,
            _ => 3,
        }
    }

    /// The weights actually used by this role.
    pub fn effective_weights(self, w: &LossWeights, distill: bool) -> LossWeights {
        let mut out = *w;
        if self == Role::Baseline {
            out.au = 0.0;
        }
        if !distill || self != Role::Student {
            out.pspi_distill = 0.0;
            out.au_distill = 0.0;
            out.feature_distill = 0.0;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Cosine floor as a fraction of each group's peak rate.
    pub floor_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Fraction of training subjects held out for checkpoint selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            freeze_epochs: 5,
            lr_backbone: 5e-6,
            lr_heads: 5e-5,
            floor_fraction: 0.01,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.freeze_epochs > self.epochs {
            return fail(format!("freeze_epochs {} exceeds epochs {}", self.freeze_epochs, self.epochs));
        }
        if !(self.lr_backbone > 0.0 && self.lr_heads > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.floor_fraction) {
            return fail(format!("floor fraction {} outside [0, 1]", self.floor_fraction));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return fail("betas must lie in [0, 1) and weight decay be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("validation fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// `(backbone, heads)` learning rates for `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        (
            cosine_lr(epoch, self.epochs, self.lr_backbone, self.floor_fraction),
            cosine_lr(epoch, self.epochs, self.lr_heads, self.floor_fraction),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub backbone_frozen: bool,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Sample-weighted means over the epoch.
    pub terms: LossTerms,
    pub total: f64,
    pub val_macro_auroc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub role: Role,
    pub seed: u64,
    pub weights: LossWeights,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_macro_auroc: Option<f64>,
    pub wall_seconds: f64,
    pub manifest_sha256: Option<String>,
    pub config_hash: Option<String>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ReportLine<'a> {
    Epoch(&'a EpochRecord),
    Summary {
        role: Role,
        seed: u64,
        weights: &'a LossWeights,
        train_samples: usize,
        val_samples: usize,
        best_epoch: Option<usize>,
        best_val_macro_auroc: Option<f64>,
        wall_seconds: f64,
        manifest_sha256: &'a Option<String>,
        config_hash: &'a Option<String>,
    },
}

impl TrainReport {
    /// One JSON object per epoch, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&ReportLine::Epoch(e))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&ReportLine::Summary {
            role: self.role,
            seed: self.seed,
            weights: &self.weights,
            train_samples: self.train_samples,
            val_samples: self.val_samples,
            best_epoch: self.best_epoch,
            best_val_macro_auroc: self.best_val_macro_auroc,
            wall_seconds: self.wall_seconds,
            manifest_sha256: &self.manifest_sha256,
            config_hash: &self.config_hash,
        })?);
        out.push('\n');
        Ok(out)
    }
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation macro AUROC (the
    /// last epoch when validation is unavailable).
    pub model: Model,
    pub report: TrainReport,
}

/// Optional hook called after every optimizer step with the model state.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &Model);

/// Core loop shared by all roles.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    mut model: Model,
    train: &Examples,
    val: Option<&Examples>,
    teacher: Option<&TeacherTargets>,
    role: Role,
    cfg: &TrainConfig,
    weights: &LossWeights,
    checkpoint_dir: Option<&Path>,
    mut hook: Option<StepHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    if train.image_shape()[2] != model.config.channels {
        return Err(Error::Config(format!(
            "{} input channels for a {}-channel model",
            train.image_shape()[2],
            model.config.channels
        )));
    }
    if let Some(t) = teacher {
        if t.len() != train.len() {
            return Err(Error::Data(format!("{} teacher rows for {} examples", t.len(), train.len())));
        }
        if t.cls_feature.shape()[1] != model.config.hidden_dim {
            return Err(Error::Config(format!(
                "teacher hidden dim {} differs from student {}",
                t.cls_feature.shape()[1],
                model.config.hidden_dim
            )));
        }
    }
    let w = role.effective_weights(weights, teacher.is_some());
    let start = Instant::now();
    let adam = cfg.adamw();
    let mut moments: Vec<Moments> = model.params.iter().map(|p| Moments::new(p.value.numel())).collect();
    let dropout_seed = mix_seed(&[cfg.seed, 0xD809]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let frozen = epoch < cfg.freeze_epochs;
        let (lr_b, lr_h) = cfg.learning_rates(epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5EED, epoch as u64])));
        let mut sums = LossTerms::default();
        let mut total_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, pspi, au) = train.gather(chunk)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, |g| g == Group::Heads || !frozen)?;
            let out = model.forward_on(&mut tape, &vars, &images, Mode::Train { seed: dropout_seed, step })?;
            let tv = match teacher {
                Some(t) => {
                    let sub = t.subset(chunk)?;
                    Some(TeacherVars {
                        pspi_logits: tape.constant(sub.pspi_logits)?,
                        au_pred: tape.constant(sub.au_pred)?,
                        cls_feature: tape.constant(sub.cls_feature)?,
                    })
                }
                None => None,
            };
            let au = tape.constant(au)?;
            let (loss, terms) = compose_loss(&mut tape, &out, tv, &pspi, au, &w)?;
            tape.backward(loss)?;
            for (i, p) in model.params.iter_mut().enumerate() {
                if let Some(g) = tape.grad(vars[i]) {
                    let lr = match p.group {
                        Group::Backbone => lr_b,
                        Group::Heads => lr_h,
                    };
                    adamw_step(&mut p.value, g, &mut moments[i], lr, &adam)?;
                }
            }
            let n = chunk.len() as f64;
            sums.scaled_add(&terms, n);
            total_sum += n * tape.value(loss).item();
            step += 1;
            if let Some(h) = hook.as_mut() {
                h(epoch, &model);
            }
        }
        let n = train.len() as f64;
        let mut terms = LossTerms::default();
        terms.scaled_add(&sums, 1.0 / n);
        let val_auroc = match val {
            Some(v) if !v.is_empty() => validation_auroc(&model, v, cfg.batch_size)?,
            _ => None,
        };
        if let Some(a) = val_auroc {
            if best.as_ref().map_or(true, |(_, b, _)| a > *b) {
                best = Some((epoch, a, model.clone()));
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(&model, dir)?;
                }
            }
        }
        records.push(EpochRecord {
            epoch,
            backbone_frozen: frozen,
            lr_backbone: lr_b,
            lr_heads: lr_h,
            terms,
            total: total_sum / n,
            val_macro_auroc: val_auroc,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }

    let (best_epoch, best_auroc, final_model) = match best {
        Some((e, a, m)) => (Some(e), Some(a), m),
        None => {
            if let Some(dir) = checkpoint_dir {
                save_checkpoint(&model, dir)?;
            }
            (None, None, model)
        }
    };
    let report = TrainReport {
        role,
        seed: cfg.seed,
        weights: w,
        train_samples: train.len(),
        val_samples: val.map_or(0, Examples::len),
        epochs: records,
        best_epoch,
        best_val_macro_auroc: best_auroc,
        wall_seconds: start.elapsed().as_secs_f64(),
        manifest_sha256: None,
        config_hash: None,
    };
    Ok(TrainOutcome {
        model: final_model,
        report,
    })
}

fn validation_auroc(model: &Model, val: &Examples, batch: usize) -> Result<Option<f64>> {
    let out = model.predict(&val.images, batch)?;
    match macro_auroc(&softmax_rows(&out.pspi_logits), &val.pspi) {
        Ok(m) => Ok(Some(m.value)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Training/validation subjects recorded next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Manifest the subject ids refer to.
    #[serde(default)]
    pub manifest_sha256: Option<String>,
}

impl SubjectSplit {
    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(SUBJECTS_FILE);
        if !p.is_file() {
            return Ok(None);
        }
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_slice(&bytes)?))
    }
}

/// Everything needed to train one role on a manifest.
pub struct TrainRequest<'a> {
    pub manifest: &'a Manifest,
    /// Subjects available for training and validation; `None` uses all.
    pub subjects: Option<&'a [usize]>,
    pub role: Role,
    pub teacher: Option<&'a Model>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    /// Checkpoint directory; also receives the report and subject split.
    pub out_dir: Option<&'a Path>,
    pub config_hash: Option<String>,
}

/// Loads the right modality, splits off validation subjects, precomputes
/// teacher targets, and runs [`fit`].
pub fn train_role(req: &TrainRequest<'_>) -> Result<TrainOutcome> {
    req.train.validate()?;
    if req.role == Role::Teacher && req.teacher.is_some() {
        return Err(Error::Config("the teacher role does not take a teacher".into()));
    }
    if req.role == Role::Baseline && req.teacher.is_some() {
        return Err(Error::Config("the baseline role does not take a teacher".into()));
    }
    if req.model.channels != req.role.channels() {
        return Err(Error::Config(format!(
            "{:?} role needs {} input channels, config has {}",
            req.role,
            req.role.channels(),
            req.model.channels
        )));
    }
    if let Some(t) = req.teacher {
        if t.config.hidden_dim != req.model.hidden_dim {
            return Err(Error::Config(format!(
                "teacher hidden dim {} differs from student {}",
                t.config.hidden_dim, req.model.hidden_dim
            )));
        }
    }
    let mut pairs = pair_modalities(req.manifest)?;
    if let Some(subjects) = req.subjects {
        let keep: BTreeSet<usize> = subjects.iter().copied().collect();
        pairs.retain(|p| keep.contains(&p.subject));
    }
    if pairs.is_empty() {
        return Err(Error::Data("no manifest rows for the requested subjects".into()));
    }
    let all_subjects: Vec<usize> = pairs.iter().map(|p| p.subject).collect();
    let (train_subjects, val_subjects) = holdout_split(&all_subjects, req.train.val_fraction, req.train.seed)?;

    let examples = match req.role {
        Role::Teacher => load_heatmaps(req.manifest, &pairs, true)?,
        _ => load_rgb(req.manifest, &pairs)?,
    };
    let expected = [req.model.image_size, req.model.image_size, req.model.channels];
    if examples.image_shape() != expected {
        return Err(Error::Config(format!(
            "data images are {:?}, model expects {expected:?}",
            examples.image_shape()
        )));
    }
    let targets = match req.teacher {
        Some(t) => Some(TeacherTargets::compute(t, &load_heatmaps(req.manifest, &pairs, false)?, 64)?),
        None => None,
    };
    let train_rows = examples.rows_for(&train_subjects);
    let val_rows = examples.rows_for(&val_subjects);
    let train = examples.subset(&train_rows)?;
    let val = if val_rows.is_empty() { None } else { Some(examples.subset(&val_rows)?) };
    let targets = targets.map(|t| t.subset(&train_rows)).transpose()?;

    let init = Model::init(req.model.clone(), mix_seed(&[req.train.seed, req.role.channels() as u64]))?;
    if let Some(dir) = req.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let split = SubjectSplit {
            train: train_subjects.clone(),
            val: val_subjects.clone(),
            manifest_sha256: Some(req.manifest.sha256.clone()),
        };
        write_atomic(&dir.join(SUBJECTS_FILE), &serde_json::to_vec_pretty(&split)?)?;
    }
    let mut outcome = fit(
        init,
        &train,
        val.as_ref(),
        targets.as_ref(),
        req.role,
        &req.train,
        &req.weights,
        req.out_dir,
        None,
    )?;
    outcome.report.manifest_sha256 = Some(req.manifest.sha256.clone());
    outcome.report.config_hash = req.config_hash.clone();
    if let Some(dir) = req.out_dir {
        write_atomic(&dir.join(TRAIN_REPORT_FILE), outcome.report.to_jsonl()?.as_bytes())?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::NUM_PSPI_CLASSES;

    fn output(logits: Vec<f64>, au: Vec<f64>, cls: Vec<f64>, b: usize) -> ModelOutput {
        let c = logits.len() / b;
        let d = cls.len() / b;
        ModelOutput {
            pspi_logits: Tensor::new(vec![b, c], logits).unwrap(),
            au_pred: Tensor::new(vec![b, NUM_AUS], au).unwrap(),
            cls_feature: Tensor::new(vec![b, d], cls).unwrap(),
            patch_features: Tensor::zeros(vec![b, 1, d]),
            attention_maps: Tensor::full(vec![b, NUM_AUS, 1], 1.0),
        }
    }

    #[test]
    fn perfect_prediction_without_teacher_is_near_zero() {
        let mut logits = vec![-50.0; NUM_PSPI_CLASSES];
        logits[4] = 50.0;
        let au = vec![1.0, 2.0, 0.0, 0.0, 1.0, 1.0];
        let s = output(logits, au.clone(), vec![0.0; 8], 1);
        let (total, terms) =
            compose_loss_values(&s, None, &[4], &Tensor::new(vec![1, 6], au).unwrap(), &LossWeights::default()).unwrap();
        assert!(total < 1e-30);
        assert_eq!(terms.pspi_distill, 0.0);
    }

    #[test]
    fn identical_teacher_zeroes_distillation() {
        let s = output((0..34).map(|i| (i as f64 * 0.37).sin()).collect(), vec![0.5; 12], vec![0.3; 16], 2);
        let au = Tensor::zeros(vec![2, 6]);
        let (_, terms) = compose_loss_values(&s, Some(&s), &[1, 2], &au, &LossWeights::default()).unwrap();
        assert_eq!(terms.pspi_distill, 0.0);
        assert_eq!(terms.au_distill, 0.0);
        assert_eq!(terms.feature_distill, 0.0);
    }

    #[test]
    fn weighted_total_arithmetic() {
        let terms = LossTerms {
            pspi_ce: 2.0,
            au_mse: 0.5,
            pspi_distill: 0.1,
            au_distill: 0.2,
            feature_distill: 0.4,
        };
        assert!((terms.weighted_total(&LossWeights::default()) - 2.77).abs() < 1e-12);
    }

    #[test]
    fn label_shape_mismatch() {
        let s = output(vec![0.0; 17], vec![0.0; 6], vec![0.0; 4], 1);
        let au = Tensor::zeros(vec![2, 6]);
        assert!(matches!(
            compose_loss_values(&s, None, &[0], &au, &LossWeights::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.freeze_epochs = 200;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TrainConfig::default();
        for e in 0..c.epochs {
            let (b, h) = c.learning_rates(e);
            assert!((h / b - 10.0).abs() < 1e-9);
            assert_eq!(b, cosine_lr(e, c.epochs, c.lr_backbone, c.floor_fraction));
        }
    }

    #[test]
    fn role_weights() {
        let w = LossWeights::default();
        let b = Role::Baseline.effective_weights(&w, true);
        assert_eq!((b.au, b.pspi_distill, b.feature_distill), (0.0, 0.0, 0.0));
        let s = Role::Student.effective_weights(&w, true);
        assert_eq!(s, w);
        let s = Role::Student.effective_weights(&w, false);
        assert_eq!(s.au_distill, 0.0);
        assert_eq!(s.au, 1.0);
    }
}
