//! Stage runners shared by the CLI commands, and the end-to-end pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::eval::{evaluate_model, EvalProtocol, EvalReport};
use crate::ledger::{RunLedger, StageRecord};
use crate::metrics::holdout_split;
use crate::model::{load_checkpoint, CHECKPOINT_CONFIG, CHECKPOINT_INDEX};
use crate::synth::dataset::sha256_hex;
use crate::synth::{build_dataset, BuildSummary, DatasetSpec, Manifest};
use crate::tensor_file::write_atomic;
use crate::train::{train_role, Role, TrainOutcome, TrainRequest, SUBJECTS_FILE, TRAIN_REPORT_FILE};
use crate::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const EVAL_FILE: &str = "eval.json";
pub const SPLIT_FILE: &str = "split.json";
pub const RUN_CONFIG_FILE: &str = "run.conf";

/// What every stage stamps into the ledger.
pub struct StageContext {
    pub ledger: RunLedger,
    pub config_hash: String,
    pub seed: u64,
    pub overrides: Vec<String>,
}

impl StageContext {
    fn record(&self, stage: &str, manifest: Option<String>, outputs: Vec<PathBuf>, start: Instant) -> Result<()> {
        self.ledger.append(&StageRecord {
            stage: stage.into(),
            config_hash: self.config_hash.clone(),
            input_manifest_hash: manifest,
            outputs,
            wall_seconds: start.elapsed().as_secs_f64(),
            seed: self.seed,
            overrides: self.overrides.clone(),
        })
    }
}

pub fn run_generate(spec: &DatasetSpec, out: &Path, resume: bool, ctx: &StageContext) -> Result<BuildSummary> {
    let start = Instant::now();
    let summary = build_dataset(spec, out, resume)?;
    ctx.record(
        "generate",
        None,
        vec![summary.manifest_path.clone(), out.join(crate::synth::DATASET_META_FILE)],
        start,
    )?;
    Ok(summary)
}

pub struct TrainStage<'a> {
    pub manifest: &'a Path,
    pub role: Role,
    pub teacher: Option<&'a Path>,
    /// Subjects available for training and validation; `None` uses all.
    pub subjects: Option<&'a [usize]>,
    pub out: &'a Path,
}

pub fn run_train(stage: &TrainStage<'_>, cfg: &RunConfig, ctx: &StageContext) -> Result<TrainOutcome> {
    let start = Instant::now();
    match (stage.role, stage.teacher) {
        (Role::Teacher, Some(_)) | (Role::Baseline, Some(_)) => {
            return Err(Error::Config(format!("the {:?} role does not take a teacher", stage.role)))
        }
        _ => {}
    }
    let manifest = Manifest::load(stage.manifest)?;
    let teacher = stage.teacher.map(load_checkpoint).transpose()?;
    let outcome = train_role(&TrainRequest {
        manifest: &manifest,
        subjects: stage.subjects,
        role: stage.role,
        teacher: teacher.as_ref(),
        model: cfg.model_for(stage.role.channels()),
        train: cfg.train.clone(),
        weights: cfg.loss,
        out_dir: Some(stage.out),
        config_hash: Some(ctx.config_hash.clone()),
    })?;
    let outputs = [CHECKPOINT_INDEX, CHECKPOINT_CONFIG, "params", TRAIN_REPORT_FILE, SUBJECTS_FILE]
        .iter()
        .map(|f| stage.out.join(f))
        .collect();
    let name = format!("train-{}", role_name(stage.role, stage.teacher.is_some()));
    ctx.record(&name, Some(manifest.sha256.clone()), outputs, start)?;
    Ok(outcome)
}

pub fn run_evaluate(
    checkpoint: &Path,
    manifest: &Path,
    protocol: EvalProtocol,
    thresholds: &[usize],
    report_path: &Path,
    ctx: &StageContext,
) -> Result<EvalReport> {
    let start = Instant::now();
    let manifest = Manifest::load(manifest)?;
    let report = evaluate_model(checkpoint, &manifest, protocol, thresholds)?;
    write_atomic(report_path, &serde_json::to_vec_pretty(&report)?)?;
    ctx.record("evaluate", Some(manifest.sha256.clone()), vec![report_path.to_path_buf()], start)?;
    Ok(report)
}

/// Stage and directory name for a role.
pub fn role_name(role: Role, distilled: bool) -> &'static str {
    match (role, distilled) {
        (Role::Teacher, _) => "teacher",
        (Role::Baseline, _) => "baseline",
        (Role::Student, false) => "au-query",
        (Role::Student, true) => "distilled",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub checkpoint: PathBuf,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub manifest_sha256: String,
    pub test_subjects: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Serialize, Deserialize)]
struct Split {
    train: Vec<usize>,
    test: Vec<usize>,
}

impl PipelineReport {
    /// SHA-256 of the serialized report.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec_pretty(self)?))
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let thresholds = self.rows.first().map(|r| r.eval.thresholds.clone()).unwrap_or_default();
        let _ = write!(s, "{:<20} {:>9} {:>8} {:>8} {:>8}", "model", "macroAUC", "acc", "acc±1", "acc±2");
        for t in &thresholds {
            let _ = write!(s, " {:>8} {:>8}", format!("AUC@{t}"), format!("F1@{t}"));
        }
        s.push('\n');
        for r in &self.rows {
            let a = &r.eval.aggregate;
            let _ = write!(
                s,
                "{:<20} {:>9} {:>8.4} {:>8.4} {:>8.4}",
                r.name,
                a.macro_auroc.map_or_else(|| "n/a".into(), |v| format!("{v:.4}")),
                a.accuracy,
                a.accuracy_pm1,
                a.accuracy_pm2
            );
            for b in &a.binary {
                let auc = b.auroc.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"));
                let _ = write!(s, " {auc:>8} {:>8.4}", b.f1_at_0_5);
            }
            s.push('\n');
        }
        s
    }
}

/// generate, hold out test identities, train teacher, baseline, AU-query and
/// distilled students, then evaluate all four on the test identities.
/// `progress` receives one line per finished stage.
pub fn run_pipeline(cfg: &RunConfig, resume: bool, progress: &mut dyn FnMut(&str)) -> Result<PipelineReport> {
    cfg.validate()?;
    let out = &cfg.out;
    let ctx = StageContext {
        ledger: RunLedger::in_dir(out),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        overrides: Vec::new(),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(RUN_CONFIG_FILE), cfg.to_flat().as_bytes())?;
    let data_dir = out.join("data");
    let summary = run_generate(&cfg.dataset, &data_dir, resume, &ctx).map_err(|e| e.in_stage("generate"))?;
    progress(&format!(
        "generate: {} frames, {} heatmaps ({} identities rendered)",
        summary.frames, summary.heatmaps, summary.generated
    ));
    let manifest = Manifest::load(&summary.manifest_path).map_err(|e| e.in_stage("generate"))?;
    let (trainval, test) = holdout_split(&manifest.subjects(), cfg.test_fraction, cfg.seed)?;
    write_atomic(
        &out.join(SPLIT_FILE),
        &serde_json::to_vec_pretty(&Split {
            train: trainval.clone(),
            test: test.clone(),
        })?,
    )?;

    let stages: [(&str, Role, Option<&str>); 4] = [
        ("Teacher", Role::Teacher, None),
        ("Baseline", Role::Baseline, None),
        ("+AU-Query", Role::Student, None),
        ("+AU-Query+Heatmap", Role::Student, Some("teacher")),
    ];
    let mut evals = Vec::new();
    for (label, role, teacher) in stages {
        let name = role_name(role, teacher.is_some());
        let ckpt = out.join(name);
        let teacher_dir = teacher.map(|t| out.join(t));
        let outcome = run_train(
            &TrainStage {
                manifest: &summary.manifest_path,
                role,
                teacher: teacher_dir.as_deref(),
                subjects: Some(&trainval),
                out: &ckpt,
            },
            cfg,
            &ctx,
        )
        .map_err(|e| e.in_stage(&format!("train-{name}")))?;
        let eval = run_evaluate(
            &ckpt,
            &summary.manifest_path,
            EvalProtocol::Holdout,
            &cfg.thresholds,
            &ckpt.join(EVAL_FILE),
            &ctx,
        )
        .map_err(|e| e.in_stage(&format!("evaluate-{name}")))?;
        progress(&format!(
            "train-{name}: best validation macro AUROC {}, test macro AUROC {}",
            outcome.report.best_val_macro_auroc.map_or_else(|| "n/a".into(), |v| format!("{v:.4}")),
            eval.aggregate.macro_auroc.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
        ));
        evals.push((label, ckpt, eval));
    }
    // table order: the three students, then the teacher
    evals.rotate_left(1);
    let report = PipelineReport {
        config_hash: ctx.config_hash.clone(),
        manifest_sha256: manifest.sha256.clone(),
        test_subjects: test,
        rows: evals
            .into_iter()
            .map(|(name, checkpoint, eval)| ComparisonRow {
                name: name.into(),
                checkpoint: checkpoint.strip_prefix(out).map(Path::to_path_buf).unwrap_or(checkpoint),
                eval,
            })
            .collect(),
    };
    let start = Instant::now();
    let path = out.join(REPORT_FILE);
    write_atomic(&path, &serde_json::to_vec_pretty(&report)?)?;
    ctx.record("report", Some(manifest.sha256), vec![path], start)?;
    Ok(report)
}
