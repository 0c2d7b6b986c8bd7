use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use painforge::config::RunConfig;
use painforge::eval::EvalProtocol;
use painforge::ledger::RunLedger;
use painforge::metrics::holdout_split;
use painforge::pipeline::{run_evaluate, run_generate, run_pipeline, run_train, role_name, StageContext, TrainStage, EVAL_FILE, REPORT_FILE};
use painforge::synth::{marginals, AgeGroup, DemographicProfile, Ethnicity, Gender, Manifest};
use painforge::train::Role;
use painforge::{Error, Result};

#[derive(Parser)]
#[command(name = "painforge", version, about = "Synthetic pain-expression data and teacher/student ViT training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural dataset and write its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (default: `<out>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep identities already rendered by an identical earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Manifest produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint; enables distillation for the student role.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Checkpoint directory (default: `<out>/<role>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Subject-grouped folds over the manifest.
        #[arg(long, conflicts_with = "holdout")]
        folds: Option<usize>,
        /// Evaluate on subjects the checkpoint never saw (the default).
        #[arg(long)]
        holdout: bool,
        /// PSPI thresholds for the binary metrics.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<usize>>,
        /// Report path (default: `<ckpt>/eval.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// generate, train all four models, evaluate, compare.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
    Baseline,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Teacher => Role::Teacher,
            RoleArg::Student => Role::Student,
            RoleArg::Baseline => Role::Baseline,
        }
    }
}

/// Loads the config and applies command-line overrides, recording each one.
fn load_config(common: &Common, out: Option<&Path>) -> Result<(RunConfig, Vec<String>)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        overrides.push(format!("seed = {seed}"));
    }
    if let Some(out) = out {
        overrides.push(format!("out = {}", out.display()));
    }
    cfg.sync();
    cfg.validate()?;
    Ok((cfg, overrides))
}

fn context(cfg: &RunConfig, ledger_dir: &Path, overrides: Vec<String>) -> StageContext {
    StageContext {
        ledger: RunLedger::in_dir(ledger_dir),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        overrides,
    }
}

fn demographic_summary(profiles: &[DemographicProfile]) -> String {
    let m = marginals(profiles);
    let n = profiles.len().max(1) as f64;
    let mut s = String::new();
    let mut section = |title: &str, rows: Vec<(&str, usize)>| {
        s.push_str(&format!("  {title}\n"));
        for (label, count) in rows {
            s.push_str(&format!("    {label:<16} {count:>6}  {:>5.1}%\n", 100.0 * count as f64 / n));
        }
    };
    section("Age", AgeGroup::ALL.iter().map(|a| a.label()).zip(m.age).collect());
    section("Gender", Gender::ALL.iter().map(|g| g.label()).zip(m.gender).collect());
    section("Ethnicity", Ethnicity::ALL.iter().map(|e| e.label()).zip(m.ethnicity).collect());
    s
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out, resume } => {
            let (cfg, overrides) = load_config(&common, out.as_deref())?;
            let dir = out.unwrap_or_else(|| cfg.out.join("data"));
            let ctx = context(&cfg, &cfg.out, overrides);
            let summary = run_generate(&cfg.dataset, &dir, resume, &ctx)?;
            println!("manifest: {}", summary.manifest_path.display());
            println!("frames: {}  heatmaps: {}  identities rendered now: {}", summary.frames, summary.heatmaps, summary.generated);
            println!("identities: {}", summary.profiles.len());
            print!("{}", demographic_summary(&summary.profiles));
        }
        Command::Train { common, role, data, teacher, out } => {
            let role = Role::from(role);
            if teacher.is_some() && role != Role::Student {
                return Err(Error::Config("--teacher is only accepted with --role student".into()));
            }
            let (cfg, overrides) = load_config(&common, out.as_deref())?;
            let name = role_name(role, teacher.is_some());
            let dir = out.unwrap_or_else(|| cfg.out.join(name));
            let ctx = context(&cfg, &cfg.out, overrides);
            // the same identities the pipeline would keep out for testing
            let manifest = Manifest::load(&data)?;
            let (trainval, _) = holdout_split(&manifest.subjects(), cfg.test_fraction, cfg.seed)?;
            let outcome = run_train(
                &TrainStage {
                    manifest: &data,
                    role,
                    teacher: teacher.as_deref(),
                    subjects: Some(&trainval),
                    out: &dir,
                },
                &cfg,
                &ctx,
            )?;
            for e in &outcome.report.epochs {
                println!(
                    "epoch {:>3}  loss {:.4}  val macro AUROC {}{}",
                    e.epoch,
                    e.total,
                    e.val_macro_auroc.map_or_else(|| "n/a".into(), |v| format!("{v:.4}")),
                    if e.backbone_frozen { "  (backbone frozen)" } else { "" }
                );
            }
            println!("checkpoint: {}", dir.display());
        }
        Command::Evaluate { common, ckpt, data, folds, holdout: _, thresholds, out } => {
            let (cfg, overrides) = load_config(&common, out.as_deref())?;
            let protocol = match folds {
                Some(k) => EvalProtocol::Folds { k, seed: cfg.seed },
                None => EvalProtocol::Holdout,
            };
            let thresholds = thresholds.unwrap_or_else(|| cfg.thresholds.clone());
            let path = out.unwrap_or_else(|| ckpt.join(EVAL_FILE));
            let ctx = context(&cfg, &cfg.out, overrides);
            let report = run_evaluate(&ckpt, &data, protocol, &thresholds, &path, &ctx)?;
            print!("{}", report.table());
            println!("report: {}", path.display());
        }
        Command::Pipeline { common, out, resume } => {
            let (mut cfg, _) = load_config(&common, out.as_deref())?;
            if let Some(out) = out {
                cfg.out = out;
            }
            let report = run_pipeline(&cfg, resume, &mut |line| println!("{line}"))?;
            print!("{}", report.table());
            println!("report: {} (sha256 {})", cfg.out.join(REPORT_FILE).display(), report.hash()?);
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("PAINFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("PAINFORGE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("painforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
