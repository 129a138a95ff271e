//! `glomseg` command-line tool.
//!
//! Every failure prints one line `error: <kind>: <message>` to stderr. Exit code 2
//! means the request itself was wrong (usage, configuration, data layout); exit
//! code 1 means the work failed while running.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glomseg::catalog::LayoutSpec;
use glomseg::config::RunConfig;
use glomseg::experiment::{self, AblationAxis, PrepareRequest};
use glomseg::fixture::FixtureSpec;
use glomseg::{DatasetId, Error};

#[derive(Parser, Debug)]
#[command(name = "glomseg", version, about = "Semi-supervised glomeruli segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`; outputs go to `{out}/{run_id}/`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `run_id`.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Any config key, e.g. `--set train.lr=0.01`. Repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a JSON-Lines manifest from an image directory.
    Prepare(PrepareArgs),
    /// Train one model.
    Train {
        /// supervised | fixmatch | unimatch; overrides `train.method`.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate a checkpoint on one or more manifests.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `eval.datasets`.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
    /// Retrain and evaluate across one ablation axis.
    Ablate {
        /// fraction | centers | backbone
        #[arg(long)]
        axis: String,
    },
    /// Write a synthetic dataset and a matching `synthetic.cfg`.
    MakeFixture(FixtureArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Dataset root holding the image (and mask) directories.
    #[arg(long)]
    root: PathBuf,
    /// HUBMAP_KIDNEY | HUBMAP_VASC | KPMP | NURTURE
    #[arg(long)]
    dataset: String,
    /// Regex over file stems with a `wsi` group and optional `center` group.
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long, default_value = "images")]
    image_dir: PathBuf,
    #[arg(long, default_value = "masks")]
    mask_dir: PathBuf,
    /// No masks; builds an unlabeled manifest.
    #[arg(long)]
    unlabeled: bool,
    #[arg(long, default_value = "")]
    mask_suffix: String,
    #[arg(long, default_value_t = 20)]
    magnification: u32,
    /// Assign this many WSI-disjoint folds.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    /// Target directory; defaults to `{out}/{run_id}`.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    labeled: Option<usize>,
    #[arg(long)]
    labeled_wsis: Option<usize>,
    #[arg(long)]
    unlabeled: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    centers: Option<usize>,
    #[arg(long)]
    wsis_per_center: Option<usize>,
    /// Color difference between centers; 0 gives all centers the same stain.
    #[arg(long)]
    stain: Option<f32>,
}

#[derive(Debug)]
struct Failure {
    kind: String,
    message: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::UnknownConfigKey { .. }
            | Error::Layout(_)
            | Error::LayoutMismatch { .. }
            | Error::InvalidArgument(_) => 2,
            _ => 1,
        };
        Failure {
            kind: e.kind().to_string(),
            message: e.to_string(),
            code,
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: "usage".into(),
        message: message.into(),
        code: 2,
    }
}

fn overrides(global: &Global, method: Option<&str>) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    if let Some(s) = global.seed {
        out.push(("seed".to_string(), s.to_string()));
    }
    if let Some(o) = &global.out {
        out.push(("output_dir".to_string(), o.display().to_string()));
    }
    if let Some(r) = &global.run_id {
        out.push(("run_id".to_string(), r.clone()));
    }
    if let Some(m) = method {
        out.push(("train.method".to_string(), m.to_string()));
    }
    for kv in &global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn resolve(global: &Global, method: Option<&str>) -> Result<RunConfig, Failure> {
    let pairs = overrides(global, method)?;
    Ok(RunConfig::resolve(global.config.as_deref(), std::env::vars(), &pairs)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Prepare(a) => {
            let cfg = resolve(g, None)?;
            let dataset: DatasetId = a.dataset.parse()?;
            let defaults = LayoutSpec::default();
            let layout = LayoutSpec {
                image_dir: a.image_dir,
                mask_dir: (!a.unlabeled).then_some(a.mask_dir),
                pattern: a.pattern.unwrap_or(defaults.pattern),
                mask_suffix: a.mask_suffix,
                magnification: a.magnification,
            };
            let prepared = experiment::prepare(
                &cfg,
                &PrepareRequest {
                    root: a.root,
                    dataset,
                    layout,
                    folds: a.folds,
                },
            )?;
            print!("{}", experiment::dataset_summary(&[(dataset, &prepared.manifest)]));
            println!("manifest: {}", prepared.path.display());
        }
        Command::Train { method } => {
            let cfg = resolve(g, method.as_deref())?;
            let run = experiment::run_train(&cfg)?;
            if !run.reports.is_empty() {
                print!("{}", experiment::report_table(&run.reports));
            }
            println!("run: {}", run.run_dir.display());
        }
        Command::Evaluate { checkpoint, manifests } => {
            let cfg = resolve(g, None)?;
            let manifests = if manifests.is_empty() {
                cfg.eval.datasets.clone()
            } else {
                manifests
            };
            if manifests.is_empty() {
                return Err(usage("no manifests: pass --manifest or set eval.datasets"));
            }
            // only an explicitly configured model is checked against the checkpoint
            let model_given = g.config.is_some()
                || g.set.iter().any(|kv| kv.starts_with("model."))
                || std::env::vars().any(|(k, _)| k.starts_with("GLOMSEG_MODEL_"));
            let expected = model_given.then(|| cfg.resolved_model());
            let reports = experiment::run_evaluate(&cfg, &checkpoint, &manifests, expected.as_ref())?;
            print!("{}", experiment::report_table(&reports));
        }
        Command::Ablate { axis } => {
            let cfg = resolve(g, None)?;
            let axis: AblationAxis = axis.parse()?;
            let result = experiment::run_ablation(&cfg, axis)?;
            print!("{}", result.table());
            println!("csv: {}", experiment::ablation_csv_path(&cfg, axis).display());
        }
        Command::MakeFixture(a) => {
            let cfg = resolve(g, None)?;
            let d = FixtureSpec::default();
            let spec = FixtureSpec {
                size: a.size.unwrap_or(d.size),
                labeled: a.labeled.unwrap_or(d.labeled),
                labeled_wsis: a.labeled_wsis.unwrap_or(d.labeled_wsis),
                unlabeled: a.unlabeled.unwrap_or(d.unlabeled),
                test: a.test.unwrap_or(d.test),
                centers: a.centers.unwrap_or(d.centers),
                wsis_per_center: a.wsis_per_center.unwrap_or(d.wsis_per_center),
                stain_strength: a.stain.unwrap_or(d.stain_strength),
                seed: cfg.seed,
            };
            let dir = a.dir.unwrap_or_else(|| cfg.run_dir());
            let (fixture, cfg_path) = experiment::make_fixture(&dir, &spec)?;
            println!(
                "fixture: {} labeled, {} unlabeled, {} test patches under {}",
                fixture.labeled.len(),
                fixture.unlabeled.len(),
                fixture.test.len(),
                dir.display()
            );
            println!("config: {}", cfg_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.kind, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
