//! Run orchestration behind the command-line tool: manifest preparation, training
//! runs, evaluation and the three ablation drivers. Everything a run produces
//! lands under `{output_dir}/{run_id}/`.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::catalog::{
    build_manifest, sample_centers, sample_label_fraction, split_folds, DatasetId, DatasetManifest, LayoutSpec,
    ManifestRole,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{dataset_label, Aggregation, per_image_counts, MetricsReport};
use crate::fixture::{write_fixture, Fixture, FixtureSpec};
use crate::models::{Arch, Checkpoint, ModelConfig, SegModel, Variant};
use crate::ssl::{train, TrainHistory};

pub const SNAPSHOT_FILE: &str = "config.cfg";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path, role: ManifestRole) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::Config(format!("manifest {} does not exist", path.display())));
    }
    DatasetManifest::read_jsonl(path, role)
}

/// Union of several evaluation manifests.
pub fn load_eval_manifests(paths: &[PathBuf]) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(load_manifest(p, ManifestRole::ExternalValidation)?.records);
    }
    Ok(DatasetManifest::new(records, ManifestRole::ExternalValidation))
}

// ---------------------------------------------------------------- prepare

#[derive(Debug, Clone)]
pub struct PrepareRequest {
    pub root: PathBuf,
    pub dataset: DatasetId,
    pub layout: LayoutSpec,
    /// Assign WSI-disjoint cross-validation folds.
    pub folds: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub path: PathBuf,
}

/// Builds and writes `{run_dir}/manifests/{dataset}_{role}.jsonl`.
pub fn prepare(cfg: &RunConfig, req: &PrepareRequest) -> Result<Prepared> {
    let mut manifest = build_manifest(&req.root, req.dataset, &req.layout)?;
    if manifest.is_empty() {
        log::warn!("no images found under {}", req.root.join(&req.layout.image_dir).display());
    } else if let Some(k) = req.folds {
        manifest = split_folds(&manifest, k, cfg.seed)?;
    }
    let dir = cfg.run_dir().join("manifests");
    create_dir(&dir)?;
    let role = match manifest.role {
        ManifestRole::LabeledTrain => "labeled",
        ManifestRole::UnlabeledTrain => "unlabeled",
        ManifestRole::ExternalValidation => "external",
    };
    let path = dir.join(format!("{}_{role}.jsonl", req.dataset.as_str().to_ascii_lowercase()));
    manifest.write_jsonl(&path)?;
    Ok(Prepared { manifest, path })
}

/// Dataset / WSIs / patches table, one row per manifest.
pub fn dataset_summary(rows: &[(DatasetId, &DatasetManifest)]) -> String {
    let mut out = format!("{:<20} {:>6} {:>8}\n", "Dataset", "WSIs", "Patches");
    for (id, m) in rows {
        let _ = writeln!(out, "{:<20} {:>6} {:>8}", id.display_name(), m.wsi_ids().len(), m.len());
    }
    out
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub run_dir: PathBuf,
    pub history: TrainHistory,
    pub checkpoint: Checkpoint,
    pub reports: Vec<MetricsReport>,
}

pub fn method_label(model: &ModelConfig, cfg: &RunConfig) -> String {
    format!("{} {}", model.label(), cfg.train.method.label())
}

fn claim_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    if dir.join(SNAPSHOT_FILE).exists() {
        return Err(Error::Config(format!(
            "run_id `{}` is already used in {}",
            cfg.run_id,
            cfg.output_dir.display()
        )));
    }
    create_dir(&dir)?;
    write_file(&dir.join(SNAPSHOT_FILE), &cfg.snapshot())?;
    Ok(dir)
}

/// Evaluates `model` on every manifest in `paths`, one report each.
pub fn evaluate_manifests(
    model: &SegModel,
    paths: &[PathBuf],
    cfg: &RunConfig,
    method: &str,
) -> Result<Vec<MetricsReport>> {
    paths
        .iter()
        .map(|p| {
            let m = load_manifest(p, ManifestRole::ExternalValidation)?;
            let counts = per_image_counts(model, &m, cfg.eval.batch_size)?;
            Ok(MetricsReport::from_counts(&dataset_label(&m), method, &counts, cfg.eval.aggregation))
        })
        .collect()
}

struct Inputs {
    labeled: DatasetManifest,
    unlabeled: Option<DatasetManifest>,
    validation: Option<DatasetManifest>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let labeled = cfg
        .data
        .labeled
        .as_deref()
        .ok_or_else(|| Error::Config("data.labeled is not set".into()))?;
    let unlabeled = match (&cfg.data.unlabeled, cfg.train.method.is_semi_supervised()) {
        (Some(p), true) => Some(load_manifest(p, ManifestRole::UnlabeledTrain)?),
        (None, true) => {
            return Err(Error::Config(format!(
                "method {} needs data.unlabeled",
                cfg.train.method
            )))
        }
        (_, false) => None,
    };
    Ok(Inputs {
        labeled: load_manifest(labeled, ManifestRole::LabeledTrain)?,
        unlabeled,
        validation: cfg
            .data
            .validation
            .as_deref()
            .map(|p| load_manifest(p, ManifestRole::ExternalValidation))
            .transpose()?,
    })
}

fn build_initial_model(model_cfg: &ModelConfig, cfg: &RunConfig) -> Result<SegModel> {
    let model = SegModel::build(model_cfg, candle_core::DType::F32)?;
    if let Some(w) = &cfg.init_weights {
        let unused = model.load_initial_weights(w)?;
        log::info!("loaded {} ({unused} unused tensors)", w.display());
    }
    Ok(model)
}

/// Trains one model and writes the snapshot, history, checkpoints and, when
/// `eval.datasets` is set, the metrics CSV into the run directory.
pub fn run_train(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let inputs = load_inputs(cfg)?;
    let run_dir = claim_run_dir(cfg)?;
    let model_cfg = cfg.resolved_model();
    let model = build_initial_model(&model_cfg, cfg)?;
    let outcome = train(
        &model,
        &inputs.labeled,
        inputs.unlabeled.as_ref(),
        inputs.validation.as_ref(),
        &cfg.resolved_train(),
        &cfg.augment,
        Some(&run_dir),
    )?;
    outcome.history.write_csv(&run_dir.join(HISTORY_FILE))?;
    let trained = SegModel::from_checkpoint(&outcome.checkpoint)?;
    let reports = evaluate_manifests(&trained, &cfg.eval.datasets, cfg, &method_label(&model_cfg, cfg))?;
    if !reports.is_empty() {
        crate::eval::write_reports_csv(&run_dir.join(METRICS_FILE), &reports)?;
    }
    Ok(TrainRun {
        run_dir,
        history: outcome.history,
        checkpoint: outcome.checkpoint,
        reports,
    })
}

// ---------------------------------------------------------------- evaluate

/// Loads a checkpoint, optionally insisting on an architecture, and evaluates it
/// on each manifest. Writes `{run_dir}/metrics.csv`.
pub fn run_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifests: &[PathBuf],
    expected: Option<&ModelConfig>,
) -> Result<Vec<MetricsReport>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(exp) = expected {
        if (exp.arch, exp.variant) != (ckpt.config.arch, ckpt.config.variant) {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model, the configuration asks for {}",
                checkpoint.display(),
                ckpt.config.label(),
                exp.label()
            )));
        }
    }
    let model = SegModel::from_checkpoint(&ckpt)?;
    let method = ckpt
        .meta
        .get("method")
        .map(|m| format!("{} {m}", ckpt.config.label()))
        .unwrap_or_else(|| ckpt.config.label());
    let reports = evaluate_manifests(&model, manifests, cfg, &method)?;
    let dir = cfg.run_dir();
    create_dir(&dir)?;
    crate::eval::write_reports_csv(&dir.join(METRICS_FILE), &reports)?;
    Ok(reports)
}

/// Dataset / method / P / R / Dice table.
pub fn report_table(reports: &[MetricsReport]) -> String {
    let mut out = format!(
        "{:<24} {:<32} {:>9} {:>6} {:>6}\n",
        "Dataset", "Method", "Precision", "Recall", "Dice"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<24} {:<32} {:>9.2} {:>6.2} {:>6.2}",
            r.dataset, r.method, r.precision, r.recall, r.dice
        );
    }
    out
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationAxis {
    LabelFraction,
    NCenters,
    Backbone,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::LabelFraction => "LABEL_FRACTION",
            AblationAxis::NCenters => "N_CENTERS",
            AblationAxis::Backbone => "BACKBONE",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fraction" | "label_fraction" => Ok(AblationAxis::LabelFraction),
            "centers" | "n_centers" => Ok(AblationAxis::NCenters),
            "backbone" => Ok(AblationAxis::Backbone),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation axis `{s}` (fraction, centers, backbone)"
            ))),
        }
    }
}

/// One trained-and-evaluated setting of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationPoint {
    pub setting: String,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub parameters: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub points: Vec<AblationPoint>,
}

#[derive(Serialize)]
struct AblationRow<'a> {
    axis: AblationAxis,
    setting: &'a str,
    n_labeled: usize,
    n_unlabeled: usize,
    parameters: usize,
    dataset: &'a str,
    method: &'a str,
    precision: f64,
    recall: f64,
    dice: f64,
    n_images: usize,
    n_pixels: u64,
    aggregation: Aggregation,
}

pub fn ablation_csv_path(cfg: &RunConfig, axis: AblationAxis) -> PathBuf {
    cfg.run_dir().join(format!("ablation_{}.csv", axis.to_string().to_ascii_lowercase()))
}

fn check_unique<T: PartialEq + fmt::Display>(settings: &[T]) -> Result<()> {
    if settings.is_empty() {
        return Err(Error::Config("the ablation axis has no settings".into()));
    }
    for (i, s) in settings.iter().enumerate() {
        if settings[..i].contains(s) {
            return Err(Error::Config(format!("ablation setting {s} is listed twice")));
        }
    }
    Ok(())
}

/// Retrains from scratch for every setting of `axis`, in the order listed in the
/// config, and evaluates on the union of `eval.datasets`. Each finished row is
/// flushed to `ablation_{axis}.csv` before the next setting starts.
pub fn run_ablation(cfg: &RunConfig, axis: AblationAxis) -> Result<AblationResult> {
    cfg.validate()?;
    if cfg.eval.datasets.is_empty() {
        return Err(Error::Config("ablation needs eval.datasets".into()));
    }
    let settings: Vec<String> = match axis {
        AblationAxis::LabelFraction => {
            check_unique(&cfg.ablation.fractions)?;
            cfg.ablation.fractions.iter().map(ToString::to_string).collect()
        }
        AblationAxis::NCenters => {
            check_unique(&cfg.ablation.centers)?;
            if !cfg.train.method.is_semi_supervised() {
                return Err(Error::Config("the centers axis needs fixmatch or unimatch".into()));
            }
            cfg.ablation.centers.iter().map(ToString::to_string).collect()
        }
        AblationAxis::Backbone => {
            check_unique(&cfg.ablation.backbones)?;
            cfg.ablation.backbones.iter().map(ToString::to_string).collect()
        }
    };
    let inputs = load_inputs(cfg)?;
    let eval_set = load_eval_manifests(&cfg.eval.datasets)?;
    let run_dir = claim_run_dir(cfg)?;
    let csv_path = ablation_csv_path(cfg, axis);
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut writer = csv::Writer::from_writer(file);

    let mut points = Vec::with_capacity(settings.len());
    for (i, setting) in settings.iter().enumerate() {
        let mut model_cfg = cfg.resolved_model();
        let mut labeled = inputs.labeled.clone();
        let mut unlabeled = inputs.unlabeled.clone();
        match axis {
            AblationAxis::LabelFraction => {
                labeled = sample_label_fraction(&labeled, cfg.ablation.fractions[i], cfg.seed)?;
            }
            AblationAxis::NCenters => {
                let pool = unlabeled.as_ref().expect("checked by load_inputs");
                unlabeled = Some(sample_centers(pool, cfg.ablation.centers[i], cfg.ablation.per_center, cfg.seed)?);
            }
            AblationAxis::Backbone => {
                let variant = cfg.ablation.backbones[i];
                let arch = if variant == Variant::Full { Arch::AttUnet } else { model_cfg.arch };
                let keep = (model_cfg.num_classes, model_cfg.drop_rate_fp);
                model_cfg = ModelConfig {
                    num_classes: keep.0,
                    drop_rate_fp: keep.1,
                    init_seed: cfg.seed,
                    ..ModelConfig::preset(arch, variant)?
                };
            }
        }
        if labeled.is_empty() {
            return Err(Error::Config(format!("setting {setting} leaves no labeled patches")));
        }
        let mut train_cfg = cfg.resolved_train();
        if train_cfg.batch_size_labeled > labeled.len() {
            log::warn!(
                "setting {setting}: batch_size_labeled {} clamped to {}",
                train_cfg.batch_size_labeled,
                labeled.len()
            );
            train_cfg.batch_size_labeled = labeled.len();
        }
        let model = build_initial_model(&model_cfg, cfg)?;
        let sub_dir = run_dir.join(format!("{:02}_{}", i, setting.replace('/', "_")));
        let outcome = train(
            &model,
            &labeled,
            unlabeled.as_ref(),
            inputs.validation.as_ref(),
            &train_cfg,
            &cfg.augment,
            Some(&sub_dir),
        )?;
        outcome.history.write_csv(&sub_dir.join(HISTORY_FILE))?;
        let trained = SegModel::from_checkpoint(&outcome.checkpoint)?;
        let counts = per_image_counts(&trained, &eval_set, cfg.eval.batch_size)?;
        let method = method_label(&model_cfg, cfg);
        let point = AblationPoint {
            setting: setting.clone(),
            n_labeled: labeled.len(),
            n_unlabeled: unlabeled.as_ref().map_or(0, DatasetManifest::len),
            parameters: model.parameter_count(),
            report: MetricsReport::from_counts(&dataset_label(&eval_set), &method, &counts, cfg.eval.aggregation),
        };
        writer.serialize(AblationRow {
            axis,
            setting: &point.setting,
            n_labeled: point.n_labeled,
            n_unlabeled: point.n_unlabeled,
            parameters: point.parameters,
            dataset: &point.report.dataset,
            method: &point.report.method,
            precision: point.report.precision,
            recall: point.report.recall,
            dice: point.report.dice,
            n_images: point.report.n_images,
            n_pixels: point.report.n_pixels,
            aggregation: point.report.aggregation,
        })?;
        writer.flush().map_err(|e| Error::io(&csv_path, e))?;
        log::info!("{axis} {setting}: dice {:.4}", point.report.dice);
        points.push(point);
    }
    let mut file = writer
        .into_inner()
        .map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
    file.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(AblationResult { axis, points })
}

impl AblationResult {
    /// Setting / P / R / Dice table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>9} {:>11} {:>12} {:>9} {:>6} {:>6}\n",
            self.axis, "labeled", "unlabeled", "parameters", "Precision", "Recall", "Dice"
        );
        for p in &self.points {
            let _ = writeln!(
                out,
                "{:<12} {:>9} {:>11} {:>12} {:>9.2} {:>6.2} {:>6.2}",
                p.setting, p.n_labeled, p.n_unlabeled, p.parameters, p.report.precision, p.report.recall, p.report.dice
            );
        }
        out
    }
}

// ---------------------------------------------------------------- fixture

pub const FIXTURE_CONFIG_FILE: &str = "synthetic.cfg";

/// Desk-scale configuration for a fixture: toy SegFormer, crops the size of the
/// patches, manifests of the fixture, evaluation on its held-out centers.
pub fn fixture_config(fixture: &Fixture, spec: &FixtureSpec) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let size = spec.size.to_string();
    let root = &fixture.root;
    let pairs: Vec<(&str, String)> = vec![
        ("data.labeled", Fixture::labeled_manifest_path(root).display().to_string()),
        ("data.unlabeled", Fixture::unlabeled_manifest_path(root).display().to_string()),
        ("eval.datasets", Fixture::test_manifest_path(root).display().to_string()),
        ("model.arch", "segformer".into()),
        ("model.variant", "toy".into()),
        ("augment.weak.crop_size", size),
        ("train.lr", "0.02".into()),
        ("train.batch_size_labeled", "2".into()),
        ("train.batch_size_unlabeled", "8".into()),
        ("ablation.backbones", "toy,b0".into()),
        ("ablation.fractions", "1/2,1".into()),
        ("ablation.centers", "1,3".into()),
        ("ablation.per_center", (spec.unlabeled / spec.centers).to_string()),
    ];
    for (k, v) in pairs {
        cfg.set(k, &v)?;
    }
    Ok(cfg)
}

/// Writes a fixture under `root` plus a ready-to-use `synthetic.cfg`.
pub fn make_fixture(root: &Path, spec: &FixtureSpec) -> Result<(Fixture, PathBuf)> {
    let fixture = write_fixture(root, spec)?;
    let cfg = fixture_config(&fixture, spec)?;
    let path = root.join(FIXTURE_CONFIG_FILE);
    write_file(&path, &cfg.snapshot())?;
    Ok((fixture, path))
}
