//! Run configuration as a flat `key = value` text file with `#` comments.
//!
//! Every key has a documented default. Values are resolved in order: defaults,
//! config file, environment variables (`GLOMSEG_` + key upper-cased with dots
//! turned into underscores, e.g. `GLOMSEG_TRAIN_LR`), then explicit overrides.
//! [`RunConfig::snapshot`] writes every resolved value; feeding a snapshot back in
//! reproduces it exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::StrongAugSpec;
use crate::catalog::Fraction;
use crate::error::{Error, Result};
use crate::eval::Aggregation;
use crate::models::{Arch, ModelConfig, Variant};
use crate::ssl::{AugmentSpecs, TrainConfig};

pub const ENV_PREFIX: &str = "GLOMSEG_";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataSection {
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub validation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Manifests evaluated after training, one report row each.
    pub datasets: Vec<PathBuf>,
    pub aggregation: Aggregation,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            aggregation: Aggregation::Micro,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSection {
    pub fractions: Vec<Fraction>,
    pub centers: Vec<usize>,
    pub per_center: usize,
    pub backbones: Vec<Variant>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            fractions: [(1, 16), (1, 8), (1, 4), (1, 2), (1, 1)]
                .iter()
                .map(|&(n, d)| Fraction::new(n, d).expect("valid fraction"))
                .collect(),
            centers: vec![1, 3, 5, 10, 15],
            per_center: 100,
            backbones: vec![Variant::B0, Variant::B1, Variant::B2, Variant::B3, Variant::B4, Variant::B5],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    /// Seeds model initialisation, loaders, augmentation and sampling.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub init_weights: Option<PathBuf>,
    pub train: TrainConfig,
    pub augment: AugmentSpecs,
    pub eval: EvalSection,
    pub cv_folds: usize,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            output_dir: "runs".into(),
            seed: 0,
            data: DataSection::default(),
            model: ModelConfig::default(),
            init_weights: None,
            train: TrainConfig::default(),
            augment: AugmentSpecs::default(),
            eval: EvalSection::default(),
            cv_folds: 5,
            ablation: AblationSection::default(),
        }
    }
}

/// `(key, description)` for every accepted key, in snapshot order.
pub const KEYS: &[(&str, &str)] = &[
    ("run_id", "name of the run directory under output_dir"),
    ("output_dir", "root for run directories"),
    ("seed", "seed for initialisation, loaders, augmentation and sampling"),
    ("data.labeled", "labeled training manifest (JSON Lines)"),
    ("data.unlabeled", "unlabeled training manifest; required by fixmatch and unimatch"),
    ("data.validation", "optional manifest for best-checkpoint selection"),
    ("model.arch", "segformer | att_unet; resets the model section to the architecture's default size"),
    ("model.variant", "b0..b5 (segformer), full (att_unet), toy, or custom; resets sizes to the preset"),
    ("model.embed_dims", "custom only: four stage widths"),
    ("model.depths", "custom only: blocks per stage"),
    ("model.num_heads", "custom only: attention heads per stage"),
    ("model.sr_ratios", "custom only: attention spatial-reduction ratio per stage"),
    ("model.mlp_ratio", "custom only: Mix-FFN hidden width multiplier"),
    ("model.decoder_dim", "custom only: width of the MLP decode head"),
    ("model.unet_base", "custom only: channels of the first U-Net level"),
    ("model.unet_levels", "custom only: number of U-Net down/up levels"),
    ("model.num_classes", "output classes (background + glomerulus = 2)"),
    ("model.input_channels", "image channels"),
    ("model.drop_rate_fp", "channel-dropout rate of the feature-perturbation stream"),
    ("model.init_weights", "optional weights file copied into the model before training"),
    ("train.method", "supervised | fixmatch | unimatch"),
    ("train.lr", "initial SGD learning rate"),
    ("train.momentum", "SGD momentum"),
    ("train.batch_size_labeled", "labeled images per step"),
    ("train.batch_size_unlabeled", "unlabeled images per step; empty = batch_size_labeled"),
    ("train.epochs", "passes over the labeled set"),
    ("train.tau", "pseudo-label confidence threshold in (0, 1]"),
    ("train.lambda_u", "weight of the unlabeled loss"),
    ("train.w_fp", "weight of the feature-perturbation stream (unimatch)"),
    ("train.lr_schedule", "constant | poly | poly(<power>)"),
    ("train.dice_loss_weight", "weight of an extra soft-Dice term on labeled data; 0 disables it"),
    ("train.checkpoint_every", "write epoch_{n}.ckpt every n epochs; 0 = last epoch only"),
    ("augment.weak.crop_size", "square crop side in pixels"),
    ("augment.weak.rotation_choices", "clockwise rotations in degrees, multiples of 90"),
    ("augment.weak.hflip_prob", "horizontal flip probability"),
    ("augment.weak.vflip_prob", "vertical flip probability"),
    ("augment.strong.preset", "unimatch_default | paper_faithful | none; sets every augment.strong key"),
    ("augment.strong.jitter_brightness", "max brightness factor deviation"),
    ("augment.strong.jitter_contrast", "max contrast factor deviation"),
    ("augment.strong.jitter_saturation", "max saturation factor deviation"),
    ("augment.strong.jitter_hue", "max hue shift in turns, at most 0.5"),
    ("augment.strong.jitter_prob", "probability of applying color jitter"),
    ("augment.strong.grayscale_prob", "probability of converting to grayscale"),
    ("augment.strong.blur_prob", "probability of Gaussian blur"),
    ("augment.strong.blur_sigma_range", "blur sigma range lo,hi"),
    ("augment.strong.cutmix_prob", "probability of pasting a box from a partner image"),
    ("augment.strong.cutmix_area_range", "CutMix box area as a fraction of the patch, lo,hi"),
    ("eval.datasets", "comma-separated manifests evaluated after training"),
    ("eval.aggregation", "micro | macro"),
    ("eval.batch_size", "images per inference batch"),
    ("cv.folds", "folds for cross-validation"),
    ("ablation.fractions", "labeled fractions for the fraction axis, e.g. 1/16,1/8,1"),
    ("ablation.centers", "center counts for the centers axis"),
    ("ablation.per_center", "unlabeled patches drawn from each center"),
    ("ablation.backbones", "SegFormer variants for the backbone axis"),
];

/// Keys that only take effect for a custom model size.
const SIZE_KEYS: &[&str] = &[
    "model.embed_dims",
    "model.depths",
    "model.num_heads",
    "model.sr_ratios",
    "model.mlp_ratio",
    "model.decoder_dim",
    "model.unet_base",
    "model.unet_levels",
];

pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

fn valid_keys() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err(Error::Config(format!("`{key}` needs two comma-separated numbers, got `{v}`"))),
    }
}

fn parse_opt_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// `key = value` pairs of a config text, in order. Later duplicates win when applied.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let t = &self.train;
        let w = &self.augment.weak;
        let s = &self.augment.strong;
        Ok(match key {
            "run_id" => self.run_id.clone(),
            "output_dir" => self.output_dir.display().to_string(),
            "seed" => self.seed.to_string(),
            "data.labeled" => opt_path(&self.data.labeled),
            "data.unlabeled" => opt_path(&self.data.unlabeled),
            "data.validation" => opt_path(&self.data.validation),
            "model.arch" => m.arch.to_string(),
            "model.variant" => m.variant.to_string(),
            "model.embed_dims" => join(&m.embed_dims),
            "model.depths" => join(&m.depths),
            "model.num_heads" => join(&m.num_heads),
            "model.sr_ratios" => join(&m.sr_ratios),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "model.decoder_dim" => m.decoder_dim.to_string(),
            "model.unet_base" => m.unet_base.to_string(),
            "model.unet_levels" => m.unet_levels.to_string(),
            "model.num_classes" => m.num_classes.to_string(),
            "model.input_channels" => m.input_channels.to_string(),
            "model.drop_rate_fp" => m.drop_rate_fp.to_string(),
            "model.init_weights" => opt_path(&self.init_weights),
            "train.method" => t.method.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.batch_size_labeled" => t.batch_size_labeled.to_string(),
            "train.batch_size_unlabeled" => t.batch_size_unlabeled.map(|b| b.to_string()).unwrap_or_default(),
            "train.epochs" => t.epochs.to_string(),
            "train.tau" => t.tau.to_string(),
            "train.lambda_u" => t.lambda_u.to_string(),
            "train.w_fp" => t.w_fp.to_string(),
            "train.lr_schedule" => t.lr_schedule.to_string(),
            "train.dice_loss_weight" => t.dice_loss_weight.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "augment.weak.crop_size" => w.crop_size.to_string(),
            "augment.weak.rotation_choices" => join(&w.rotation_choices),
            "augment.weak.hflip_prob" => w.hflip_prob.to_string(),
            "augment.weak.vflip_prob" => w.vflip_prob.to_string(),
            "augment.strong.preset" => {
                if *s == StrongAugSpec::unimatch_default() {
                    "unimatch_default".into()
                } else if *s == StrongAugSpec::paper_faithful() {
                    "paper_faithful".into()
                } else if *s == StrongAugSpec::none() {
                    "none".into()
                } else {
                    "custom".into()
                }
            }
            "augment.strong.jitter_brightness" => s.jitter_brightness.to_string(),
            "augment.strong.jitter_contrast" => s.jitter_contrast.to_string(),
            "augment.strong.jitter_saturation" => s.jitter_saturation.to_string(),
            "augment.strong.jitter_hue" => s.jitter_hue.to_string(),
            "augment.strong.jitter_prob" => s.jitter_prob.to_string(),
            "augment.strong.grayscale_prob" => s.grayscale_prob.to_string(),
            "augment.strong.blur_prob" => s.blur_prob.to_string(),
            "augment.strong.blur_sigma_range" => format!("{},{}", s.blur_sigma_range.0, s.blur_sigma_range.1),
            "augment.strong.cutmix_prob" => s.cutmix_prob.to_string(),
            "augment.strong.cutmix_area_range" => {
                format!("{},{}", s.cutmix_area_range.0, s.cutmix_area_range.1)
            }
            "eval.datasets" => self
                .eval
                .datasets
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
            "eval.aggregation" => self.eval.aggregation.to_string(),
            "eval.batch_size" => self.eval.batch_size.to_string(),
            "cv.folds" => self.cv_folds.to_string(),
            "ablation.fractions" => join(&self.ablation.fractions),
            "ablation.centers" => join(&self.ablation.centers),
            "ablation.per_center" => self.ablation.per_center.to_string(),
            "ablation.backbones" => join(&self.ablation.backbones),
            _ => return Err(self.unknown(key)),
        })
    }

    fn unknown(&self, key: &str) -> Error {
        Error::UnknownConfigKey {
            key: key.to_string(),
            valid: valid_keys(),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_inner(key, value.trim()).map_err(|e| match e {
            Error::Config(_) | Error::UnknownConfigKey { .. } => e,
            other => Error::Config(format!("`{key}`: {other}")),
        })
    }

    fn set_inner(&mut self, key: &str, v: &str) -> Result<()> {
        if SIZE_KEYS.contains(&key) {
            self.model.variant = Variant::Custom;
        }
        let m = &mut self.model;
        let t = &mut self.train;
        let w = &mut self.augment.weak;
        let s = &mut self.augment.strong;
        match key {
            "run_id" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err(Error::Config(format!("run_id `{v}` must be a non-empty plain name")));
                }
                self.run_id = v.to_string()
            }
            "output_dir" => self.output_dir = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "data.labeled" => self.data.labeled = parse_opt_path(v),
            "data.unlabeled" => self.data.unlabeled = parse_opt_path(v),
            "data.validation" => self.data.validation = parse_opt_path(v),
            "model.arch" => {
                let arch: Arch = v.parse()?;
                let variant = match arch {
                    Arch::Segformer => Variant::B1,
                    Arch::AttUnet => Variant::Full,
                };
                *m = ModelConfig::preset(arch, variant)?;
            }
            "model.variant" => {
                let variant: Variant = v.parse()?;
                if variant == Variant::Custom {
                    m.variant = variant;
                } else {
                    let keep = (m.num_classes, m.input_channels, m.drop_rate_fp);
                    *m = ModelConfig::preset(m.arch, variant)?;
                    (m.num_classes, m.input_channels, m.drop_rate_fp) = keep;
                }
            }
            "model.embed_dims" => m.embed_dims = parse_list(key, v)?,
            "model.depths" => m.depths = parse_list(key, v)?,
            "model.num_heads" => m.num_heads = parse_list(key, v)?,
            "model.sr_ratios" => m.sr_ratios = parse_list(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.decoder_dim" => m.decoder_dim = parse(key, v)?,
            "model.unet_base" => m.unet_base = parse(key, v)?,
            "model.unet_levels" => m.unet_levels = parse(key, v)?,
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "model.input_channels" => m.input_channels = parse(key, v)?,
            "model.drop_rate_fp" => m.drop_rate_fp = parse(key, v)?,
            "model.init_weights" => self.init_weights = parse_opt_path(v),
            "train.method" => t.method = v.parse()?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.batch_size_labeled" => t.batch_size_labeled = parse(key, v)?,
            "train.batch_size_unlabeled" => {
                t.batch_size_unlabeled = if v.is_empty() { None } else { Some(parse(key, v)?) }
            }
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.tau" => t.tau = parse(key, v)?,
            "train.lambda_u" => t.lambda_u = parse(key, v)?,
            "train.w_fp" => t.w_fp = parse(key, v)?,
            "train.lr_schedule" => t.lr_schedule = v.parse()?,
            "train.dice_loss_weight" => t.dice_loss_weight = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "augment.weak.crop_size" => w.crop_size = parse(key, v)?,
            "augment.weak.rotation_choices" => w.rotation_choices = parse_list(key, v)?,
            "augment.weak.hflip_prob" => w.hflip_prob = parse(key, v)?,
            "augment.weak.vflip_prob" => w.vflip_prob = parse(key, v)?,
            "augment.strong.preset" => {
                *s = match v {
                    "unimatch_default" => StrongAugSpec::unimatch_default(),
                    "paper_faithful" => StrongAugSpec::paper_faithful(),
                    "none" => StrongAugSpec::none(),
                    // a snapshot of individually edited fields; the fields follow
                    "custom" => s.clone(),
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown strong augmentation preset `{v}` (unimatch_default, paper_faithful, none)"
                        )))
                    }
                }
            }
            "augment.strong.jitter_brightness" => s.jitter_brightness = parse(key, v)?,
            "augment.strong.jitter_contrast" => s.jitter_contrast = parse(key, v)?,
            "augment.strong.jitter_saturation" => s.jitter_saturation = parse(key, v)?,
            "augment.strong.jitter_hue" => s.jitter_hue = parse(key, v)?,
            "augment.strong.jitter_prob" => s.jitter_prob = parse(key, v)?,
            "augment.strong.grayscale_prob" => s.grayscale_prob = parse(key, v)?,
            "augment.strong.blur_prob" => s.blur_prob = parse(key, v)?,
            "augment.strong.blur_sigma_range" => s.blur_sigma_range = parse_pair(key, v)?,
            "augment.strong.cutmix_prob" => s.cutmix_prob = parse(key, v)?,
            "augment.strong.cutmix_area_range" => s.cutmix_area_range = parse_pair(key, v)?,
            "eval.datasets" => {
                self.eval.datasets = v
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "eval.aggregation" => self.eval.aggregation = v.parse()?,
            "eval.batch_size" => self.eval.batch_size = parse(key, v)?,
            "cv.folds" => self.cv_folds = parse(key, v)?,
            "ablation.fractions" => self.ablation.fractions = parse_list(key, v)?,
            "ablation.centers" => self.ablation.centers = parse_list(key, v)?,
            "ablation.per_center" => self.ablation.per_center = parse(key, v)?,
            "ablation.backbones" => self.ablation.backbones = parse_list(key, v)?,
            _ => return Err(self.unknown(key)),
        }
        Ok(())
    }

    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_pairs(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// `(key, value)` for every `GLOMSEG_*` variable naming a known key.
    pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
        let vars: std::collections::HashMap<String, String> = vars.into_iter().collect();
        KEYS.iter()
            .filter_map(|(k, _)| vars.get(&env_var_name(k)).map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    /// Defaults, then `file`, then `GLOMSEG_*` variables from `env`, then `overrides`.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_pairs(&Self::env_overrides(env))?;
        cfg.apply_pairs(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_model().validate()?;
        self.resolved_train().validate()?;
        self.augment.weak.validate()?;
        self.augment.strong.validate()?;
        if self.cv_folds == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("cv.folds and eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Every key with its resolved value and description. Size keys of a named
    /// model variant are written as comments because the variant fixes them.
    pub fn snapshot(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (key, doc) in KEYS {
            let value = self.get(key).expect("listed key");
            let _ = writeln!(out, "# {doc}");
            if SIZE_KEYS.contains(key) && self.model.variant != Variant::Custom {
                let _ = writeln!(out, "# {key} = {value}");
            } else {
                let _ = writeln!(out, "{key} = {value}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let snap = cfg.snapshot();
        let back = RunConfig::from_text(&snap).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.snapshot(), snap);
    }

    #[test]
    fn edited_config_round_trips() {
        let mut cfg = RunConfig::from_text(
            "model.arch = segformer\nmodel.variant = toy  # desk scale\ntrain.method = unimatch\n\
             train.lr = 0.02\naugment.strong.preset = paper_faithful\naugment.strong.blur_prob = 0.3\n\
             ablation.fractions = 1/2, 1\ntrain.lr_schedule = poly(0.9)\n",
        )
        .unwrap();
        cfg.set("model.decoder_dim", "48").unwrap();
        assert_eq!(cfg.model.variant, Variant::Custom);
        let snap = cfg.snapshot();
        let back = RunConfig::from_text(&snap).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.snapshot(), snap);
        assert_eq!(back.augment.strong.cutmix_prob, 0.0);
        assert_eq!(back.model.embed_dims, vec![8, 16, 32, 64]);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::from_text("train.learning_rate = 0.1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.learning_rate"));
        assert!(msg.contains("train.lr,"));
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn precedence_file_env_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.cfg");
        std::fs::write(&path, "train.epochs = 3\ntrain.lr = 0.5\nseed = 4\n").unwrap();
        let env = vec![
            (env_var_name("train.lr"), "0.25".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = RunConfig::resolve(Some(&path), env, &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.25);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.resolved_train().seed, 9);
        assert_eq!(env_var_name("augment.weak.crop_size"), "GLOMSEG_AUGMENT_WEAK_CROP_SIZE");
    }

    #[test]
    fn env_names_are_unique() {
        let mut names: Vec<String> = KEYS.iter().map(|(k, _)| env_var_name(k)).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
    }

    #[test]
    fn every_key_reads_back() {
        let cfg = RunConfig::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            let mut c2 = cfg.clone();
            c2.set(k, &v).unwrap();
        }
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(RunConfig::from_text("train.tau = high").is_err());
        assert!(RunConfig::from_text("no equals sign").is_err());
        assert!(RunConfig::resolve(None, Vec::new(), &[("train.tau".into(), "1.5".into())]).is_err());
        assert!(RunConfig::from_text("run_id = a/b").is_err());
    }
}
