//! Pixel-level precision, recall and Dice, dataset aggregation, and k-fold
//! cross-validation.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::catalog::{split_folds, DatasetManifest, PatchRecord};
use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::models::{images_to_tensor, ModelConfig, SegModel};
use crate::ssl::{train, AugmentSpecs, TrainConfig};

/// Glomerulus is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with prediction and ground truth exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tn,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &SegMask, gt: &SegMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape {
            what: "prediction vs ground truth".into(),
            expected: vec![gt.height(), gt.width()],
            actual: vec![pred.height(), pred.width()],
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Any 0/0 cell is reported as 0.
pub fn metrics_from_counts(c: &ConfusionCounts) -> Metrics {
    Metrics {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Counts summed over the dataset before computing metrics.
    #[default]
    Micro,
    /// Metrics computed per image, then averaged.
    Macro,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Micro => "micro",
            Aggregation::Macro => "macro",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "micro" => Ok(Self::Micro),
            "macro" => Ok(Self::Macro),
            _ => Err(Error::InvalidArgument(format!(
                "unknown aggregation '{s}' (expected micro or macro)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub method: String,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    pub n_images: usize,
    pub n_pixels: u64,
    pub aggregation: Aggregation,
}

impl MetricsReport {
    pub fn from_counts(dataset: &str, method: &str, counts: &[ConfusionCounts], aggregation: Aggregation) -> Self {
        let total: ConfusionCounts = counts.iter().copied().sum();
        let m = match aggregation {
            Aggregation::Micro => metrics_from_counts(&total),
            Aggregation::Macro if counts.is_empty() => metrics_from_counts(&total),
            Aggregation::Macro => {
                let n = counts.len() as f64;
                let per: Vec<Metrics> = counts.iter().map(metrics_from_counts).collect();
                Metrics {
                    precision: per.iter().map(|m| m.precision).sum::<f64>() / n,
                    recall: per.iter().map(|m| m.recall).sum::<f64>() / n,
                    dice: per.iter().map(|m| m.dice).sum::<f64>() / n,
                }
            }
        };
        Self {
            dataset: dataset.to_string(),
            method: method.to_string(),
            precision: m.precision,
            recall: m.recall,
            dice: m.dice,
            n_images: counts.len(),
            n_pixels: total.total(),
            aggregation,
        }
    }
}

pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Anything that turns images into binary masks. Lets evaluation run against
/// stub predictors as well as trained models.
pub trait Segmenter {
    /// Spatial dimensions must be multiples of this.
    fn required_multiple(&self) -> usize {
        1
    }
    /// All images in one call share dimensions.
    fn predict(&self, images: &[&RgbImage]) -> Result<Vec<SegMask>>;
}

impl Segmenter for SegModel {
    fn required_multiple(&self) -> usize {
        self.config().required_multiple()
    }

    fn predict(&self, images: &[&RgbImage]) -> Result<Vec<SegMask>> {
        let x = images_to_tensor(images, self.dtype())?;
        let classes = self.forward(&x)?.argmax(1)?;
        let (b, h, w) = classes.dims3()?;
        let flat: Vec<u32> = classes.flatten_all()?.to_vec1()?;
        let positive = self.config().num_classes as u32 - 1;
        let plane = h * w;
        (0..b)
            .map(|i| {
                let data = flat[i * plane..(i + 1) * plane]
                    .iter()
                    .map(|&c| u8::from(c == positive))
                    .collect();
                SegMask::from_vec(w, h, data)
            })
            .collect()
    }
}

pub(crate) fn load_pair(record: &PatchRecord) -> Result<(RgbImage, SegMask)> {
    let mask_path = record.mask_path.as_ref().ok_or_else(|| Error::MissingMask {
        patch_id: record.patch_id.clone(),
    })?;
    let image = load_rgb(&record.image_path)?;
    let mask = SegMask::load(mask_path)?;
    if mask.dims() != (image.width() as usize, image.height() as usize) {
        return Err(Error::Shape {
            what: format!("mask of patch {}", record.patch_id),
            expected: vec![image.height() as usize, image.width() as usize],
            actual: vec![mask.height(), mask.width()],
        });
    }
    Ok((image, mask))
}

pub(crate) fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8())
}

/// Name for the report's dataset column: the distinct dataset ids, joined by `+`.
pub fn dataset_label(manifest: &DatasetManifest) -> String {
    let mut ids: Vec<&str> = manifest.records.iter().map(|r| r.dataset_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        "EMPTY".into()
    } else {
        ids.join("+")
    }
}

/// Per-image confusion counts, in manifest order.
pub fn per_image_counts(
    model: &dyn Segmenter,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<Vec<ConfusionCounts>> {
    let m = model.required_multiple().max(1);
    for r in &manifest.records {
        if r.mask_path.is_none() {
            return Err(Error::MissingMask {
                patch_id: r.patch_id.clone(),
            });
        }
        if r.width == 0 || r.height == 0 || r.width as usize % m != 0 || r.height as usize % m != 0 {
            return Err(Error::Model(format!(
                "patch {} is {}x{}, the model needs multiples of {m}",
                r.patch_id, r.width, r.height
            )));
        }
    }
    let mut counts = Vec::with_capacity(manifest.len());
    for chunk in manifest.records.chunks(batch_size.max(1)) {
        let pairs = chunk.iter().map(load_pair).collect::<Result<Vec<_>>>()?;
        // group runs of equal size so each forward pass sees one shape
        let mut start = 0;
        while start < pairs.len() {
            let dims = pairs[start].0.dimensions();
            let mut end = start + 1;
            while end < pairs.len() && pairs[end].0.dimensions() == dims {
                end += 1;
            }
            let images: Vec<&RgbImage> = pairs[start..end].iter().map(|p| &p.0).collect();
            let preds = model.predict(&images)?;
            for (pred, (_, gt)) in preds.iter().zip(&pairs[start..end]) {
                counts.push(confusion(pred, gt)?);
            }
            start = end;
        }
    }
    Ok(counts)
}

pub fn evaluate(
    model: &dyn Segmenter,
    manifest: &DatasetManifest,
    aggregation: Aggregation,
    method: &str,
) -> Result<MetricsReport> {
    let counts = per_image_counts(model, manifest, 8)?;
    Ok(MetricsReport::from_counts(&dataset_label(manifest), method, &counts, aggregation))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    /// One report per held-out fold, in fold order.
    pub reports: Vec<MetricsReport>,
    pub mean_dice: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single fold.
    pub std_dice: f64,
}

impl CrossValidation {
    pub fn from_reports(reports: Vec<MetricsReport>) -> Self {
        let (mean, std) = mean_and_sample_std(&reports.iter().map(|r| r.dice).collect::<Vec<_>>());
        Self {
            reports,
            mean_dice: mean,
            std_dice: std,
        }
    }

    /// `mean±std` with two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2}±{:.2}", self.mean_dice, self.std_dice)
    }
}

pub fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// k train/validate runs, each holding out one WSI-disjoint fold. Folds already
/// assigned on the manifest are reused; otherwise they are drawn with `fold_seed`.
pub fn cross_validate(
    manifest: &DatasetManifest,
    k: usize,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    specs: &AugmentSpecs,
    fold_seed: u64,
) -> Result<CrossValidation> {
    let assigned = match &manifest.fold_assignment {
        Some(folds) if folds.values().all(|&f| f < k) && folds.values().max() == Some(&(k - 1)) => {
            manifest.clone()
        }
        _ => split_folds(manifest, k, fold_seed)?,
    };
    let method = format!("{} {}", model_config.label(), train_config.method);
    let mut reports = Vec::with_capacity(k);
    for fold in 0..k {
        let (train_set, held_out) = assigned.fold_split(fold)?;
        let model = SegModel::build(model_config, candle_core::DType::F32)?;
        let outcome = train(&model, &train_set, None, None, train_config, specs, None)?;
        let trained = SegModel::from_checkpoint(&outcome.checkpoint)?;
        log::info!("fold {fold}: {} training patches, {} held out", train_set.len(), held_out.len());
        reports.push(evaluate(&trained, &held_out, Aggregation::Micro, &method)?);
    }
    Ok(CrossValidation::from_reports(reports))
}
