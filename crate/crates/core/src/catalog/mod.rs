//! Patch manifests: discovery, persistence, fold splitting and subsampling.

pub mod rle;
pub mod tiling;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub use rle::{decode_rle, encode_rle, read_rle_csv, PixelOrder};
pub use tiling::{tile_region, Boundary, Tile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetId {
    HubmapKidney,
    HubmapVasc,
    Kpmp,
    Nurture,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId::HubmapKidney,
        DatasetId::HubmapVasc,
        DatasetId::Kpmp,
        DatasetId::Nurture,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::HubmapKidney => "HUBMAP_KIDNEY",
            DatasetId::HubmapVasc => "HUBMAP_VASC",
            DatasetId::Kpmp => "KPMP",
            DatasetId::Nurture => "NURTURE",
        }
    }

    /// Human-readable name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            DatasetId::HubmapKidney => "HuBMAP Kidney",
            DatasetId::HubmapVasc => "HuBMAP Vasculature",
            DatasetId::Kpmp => "KPMP",
            DatasetId::Nurture => "NURTuRE",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        DatasetId::ALL
            .into_iter()
            .find(|d| d.as_str() == norm)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown dataset `{s}` (expected one of HUBMAP_KIDNEY, HUBMAP_VASC, KPMP, NURTURE)"
                ))
            })
    }
}

/// One image patch and, for labeled data, its mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub dataset_id: DatasetId,
    pub wsi_id: String,
    pub center_id: Option<String>,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub magnification: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ManifestRole {
    LabeledTrain,
    UnlabeledTrain,
    ExternalValidation,
}

impl ManifestRole {
    pub fn requires_masks(self) -> bool {
        !matches!(self, ManifestRole::UnlabeledTrain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<PatchRecord>,
    pub fold_assignment: Option<BTreeMap<String, usize>>,
    pub role: ManifestRole,
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    #[serde(flatten)]
    record: PatchRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fold: Option<usize>,
}

impl DatasetManifest {
    pub fn new(records: Vec<PatchRecord>, role: ManifestRole) -> Self {
        Self {
            records,
            fold_assignment: None,
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn wsi_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.wsi_id.as_str()).collect()
    }

    pub fn center_ids(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter_map(|r| r.center_id.as_deref())
            .collect()
    }

    pub fn fold_of(&self, patch_id: &str) -> Option<usize> {
        self.fold_assignment.as_ref()?.get(patch_id).copied()
    }

    pub fn with_role(mut self, role: ManifestRole) -> Self {
        self.role = role;
        self
    }

    /// Checks the role/mask invariant.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            match (self.role.requires_masks(), &r.mask_path) {
                (true, None) => {
                    return Err(Error::MissingMask {
                        patch_id: r.patch_id.clone(),
                    })
                }
                (false, Some(_)) => {
                    return Err(Error::Manifest(format!(
                        "unlabeled manifest contains masked patch `{}`",
                        r.patch_id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Keeps the records for which `keep` holds, carrying fold assignments along.
    pub fn filter(&self, mut keep: impl FnMut(&PatchRecord) -> bool) -> Self {
        let records: Vec<PatchRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let fold_assignment = self.fold_assignment.as_ref().map(|folds| {
            records
                .iter()
                .filter_map(|r| folds.get(&r.patch_id).map(|&f| (r.patch_id.clone(), f)))
                .collect()
        });
        Self {
            records,
            fold_assignment,
            role: self.role,
        }
    }

    /// Splits into (training, held-out) manifests for one cross-validation fold.
    pub fn fold_split(&self, fold: usize) -> Result<(Self, Self)> {
        let folds = self
            .fold_assignment
            .as_ref()
            .ok_or_else(|| Error::Manifest("manifest has no fold assignment".into()))?;
        let in_fold = |r: &PatchRecord| folds.get(&r.patch_id) == Some(&fold);
        Ok((self.filter(|r| !in_fold(r)), self.filter(in_fold)))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let row = JsonlRow {
                record: r.clone(),
                fold: self.fold_of(&r.patch_id),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, role: ManifestRole) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut folds = BTreeMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: JsonlRow = serde_json::from_str(&line)?;
            if let Some(f) = row.fold {
                folds.insert(row.record.patch_id.clone(), f);
            }
            records.push(row.record);
        }
        let manifest = Self {
            fold_assignment: (!folds.is_empty()).then_some(folds),
            records,
            role,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Naming convention that maps files under a dataset root to patch metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    /// Image directory relative to the root.
    pub image_dir: PathBuf,
    /// Mask directory relative to the root; its presence makes the dataset labeled.
    pub mask_dir: Option<PathBuf>,
    /// Regex applied to the image file stem. Must define a `wsi` group; a `center`
    /// group is optional.
    pub pattern: String,
    /// Mask file name = image stem + this suffix + `.png`.
    pub mask_suffix: String,
    pub magnification: u32,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            image_dir: "images".into(),
            mask_dir: Some("masks".into()),
            pattern: r"^(?P<wsi>[^_]+)_".into(),
            mask_suffix: String::new(),
            magnification: 20,
        }
    }
}

impl LayoutSpec {
    pub fn unlabeled() -> Self {
        Self {
            mask_dir: None,
            ..Self::default()
        }
    }

    fn compile(&self) -> Result<Regex> {
        let re = Regex::new(&self.pattern)
            .map_err(|e| Error::Layout(format!("bad pattern `{}`: {e}", self.pattern)))?;
        if !re.capture_names().flatten().any(|n| n == "wsi") {
            return Err(Error::Layout(format!(
                "pattern `{}` has no `wsi` capture group",
                self.pattern
            )));
        }
        Ok(re)
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

fn image_dims(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Discovers one record per image under `root/layout.image_dir`, pairing masks by name.
pub fn build_manifest(root: &Path, dataset_id: DatasetId, layout: &LayoutSpec) -> Result<DatasetManifest> {
    let re = layout.compile()?;
    fs::metadata(root).map_err(|e| Error::io(root, e))?;
    let role = if layout.mask_dir.is_some() {
        ManifestRole::LabeledTrain
    } else {
        ManifestRole::UnlabeledTrain
    };
    let image_dir = root.join(&layout.image_dir);
    if !image_dir.is_dir() {
        log::warn!("{} does not exist; manifest is empty", image_dir.display());
        return Ok(DatasetManifest::new(Vec::new(), role));
    }

    let mut files: Vec<PathBuf> = fs::read_dir(&image_dir)
        .map_err(|e| Error::io(&image_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();

    let mut records = Vec::with_capacity(files.len());
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Layout(format!("non-UTF-8 file name {}", path.display())))?
            .to_string();
        let caps = re.captures(&stem).ok_or_else(|| Error::LayoutMismatch {
            file: path.display().to_string(),
            pattern: layout.pattern.clone(),
        })?;
        let wsi_id = caps["wsi"].to_string();
        let center_id = caps.name("center").map(|m| m.as_str().to_string());
        let (width, height) = image_dims(&path)?;

        let mask_path = match &layout.mask_dir {
            Some(dir) => {
                let candidate = root
                    .join(dir)
                    .join(format!("{stem}{}.png", layout.mask_suffix));
                if !candidate.is_file() {
                    return Err(Error::MissingMask { patch_id: stem });
                }
                let mask_dims = image_dims(&candidate)?;
                if mask_dims != (width, height) {
                    return Err(Error::Shape {
                        what: format!("mask of `{stem}`"),
                        expected: vec![height as usize, width as usize],
                        actual: vec![mask_dims.1 as usize, mask_dims.0 as usize],
                    });
                }
                Some(candidate)
            }
            None => None,
        };
        records.push(PatchRecord {
            patch_id: stem,
            dataset_id,
            wsi_id,
            center_id,
            image_path: path,
            mask_path,
            width,
            height,
            magnification: layout.magnification,
        });
    }
    log::info!(
        "{}: {} patches from {} WSIs",
        dataset_id,
        records.len(),
        records.iter().map(|r| &r.wsi_id).collect::<BTreeSet<_>>().len()
    );
    Ok(DatasetManifest::new(records, role))
}

/// Assigns every WSI (and all of its patches) to one of `k` folds.
pub fn split_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut wsis: Vec<&str> = manifest.wsi_ids().into_iter().collect();
    if wsis.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} distinct WSIs cannot fill {k} folds",
            wsis.len()
        )));
    }
    wsis.shuffle(&mut rng::seeded(seed, stream::FOLDS));
    let wsi_fold: BTreeMap<&str, usize> = wsis.iter().enumerate().map(|(i, w)| (*w, i % k)).collect();
    let folds = manifest
        .records
        .iter()
        .map(|r| (r.patch_id.clone(), wsi_fold[r.wsi_id.as_str()]))
        .collect();
    Ok(DatasetManifest {
        records: manifest.records.clone(),
        fold_assignment: Some(folds),
        role: manifest.role,
    })
}

/// A rational label fraction such as `1/16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub const ONE: Fraction = Fraction { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::InvalidArgument(format!(
                "fraction {num}/{den} is outside (0, 1]"
            )));
        }
        Ok(Self { num, den })
    }

    pub fn of(self, n: usize) -> usize {
        (n as u64 * self.num / self.den) as usize
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.num == self.den {
            write!(f, "1")
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse fraction `{s}`"));
        match s.trim().split_once('/') {
            Some((n, d)) => Fraction::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => Fraction::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl PartialOrd for Fraction {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fraction {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

/// Draws `floor(fraction * N)` labeled records, stratified per WSI.
///
/// Each WSI gets `floor(fraction * n_wsi)`; the records still missing from the
/// global total go to the WSIs with the largest fractional remainders (ties
/// broken by the seeded shuffle).
pub fn sample_label_fraction(
    manifest: &DatasetManifest,
    fraction: Fraction,
    seed: u64,
) -> Result<DatasetManifest> {
    if manifest.role != ManifestRole::LabeledTrain {
        return Err(Error::Manifest(format!(
            "label fractions apply to LABELED_TRAIN manifests, not {:?}",
            manifest.role
        )));
    }
    if fraction == Fraction::ONE {
        return Ok(manifest.clone());
    }
    let mut rng = rng::seeded(seed, stream::LABEL_FRACTION);
    let mut by_wsi: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_wsi.entry(r.wsi_id.as_str()).or_default().push(i);
    }
    let total = fraction.of(manifest.len());
    let mut groups: Vec<(&str, Vec<usize>)> = by_wsi.into_iter().collect();
    groups.shuffle(&mut rng);
    let mut quotas: Vec<usize> = groups.iter().map(|(_, idx)| fraction.of(idx.len())).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    // stable sort keeps the shuffled order among equal remainders
    order.sort_by_key(|&g| {
        let rem = (groups[g].1.len() as u64 * fraction.num) % fraction.den;
        std::cmp::Reverse(rem)
    });
    for &g in order.iter().take(total - assigned) {
        quotas[g] += 1;
    }

    let mut keep = vec![false; manifest.len()];
    for ((_, idx), quota) in groups.iter_mut().zip(quotas) {
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(quota) {
            keep[i] = true;
        }
    }
    let mut it = keep.into_iter();
    Ok(manifest.filter(|_| it.next().unwrap_or(false)))
}

/// Picks `n_centers` centers uniformly at random and `per_center` patches from each.
pub fn sample_centers(
    manifest: &DatasetManifest,
    n_centers: usize,
    per_center: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if manifest.role != ManifestRole::UnlabeledTrain {
        return Err(Error::Manifest(format!(
            "center sampling applies to UNLABELED_TRAIN manifests, not {:?}",
            manifest.role
        )));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.center_id.is_none()) {
        return Err(Error::Manifest(format!(
            "patch `{}` carries no center_id",
            r.patch_id
        )));
    }
    let mut centers: Vec<&str> = manifest.center_ids().into_iter().collect();
    if n_centers > centers.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_centers} centers requested, manifest has {}",
            centers.len()
        )));
    }
    let mut rng = rng::seeded(seed, stream::CENTERS);
    centers.shuffle(&mut rng);
    let mut chosen: Vec<&str> = centers.into_iter().take(n_centers).collect();
    chosen.sort_unstable();

    let mut keep = vec![false; manifest.len()];
    for center in chosen {
        let mut idx: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.center_id.as_deref() == Some(center))
            .map(|(i, _)| i)
            .collect();
        if idx.len() < per_center {
            return Err(Error::CenterTooSmall {
                center: center.to_string(),
                available: idx.len(),
                requested: per_center,
            });
        }
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(per_center) {
            keep[i] = true;
        }
    }
    let mut it = keep.into_iter();
    Ok(manifest.filter(|_| it.next().unwrap_or(false)))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn synthetic_records(
        n_wsi: usize,
        per_wsi: usize,
        labeled: bool,
        centers: usize,
    ) -> Vec<PatchRecord> {
        let mut out = Vec::new();
        for w in 0..n_wsi {
            for p in 0..per_wsi {
                let id = format!("w{w:03}_{p:04}");
                out.push(PatchRecord {
                    patch_id: id.clone(),
                    dataset_id: DatasetId::HubmapKidney,
                    wsi_id: format!("w{w:03}"),
                    center_id: (centers > 0).then(|| format!("c{:02}", w % centers)),
                    image_path: format!("images/{id}.png").into(),
                    mask_path: labeled.then(|| format!("masks/{id}.png").into()),
                    width: 64,
                    height: 64,
                    magnification: 20,
                });
            }
        }
        out
    }

    fn labeled(n_wsi: usize, per_wsi: usize) -> DatasetManifest {
        DatasetManifest::new(synthetic_records(n_wsi, per_wsi, true, 0), ManifestRole::LabeledTrain)
    }

    #[test]
    fn dataset_id_parsing() {
        assert_eq!("hubmap_kidney".parse::<DatasetId>().unwrap(), DatasetId::HubmapKidney);
        assert_eq!("KPMP".parse::<DatasetId>().unwrap(), DatasetId::Kpmp);
        assert!("other".parse::<DatasetId>().is_err());
    }

    #[test]
    fn fifteen_wsis_five_folds_of_three() {
        let m = split_folds(&labeled(15, 4), 5, 1).unwrap();
        let folds = m.fold_assignment.as_ref().unwrap();
        let mut wsi_per_fold = vec![BTreeSet::new(); 5];
        for r in &m.records {
            wsi_per_fold[folds[&r.patch_id]].insert(r.wsi_id.clone());
        }
        assert!(wsi_per_fold.iter().all(|s| s.len() == 3));
    }

    #[test]
    fn one_wsi_per_fold() {
        let m = split_folds(&labeled(5, 2), 5, 9).unwrap();
        let folds = m.fold_assignment.unwrap();
        let used: BTreeSet<usize> = folds.values().copied().collect();
        assert_eq!(used.len(), 5);
    }

    #[test]
    fn too_few_wsis_for_k() {
        assert!(split_folds(&labeled(3, 2), 5, 0).is_err());
        assert!(split_folds(&labeled(3, 2), 0, 0).is_err());
    }

    #[test]
    fn fold_sizes_differ_by_at_most_one() {
        for n in 5..20 {
            let m = split_folds(&labeled(n, 1), 5, n as u64).unwrap();
            let mut sizes = [0usize; 5];
            for f in m.fold_assignment.unwrap().values() {
                sizes[*f] += 1;
            }
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn fold_split_holds_out_one_fold() {
        let m = split_folds(&labeled(6, 3), 3, 4).unwrap();
        let (train, val) = m.fold_split(1).unwrap();
        assert_eq!(train.len() + val.len(), m.len());
        let train_wsis = train.wsi_ids();
        assert!(val.wsi_ids().iter().all(|w| !train_wsis.contains(w)));
        assert!(val.records.iter().all(|r| m.fold_of(&r.patch_id) == Some(1)));
    }

    #[test]
    fn fraction_parsing_and_bounds() {
        assert_eq!("1/16".parse::<Fraction>().unwrap(), Fraction { num: 1, den: 16 });
        assert_eq!("1".parse::<Fraction>().unwrap(), Fraction::ONE);
        assert!("0".parse::<Fraction>().is_err());
        assert!("3/2".parse::<Fraction>().is_err());
        assert!("x/2".parse::<Fraction>().is_err());
        assert!(Fraction::new(1, 16).unwrap() < Fraction::new(1, 8).unwrap());
        assert_eq!(Fraction::new(1, 2).unwrap().to_string(), "1/2");
    }

    #[test]
    fn label_fraction_identity_and_counts() {
        let m = labeled(15, 7);
        assert_eq!(sample_label_fraction(&m, Fraction::ONE, 3).unwrap(), m);
        for den in [2u64, 4, 8, 16] {
            let f = Fraction::new(1, den).unwrap();
            let s = sample_label_fraction(&m, f, 3).unwrap();
            assert_eq!(s.len(), m.len() / den as usize);
            assert!(s.records.iter().all(|r| m.records.contains(r)));
        }
    }

    #[test]
    fn hubmap_kidney_half() {
        // 3706 tiles: 14 slides of 247 plus one of 248
        let mut records = synthetic_records(15, 247, true, 0);
        records.push(PatchRecord {
            patch_id: "w014_extra".into(),
            ..records[records.len() - 1].clone()
        });
        let m = DatasetManifest::new(records, ManifestRole::LabeledTrain);
        assert_eq!(m.len(), 3706);
        let s = sample_label_fraction(&m, Fraction::new(1, 2).unwrap(), 0).unwrap();
        assert_eq!(s.len(), 1853);
    }

    #[test]
    fn label_fraction_spans_slides_and_is_deterministic() {
        let m = labeled(8, 16);
        let f = Fraction::new(1, 16).unwrap();
        let a = sample_label_fraction(&m, f, 11).unwrap();
        assert_eq!(a.wsi_ids().len(), 8);
        assert_eq!(a, sample_label_fraction(&m, f, 11).unwrap());
    }

    #[test]
    fn label_fraction_requires_labeled_role() {
        let m = labeled(2, 2).with_role(ManifestRole::UnlabeledTrain);
        assert!(sample_label_fraction(&m, Fraction::ONE, 0).is_err());
    }

    fn unlabeled(n_wsi: usize, per_wsi: usize, centers: usize) -> DatasetManifest {
        DatasetManifest::new(
            synthetic_records(n_wsi, per_wsi, false, centers),
            ManifestRole::UnlabeledTrain,
        )
    }

    #[test]
    fn center_sampling_counts() {
        let m = unlabeled(30, 60, 15);
        let one = sample_centers(&m, 1, 100, 5).unwrap();
        assert_eq!(one.len(), 100);
        assert_eq!(one.center_ids().len(), 1);
        let all = sample_centers(&m, 15, 100, 5).unwrap();
        assert_eq!(all.len(), 1500);
        assert_eq!(all.center_ids().len(), 15);
        assert!(sample_centers(&m, 0, 100, 5).unwrap().is_empty());
    }

    #[test]
    fn center_sampling_errors() {
        let m = unlabeled(3, 10, 3);
        match sample_centers(&m, 1, 50, 0) {
            Err(Error::CenterTooSmall { center, available, .. }) => {
                assert!(center.starts_with('c'));
                assert_eq!(available, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(sample_centers(&m, 4, 1, 0).is_err());
        let no_center = unlabeled(3, 10, 0);
        assert!(sample_centers(&no_center, 1, 1, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip_with_folds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = split_folds(&labeled(5, 3), 5, 2).unwrap();
        m.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: BTreeSet<&str> = first.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(
            keys,
            [
                "patch_id", "dataset_id", "wsi_id", "center_id", "image_path", "mask_path",
                "width", "height", "magnification", "fold"
            ]
            .into_iter()
            .collect()
        );
        assert_eq!(first["dataset_id"], "HUBMAP_KIDNEY");
        let back = DatasetManifest::read_jsonl(&path, ManifestRole::LabeledTrain).unwrap();
        assert_eq!(back, m);
        assert!(DatasetManifest::read_jsonl(&path, ManifestRole::UnlabeledTrain).is_err());
    }
}
