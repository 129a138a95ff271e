//! Synthetic stained-tissue patches with exact glomerulus masks.
//!
//! Glomeruli are dark, speckled ellipses ringed by a pale capsule; the background
//! is low-frequency tissue texture with pale tubule rings as distractors. Every
//! center gets its own stain (hue, saturation and brightness), and the labeled set
//! comes from center `c0` only, so held-out centers differ in color from the
//! labeled data.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::catalog::{build_manifest, DatasetId, DatasetManifest, LayoutSpec, ManifestRole};
use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::rng::{self, mix, stream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub size: u32,
    /// Labeled patches, all from center `c0`.
    pub labeled: usize,
    pub labeled_wsis: usize,
    /// Unlabeled patches spread evenly over all centers.
    pub unlabeled: usize,
    /// Held-out labeled patches from centers other than `c0`.
    pub test: usize,
    pub centers: usize,
    pub wsis_per_center: usize,
    /// Scales the color difference between centers; 0 gives every center the same stain.
    pub stain_strength: f32,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            size: 64,
            labeled: 8,
            labeled_wsis: 4,
            unlabeled: 64,
            test: 24,
            centers: 4,
            wsis_per_center: 2,
            stain_strength: 0.7,
            seed: 7,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::InvalidArgument("fixture size must be at least 16".into()));
        }
        if self.centers < 2 {
            return Err(Error::InvalidArgument(
                "fixture needs at least 2 centers (one labeled, one held out)".into(),
            ));
        }
        if self.labeled_wsis == 0 || self.wsis_per_center == 0 {
            return Err(Error::InvalidArgument("WSI counts must be positive".into()));
        }
        Ok(())
    }
}

/// Color transform of one center: hue rotation about the gray axis, saturation,
/// contrast about mid-gray, and brightness scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stain {
    /// Radians.
    pub hue: f32,
    pub saturation: f32,
    pub contrast: f32,
    pub brightness: f32,
}

impl Stain {
    pub const REFERENCE: Stain = Stain {
        hue: 0.0,
        saturation: 1.0,
        contrast: 1.0,
        brightness: 1.0,
    };

    /// Center 0 is the reference stain; others are drawn with `strength` scaling
    /// how far they move from it.
    pub fn for_center(center: usize, seed: u64, strength: f32) -> Self {
        if center == 0 {
            return Self::REFERENCE;
        }
        let mut rng = rng::seeded(mix(&[seed, center as u64]), stream::FIXTURE);
        let mut sign = || if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (hue_sign, light_sign) = (sign(), sign());
        Self {
            hue: hue_sign * rng.random_range(0.35..0.9) * strength,
            saturation: 1.0 + rng.random_range(-0.4..0.4) * strength,
            contrast: 1.0 - rng.random_range(0.2..0.45) * strength,
            brightness: 1.0 + light_sign * rng.random_range(0.15..0.3) * strength,
        }
    }

    fn apply(&self, rgb: [f32; 3]) -> Rgb<u8> {
        let gray = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
        let d = [rgb[0] - gray, rgb[1] - gray, rgb[2] - gray];
        // Rodrigues rotation of the chroma vector about (1,1,1)/√3; d ⟂ axis
        let (s, c) = self.hue.sin_cos();
        let k = 1.0 / 3f32.sqrt();
        let cross = [k * (d[2] - d[1]), k * (d[0] - d[2]), k * (d[1] - d[0])];
        let mut out = [0u8; 3];
        for i in 0..3 {
            let chroma = (d[i] * c + cross[i] * s) * self.saturation;
            let luma = 128.0 + (gray - 128.0) * self.contrast;
            out[i] = ((luma + chroma) * self.brightness).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    }
}

const TISSUE: [f32; 3] = [222.0, 168.0, 196.0];
const TUBULE: [f32; 3] = [240.0, 205.0, 225.0];
const GLOMERULUS: [f32; 3] = [150.0, 78.0, 150.0];
const NUCLEUS: [f32; 3] = [95.0, 40.0, 120.0];
const CAPSULE: [f32; 3] = [248.0, 236.0, 242.0];

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    theta: f32,
}

impl Ellipse {
    /// Normalised radius; < 1 inside.
    fn radius(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Smooth noise: a coarse random grid, bilinearly interpolated.
fn value_noise(size: u32, cells: usize, rng: &mut Rng) -> Vec<f32> {
    let g = cells + 1;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = size as usize;
    let mut out = vec![0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let fx = x as f32 / s as f32 * cells as f32;
            let fy = y as f32 / s as f32 * cells as f32;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - x0 as f32, fy - y0 as f32);
            let at = |i: usize, j: usize| grid[j.min(cells) * g + i.min(cells)];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out[y * s + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Renders one patch and its mask. `min_glomeruli` of 0 allows empty patches.
pub fn render_patch(size: u32, stain: &Stain, min_glomeruli: usize, seed: u64) -> (RgbImage, SegMask) {
    let mut rng = rng::seeded(seed, stream::FIXTURE);
    let s = size as f32;
    let texture = value_noise(size, 6, &mut rng);

    let n_glom = rng.random_range(min_glomeruli..=2.max(min_glomeruli));
    let mut gloms: Vec<Ellipse> = Vec::new();
    for _ in 0..n_glom {
        // rejection-sample non-overlapping placements
        for _ in 0..20 {
            let a = rng.random_range(0.11..0.2) * s;
            let e = Ellipse {
                cx: rng.random_range(0.15..0.85) * s,
                cy: rng.random_range(0.15..0.85) * s,
                a,
                b: a * rng.random_range(0.7..1.0),
                theta: rng.random_range(0.0..std::f32::consts::PI),
            };
            let clear = gloms.iter().all(|o| {
                let d = ((e.cx - o.cx).powi(2) + (e.cy - o.cy).powi(2)).sqrt();
                d > e.a + o.a + 4.0
            });
            if clear {
                gloms.push(e);
                break;
            }
        }
    }
    let tubules: Vec<Ellipse> = (0..rng.random_range(2..5))
        .map(|_| {
            let a = rng.random_range(0.05..0.1) * s;
            Ellipse {
                cx: rng.random_range(0.0..1.0) * s,
                cy: rng.random_range(0.0..1.0) * s,
                a,
                b: a * rng.random_range(0.6..1.0),
                theta: rng.random_range(0.0..std::f32::consts::PI),
            }
        })
        .collect();

    let mut mask = SegMask::zeros(size as usize, size as usize);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = texture[(y * size + x) as usize];
            let grain: f32 = rng.random_range(-10.0..10.0);
            let mut px = TISSUE.map(|v| v + 18.0 * t + grain);
            for tb in &tubules {
                let r = tb.radius(fx, fy);
                if (0.7..1.0).contains(&r) {
                    px = TUBULE.map(|v| v + grain);
                }
            }
            for g in &gloms {
                let r = g.radius(fx, fy);
                if r < 1.0 {
                    let base = if rng.random_bool(0.18) { NUCLEUS } else { GLOMERULUS };
                    px = base.map(|v| v + 12.0 * t + grain);
                    mask.set(x as usize, y as usize, true);
                } else if r < 1.0 + 2.5 / g.a {
                    px = CAPSULE.map(|v| v + grain * 0.5);
                }
            }
            img.put_pixel(x, y, stain.apply(px));
        }
    }
    (img, mask)
}

/// Manifests of a fixture written to disk.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub root: PathBuf,
    pub labeled: DatasetManifest,
    pub unlabeled: DatasetManifest,
    pub test: DatasetManifest,
}

impl Fixture {
    pub fn labeled_manifest_path(root: &Path) -> PathBuf {
        root.join("manifests").join("labeled.jsonl")
    }
    pub fn unlabeled_manifest_path(root: &Path) -> PathBuf {
        root.join("manifests").join("unlabeled.jsonl")
    }
    pub fn test_manifest_path(root: &Path) -> PathBuf {
        root.join("manifests").join("test.jsonl")
    }
}

/// File-name layout of the unlabeled part: `{center}-{wsi}_{n}.png`.
pub fn center_layout() -> LayoutSpec {
    LayoutSpec {
        pattern: r"^(?P<center>[^-]+)-(?P<wsi>[^_]+)_".into(),
        ..LayoutSpec::unlabeled()
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn mkdirs(dirs: &[PathBuf]) -> Result<()> {
    for d in dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

/// Writes `labeled/`, `unlabeled/` and `test/` trees plus JSON-Lines manifests
/// under `root/manifests/`.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let (lab, unl, tst) = (root.join("labeled"), root.join("unlabeled"), root.join("test"));
    mkdirs(&[
        lab.join("images"),
        lab.join("masks"),
        unl.join("images"),
        tst.join("images"),
        tst.join("masks"),
        root.join("manifests"),
    ])?;
    let stains: Vec<Stain> = (0..spec.centers).map(|c| Stain::for_center(c, spec.seed, spec.stain_strength)).collect();

    for i in 0..spec.labeled {
        let wsi = i % spec.labeled_wsis;
        let (img, mask) = render_patch(spec.size, &stains[0], 1, mix(&[spec.seed, 1, i as u64]));
        let stem = format!("L{wsi:02}_{i:04}");
        save_png(&img, &lab.join("images").join(format!("{stem}.png")))?;
        mask.save(&lab.join("masks").join(format!("{stem}.png")))?;
    }
    for i in 0..spec.unlabeled {
        let center = i % spec.centers;
        let wsi = (i / spec.centers) % spec.wsis_per_center;
        let (img, _) = render_patch(spec.size, &stains[center], 0, mix(&[spec.seed, 2, i as u64]));
        let stem = format!("c{center}-U{center}w{wsi}_{i:04}");
        save_png(&img, &unl.join("images").join(format!("{stem}.png")))?;
    }
    for i in 0..spec.test {
        let center = 1 + i % (spec.centers - 1);
        let (img, mask) = render_patch(spec.size, &stains[center], 1, mix(&[spec.seed, 3, i as u64]));
        let stem = format!("T{center}_{i:04}");
        save_png(&img, &tst.join("images").join(format!("{stem}.png")))?;
        mask.save(&tst.join("masks").join(format!("{stem}.png")))?;
    }

    let labeled = build_manifest(&lab, DatasetId::HubmapKidney, &LayoutSpec::default())?;
    let unlabeled = build_manifest(&unl, DatasetId::Nurture, &center_layout())?;
    let test = build_manifest(&tst, DatasetId::Kpmp, &LayoutSpec::default())?
        .with_role(ManifestRole::ExternalValidation);
    labeled.write_jsonl(&Fixture::labeled_manifest_path(root))?;
    unlabeled.write_jsonl(&Fixture::unlabeled_manifest_path(root))?;
    test.write_jsonl(&Fixture::test_manifest_path(root))?;
    Ok(Fixture {
        root: root.to_path_buf(),
        labeled,
        unlabeled,
        test,
    })
}
