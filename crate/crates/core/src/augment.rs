//! Weak (geometric) and strong (photometric + CutMix) augmentation.
//!
//! Weak augmentation is the only stage that moves pixels, and it moves image and
//! mask through the same [`Geometry`]. Strong augmentation is applied on top of
//! the weak view and only changes values, except inside a CutMix box whose
//! contents come from a partner image. A pseudo-label predicted on the weak view
//! is therefore a pixel-aligned target for every strong view.

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakAugSpec {
    pub crop_size: u32,
    /// Allowed clockwise rotations in degrees; multiples of 90 only.
    pub rotation_choices: Vec<u32>,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for WeakAugSpec {
    fn default() -> Self {
        Self {
            crop_size: 512,
            rotation_choices: vec![0, 90, 180, 270],
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl WeakAugSpec {
    /// Full-size crop, no rotation, no flips.
    pub fn identity(size: u32) -> Self {
        Self {
            crop_size: size,
            rotation_choices: vec![0],
            hflip_prob: 0.0,
            vflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::Augment("crop_size must be positive".into()));
        }
        if self.rotation_choices.is_empty() {
            return Err(Error::Augment("rotation_choices is empty".into()));
        }
        if let Some(r) = self.rotation_choices.iter().find(|&&r| r % 90 != 0) {
            return Err(Error::Augment(format!(
                "rotation {r} is not a multiple of 90 degrees"
            )));
        }
        check_prob("hflip_prob", self.hflip_prob)?;
        check_prob("vflip_prob", self.vflip_prob)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongAugSpec {
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub cutmix_prob: f64,
    pub cutmix_area_range: (f64, f64),
}

impl Default for StrongAugSpec {
    fn default() -> Self {
        Self::unimatch_default()
    }
}

impl StrongAugSpec {
    /// Color jitter (0.5, 0.5, 0.5, 0.25) at p=0.8, grayscale p=0.2, blur p=0.5,
    /// CutMix p=0.5.
    pub fn unimatch_default() -> Self {
        Self {
            jitter_brightness: 0.5,
            jitter_contrast: 0.5,
            jitter_saturation: 0.5,
            jitter_hue: 0.25,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_range: (0.1, 2.0),
            cutmix_prob: 0.5,
            cutmix_area_range: (0.02, 0.4),
        }
    }

    /// Same photometric set with CutMix disabled.
    pub fn paper_faithful() -> Self {
        Self {
            cutmix_prob: 0.0,
            ..Self::unimatch_default()
        }
    }

    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            cutmix_prob: 0.0,
            ..Self::unimatch_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_prob("jitter_prob", self.jitter_prob)?;
        check_prob("grayscale_prob", self.grayscale_prob)?;
        check_prob("blur_prob", self.blur_prob)?;
        check_prob("cutmix_prob", self.cutmix_prob)?;
        for (name, v) in [
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
            ("jitter_saturation", self.jitter_saturation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Augment(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.jitter_hue) {
            return Err(Error::Augment(format!(
                "jitter_hue must lie in [0, 0.5], got {}",
                self.jitter_hue
            )));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Augment(format!("bad blur_sigma_range ({lo}, {hi})")));
        }
        let (lo, hi) = self.cutmix_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Augment(format!(
                "cutmix_area_range ({lo}, {hi}) must lie within (0, 1)"
            )));
        }
        Ok(())
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Augment(format!("{name} must lie in [0, 1], got {p}")))
    }
}

/// Record of a weak transform: square crop, then clockwise quarter turns, then flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub crop_x: u32,
    pub crop_y: u32,
    pub crop_size: u32,
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Geometry {
    /// Maps an output coordinate back to the source coordinate it was taken from.
    pub fn source_of(&self, x: u32, y: u32) -> (u32, u32) {
        let last = self.crop_size - 1;
        let (mut x, mut y) = (x, y);
        if self.vflip {
            y = last - y;
        }
        if self.hflip {
            x = last - x;
        }
        // one clockwise turn sends source (sx, sy) to (last - sy, sx)
        for _ in 0..self.quarter_turns % 4 {
            (x, y) = (y, last - x);
        }
        (x + self.crop_x, y + self.crop_y)
    }

    fn check_source(&self, width: u32, height: u32) -> Result<()> {
        if self.crop_x + self.crop_size > width || self.crop_y + self.crop_size > height {
            return Err(Error::Augment(format!(
                "crop {}px at ({}, {}) exceeds a {width}x{height} input",
                self.crop_size, self.crop_x, self.crop_y
            )));
        }
        Ok(())
    }

    pub fn apply_image(&self, image: &RgbImage) -> Result<RgbImage> {
        self.check_source(image.width(), image.height())?;
        Ok(RgbImage::from_fn(self.crop_size, self.crop_size, |x, y| {
            let (sx, sy) = self.source_of(x, y);
            *image.get_pixel(sx, sy)
        }))
    }

    pub fn apply_mask(&self, mask: &SegMask) -> Result<SegMask> {
        self.check_source(mask.width() as u32, mask.height() as u32)?;
        let s = self.crop_size as usize;
        Ok(SegMask::from_fn(s, s, |x, y| {
            let (sx, sy) = self.source_of(x as u32, y as u32);
            mask.get(sx as usize, sy as usize) == 1
        }))
    }
}

pub fn sample_geometry(width: u32, height: u32, spec: &WeakAugSpec, seed: u64) -> Result<Geometry> {
    spec.validate()?;
    if spec.crop_size > width || spec.crop_size > height {
        return Err(Error::Augment(format!(
            "crop size {} exceeds a {width}x{height} input",
            spec.crop_size
        )));
    }
    let mut rng = rng::seeded(seed, stream::WEAK);
    let crop_x = rng.random_range(0..=width - spec.crop_size);
    let crop_y = rng.random_range(0..=height - spec.crop_size);
    let degrees = *spec.rotation_choices.choose(&mut rng).expect("validated non-empty");
    let hflip = rng.random_bool(spec.hflip_prob);
    let vflip = rng.random_bool(spec.vflip_prob);
    Ok(Geometry {
        crop_x,
        crop_y,
        crop_size: spec.crop_size,
        quarter_turns: ((degrees / 90) % 4) as u8,
        hflip,
        vflip,
    })
}

pub fn weak_augment(
    image: &RgbImage,
    mask: Option<&SegMask>,
    spec: &WeakAugSpec,
    seed: u64,
) -> Result<(RgbImage, Option<SegMask>, Geometry)> {
    if let Some(m) = mask {
        if m.dims() != (image.width() as usize, image.height() as usize) {
            return Err(Error::Shape {
                what: "mask paired with image".into(),
                expected: vec![image.height() as usize, image.width() as usize],
                actual: vec![m.height(), m.width()],
            });
        }
    }
    let geometry = sample_geometry(image.width(), image.height(), spec, seed)?;
    let out = geometry.apply_image(image)?;
    let out_mask = mask.map(|m| geometry.apply_mask(m)).transpose()?;
    Ok((out, out_mask, geometry))
}

/// Rectangle `[x0, x1) × [y0, y1)` pasted from a partner image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutMixBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    /// Index of the partner within the batch, when known.
    pub partner: Option<usize>,
}

impl CutMixBox {
    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> u32 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Draws a box covering an area fraction in `area_range` with aspect ratio in
/// `[0.3, 1/0.3]`, clipped to fit inside the image.
pub fn sample_cutmix_box(width: u32, height: u32, area_range: (f64, f64), rng: &mut rng::Rng) -> CutMixBox {
    let area = rng.random_range(area_range.0..=area_range.1) * (width * height) as f64;
    let ratio = rng.random_range(0.3..=1.0 / 0.3);
    let bw = ((area / ratio).sqrt().round() as u32).clamp(1, width);
    let bh = ((area * ratio).sqrt().round() as u32).clamp(1, height);
    let x0 = rng.random_range(0..=width - bw);
    let y0 = rng.random_range(0..=height - bh);
    CutMixBox {
        x0,
        y0,
        x1: x0 + bw,
        y1: y0 + bh,
        partner: None,
    }
}

#[derive(Debug, Clone, Copy)]
enum Jitter {
    Brightness(f32),
    Contrast(f32),
    Saturation(f32),
    Hue(f32),
}

/// All random draws of one strong augmentation, made up front.
#[derive(Debug, Clone)]
struct StrongPlan {
    jitter: Option<Vec<Jitter>>,
    grayscale: bool,
    blur_sigma: Option<f64>,
    cutmix: Option<CutMixBox>,
}

fn factor(rng: &mut rng::Rng, strength: f64) -> f32 {
    if strength == 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength) as f32
    }
}

fn plan_strong(width: u32, height: u32, spec: &StrongAugSpec, seed: u64) -> StrongPlan {
    let mut rng = rng::seeded(seed, stream::STRONG);
    let jitter = rng.random_bool(spec.jitter_prob).then(|| {
        let mut ops = vec![
            Jitter::Brightness(factor(&mut rng, spec.jitter_brightness)),
            Jitter::Contrast(factor(&mut rng, spec.jitter_contrast)),
            Jitter::Saturation(factor(&mut rng, spec.jitter_saturation)),
            Jitter::Hue(if spec.jitter_hue == 0.0 {
                0.0
            } else {
                rng.random_range(-spec.jitter_hue..=spec.jitter_hue) as f32
            }),
        ];
        ops.shuffle(&mut rng);
        ops
    });
    let grayscale = rng.random_bool(spec.grayscale_prob);
    let blur_sigma = rng
        .random_bool(spec.blur_prob)
        .then(|| rng.random_range(spec.blur_sigma_range.0..=spec.blur_sigma_range.1));
    let cutmix = rng
        .random_bool(spec.cutmix_prob)
        .then(|| sample_cutmix_box(width, height, spec.cutmix_area_range, &mut rng));
    StrongPlan {
        jitter,
        grayscale,
        blur_sigma,
        cutmix,
    }
}

/// Planar float copy of an RGB image, values in [0, 1].
struct Planes {
    w: usize,
    h: usize,
    c: [Vec<f32>; 3],
}

impl Planes {
    fn from_image(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut c = [vec![0f32; w * h], vec![0f32; w * h], vec![0f32; w * h]];
        for (i, p) in img.pixels().enumerate() {
            for k in 0..3 {
                c[k][i] = p[k] as f32 / 255.0;
            }
        }
        Self { w, h, c }
    }

    fn to_image(&self) -> RgbImage {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        RgbImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            let i = y as usize * self.w + x as usize;
            Rgb([q(self.c[0][i]), q(self.c[1][i]), q(self.c[2][i])])
        })
    }

    fn gray(&self, i: usize) -> f32 {
        0.299 * self.c[0][i] + 0.587 * self.c[1][i] + 0.114 * self.c[2][i]
    }

    fn blend(&mut self, f: f32, other: impl Fn(&Self, usize) -> f32) {
        for i in 0..self.w * self.h {
            let o = other(self, i);
            for k in 0..3 {
                self.c[k][i] = (f * self.c[k][i] + (1.0 - f) * o).clamp(0.0, 1.0);
            }
        }
    }

    fn jitter(&mut self, op: Jitter) {
        match op {
            Jitter::Brightness(f) => self.blend(f, |_, _| 0.0),
            Jitter::Contrast(f) => {
                let n = (self.w * self.h).max(1) as f32;
                let mean = (0..self.w * self.h).map(|i| self.gray(i)).sum::<f32>() / n;
                self.blend(f, |_, _| mean);
            }
            Jitter::Saturation(f) => self.blend(f, |p, i| p.gray(i)),
            Jitter::Hue(delta) => {
                if delta != 0.0 {
                    for i in 0..self.w * self.h {
                        let (h, s, v) = rgb_to_hsv(self.c[0][i], self.c[1][i], self.c[2][i]);
                        let (r, g, b) = hsv_to_rgb((h + delta).rem_euclid(1.0), s, v);
                        self.c[0][i] = r;
                        self.c[1][i] = g;
                        self.c[2][i] = b;
                    }
                }
            }
        }
    }

    fn grayscale(&mut self) {
        for i in 0..self.w * self.h {
            let g = self.gray(i);
            for k in 0..3 {
                self.c[k][i] = g;
            }
        }
    }

    /// Separable Gaussian blur with replicated borders.
    fn blur(&mut self, sigma: f64) {
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        let (w, h) = (self.w as isize, self.h as isize);
        let mut tmp = vec![0f32; self.w * self.h];
        for plane in self.c.iter_mut() {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0f32;
                    for (j, k) in kernel.iter().enumerate() {
                        let sx = (x + j as isize - radius).clamp(0, w - 1);
                        acc += k * plane[(y * w + sx) as usize];
                    }
                    tmp[(y * w + x) as usize] = acc;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0f32;
                    for (j, k) in kernel.iter().enumerate() {
                        let sy = (y + j as isize - radius).clamp(0, h - 1);
                        acc += k * tmp[(sy * w + x) as usize];
                    }
                    plane[(y * w + x) as usize] = acc;
                }
            }
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Photometric jitter, grayscale and blur, then optional CutMix from `cutmix_partner`.
pub fn strong_augment(
    image: &RgbImage,
    spec: &StrongAugSpec,
    seed: u64,
    cutmix_partner: Option<&RgbImage>,
) -> Result<(RgbImage, Option<CutMixBox>)> {
    spec.validate()?;
    let (w, h) = image.dimensions();
    let plan = plan_strong(w, h, spec, seed);

    let mut out = if plan.jitter.is_none() && !plan.grayscale && plan.blur_sigma.is_none() {
        image.clone()
    } else {
        let mut planes = Planes::from_image(image);
        for op in plan.jitter.iter().flatten() {
            planes.jitter(*op);
        }
        if plan.grayscale {
            planes.grayscale();
        }
        if let Some(sigma) = plan.blur_sigma {
            planes.blur(sigma);
        }
        planes.to_image()
    };

    if let Some(cm) = plan.cutmix {
        let partner = cutmix_partner
            .ok_or_else(|| Error::Augment("CutMix triggered but no partner image was given".into()))?;
        if partner.dimensions() != (w, h) {
            return Err(Error::Shape {
                what: "CutMix partner".into(),
                expected: vec![h as usize, w as usize],
                actual: vec![partner.height() as usize, partner.width() as usize],
            });
        }
        for y in cm.y0..cm.y1 {
            for x in cm.x0..cm.x1 {
                out.put_pixel(x, y, *partner.get_pixel(x, y));
            }
        }
    }
    Ok((out, plan.cutmix))
}

/// One weak view and two strong views of the same image.
#[derive(Debug, Clone)]
pub struct AugmentedViews {
    pub weak_image: RgbImage,
    pub weak_mask: Option<SegMask>,
    pub strong_image_1: RgbImage,
    pub strong_image_2: RgbImage,
    pub applied_geometry: Geometry,
    /// CutMix box of each strong stream, if one was pasted.
    pub cutmix_boxes: [Option<CutMixBox>; 2],
}

/// Weak view with `seeds.0`; each strong view is `strong_augment` of the weak view.
/// `partner` must already live in weak-view coordinates (same size as the crop).
pub fn make_views(
    image: &RgbImage,
    mask: Option<&SegMask>,
    spec_w: &WeakAugSpec,
    spec_s: &StrongAugSpec,
    seeds: (u64, u64, u64),
    partner: Option<&RgbImage>,
) -> Result<AugmentedViews> {
    if seeds.1 == seeds.2 {
        return Err(Error::Augment(
            "the two strong streams need distinct seeds".into(),
        ));
    }
    let (weak_image, weak_mask, geometry) = weak_augment(image, mask, spec_w, seeds.0)?;
    let (strong_image_1, box1) = strong_augment(&weak_image, spec_s, seeds.1, partner)?;
    let (strong_image_2, box2) = strong_augment(&weak_image, spec_s, seeds.2, partner)?;
    Ok(AugmentedViews {
        weak_image,
        weak_mask,
        strong_image_1,
        strong_image_2,
        applied_geometry: geometry,
        cutmix_boxes: [box1, box2],
    })
}
