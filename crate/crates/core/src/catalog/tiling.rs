//! Cutting large exported regions into fixed-size patches.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Shift the last tile on each axis inward so it ends at the image border.
    #[default]
    Clamp,
    /// Discard positions whose tile would overrun the border.
    Drop,
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub x: u32,
    pub y: u32,
    pub patch: RgbImage,
}

/// Start offsets of tiles along one axis of length `len`.
pub fn axis_offsets(len: u32, patch: u32, stride: u32, boundary: Boundary) -> Vec<u32> {
    let mut offsets: Vec<u32> = (0..)
        .map(|i| i * stride)
        .take_while(|&o| o + patch <= len)
        .collect();
    if boundary == Boundary::Clamp {
        let last = len - patch;
        if offsets.last() != Some(&last) {
            offsets.push(last);
        }
    }
    offsets
}

pub fn tile_region(
    image: &RgbImage,
    patch_size: u32,
    stride: u32,
    boundary: Boundary,
) -> Result<Vec<Tile>> {
    let (w, h) = image.dimensions();
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if patch_size == 0 || patch_size > w || patch_size > h {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} does not fit in a {w}x{h} image"
        )));
    }
    let xs = axis_offsets(w, patch_size, stride, boundary);
    let ys = axis_offsets(h, patch_size, stride, boundary);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let patch = image::imageops::crop_imm(image, x, y, patch_size, patch_size).to_image();
            tiles.push(Tile { x, y, patch });
        }
    }
    Ok(tiles)
}
