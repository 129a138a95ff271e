//! Binary segmentation masks.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// Per-pixel binary label grid, row-major. `0` is background, `1` is glomerulus.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SegMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape {
                what: "mask buffer".into(),
                expected: vec![height, width],
                actual: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask value {v} is not in {{0,1}}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Loads an 8-bit single-channel PNG. Masks stored as `{0,255}` are mapped to
    /// `{0,1}`; masks already stored as `{0,1}` are taken verbatim.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let raw = img.into_raw();
        let max = raw.iter().copied().max().unwrap_or(0);
        let data = if max <= 1 {
            raw
        } else {
            raw.into_iter().map(|v| (v >= 128) as u8).collect()
        };
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// Writes the mask as a `{0,255}` grayscale PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray_image()
            .save(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(x as usize, y as usize) * 255])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary_values() {
        assert!(SegMask::from_vec(2, 1, vec![0, 2]).is_err());
        assert!(SegMask::from_vec(2, 2, vec![0, 1]).is_err());
        let m = SegMask::from_vec(2, 1, vec![0, 1]).unwrap();
        assert_eq!(m.count_ones(), 1);
    }

    #[test]
    fn png_round_trip_maps_255_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = SegMask::from_fn(5, 3, |x, y| (x + y) % 2 == 0);
        m.save(&path).unwrap();
        assert_eq!(SegMask::load(&path).unwrap(), m);
    }
}
