//! Run-length encoded masks as used by competition-style annotation CSVs.
//!
//! An encoding is a whitespace-separated list of `start length` pairs. Starts are
//! 1-based indices into the flattened mask; the flattening order is either
//! column-major (down each column first, the HuBMAP convention) or row-major.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelOrder {
    #[default]
    ColumnMajor,
    RowMajor,
}

#[inline]
fn coords(index: usize, width: usize, height: usize, order: PixelOrder) -> (usize, usize) {
    match order {
        PixelOrder::ColumnMajor => (index / height, index % height),
        PixelOrder::RowMajor => (index % width, index / width),
    }
}

pub fn decode_rle(rle: &str, height: usize, width: usize, order: PixelOrder) -> Result<SegMask> {
    let total = height * width;
    let tokens: Vec<&str> = rle.split_whitespace().collect();
    if tokens.len() % 2 != 0 {
        return Err(Error::Rle(format!(
            "odd token count {} (expected start/length pairs)",
            tokens.len()
        )));
    }
    let mut mask = SegMask::zeros(width, height);
    let mut ones = 0usize;
    for pair in tokens.chunks_exact(2) {
        let start: usize = pair[0]
            .parse()
            .map_err(|_| Error::Rle(format!("bad start `{}`", pair[0])))?;
        let len: usize = pair[1]
            .parse()
            .map_err(|_| Error::Rle(format!("bad length `{}`", pair[1])))?;
        if start == 0 {
            return Err(Error::Rle("starts are 1-based; got 0".into()));
        }
        let begin = start - 1;
        if begin + len > total {
            return Err(Error::Rle(format!(
                "run {start}+{len} exceeds pixel count {total}"
            )));
        }
        for idx in begin..begin + len {
            let (x, y) = coords(idx, width, height, order);
            if mask.get(x, y) == 1 {
                return Err(Error::Rle(format!("overlapping run at pixel {}", idx + 1)));
            }
            mask.set(x, y, true);
        }
        ones += len;
    }
    debug_assert_eq!(mask.count_ones(), ones);
    Ok(mask)
}

pub fn encode_rle(mask: &SegMask, order: PixelOrder) -> String {
    let (w, h) = mask.dims();
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for idx in 0..w * h {
        let (x, y) = coords(idx, w, h, order);
        match (mask.get(x, y) == 1, run_start) {
            (true, None) => run_start = Some(idx),
            (false, Some(s)) => {
                out.push(format!("{} {}", s + 1, idx - s));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        out.push(format!("{} {}", s + 1, w * h - s));
    }
    out.join(" ")
}

/// Reads a CSV with columns `id,rle` into a map of encodings keyed by id.
pub fn read_rle_csv(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| Error::Rle(format!("{}: missing `id` column", path.display())))?;
    let rle_col = headers
        .iter()
        .position(|h| h == "rle" || h == "encoding")
        .ok_or_else(|| Error::Rle(format!("{}: missing `rle` column", path.display())))?;
    let mut map = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        map.insert(row[id_col].to_string(), row[rle_col].to_string());
    }
    Ok(map)
}
