//! On-disk feature dumps.
//!
//! One pair of files per slice in the output directory:
//!
//! ```text
//! slice_0007.f32   C·H·W little-endian f32 values, channel-major
//!                  (all of channel 0 row by row, then channel 1, ...)
//! slice_0007.json  {"slice": 7, "channels": C, "height": H, "width": W,
//!                   "dtype": "f32le", "layout": "chw", "checkpoint": "<id hex>"}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volcodec::nn::Tensor;

use crate::failure::{Context, Failure, Outcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub slice: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub layout: String,
    pub checkpoint: String,
}

fn stem(slice: usize) -> String {
    format!("slice_{slice:04}")
}

pub fn write_dump(dir: &Path, features: &[Tensor], model_id: u64) -> Outcome<Vec<PathBuf>> {
    fs::create_dir_all(dir).context(dir.display())?;
    let mut written = Vec::with_capacity(features.len());
    for (z, f) in features.iter().enumerate() {
        let (c, h, w) = f.chw();
        let bytes: Vec<u8> = f.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let bin = dir.join(format!("{}.f32", stem(z)));
        fs::write(&bin, bytes).context(bin.display())?;
        let side = Sidecar {
            slice: z,
            channels: c,
            height: h,
            width: w,
            dtype: "f32le".into(),
            layout: "chw".into(),
            checkpoint: format!("{model_id:016x}"),
        };
        let json = dir.join(format!("{}.json", stem(z)));
        fs::write(&json, serde_json::to_vec_pretty(&side).expect("sidecar serializes")).context(json.display())?;
        written.push(bin);
    }
    Ok(written)
}

/// Read every slice dump in `dir`, ordered by slice index.
pub fn read_dump(dir: &Path) -> Outcome<Vec<Tensor>> {
    let mut sides = Vec::new();
    for entry in fs::read_dir(dir).context(dir.display())? {
        let path = entry.context(dir.display())?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read(&path).context(path.display())?;
            let s: Sidecar =
                serde_json::from_slice(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            sides.push(s);
        }
    }
    if sides.is_empty() {
        return Err(Failure::Data(format!("{}: no feature sidecars", dir.display())));
    }
    sides.sort_by_key(|s| s.slice);
    if sides.iter().enumerate().any(|(i, s)| s.slice != i) {
        return Err(Failure::Data(format!("{}: slice indices are not contiguous from 0", dir.display())));
    }
    sides
        .iter()
        .map(|s| {
            if s.dtype != "f32le" || s.layout != "chw" {
                return Err(Failure::Data(format!("slice {}: unsupported dump {}/{}", s.slice, s.dtype, s.layout)));
            }
            let bin = dir.join(format!("{}.f32", stem(s.slice)));
            let bytes = fs::read(&bin).context(bin.display())?;
            let n = s.channels * s.height * s.width;
            if bytes.len() != n * 4 {
                return Err(Failure::Data(format!("{}: {} bytes, expected {}", bin.display(), bytes.len(), n * 4)));
            }
            let data = bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
            Tensor::from_vec(&[s.channels, s.height, s.width], data).data(bin.display())
        })
        .collect()
}
