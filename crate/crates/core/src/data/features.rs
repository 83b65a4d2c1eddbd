//! Precomputed feature-map files.
//!
//! Layout, all little-endian:
//!
//! | bytes | content                        |
//! |-------|--------------------------------|
//! | 8     | magic `KERLFEAT`               |
//! | 4     | `u32` version (1)              |
//! | 12    | `u32` height, width, channels  |
//! | 4·HWD | `f32` values, row-major H, W, D |

use std::path::Path;

use ndarray::Array3;

use crate::error::{KerlError, Result};

const MAGIC: &[u8; 8] = b"KERLFEAT";
const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 * 4;

pub fn encode_features(fmap: &Array3<f64>) -> Vec<u8> {
    let (h, w, d) = fmap.dim();
    let mut out = Vec::with_capacity(HEADER + 4 * fmap.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, h as u32, w as u32, d as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in fmap.as_standard_layout().iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Array3<f64>> {
    let bad = |msg: String| KerlError::parse(path, 1, msg);
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(bad("not a feature tensor file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != VERSION as usize {
        return Err(bad(format!("unsupported feature file version {}", word(0))));
    }
    let (h, w, d) = (word(1), word(2), word(3));
    let n = h * w * d;
    if n == 0 {
        return Err(bad(format!("empty feature map {h}x{w}x{d}")));
    }
    if bytes.len() != HEADER + 4 * n {
        return Err(bad(format!(
            "expected {} value bytes for {h}x{w}x{d}, found {}",
            4 * n,
            bytes.len() - HEADER
        )));
    }
    let values: Vec<f64> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(KerlError::NonFinite {
            context: format!("feature file {}", path.display()),
        });
    }
    Ok(Array3::from_shape_vec((h, w, d), values).expect("length checked"))
}

pub fn save_features(fmap: &Array3<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_features(fmap)).map_err(|e| KerlError::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Array3<f64>> {
    let bytes = std::fs::read(path).map_err(|e| KerlError::io(path, e))?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let fmap = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 12 + j * 4 + k) as f64 * 0.25 - 1.0);
        let back = decode_features(&encode_features(&fmap), Path::new("f")).unwrap();
        assert_eq!(back, fmap);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let fmap = Array3::<f64>::ones((1, 1, 2));
        let mut bytes = encode_features(&fmap);
        assert!(decode_features(&bytes[..bytes.len() - 1], Path::new("f")).is_err());
        bytes[0] = b'X';
        assert!(decode_features(&bytes, Path::new("f")).is_err());
    }
}
