//! Cached per-sample class-score vectors used to initialize graph states.
//!
//! Binary layout, little-endian: magic `KERLSCOR`, `u32` version (1),
//! `u32` class count `C`, `u64` entry count, then per entry a `u64` sample id
//! followed by `C` `f64` values. Entries are sorted by id.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{KerlError, Result};

const MAGIC: &[u8; 8] = b"KERLSCOR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub num_classes: usize,
    pub entries: BTreeMap<u64, Vec<f64>>,
}

impl ScoreTable {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: u64, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.num_classes {
            return Err(KerlError::Shape(format!(
                "score vector has {} entries, table holds {}",
                scores.len(),
                self.num_classes
            )));
        }
        if scores.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(KerlError::Invalid(format!("scores for sample {id} fall outside [0, 1]")));
        }
        self.entries.insert(id, scores);
        Ok(())
    }

    pub fn get(&self, id: u64) -> Result<&[f64]> {
        self.entries
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| KerlError::Missing(format!("no cached scores for sample {id}; run pretrain first")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.entries.len() * (8 + 8 * self.num_classes));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| KerlError::parse(path, 1, msg.to_string());
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("not a score cache file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad("unsupported score cache version"));
        }
        let c = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let stride = 8 + 8 * c;
        if bytes.len() != 24 + count * stride {
            return Err(bad("score cache length does not match its header"));
        }
        let mut table = ScoreTable::new(c);
        for chunk in bytes[24..].chunks_exact(stride) {
            let id = u64::from_le_bytes(chunk[..8].try_into().expect("8 bytes"));
            let v = chunk[8..]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            table.insert(id, v)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| KerlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| KerlError::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
