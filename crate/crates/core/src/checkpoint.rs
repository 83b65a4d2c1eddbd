//! Model checkpoints.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! magic    8 bytes  "KERLCKPT"
//! version  u32      1
//! snapshot u32 len + UTF-8 TOML (training config, class count, seed, epochs)
//! graph    u32 len + UTF-8 graph text (len 0 when the variant has no graph)
//! tensors  u32 count, then per tensor:
//!          u32 name len + name, u32 rank, u64 dims[rank], f64 values (row-major)
//! ```
//!
//! Sketch hashes are regenerated from the stored seed and dimensions.
//! Tensors named `regions.*` hold the region head and `scorer.*` the embedded
//! score model, when present.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KerlError, Result};
use crate::graph::KnowledgeGraph;
use crate::model::{Model, RegionHead, Variant};
use crate::nn::{Linear, ParamGroup};
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"KERLCKPT";
const VERSION: u32 = 1;

/// Everything except the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub num_classes: usize,
    /// Seed of the run; data order and flips are derived from it.
    pub seed: u64,
    pub epochs_completed: usize,
    /// Where the graph was read from, for reference only; the text is embedded.
    pub graph_path: Option<String>,
    pub config: TrainConfig,
}

impl Snapshot {
    pub fn for_model(model: &Model, config: &TrainConfig, epochs_completed: usize, graph_path: Option<&Path>) -> Self {
        let mut config = config.clone();
        config.variant = model.variant;
        config.model = model.config.clone();
        Self {
            num_classes: model.num_classes,
            seed: config.seed,
            epochs_completed,
            graph_path: graph_path.map(|p| p.display().to_string()),
            config,
        }
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_tensors(out: &mut Vec<u8>, prefix: &str, tensors: Vec<(String, Vec<usize>, &[f64])>) -> u32 {
    let n = tensors.len() as u32;
    for (name, shape, values) in tensors {
        push_str(out, &format!("{prefix}{name}"));
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    n
}

pub fn encode_checkpoint(model: &Model, snapshot: &Snapshot) -> Result<Vec<u8>> {
    if snapshot.num_classes != model.num_classes || snapshot.config.variant != model.variant {
        return Err(KerlError::Invalid("snapshot does not describe this model".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let toml = toml::to_string(snapshot).map_err(|e| KerlError::Invalid(format!("config snapshot: {e}")))?;
    push_str(&mut out, &toml);
    push_str(&mut out, &model.graph.as_ref().map(KnowledgeGraph::to_text).unwrap_or_default());
    let mut body = Vec::new();
    let mut count = push_tensors(&mut body, "", model.params.tensors());
    if let Some(head) = &model.region_head {
        count += push_tensors(&mut body, "", head.tensors());
    }
    if let Some(scorer) = &model.scorer {
        count += push_tensors(&mut body, "scorer.", scorer.params.tensors());
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.bad(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.bad(format!("{what} is not UTF-8")))
    }

    fn bad(&self, message: String) -> KerlError {
        KerlError::parse(self.path, 0, format!("{message} (byte {})", self.pos))
    }
}

struct Tensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn fill<P: ParamGroup>(group: &mut P, prefix: &str, tensors: &mut Vec<Tensor>, path: &Path) -> Result<()> {
    let shapes: Vec<(String, Vec<usize>)> = group.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    for ((name, dst), (_, shape)) in group.tensors_mut().into_iter().zip(shapes) {
        let full = format!("{prefix}{name}");
        let i = tensors
            .iter()
            .position(|t| t.name == full)
            .ok_or_else(|| KerlError::parse(path, 0, format!("tensor {full} is missing")))?;
        let t = tensors.swap_remove(i);
        if t.shape != shape {
            return Err(KerlError::parse(
                path,
                0,
                format!("tensor {full} has shape {:?}, model expects {shape:?}", t.shape),
            ));
        }
        dst.copy_from_slice(&t.values);
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, Snapshot)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(r.bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.bad(format!("unsupported checkpoint version {version}")));
    }
    let toml_text = r.string("config snapshot")?;
    let snapshot: Snapshot =
        toml::from_str(&toml_text).map_err(|e| KerlError::parse(path, 0, format!("config snapshot: {e}")))?;
    let graph_text = r.string("graph")?;
    let graph = if graph_text.is_empty() {
        None
    } else {
        Some(KnowledgeGraph::parse(&graph_text, path)?)
    };
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor shape")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &name)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(r.bad("trailing bytes after the tensor table".into()));
    }

    // Parameters are overwritten below; the generator only fixes shapes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = &snapshot.config;
    let mut model = Model::new(cfg.variant, cfg.model.clone(), snapshot.num_classes, graph, &mut rng)?;
    fill(&mut model.params, "", &mut tensors, path)?;
    if let Some(i) = tensors.iter().position(|t| t.name == "regions.cls.w") {
        let shape = tensors[i].shape.clone();
        if shape.len() != 2 {
            return Err(KerlError::parse(path, 0, "regions.cls.w must be a matrix"));
        }
        let mut head = RegionHead {
            cls: Linear::zeros(shape[1], shape[0]),
        };
        fill(&mut head, "", &mut tensors, path)?;
        model.region_head = Some(head);
    }
    if tensors.iter().any(|t| t.name.starts_with("scorer.")) {
        let mut scorer = Model::new(Variant::Baseline, cfg.model.clone(), snapshot.num_classes, None, &mut rng)?;
        fill(&mut scorer.params, "scorer.", &mut tensors, path)?;
        model.scorer = Some(Box::new(scorer));
    }
    if let Some(t) = tensors.first() {
        return Err(KerlError::parse(path, 0, format!("unexpected tensor {}", t.name)));
    }
    Ok((model, snapshot))
}

pub fn save_checkpoint(model: &Model, snapshot: &Snapshot, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, snapshot)?;
    std::fs::write(path, bytes).map_err(|e| KerlError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Snapshot)> {
    let bytes = std::fs::read(path).map_err(|e| KerlError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Default sibling path for a checkpoint's metrics file.
pub fn metrics_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("metrics.csv")
}
