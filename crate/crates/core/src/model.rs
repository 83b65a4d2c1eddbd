//! End-to-end classifier: backbone (or precomputed maps), per-location
//! sketching, one of four heads, and the optional highlighted-region head.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cbp::{make_sketch_params, pool_traced, CbpTrace, PostNorm, SketchParams};
use crate::data::backbone::{backbone_forward, BackboneConfig, BackboneParams, BackboneTrace};
use crate::data::image::RgbImage;
use crate::data::{Sample, SampleInput};
use crate::error::{KerlError, Result};
use crate::fusion::{
    gate_forward, l2_normalize, l2_normalize_backward, sum_pool, sum_pool_backward, FusionConfig, FusionParams,
    GateMap, GateNet, GateTrace,
};
use crate::ggnn::{initial_states, run_traced, GgnnConfig, GgnnParams, GgnnTrace};
use crate::graph::KnowledgeGraph;
use crate::nn::{softmax, Linear, ParamGroup};
use crate::regions::{crop_and_map, location_scores, propose_regions, CropSpec, Region, RegionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    SelfGuided,
    Concat,
    #[default]
    Kerl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::SelfGuided, Variant::Concat, Variant::Kerl];

    pub fn uses_graph(self) -> bool {
        matches!(self, Variant::Concat | Variant::Kerl)
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, Variant::SelfGuided | Variant::Kerl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SelfGuided => "self_guided",
            Variant::Concat => "concat",
            Variant::Kerl => "kerl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = KerlError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| KerlError::Invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchConfig {
    /// Sketch width `c`.
    pub c: usize,
    pub seed: u64,
    pub post: PostNorm,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            c: 256,
            seed: 0,
            post: PostNorm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Inputs are precomputed `H' × W' × feature_dim` maps and the backbone is skipped.
    pub precomputed: bool,
    pub feature_dim: usize,
    pub sketch: SketchConfig,
    pub ggnn: GgnnConfig,
    pub fusion: FusionConfig,
    pub regions: RegionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            precomputed: false,
            feature_dim: 64,
            sketch: SketchConfig::default(),
            ggnn: GgnnConfig::default(),
            fusion: FusionConfig::default(),
            regions: RegionConfig::desk(),
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        if self.precomputed {
            self.feature_dim
        } else {
            self.backbone.out_channels()
        }
    }
}

/// Trainable tensors, grouped by optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Option<BackboneParams>,
    pub ggnn: Option<GgnnParams>,
    pub fusion: FusionParams,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.as_ref().map(BackboneParams::zeros_like),
            ggnn: self.ggnn.as_ref().map(|g| {
                let mut z = g.clone();
                crate::nn::scale(&mut z, 0.0);
                z
            }),
            fusion: self.fusion.zeros_like(),
        }
    }
}

impl ParamGroup for ModelParams {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        if let Some(b) = &self.backbone {
            out.extend(b.tensors());
        }
        if let Some(g) = &self.ggnn {
            out.extend(g.tensors());
        }
        out.extend(self.fusion.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.backbone {
            out.extend(b.tensors_mut());
        }
        if let Some(g) = &mut self.ggnn {
            out.extend(g.tensors_mut());
        }
        out.extend(self.fusion.tensors_mut());
        out
    }
}

/// Gradients for a model and, when scores flow through, its embedded scorer.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub params: ModelParams,
    pub scorer: Option<Box<ModelGrads>>,
}

impl ModelGrads {
    pub fn add_scaled(&mut self, other: &ModelGrads, alpha: f64) {
        crate::nn::add_scaled(&mut self.params, &other.params, alpha);
        if let (Some(a), Some(b)) = (&mut self.scorer, &other.scorer) {
            a.add_scaled(b, alpha);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        crate::nn::scale(&mut self.params, alpha);
        if let Some(s) = &mut self.scorer {
            s.scale(alpha);
        }
    }
}

/// Region-crop classifier: `k` sum-pooled crop descriptors, each unit
/// normalized, concatenated and mapped to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionHead {
    pub cls: Linear,
}

impl ParamGroup for RegionHead {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        self.cls.push_tensors("regions.cls", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.cls.push_tensors_mut("regions.cls", &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    pub num_classes: usize,
    pub sketch: SketchParams,
    pub params: ModelParams,
    pub graph: Option<KnowledgeGraph>,
    a_full: Option<Array2<f64>>,
    /// Online score source used when gradients flow into the scorer.
    pub scorer: Option<Box<Model>>,
    pub region_head: Option<RegionHead>,
}

enum Head {
    Baseline,
    Concat { ggnn: GgnnTrace },
    Gated { gate: GateTrace, ggnn: Option<GgnnTrace> },
}

/// Every intermediate of one forward pass.
pub struct ForwardTrace {
    backbone: Option<BackboneTrace>,
    /// Backbone output (or the precomputed map), `H' × W' × d`.
    pub features: Array3<f64>,
    cbp: CbpTrace,
    head: Head,
    /// Pooled image vector before optional normalization.
    pooled: Array1<f64>,
    cls_input: Array1<f64>,
    pub logits: Array1<f64>,
    pub scores: Option<Vec<f64>>,
    scorer: Option<Box<ForwardTrace>>,
}

impl ForwardTrace {
    pub fn probabilities(&self) -> Array1<f64> {
        softmax(self.logits.view())
    }

    pub fn gate_map(&self) -> Option<GateMap> {
        match &self.head {
            Head::Gated { gate, .. } => Some(gate.gate_map()),
            _ => None,
        }
    }

    /// Map whose channel sums drive visualization and region proposals: the
    /// magnitudes of the gated sketch features for gated heads, the backbone
    /// features otherwise. Both are non-negative.
    pub fn saliency_source(&self) -> Array3<f64> {
        match &self.head {
            Head::Gated { gate, .. } => gate.gated_features().mapv(f64::abs),
            _ => self.features.clone(),
        }
    }
}

impl Model {
    pub fn new<R: Rng>(
        variant: Variant,
        config: ModelConfig,
        num_classes: usize,
        graph: Option<KnowledgeGraph>,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(KerlError::Invalid("a classifier needs at least two classes".into()));
        }
        if variant.uses_graph() {
            let g = graph
                .as_ref()
                .ok_or_else(|| KerlError::Missing(format!("variant {variant} needs a knowledge graph")))?;
            if g.num_categories() != num_classes {
                return Err(KerlError::Shape(format!(
                    "graph has {} categories, dataset has {num_classes}",
                    g.num_categories()
                )));
            }
            config.ggnn.validate()?;
        }
        let graph = if variant.uses_graph() { graph } else { None };
        let d = config.feature_channels();
        let c = config.sketch.c;
        let sketch = make_sketch_params(d, c, config.sketch.seed)?;
        let backbone = if config.precomputed {
            None
        } else {
            Some(BackboneParams::init(&config.backbone, rng)?)
        };
        let knowledge = graph.as_ref().map_or(0, |g| config.ggnn.repr_len(g.num_nodes()));
        let ggnn = if variant.uses_graph() {
            Some(GgnnParams::init(&config.ggnn, rng))
        } else {
            None
        };
        let gate = match variant {
            Variant::Kerl => Some(GateNet::init(c, knowledge, &config.fusion, rng)),
            Variant::SelfGuided => Some(GateNet::init(c, 0, &config.fusion, rng)),
            _ => None,
        };
        let cls_in = if variant == Variant::Concat { c + knowledge } else { c };
        let cls = Linear::init(cls_in, num_classes, rng);
        let a_full = graph.as_ref().map(|g| g.adjacency().a_full);
        Ok(Self {
            variant,
            config,
            num_classes,
            sketch,
            params: ModelParams {
                backbone,
                ggnn,
                fusion: FusionParams { gate, cls },
            },
            graph,
            a_full,
            scorer: None,
            region_head: None,
        })
    }

    /// Rebuilds derived state after parameters or the graph were replaced.
    pub fn with_graph(mut self, graph: Option<KnowledgeGraph>) -> Self {
        self.a_full = graph.as_ref().map(|g| g.adjacency().a_full);
        self.graph = graph;
        self
    }

    /// Network input for a sample: a resized image tensor or the stored map.
    pub fn input_tensor(&self, sample: &Sample, flip: bool) -> Result<Array3<f64>> {
        match (&sample.input, self.config.precomputed) {
            (SampleInput::Image(img), false) => Ok(self.image_tensor(img, flip)),
            (SampleInput::Features(f), true) => {
                if f.dim().2 != self.config.feature_dim {
                    return Err(KerlError::Shape(format!(
                        "sample {} has {}-channel features, model expects {}",
                        sample.id,
                        f.dim().2,
                        self.config.feature_dim
                    )));
                }
                Ok(if flip { f.slice(s![.., ..;-1, ..]).to_owned() } else { f.clone() })
            }
            (SampleInput::Unloaded(p), _) => Err(KerlError::Missing(format!(
                "sample {} was loaded without its input {}",
                sample.id,
                p.display()
            ))),
            (_, true) => Err(KerlError::Invalid(format!("sample {} is an image; model expects feature maps", sample.id))),
            (_, false) => Err(KerlError::Invalid(format!("sample {} is a feature map; model expects images", sample.id))),
        }
    }

    pub fn image_tensor(&self, img: &RgbImage, flip: bool) -> Array3<f64> {
        let n = self.config.backbone.input_size;
        let img = img.resize(n, n);
        if flip {
            img.flip_horizontal().to_tensor()
        } else {
            img.to_tensor()
        }
    }

    /// Scores for graph initialization: cached values, or the embedded scorer's softmax.
    fn forward_scores(&self, input: &Array3<f64>, cached: Option<&[f64]>) -> Result<(Option<Vec<f64>>, Option<Box<ForwardTrace>>)> {
        if !self.variant.uses_graph() {
            return Ok((None, None));
        }
        if let Some(scorer) = &self.scorer {
            let t = scorer.forward_input(input.clone(), None)?;
            let p = t.probabilities().to_vec();
            return Ok((Some(p), Some(Box::new(t))));
        }
        let s = cached.ok_or_else(|| {
            KerlError::Missing(format!("variant {} needs cached class scores; run pretrain first", self.variant))
        })?;
        Ok((Some(s.to_vec()), None))
    }

    pub fn forward(&self, sample: &Sample, scores: Option<&[f64]>, flip: bool) -> Result<ForwardTrace> {
        let input = self.input_tensor(sample, flip)?;
        self.forward_input(input, scores)
    }

    pub fn forward_input(&self, input: Array3<f64>, scores: Option<&[f64]>) -> Result<ForwardTrace> {
        let (scores, scorer) = self.forward_scores(&input, scores)?;
        let (backbone, features) = match &self.params.backbone {
            Some(p) => {
                let t = backbone_forward(&input, p, &self.config.backbone)?;
                let f = t.output();
                (Some(t), f)
            }
            None => (None, input),
        };
        let cbp = pool_traced(&features, &self.sketch, self.config.sketch.post)?;
        let ggnn = match (&self.params.ggnn, &scores) {
            (Some(params), Some(s)) => {
                let a_full = self.a_full.as_ref().expect("graph variants hold an adjacency");
                let x = initial_states(s, a_full.nrows(), self.config.ggnn.hidden)?.x;
                Some(run_traced(a_full, x, params, &self.config.ggnn)?)
            }
            _ => None,
        };
        let knowledge = ggnn.as_ref().map(GgnnTrace::knowledge);
        let (head, pooled) = match self.variant {
            Variant::Baseline => (Head::Baseline, sum_pool(&cbp.pooled)),
            Variant::Concat => (
                Head::Concat {
                    ggnn: ggnn.expect("concat head has a graph"),
                },
                sum_pool(&cbp.pooled),
            ),
            Variant::SelfGuided | Variant::Kerl => {
                let net = self.params.fusion.gate.as_ref().expect("gated head has a gate");
                let gate = gate_forward(net, &cbp.pooled, knowledge.as_ref())?;
                let pooled = gate.pooled.clone();
                (Head::Gated { gate, ggnn }, pooled)
            }
        };
        let normed = if self.config.fusion.l2_normalize {
            l2_normalize(&pooled)
        } else {
            pooled.clone()
        };
        let cls_input = match &knowledge {
            Some(k) if self.variant == Variant::Concat => {
                let mut v = Array1::zeros(normed.len() + k.len());
                v.slice_mut(s![..normed.len()]).assign(&normed);
                v.slice_mut(s![normed.len()..]).assign(&k.0);
                v
            }
            _ => normed,
        };
        let logits = self.params.fusion.cls.forward(cls_input.view());
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(KerlError::NonFinite {
                context: "classifier logits".into(),
            });
        }
        Ok(ForwardTrace {
            backbone,
            features,
            cbp,
            head,
            pooled,
            cls_input,
            logits,
            scores,
            scorer,
        })
    }

    pub fn logits(&self, sample: &Sample, scores: Option<&[f64]>) -> Result<Array1<f64>> {
        Ok(self.forward(sample, scores, false)?.logits)
    }

    /// Gradients of a loss with upstream `dL/dlogits`.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Array1<f64>) -> Result<ModelGrads> {
        let mut grads = self.params.zeros_like();
        let d_in = self
            .params
            .fusion
            .cls
            .backward(trace.cls_input.view(), d_logits.view(), &mut grads.fusion.cls);
        let c = trace.pooled.len();
        let d_normed = d_in.slice(s![..c]).to_owned();
        let d_pooled = if self.config.fusion.l2_normalize {
            l2_normalize_backward(&trace.pooled, d_normed.view())
        } else {
            d_normed
        };
        let dims = trace.cbp.pooled.dims();
        let (d_map, d_fg, ggnn) = match &trace.head {
            Head::Baseline => (sum_pool_backward(dims, d_pooled.view()), None, None),
            Head::Concat { ggnn } => (
                sum_pool_backward(dims, d_pooled.view()),
                Some(d_in.slice(s![c..]).to_owned()),
                Some(ggnn),
            ),
            Head::Gated { gate, ggnn } => {
                let net = self.params.fusion.gate.as_ref().expect("gated head has a gate");
                let g = grads.fusion.gate.as_mut().expect("gated head has a gate");
                let (d_map, d_fg) = gate.backward(net, d_pooled.view(), g);
                (d_map, d_fg, ggnn.as_ref())
            }
        };
        let mut scorer_grads = None;
        if let (Some(ggnn), Some(d_fg)) = (ggnn, d_fg) {
            let params = self.params.ggnn.as_ref().expect("graph variants hold GGNN parameters");
            let (g, dx) = ggnn.backward(params, &d_fg)?;
            grads.ggnn = Some(g);
            if let (Some(scorer), Some(st)) = (&self.scorer, &trace.scorer) {
                let d_scores = dx.slice(s![..self.num_classes, 0]).to_owned();
                let p = st.probabilities();
                let dot = p.dot(&d_scores);
                let d_scorer_logits = &p * &(d_scores - dot);
                scorer_grads = Some(Box::new(scorer.backward(st, &d_scorer_logits)?));
            }
        }
        if let (Some(bp), Some(bt)) = (&self.params.backbone, &trace.backbone) {
            let d_feat = trace.cbp.backward(&self.sketch, &d_map)?;
            let (g, _) = bt.backward(bp, &d_feat)?;
            grads.backbone = Some(g);
        }
        if self.scorer.is_some() && scorer_grads.is_none() {
            let s = self.scorer.as_ref().expect("checked");
            scorer_grads = Some(Box::new(ModelGrads {
                params: s.params.zeros_like(),
                scorer: None,
            }));
        }
        Ok(ModelGrads {
            params: grads,
            scorer: scorer_grads,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            params: self.params.zeros_like(),
            scorer: self.scorer.as_ref().map(|s| Box::new(s.zero_grads())),
        }
    }

    /// Unit-normalized sum-pooled descriptors of the top regions of one
    /// sample, concatenated; missing regions contribute zeros.
    /// Proposed regions and their crops in network-input pixel coordinates.
    pub fn highlighted_regions(&self, trace: &ForwardTrace) -> Result<Vec<(Region, CropSpec)>> {
        let cfg = &self.config.regions;
        let n = self.config.backbone.input_size;
        let scores = location_scores(&trace.saliency_source());
        propose_regions(&scores, cfg)
            .into_iter()
            .map(|r| crop_and_map(&r, n, n, cfg).map(|c| (r, c)))
            .collect()
    }

    pub fn region_descriptor(&self, sample: &Sample, trace: &ForwardTrace) -> Result<Array1<f64>> {
        let img = match &sample.input {
            SampleInput::Image(img) => img,
            _ => {
                return Err(KerlError::Invalid(
                    "highlighted-region refinement needs image inputs".into(),
                ))
            }
        };
        let cfg = &self.config.regions;
        let n = self.config.backbone.input_size;
        let img = img.resize(n, n);
        let c = self.config.sketch.c;
        let mut out = Array1::zeros(cfg.top_k * c);
        let bp = self.params.backbone.as_ref().expect("image models have a backbone");
        for (i, (_, crop)) in self.highlighted_regions(trace)?.into_iter().enumerate() {
            let patch = img.crop(crop.x, crop.y, crop.w, crop.h)?.resize(crop.resize, crop.resize);
            let fmap = backbone_forward(&patch.to_tensor(), bp, &self.config.backbone)?.output();
            let pooled = sum_pool(&pool_traced(&fmap, &self.sketch, self.config.sketch.post)?.pooled);
            out.slice_mut(s![i * c..(i + 1) * c]).assign(&l2_normalize(&pooled));
        }
        Ok(out)
    }
}
