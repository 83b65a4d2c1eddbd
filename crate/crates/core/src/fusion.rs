//! Knowledge-gated pooling and the classification heads.
//!
//! For every location `(i, j)` the gate network sees the local sketched
//! feature concatenated with the knowledge representation and produces
//! `σ(g2(tanh(g1([f_ij ; f_g]))))`. The pooled image vector is the sum of the
//! gated local features. The self-guided variant drops the knowledge slot,
//! the concatenation head sum-pools and appends `f_g`, and the baseline head
//! only sum-pools.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cbp::PooledMap;
use crate::error::{KerlError, Result};
use crate::ggnn::KnowledgeRepr;
use crate::nn::{sigmoid, Linear, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Hidden width of the gate network; `None` picks `max(64, c / 2)`.
    pub hidden: Option<usize>,
    /// One gate per location instead of one per location and channel.
    pub scalar_gate: bool,
    /// Unit-normalize the pooled vector before the classifier.
    pub l2_normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            scalar_gate: false,
            l2_normalize: false,
        }
    }
}

impl FusionConfig {
    pub fn hidden_width(&self, c: usize) -> usize {
        self.hidden.unwrap_or_else(|| (c / 2).max(64))
    }
}

/// Two-layer gate network `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNet {
    pub g1: Linear,
    pub g2: Linear,
}

impl GateNet {
    /// `knowledge` is the width of the knowledge slot (0 for self-guided gating).
    pub fn init<R: Rng>(c: usize, knowledge: usize, cfg: &FusionConfig, rng: &mut R) -> Self {
        let m = cfg.hidden_width(c);
        let out = if cfg.scalar_gate { 1 } else { c };
        Self {
            g1: Linear::init(c + knowledge, m, rng),
            g2: Linear::init(m, out, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            g1: Linear::zeros(self.g1.input_dim(), self.g1.output_dim()),
            g2: Linear::zeros(self.g2.input_dim(), self.g2.output_dim()),
        }
    }

    pub fn knowledge_width(&self, c: usize) -> usize {
        self.g1.input_dim().saturating_sub(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub gate: Option<GateNet>,
    pub cls: Linear,
}

impl FusionParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            gate: self.gate.as_ref().map(GateNet::zeros_like),
            cls: Linear::zeros(self.cls.input_dim(), self.cls.output_dim()),
        }
    }
}

impl ParamGroup for FusionParams {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        if let Some(gate) = &self.gate {
            gate.g1.push_tensors("fusion.g1", &mut out);
            gate.g2.push_tensors("fusion.g2", &mut out);
        }
        self.cls.push_tensors("fusion.cls", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        if let Some(gate) = &mut self.gate {
            gate.g1.push_tensors_mut("fusion.g1", &mut out);
            gate.g2.push_tensors_mut("fusion.g2", &mut out);
        }
        self.cls.push_tensors_mut("fusion.cls", &mut out);
        out
    }
}

/// Gate activations, `H' × W' × c` (or `H' × W' × 1` for scalar gating).
#[derive(Debug, Clone, PartialEq)]
pub struct GateMap(pub Array3<f64>);

impl GateMap {
    /// Mean gate over channels at each location.
    pub fn location_mass(&self) -> Array2<f64> {
        self.0.mean_axis(Axis(2)).expect("non-empty channel axis")
    }
}

fn flatten(f_i: &PooledMap) -> Array2<f64> {
    let (rows, cols, c) = f_i.dims();
    f_i.0
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows * cols, c))
        .expect("contiguous map")
}

/// Forward values of one gated pooling pass.
#[derive(Debug, Clone)]
pub struct GateTrace {
    dims: (usize, usize),
    feats: Array2<f64>,
    knowledge: Option<Array1<f64>>,
    hidden: Array2<f64>,
    gates: Array2<f64>,
    pub pooled: Array1<f64>,
}

pub fn gate_forward(net: &GateNet, f_i: &PooledMap, f_g: Option<&KnowledgeRepr>) -> Result<GateTrace> {
    let (rows, cols, c) = f_i.dims();
    let k = f_g.map_or(0, KnowledgeRepr::len);
    if net.g1.input_dim() != c + k {
        return Err(KerlError::Shape(format!(
            "gate network expects input width {}, got {c} image + {k} knowledge",
            net.g1.input_dim()
        )));
    }
    let out_w = net.g2.output_dim();
    if out_w != c && out_w != 1 {
        return Err(KerlError::Shape(format!(
            "gate network emits {out_w} values per location; expected {c} or 1"
        )));
    }
    let feats = flatten(f_i);
    let mut pre = feats.dot(&net.g1.w.slice(s![.., ..c]).t());
    let mut bias = net.g1.b.clone();
    if let Some(fg) = f_g {
        bias += &net.g1.w.slice(s![.., c..]).dot(&fg.0);
    }
    pre += &bias;
    let hidden = pre.mapv(f64::tanh);
    let gates = net.g2.forward_rows(hidden.view()).mapv(sigmoid);

    let pooled = if out_w == 1 {
        feats.t().dot(&gates.column(0))
    } else {
        (&gates * &feats).sum_axis(Axis(0))
    };
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(KerlError::NonFinite {
            context: "gated pooling".into(),
        });
    }
    Ok(GateTrace {
        dims: (rows, cols),
        feats,
        knowledge: f_g.map(|fg| fg.0.clone()),
        hidden,
        gates,
        pooled,
    })
}

impl GateTrace {
    pub fn gate_map(&self) -> GateMap {
        let (rows, cols) = self.dims;
        GateMap(
            self.gates
                .clone()
                .into_shape_with_order((rows, cols, self.gates.ncols()))
                .expect("gate rows"),
        )
    }

    /// Per-location gated features `gate ⊙ f_ij`, the map that gets sum-pooled.
    pub fn gated_features(&self) -> Array3<f64> {
        let (rows, cols) = self.dims;
        // scalar gates broadcast across channels
        let gated = &self.feats * &self.gates;
        gated
            .into_shape_with_order((rows, cols, self.feats.ncols()))
            .expect("feature rows")
    }

    /// Accumulates gate-network gradients and returns `(dL/df_i, dL/df_g)`.
    pub fn backward(
        &self,
        net: &GateNet,
        d_pooled: ArrayView1<f64>,
        grads: &mut GateNet,
    ) -> (Array3<f64>, Option<Array1<f64>>) {
        let (rows, cols) = self.dims;
        let c = self.feats.ncols();
        let scalar = self.gates.ncols() == 1;

        let (mut d_feats, d_gates) = if scalar {
            let d_feats = self.gates.dot(&d_pooled.insert_axis(Axis(0)));
            let d_gates = self.feats.dot(&d_pooled).insert_axis(Axis(1));
            (d_feats, d_gates)
        } else {
            (&self.gates * &d_pooled, &self.feats * &d_pooled)
        };
        let d_gpre = d_gates * &self.gates.mapv(|g| g * (1.0 - g));
        let d_hidden = net.g2.backward_rows(self.hidden.view(), d_gpre.view(), &mut grads.g2);
        let d_pre = d_hidden * &self.hidden.mapv(|h| 1.0 - h * h);

        grads
            .g1
            .w
            .slice_mut(s![.., ..c])
            .scaled_add(1.0, &d_pre.t().dot(&self.feats));
        let d_pre_sum = d_pre.sum_axis(Axis(0));
        grads.g1.b += &d_pre_sum;
        d_feats += &d_pre.dot(&net.g1.w.slice(s![.., ..c]));

        let d_fg = self.knowledge.as_ref().map(|fg| {
            let mut gw = grads.g1.w.slice_mut(s![.., c..]);
            for (mut row, &g) in gw.outer_iter_mut().zip(d_pre_sum.iter()) {
                row.scaled_add(g, fg);
            }
            net.g1.w.slice(s![.., c..]).t().dot(&d_pre_sum)
        });
        let d_feats = d_feats
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols, c))
            .expect("feature rows");
        (d_feats, d_fg)
    }
}

/// Knowledge-gated pooling. Returns the pooled vector and the gate map.
pub fn gated_pool(f_i: &PooledMap, f_g: &KnowledgeRepr, net: &GateNet) -> Result<(Array1<f64>, GateMap)> {
    let trace = gate_forward(net, f_i, Some(f_g))?;
    let gates = trace.gate_map();
    Ok((trace.pooled, gates))
}

/// Gated pooling driven by the image features alone.
pub fn self_guided_pool(f_i: &PooledMap, net: &GateNet) -> Result<(Array1<f64>, GateMap)> {
    let trace = gate_forward(net, f_i, None)?;
    let gates = trace.gate_map();
    Ok((trace.pooled, gates))
}

pub fn sum_pool(f_i: &PooledMap) -> Array1<f64> {
    let (rows, cols, c) = f_i.dims();
    f_i.0
        .view()
        .into_shape_with_order((rows * cols, c))
        .map(|v| v.sum_axis(Axis(0)))
        .unwrap_or_else(|_| f_i.0.sum_axis(Axis(0)).sum_axis(Axis(0)))
}

/// Affine class scores; softmax is left to the loss and evaluation code.
pub fn classify(f: ArrayView1<f64>, cls: &Linear) -> Result<Array1<f64>> {
    if f.len() != cls.input_dim() {
        return Err(KerlError::Shape(format!(
            "classifier expects {} inputs, got {}",
            cls.input_dim(),
            f.len()
        )));
    }
    Ok(cls.forward(f))
}

pub fn concat_input(f_i: &PooledMap, f_g: &KnowledgeRepr) -> Array1<f64> {
    let pooled = sum_pool(f_i);
    let mut joint = Array1::zeros(pooled.len() + f_g.len());
    joint.slice_mut(s![..pooled.len()]).assign(&pooled);
    joint.slice_mut(s![pooled.len()..]).assign(&f_g.0);
    joint
}

/// Sum-pooled image feature concatenated with `f_g`, then one affine map.
pub fn concat_head(f_i: &PooledMap, f_g: &KnowledgeRepr, cls: &Linear) -> Result<Array1<f64>> {
    classify(concat_input(f_i, f_g).view(), cls)
}

/// Sum pooling followed by the classifier.
pub fn baseline_head(f_i: &PooledMap, cls: &Linear) -> Result<Array1<f64>> {
    classify(sum_pool(f_i).view(), cls)
}

/// Broadcasts the gradient of a sum-pooled vector back over all locations.
pub fn sum_pool_backward(dims: (usize, usize, usize), d_pooled: ArrayView1<f64>) -> Array3<f64> {
    let (rows, cols, c) = dims;
    Array3::from_shape_fn((rows, cols, c), |(_, _, k)| d_pooled[k])
}

/// `y = f / ‖f‖` and its backward.
pub fn l2_normalize(f: &Array1<f64>) -> Array1<f64> {
    let norm = (f.dot(f) + 1e-12).sqrt();
    f / norm
}

pub fn l2_normalize_backward(f: &Array1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
    let norm = (f.dot(f) + 1e-12).sqrt();
    let y = f / norm;
    let proj = y.dot(&dy);
    (&dy - &(y * proj)) / norm
}
