//! Gated graph neural network over the knowledge graph.
//!
//! Each node carries an `n`-dimensional hidden state. One propagation step
//! aggregates neighbour states along forward and reverse edges into a `2n`
//! vector `a_v`, then applies a GRU-style update:
//!
//! ```text
//! a_v = [Σ_u A_c[u,v] h_u ; Σ_u A_c[v,u] h_u] + b
//! z   = σ(W_z a_v + U_z h_v)
//! r   = σ(W_r a_v + U_r h_v)
//! h̃   = tanh(W a_v + U (r ⊙ h_v))
//! h_v ← (1 − z) ⊙ h_v + z ⊙ h̃
//! ```
//!
//! After `T` steps every node emits `o_v = O [h_v ; x_v] + o_b` and the
//! concatenation of all `o_v` is the knowledge representation.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KerlError, Result};
use crate::graph::KnowledgeGraph;
use crate::nn::{sigmoid, uniform_matrix, Linear, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GgnnConfig {
    /// Hidden-state width `n`.
    pub hidden: usize,
    /// Per-node output width.
    pub out_dim: usize,
    /// Number of propagation steps `T`.
    pub t_steps: usize,
}

impl Default for GgnnConfig {
    fn default() -> Self {
        Self {
            hidden: 10,
            out_dim: 5,
            t_steps: 5,
        }
    }
}

impl GgnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.out_dim == 0 {
            return Err(KerlError::Invalid(
                "ggnn hidden and output widths must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Length of the knowledge representation for a graph with `nodes` nodes.
    pub fn repr_len(&self, nodes: usize) -> usize {
        nodes * self.out_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GgnnParams {
    pub w_z: Array2<f64>,
    pub w_r: Array2<f64>,
    pub w: Array2<f64>,
    pub u_z: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
    /// Output network acting on `[h_v^T ; x_v]`.
    pub output: Linear,
}

impl GgnnParams {
    pub fn zeros(cfg: &GgnnConfig) -> Self {
        let n = cfg.hidden;
        Self {
            w_z: Array2::zeros((n, 2 * n)),
            w_r: Array2::zeros((n, 2 * n)),
            w: Array2::zeros((n, 2 * n)),
            u_z: Array2::zeros((n, n)),
            u_r: Array2::zeros((n, n)),
            u: Array2::zeros((n, n)),
            b: Array1::zeros(2 * n),
            output: Linear::zeros(2 * n, cfg.out_dim),
        }
    }

    /// Uniform `[-1/√(2n), 1/√(2n)]` matrices, zero biases.
    pub fn init<R: Rng>(cfg: &GgnnConfig, rng: &mut R) -> Self {
        let n = cfg.hidden;
        let bound = 1.0 / ((2 * n) as f64).sqrt();
        Self {
            w_z: uniform_matrix(n, 2 * n, bound, rng),
            w_r: uniform_matrix(n, 2 * n, bound, rng),
            w: uniform_matrix(n, 2 * n, bound, rng),
            u_z: uniform_matrix(n, n, bound, rng),
            u_r: uniform_matrix(n, n, bound, rng),
            u: uniform_matrix(n, n, bound, rng),
            b: Array1::zeros(2 * n),
            output: Linear {
                w: uniform_matrix(cfg.out_dim, 2 * n, bound, rng),
                b: Array1::zeros(cfg.out_dim),
            },
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.output.output_dim()
    }

    fn check(&self, cfg: &GgnnConfig) -> Result<()> {
        if self.hidden() != cfg.hidden || self.out_dim() != cfg.out_dim {
            return Err(KerlError::Shape(format!(
                "ggnn parameters are for n={}, out={} but config has n={}, out={}",
                self.hidden(),
                self.out_dim(),
                cfg.hidden,
                cfg.out_dim
            )));
        }
        Ok(())
    }
}

impl ParamGroup for GgnnParams {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, m) in [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w", &self.w),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u", &self.u),
        ] {
            out.push((
                format!("ggnn.{name}"),
                m.shape().to_vec(),
                m.as_slice().expect("standard layout"),
            ));
        }
        out.push((
            "ggnn.b".into(),
            self.b.shape().to_vec(),
            self.b.as_slice().expect("standard layout"),
        ));
        self.output.push_tensors("ggnn.output", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (name, m) in [
            ("w_z", &mut self.w_z),
            ("w_r", &mut self.w_r),
            ("w", &mut self.w),
            ("u_z", &mut self.u_z),
            ("u_r", &mut self.u_r),
            ("u", &mut self.u),
        ] {
            out.push((format!("ggnn.{name}"), m.as_slice_mut().expect("standard layout")));
        }
        out.push(("ggnn.b".into(), self.b.as_slice_mut().expect("standard layout")));
        self.output.push_tensors_mut("ggnn.output", &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    /// `|V| × n` current hidden states.
    pub h: Array2<f64>,
    /// `|V| × n` initial node features.
    pub x: Array2<f64>,
}

/// Concatenated per-node outputs, length `|V| · out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeRepr(pub Array1<f64>);

impl KnowledgeRepr {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Category node `i` starts at `[s_i, 0, …, 0]`; attribute nodes start at zero.
pub fn init_states(scores: &[f64], graph: &KnowledgeGraph, cfg: &GgnnConfig) -> Result<NodeStates> {
    if scores.len() != graph.num_categories() {
        return Err(KerlError::Shape(format!(
            "got {} category scores for a graph with {} categories",
            scores.len(),
            graph.num_categories()
        )));
    }
    initial_states(scores, graph.num_nodes(), cfg.hidden)
}

pub(crate) fn initial_states(scores: &[f64], nodes: usize, hidden: usize) -> Result<NodeStates> {
    if hidden == 0 {
        return Err(KerlError::Invalid("hidden width must be at least 1".into()));
    }
    if scores.len() > nodes {
        return Err(KerlError::Shape(format!(
            "{} scores for {nodes} nodes",
            scores.len()
        )));
    }
    if let Some((i, v)) = scores
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(KerlError::Invalid(format!(
            "category score {i} is {v}; scores must lie in [0, 1]"
        )));
    }
    let mut x = Array2::zeros((nodes, hidden));
    for (i, &v) in scores.iter().enumerate() {
        x[[i, 0]] = v;
    }
    Ok(NodeStates { h: x.clone(), x })
}

/// Intermediate values of one propagation step, kept for the backward pass.
#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Array2<f64>,
    agg: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    cand: Array2<f64>,
}

fn check_adjacency(a_full: ArrayView2<f64>, nodes: usize) -> Result<()> {
    if a_full.dim() != (nodes, 2 * nodes) {
        return Err(KerlError::Shape(format!(
            "adjacency is {}x{}, expected {nodes}x{}",
            a_full.nrows(),
            a_full.ncols(),
            2 * nodes
        )));
    }
    Ok(())
}

fn step(h: &Array2<f64>, a_full: ArrayView2<f64>, p: &GgnnParams) -> Result<StepCache> {
    let (nodes, n) = h.dim();
    if n != p.hidden() {
        return Err(KerlError::Shape(format!(
            "state width {n} does not match parameter width {}",
            p.hidden()
        )));
    }
    check_adjacency(a_full, nodes)?;

    let mut agg = Array2::<f64>::zeros((nodes, 2 * n));
    agg.slice_mut(s![.., ..n])
        .assign(&a_full.slice(s![.., ..nodes]).t().dot(h));
    agg.slice_mut(s![.., n..])
        .assign(&a_full.slice(s![.., nodes..]).t().dot(h));
    agg += &p.b;

    let z = (agg.dot(&p.w_z.t()) + h.dot(&p.u_z.t())).mapv(sigmoid);
    let r = (agg.dot(&p.w_r.t()) + h.dot(&p.u_r.t())).mapv(sigmoid);
    let cand = (agg.dot(&p.w.t()) + (&r * h).dot(&p.u.t())).mapv(f64::tanh);
    Ok(StepCache {
        h_prev: h.clone(),
        agg,
        z,
        r,
        cand,
    })
}

impl StepCache {
    fn output(&self) -> Array2<f64> {
        (1.0 - &self.z) * &self.h_prev + &self.z * &self.cand
    }
}

fn check_finite(h: &Array2<f64>, what: &str) -> Result<()> {
    for (v, row) in h.outer_iter().enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(KerlError::NonFinite {
                context: format!("{what} at node {v}"),
            });
        }
    }
    Ok(())
}

/// One application of the gated update to every node.
pub fn propagate_step(states: &NodeStates, a_full: &Array2<f64>, params: &GgnnParams) -> Result<NodeStates> {
    let cache = step(&states.h, a_full.view(), params)?;
    let h = cache.output();
    check_finite(&h, "hidden state")?;
    Ok(NodeStates {
        h,
        x: states.x.clone(),
    })
}

/// Full forward pass with every intermediate retained.
#[derive(Debug, Clone)]
pub struct GgnnTrace {
    a_full: Array2<f64>,
    steps: Vec<StepCache>,
    pub states: NodeStates,
    /// `|V| × out_dim` node outputs (row-major view of the knowledge representation).
    pub outputs: Array2<f64>,
}

impl GgnnTrace {
    pub fn knowledge(&self) -> KnowledgeRepr {
        KnowledgeRepr(
            self.outputs
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(self.outputs.len())
                .expect("contiguous outputs"),
        )
    }

    /// Reverse-mode pass given `dL/df_g`. Returns parameter gradients and
    /// `dL/dx` (the full initial-feature gradient, `|V| × n`).
    pub fn backward(&self, params: &GgnnParams, d_fg: &Array1<f64>) -> Result<(GgnnParams, Array2<f64>)> {
        let (nodes, out_dim) = self.outputs.dim();
        if d_fg.len() != nodes * out_dim {
            return Err(KerlError::Shape(format!(
                "upstream gradient has length {}, expected {}",
                d_fg.len(),
                nodes * out_dim
            )));
        }
        let n = params.hidden();
        let d_out = d_fg
            .view()
            .into_shape_with_order((nodes, out_dim))
            .expect("length checked");

        let mut grads = GgnnParams {
            w_z: Array2::zeros(params.w_z.dim()),
            w_r: Array2::zeros(params.w_r.dim()),
            w: Array2::zeros(params.w.dim()),
            u_z: Array2::zeros(params.u_z.dim()),
            u_r: Array2::zeros(params.u_r.dim()),
            u: Array2::zeros(params.u.dim()),
            b: Array1::zeros(params.b.len()),
            output: Linear::zeros(2 * n, out_dim),
        };

        let mut joint = Array2::<f64>::zeros((nodes, 2 * n));
        joint.slice_mut(s![.., ..n]).assign(&self.states.h);
        joint.slice_mut(s![.., n..]).assign(&self.states.x);
        let d_joint = params.output.backward_rows(joint.view(), d_out, &mut grads.output);
        let mut dh = d_joint.slice(s![.., ..n]).to_owned();
        let mut dx = d_joint.slice(s![.., n..]).to_owned();

        let fwd = self.a_full.slice(s![.., ..nodes]);
        let rev = self.a_full.slice(s![.., nodes..]);
        for c in self.steps.iter().rev() {
            let dz = &dh * &(&c.cand - &c.h_prev);
            let dcand = &dh * &c.z;
            let mut dh_prev = &dh * &(1.0 - &c.z);

            let dpre_c = dcand * &c.cand.mapv(|v| 1.0 - v * v);
            grads.w += &dpre_c.t().dot(&c.agg);
            let mut d_agg = dpre_c.dot(&params.w);
            let rh = &c.r * &c.h_prev;
            grads.u += &dpre_c.t().dot(&rh);
            let d_rh = dpre_c.dot(&params.u);
            let dr = &d_rh * &c.h_prev;
            dh_prev += &(&d_rh * &c.r);

            let dpre_z = dz * &c.z.mapv(|v| v * (1.0 - v));
            grads.w_z += &dpre_z.t().dot(&c.agg);
            d_agg += &dpre_z.dot(&params.w_z);
            grads.u_z += &dpre_z.t().dot(&c.h_prev);
            dh_prev += &dpre_z.dot(&params.u_z);

            let dpre_r = dr * &c.r.mapv(|v| v * (1.0 - v));
            grads.w_r += &dpre_r.t().dot(&c.agg);
            d_agg += &dpre_r.dot(&params.w_r);
            grads.u_r += &dpre_r.t().dot(&c.h_prev);
            dh_prev += &dpre_r.dot(&params.u_r);

            grads.b += &d_agg.sum_axis(Axis(0));
            dh_prev += &fwd.dot(&d_agg.slice(s![.., ..n]));
            dh_prev += &rev.dot(&d_agg.slice(s![.., n..]));
            dh = dh_prev;
        }
        dx += &dh;
        Ok((grads, dx))
    }
}

/// Runs `T` steps from `x` over an arbitrary `|V| × 2|V|` adjacency.
pub fn run_traced(
    a_full: &Array2<f64>,
    x: Array2<f64>,
    params: &GgnnParams,
    cfg: &GgnnConfig,
) -> Result<GgnnTrace> {
    cfg.validate()?;
    params.check(cfg)?;
    let nodes = x.nrows();
    check_adjacency(a_full.view(), nodes)?;
    if x.ncols() != cfg.hidden {
        return Err(KerlError::Shape(format!(
            "initial features have width {}, expected {}",
            x.ncols(),
            cfg.hidden
        )));
    }
    let mut steps = Vec::with_capacity(cfg.t_steps);
    let mut h = x.clone();
    for t in 0..cfg.t_steps {
        let cache = step(&h, a_full.view(), params)?;
        h = cache.output();
        check_finite(&h, &format!("hidden state after step {}", t + 1))?;
        steps.push(cache);
    }
    let n = cfg.hidden;
    let mut joint = Array2::<f64>::zeros((nodes, 2 * n));
    joint.slice_mut(s![.., ..n]).assign(&h);
    joint.slice_mut(s![.., n..]).assign(&x);
    let outputs = params.output.forward_rows(joint.view());
    check_finite(&outputs, "node output")?;
    Ok(GgnnTrace {
        a_full: a_full.clone(),
        steps,
        states: NodeStates { h, x },
        outputs,
    })
}

pub fn run(
    graph: &KnowledgeGraph,
    scores: &[f64],
    params: &GgnnParams,
    cfg: &GgnnConfig,
) -> Result<(NodeStates, KnowledgeRepr)> {
    let x = init_states(scores, graph, cfg)?.x;
    let trace = run_traced(&graph.adjacency().a_full, x, params, cfg)?;
    let repr = trace.knowledge();
    Ok((trace.states, repr))
}

/// Gradients of a scalar loss with respect to every GGNN parameter and the
/// category scores that seeded the node states.
#[derive(Debug, Clone)]
pub struct GgnnGradients {
    pub params: GgnnParams,
    pub scores: Array1<f64>,
}

pub fn backward(
    graph: &KnowledgeGraph,
    scores: &[f64],
    params: &GgnnParams,
    cfg: &GgnnConfig,
    d_fg: &Array1<f64>,
) -> Result<GgnnGradients> {
    let x = init_states(scores, graph, cfg)?.x;
    let trace = run_traced(&graph.adjacency().a_full, x, params, cfg)?;
    let (grads, dx) = trace.backward(params, d_fg)?;
    let scores = dx.slice(s![..graph.num_categories(), 0]).to_owned();
    Ok(GgnnGradients {
        params: grads,
        scores,
    })
}
