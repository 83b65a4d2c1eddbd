//! Central finite-difference checks of every hand-written backward pass.

use std::fmt;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cbp::{make_sketch_params, pool_traced, PostNorm};
use crate::data::backbone::{backbone_forward, BackboneConfig, BackboneParams, ConvSpec};
use crate::error::Result;
use crate::cbp::PooledMap;
use crate::fusion::{gate_forward, FusionConfig, FusionParams, GateNet};
use crate::ggnn::{self, GgnnConfig, GgnnParams, KnowledgeRepr};
use crate::graph::{ConfidenceMatrix, KnowledgeGraph, NodeRegistry};
use crate::model::{Model, ModelConfig, SketchConfig, Variant};
use crate::nn::{cross_entropy, Linear, ParamGroup};

pub const STEP: f64 = 1e-5;
/// Entries where both gradients are below this are compared on this scale.
const FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn central(f: &mut dyn FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    Ok((f(x + STEP)? - f(x - STEP)?) / (2.0 * STEP))
}

/// Max relative error over every entry of a parameter group.
pub fn check_params<P: ParamGroup + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> Result<f64>,
) -> Result<f64> {
    let grads: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, _, t)| t.to_vec()).collect();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (ti, g) in grads.iter().enumerate() {
        for (k, &a) in g.iter().enumerate() {
            let original = probe.tensors()[ti].2[k];
            let mut f = |v: f64| {
                probe.tensors_mut()[ti].1[k] = v;
                loss(&probe)
            };
            let n = central(&mut f, original)?;
            probe.tensors_mut()[ti].1[k] = original;
            worst = worst.max(relative_error(a, n));
        }
    }
    Ok(worst)
}

/// Max relative error over every entry of an input array.
pub fn check_input<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    analytic: &ndarray::Array<f64, D>,
    loss: impl Fn(&ndarray::Array<f64, D>) -> Result<f64>,
) -> Result<f64> {
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let original = *probe.iter().nth(k).expect("same shape");
        let mut f = |v: f64| {
            *probe.iter_mut().nth(k).expect("same shape") = v;
            loss(&probe)
        };
        let n = central(&mut f, original)?;
        *probe.iter_mut().nth(k).expect("same shape") = original;
        worst = worst.max(relative_error(a, n));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < tol)
    }

    fn push(&mut self, group: impl Into<String>, err: f64) {
        self.groups.push(GroupResult {
            group: group.into(),
            max_rel_error: err,
        });
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(f, "{:<28} {:.3e}", g.group, g.max_rel_error)?;
        }
        Ok(())
    }
}

fn random_array3<R: Rng>(dims: (usize, usize, usize), lo: f64, rng: &mut R) -> Array3<f64> {
    Array3::from_shape_simple_fn(dims, || rng.random_range(lo..1.0))
}

/// Small random graph with `c` categories and `a` attributes.
pub fn random_graph<R: Rng>(c: usize, a: usize, rng: &mut R) -> Result<KnowledgeGraph> {
    let reg = NodeRegistry::new(
        (0..c).map(|i| format!("c{i}")).collect(),
        (0..a).map(|i| format!("p::a{i}")).collect(),
    )?;
    let s = Array2::from_shape_simple_fn((c, a), || rng.random_range(0.0..1.0));
    KnowledgeGraph::new(reg, ConfidenceMatrix::new(s)?)
}

fn ggnn_case(report: &mut GradcheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = GgnnConfig {
        hidden: 3,
        out_dim: 2,
        t_steps: 2,
    };
    let graph = random_graph(2, 3, rng)?;
    let mut params = GgnnParams::init(&cfg, rng);
    // nonzero biases so every path is exercised
    params.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let scores: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
    let r = Array1::from_shape_simple_fn(cfg.repr_len(graph.num_nodes()), || rng.random_range(-1.0..1.0));
    let loss = |p: &GgnnParams, s: &[f64]| -> Result<f64> { Ok(ggnn::run(&graph, s, p, &cfg)?.1 .0.dot(&r)) };
    let g = ggnn::backward(&graph, &scores, &params, &cfg, &r)?;
    report.push("ggnn.params", check_params(&params, &g.params, |p| loss(p, &scores))?);
    let s = Array1::from(scores.clone());
    report.push("ggnn.scores", check_input(&s, &g.scores, |s| loss(&params, s.as_slice().unwrap()))?);
    Ok(())
}

fn cbp_case(report: &mut GradcheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let params = make_sketch_params(8, 16, rng.random())?;
    let fmap = random_array3((2, 2, 8), -1.0, rng);
    for (name, post) in [
        ("cbp.input", PostNorm::default()),
        ("cbp.input+l2", PostNorm { signed_sqrt: false, l2: true }),
        ("cbp.input+sqrt+l2", PostNorm { signed_sqrt: true, l2: true }),
    ] {
        let r = random_array3((2, 2, 16), -1.0, rng);
        let loss = |x: &Array3<f64>| -> Result<f64> { Ok((&pool_traced(x, &params, post)?.pooled.0 * &r).sum()) };
        let analytic = pool_traced(&fmap, &params, post)?.backward(&params, &r)?;
        report.push(name, check_input(&fmap, &analytic, loss)?);
    }
    Ok(())
}

fn backbone_case(report: &mut GradcheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = BackboneConfig {
        in_channels: 3,
        input_size: 8,
        layers: vec![
            ConvSpec { channels: 4, kernel: 3, stride: 2 },
            ConvSpec { channels: 6, kernel: 3, stride: 1 },
        ],
    };
    let mut params = BackboneParams::init(&cfg, rng)?;
    for c in &mut params.convs {
        c.b.mapv_inplace(|_| rng.random_range(0.0..0.2));
    }
    let image = random_array3((8, 8, 3), -0.5, rng);
    let r = random_array3((4, 4, 6), -1.0, rng);
    let loss = |p: &BackboneParams, x: &Array3<f64>| -> Result<f64> {
        Ok((&backbone_forward(x, p, &cfg)?.output() * &r).sum())
    };
    let (g, dx) = backbone_forward(&image, &params, &cfg)?.backward(&params, &r)?;
    report.push("backbone.params", check_params(&params, &g, |p| loss(p, &image))?);
    report.push("backbone.input", check_input(&image, &dx, |x| loss(&params, x))?);
    Ok(())
}

fn head_case(report: &mut GradcheckReport, variant: Variant, l2: bool, rng: &mut ChaCha8Rng) -> Result<()> {
    let classes = 3;
    let graph = random_graph(classes, 4, rng)?;
    let config = ModelConfig {
        precomputed: true,
        feature_dim: 6,
        sketch: SketchConfig {
            c: 12,
            seed: rng.random(),
            post: PostNorm::default(),
        },
        ggnn: GgnnConfig {
            hidden: 3,
            out_dim: 2,
            t_steps: 2,
        },
        fusion: FusionConfig {
            hidden: Some(5),
            scalar_gate: false,
            l2_normalize: l2,
        },
        ..ModelConfig::default()
    };
    let model = Model::new(variant, config, classes, Some(graph), rng)?;
    let input = random_array3((2, 3, 6), -1.0, rng);
    let scores: Vec<f64> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
    let label = rng.random_range(0..classes);
    let trace = model.forward_input(input.clone(), Some(&scores))?;
    let (_, dl) = cross_entropy(trace.logits.view(), label);
    let grads = model.backward(&trace, &dl)?;
    let loss = |m: &Model| -> Result<f64> {
        let t = m.forward_input(input.clone(), Some(&scores))?;
        Ok(cross_entropy(t.logits.view(), label).0)
    };
    let tag = if l2 { format!("{variant}+l2") } else { variant.to_string() };
    let fusion = check_params(&model.params.fusion, &grads.params.fusion, |p| {
        let mut m = model.clone();
        m.params.fusion = p.clone();
        loss(&m)
    })?;
    report.push(format!("fusion.{tag}"), fusion);
    Ok(())
}

/// Gate network under a random linear functional of the pooled vector:
/// parameters, local features and the knowledge input.
fn gate_case(report: &mut GradcheckReport, scalar_gate: bool, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = FusionConfig {
        hidden: Some(6),
        scalar_gate,
        l2_normalize: false,
    };
    let net = GateNet::init(5, 4, &cfg, rng);
    let f_i = PooledMap(random_array3((2, 2, 5), -1.0, rng));
    let f_g = KnowledgeRepr(Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0)));
    let r = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
    let trace = gate_forward(&net, &f_i, Some(&f_g))?;
    let mut g = net.zeros_like();
    let (d_fi, d_fg) = trace.backward(&net, r.view(), &mut g);
    let d_fg = d_fg.expect("knowledge slot present");
    let wrap = |n: &GateNet| FusionParams {
        gate: Some(n.clone()),
        cls: Linear::zeros(1, 1),
    };
    let tag = if scalar_gate { "fusion.scalar_gate" } else { "fusion.gate" };
    let e = check_params(&wrap(&net), &wrap(&g), |p| {
        Ok(gate_forward(p.gate.as_ref().expect("wrapped"), &f_i, Some(&f_g))?.pooled.dot(&r))
    })?;
    report.push(format!("{tag}.params"), e);
    let e = check_input(&f_i.0, &d_fi, |x| {
        Ok(gate_forward(&net, &PooledMap(x.clone()), Some(&f_g))?.pooled.dot(&r))
    })?;
    report.push(format!("{tag}.features"), e);
    let e = check_input(&f_g.0, &d_fg, |k| {
        Ok(gate_forward(&net, &f_i, Some(&KnowledgeRepr(k.clone())))?.pooled.dot(&r))
    })?;
    report.push(format!("{tag}.knowledge"), e);
    Ok(())
}

/// Runs every check at tiny dimensions.
pub fn gradcheck_all(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::default();
    ggnn_case(&mut report, &mut rng)?;
    cbp_case(&mut report, &mut rng)?;
    backbone_case(&mut report, &mut rng)?;
    for v in Variant::ALL {
        head_case(&mut report, v, false, &mut rng)?;
    }
    head_case(&mut report, Variant::Kerl, true, &mut rng)?;
    gate_case(&mut report, false, &mut rng)?;
    gate_case(&mut report, true, &mut rng)?;
    Ok(report)
}
