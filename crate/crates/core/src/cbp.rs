//! Compact bilinear pooling with Tensor Sketch, applied per spatial location.
//!
//! A descriptor `x ∈ R^d` is projected by two independent count sketches and
//! the projections are multiplied in the frequency domain. The result is the
//! circular convolution of the two sketches, whose inner products approximate
//! `⟨x, y⟩²` without materializing the `d²` outer product. No spatial pooling
//! happens here; every location keeps its own `c`-dimensional vector.

use std::fmt;
use std::sync::{Arc, OnceLock};

use ndarray::{Array1, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{KerlError, Result};

const SSQRT_EPS: f64 = 1e-10;
const L2_EPS: f64 = 1e-12;

#[derive(Clone)]
struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Hash and sign tables for the two count sketches.
#[derive(Clone)]
pub struct SketchParams {
    pub d: usize,
    pub c: usize,
    pub seed: u64,
    pub h1: Vec<usize>,
    pub h2: Vec<usize>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    plans: OnceLock<Plans>,
}

impl fmt::Debug for SketchParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SketchParams")
            .field("d", &self.d)
            .field("c", &self.c)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl PartialEq for SketchParams {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.c == other.c
            && self.seed == other.seed
            && self.h1 == other.h1
            && self.h2 == other.h2
            && self.s1 == other.s1
            && self.s2 == other.s2
    }
}

/// Draws the sketch tables. The same `(d, c, seed)` always yields the same tables.
pub fn make_sketch_params(d: usize, c: usize, seed: u64) -> Result<SketchParams> {
    if d == 0 || c == 0 {
        return Err(KerlError::Invalid(format!(
            "sketch dimensions must be positive (d={d}, c={c})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h1 = (0..d).map(|_| rng.random_range(0..c)).collect();
    let h2 = (0..d).map(|_| rng.random_range(0..c)).collect();
    let mut sign = || if rng.random::<bool>() { 1.0 } else { -1.0 };
    let s1 = (0..d).map(|_| sign()).collect();
    let s2 = (0..d).map(|_| sign()).collect();
    Ok(SketchParams {
        d,
        c,
        seed,
        h1,
        h2,
        s1,
        s2,
        plans: OnceLock::new(),
    })
}

impl SketchParams {
    fn plans(&self) -> &Plans {
        self.plans.get_or_init(|| {
            let mut planner = FftPlanner::new();
            Plans {
                forward: planner.plan_fft_forward(self.c),
                inverse: planner.plan_fft_inverse(self.c),
            }
        })
    }

    fn spectrum(&self, x: ArrayView1<f64>, h: &[usize], s: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.c];
        for ((&xi, &hi), &si) in x.iter().zip(h).zip(s) {
            buf[hi].re += si * xi;
        }
        self.plans().forward.process(&mut buf);
        buf
    }

    fn inverse_real(&self, mut buf: Vec<Complex64>) -> (Vec<f64>, f64) {
        self.plans().inverse.process(&mut buf);
        let scale = 1.0 / self.c as f64;
        let residue = buf.iter().fold(0.0f64, |m, v| m.max(v.im.abs())) * scale;
        (buf.iter().map(|v| v.re * scale).collect(), residue)
    }
}

/// `out[k] = Σ_{j : h(j) = k} s(j) · x[j]`.
pub fn count_sketch(x: &[f64], h: &[usize], s: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for ((&xi, &hi), &si) in x.iter().zip(h).zip(s) {
        out[hi] += si * xi;
    }
    out
}

/// Tensor sketch of one descriptor, together with the largest imaginary
/// component left over by the inverse transform.
pub fn tensor_sketch_with_residue(x: &[f64], params: &SketchParams) -> Result<(Vec<f64>, f64)> {
    if x.len() != params.d {
        return Err(KerlError::Shape(format!(
            "descriptor has {} channels, sketch expects {}",
            x.len(),
            params.d
        )));
    }
    let x = ArrayView1::from(x);
    let p = params.spectrum(x, &params.h1, &params.s1);
    let q = params.spectrum(x, &params.h2, &params.s2);
    let prod: Vec<Complex64> = p.iter().zip(&q).map(|(a, b)| a * b).collect();
    Ok(params.inverse_real(prod))
}

pub fn tensor_sketch(x: &[f64], params: &SketchParams) -> Result<Vec<f64>> {
    tensor_sketch_with_residue(x, params).map(|(v, _)| v)
}

/// Optional post-normalization of every sketched location.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostNorm {
    /// `sign(t)·√|t|` elementwise.
    pub signed_sqrt: bool,
    /// Unit ℓ2 norm per location (after the signed square root when both are on).
    pub l2: bool,
}

/// Per-location sketched features, `H' × W' × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledMap(pub Array3<f64>);

impl PooledMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dim()
    }
}

/// Forward values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CbpTrace {
    spectra: Vec<(Vec<Complex64>, Vec<Complex64>)>,
    raw: Vec<Vec<f64>>,
    post: PostNorm,
    pub pooled: PooledMap,
}

fn check_map(fmap: &Array3<f64>, params: &SketchParams) -> Result<()> {
    if fmap.dim().2 != params.d {
        return Err(KerlError::Shape(format!(
            "feature map has {} channels, sketch expects {}",
            fmap.dim().2,
            params.d
        )));
    }
    Ok(())
}

fn ssqrt(t: f64) -> f64 {
    t.signum() * ((t.abs() + SSQRT_EPS).sqrt() - SSQRT_EPS.sqrt())
}

fn ssqrt_grad(t: f64) -> f64 {
    0.5 / (t.abs() + SSQRT_EPS).sqrt()
}

fn apply_post(raw: &[f64], post: PostNorm) -> Vec<f64> {
    let mut y: Vec<f64> = if post.signed_sqrt {
        raw.iter().map(|&t| ssqrt(t)).collect()
    } else {
        raw.to_vec()
    };
    if post.l2 {
        let norm = (y.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
        y.iter_mut().for_each(|v| *v /= norm);
    }
    y
}

fn post_backward(raw: &[f64], post: PostNorm, dz: &[f64]) -> Vec<f64> {
    let y: Vec<f64> = if post.signed_sqrt {
        raw.iter().map(|&t| ssqrt(t)).collect()
    } else {
        raw.to_vec()
    };
    let mut dy = dz.to_vec();
    if post.l2 {
        let norm = (y.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
        let proj: f64 = y.iter().zip(dz).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
        for (d, (&g, &yv)) in dy.iter_mut().zip(dz.iter().zip(&y)) {
            *d = (g - yv * proj) / norm;
        }
    }
    if post.signed_sqrt {
        for (d, &t) in dy.iter_mut().zip(raw) {
            *d *= ssqrt_grad(t);
        }
    }
    dy
}

/// Sketches every location independently; spatial size is unchanged.
pub fn per_location_pool(fmap: &Array3<f64>, params: &SketchParams) -> Result<PooledMap> {
    pool_traced(fmap, params, PostNorm::default()).map(|t| t.pooled)
}

pub fn pool_traced(fmap: &Array3<f64>, params: &SketchParams, post: PostNorm) -> Result<CbpTrace> {
    check_map(fmap, params)?;
    let (rows, cols, _) = fmap.dim();
    let mut out = Array3::<f64>::zeros((rows, cols, params.c));
    let mut spectra = Vec::with_capacity(rows * cols);
    let mut raws = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let x = fmap.slice(ndarray::s![i, j, ..]);
            let p = params.spectrum(x, &params.h1, &params.s1);
            let q = params.spectrum(x, &params.h2, &params.s2);
            let prod: Vec<Complex64> = p.iter().zip(&q).map(|(a, b)| a * b).collect();
            let (raw, _) = params.inverse_real(prod);
            let y = apply_post(&raw, post);
            out.slice_mut(ndarray::s![i, j, ..])
                .assign(&Array1::from(y));
            spectra.push((p, q));
            raws.push(raw);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(KerlError::NonFinite {
            context: "compact bilinear features".into(),
        });
    }
    Ok(CbpTrace {
        spectra,
        raw: raws,
        post,
        pooled: PooledMap(out),
    })
}

impl CbpTrace {
    /// `dL/dfmap` from `dL/dpooled`.
    pub fn backward(&self, params: &SketchParams, upstream: &Array3<f64>) -> Result<Array3<f64>> {
        let (rows, cols, c) = self.pooled.dims();
        if upstream.dim() != (rows, cols, c) {
            return Err(KerlError::Shape(format!(
                "upstream gradient is {:?}, expected {:?}",
                upstream.dim(),
                (rows, cols, c)
            )));
        }
        let mut grad = Array3::<f64>::zeros((rows, cols, params.d));
        let scale = 1.0 / c as f64;
        for i in 0..rows {
            for j in 0..cols {
                let loc = i * cols + j;
                let dz: Vec<f64> = upstream.slice(ndarray::s![i, j, ..]).to_vec();
                if dz.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let dout = post_backward(&self.raw[loc], self.post, &dz);
                // circular cross-correlation of the upstream gradient with each sketch
                let mut dspec: Vec<Complex64> = dout.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                params.plans().forward.process(&mut dspec);
                let (p, q) = &self.spectra[loc];
                let mut dp: Vec<Complex64> = dspec.iter().zip(q).map(|(d, q)| d * q.conj()).collect();
                let mut dq: Vec<Complex64> = dspec.iter().zip(p).map(|(d, p)| d * p.conj()).collect();
                params.plans().inverse.process(&mut dp);
                params.plans().inverse.process(&mut dq);
                let mut gx = grad.slice_mut(ndarray::s![i, j, ..]);
                for k in 0..params.d {
                    gx[k] = scale
                        * (params.s1[k] * dp[params.h1[k]].re + params.s2[k] * dq[params.h2[k]].re);
                }
            }
        }
        Ok(grad)
    }
}

/// Gradient of a loss with respect to the input feature map.
pub fn cbp_backward(fmap: &Array3<f64>, params: &SketchParams, upstream: &Array3<f64>) -> Result<Array3<f64>> {
    pool_traced(fmap, params, PostNorm::default())?.backward(params, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};

    /// Direct circular convolution of the two count sketches; no FFT involved.
    fn direct_sketch(x: &[f64], p: &SketchParams) -> Vec<f64> {
        let a = count_sketch(x, &p.h1, &p.s1, p.c);
        let b = count_sketch(x, &p.h2, &p.s2, p.c);
        (0..p.c)
            .map(|k| (0..p.c).map(|j| a[j] * b[(k + p.c - j) % p.c]).sum())
            .collect()
    }

    #[test]
    fn params_are_deterministic_and_in_range() {
        let a = make_sketch_params(4, 8, 0).unwrap();
        let b = make_sketch_params(4, 8, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.h1.iter().chain(&a.h2).all(|&h| h < 8));
        assert!(a.s1.iter().chain(&a.s2).all(|&s| s == 1.0 || s == -1.0));
        assert_ne!(a, make_sketch_params(4, 8, 1).unwrap());
        assert!(make_sketch_params(0, 8, 0).is_err());
    }

    #[test]
    fn count_sketch_of_basis_vector() {
        let h = vec![0, 3, 1];
        let s = vec![-1.0, 1.0, 1.0];
        let out = count_sketch(&[0.0, 1.0, 0.0], &h, &s, 5);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(count_sketch(&[0.0; 3], &h, &s, 5), vec![0.0; 5]);
    }

    #[test]
    fn tensor_sketch_matches_direct_convolution() {
        let p = make_sketch_params(6, 16, 9).unwrap();
        let x = [0.3, -1.2, 0.8, 0.0, 2.0, -0.4];
        let fast = tensor_sketch(&x, &p).unwrap();
        let slow = direct_sketch(&x, &p);
        for (a, b) in fast.iter().zip(&slow) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_input_sketches_to_zero() {
        let p = make_sketch_params(5, 8, 2).unwrap();
        assert!(tensor_sketch(&[0.0; 5], &p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn imaginary_residue_is_negligible() {
        let p = make_sketch_params(16, 64, 4).unwrap();
        let x: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64) - 1.7).collect();
        let (out, residue) = tensor_sketch_with_residue(&x, &p).unwrap();
        let inf = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(residue < 1e-9 * inf, "residue {residue} vs {inf}");
    }

    #[test]
    fn pooling_is_per_location() {
        let p = make_sketch_params(3, 8, 1).unwrap();
        let v = [0.5, -1.0, 2.0];
        let single = Array3::from_shape_vec((1, 1, 3), v.to_vec()).unwrap();
        let pooled = per_location_pool(&single, &p).unwrap();
        assert_eq!(pooled.0.as_slice().unwrap(), tensor_sketch(&v, &p).unwrap().as_slice());

        let grid = Array3::from_shape_fn((2, 2, 3), |(_, _, k)| v[k]);
        let pooled = per_location_pool(&grid, &p).unwrap();
        assert_eq!(pooled.dims(), (2, 2, 8));
        let first = pooled.0.slice(ndarray::s![0, 0, ..]).to_owned();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(pooled.0.slice(ndarray::s![i, j, ..]), first);
            }
        }
        assert!(per_location_pool(&Array3::zeros((2, 2, 4)), &p).is_err());
    }

    #[test]
    fn full_scale_output_shape() {
        let p = make_sketch_params(512, 8192, 0).unwrap();
        let fmap = Array3::from_shape_fn((2, 1, 512), |(i, _, k)| ((i + k) % 5) as f64 * 0.1);
        assert_eq!(per_location_pool(&fmap, &p).unwrap().dims(), (2, 1, 8192));
    }

    #[test]
    fn zero_upstream_and_zero_input_give_zero_gradient() {
        let p = make_sketch_params(4, 8, 3).unwrap();
        let fmap = Array3::from_shape_fn((2, 2, 4), |(i, j, k)| (i + 2 * j) as f64 - k as f64 * 0.3);
        let g = cbp_backward(&fmap, &p, &Array3::zeros((2, 2, 8))).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let up = Array3::from_shape_fn((2, 2, 8), |(i, j, k)| (i * 8 + j * 3 + k) as f64 * 0.01);
        let g = cbp_backward(&Array3::zeros((2, 2, 4)), &p, &up).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-15));
    }

    fn fd_check(post: PostNorm) {
        let p = make_sketch_params(6, 16, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let fmap = Array3::from_shape_simple_fn((2, 2, 6), || rng.random_range(-1.0..1.0));
        let up = Array3::from_shape_simple_fn((2, 2, 16), || rng.random_range(-1.0..1.0));
        let grad = pool_traced(&fmap, &p, post).unwrap().backward(&p, &up).unwrap();
        let loss = |f: &Array3<f64>| -> f64 {
            let out = pool_traced(f, &p, post).unwrap().pooled.0;
            (&out * &up).sum()
        };
        let h = 1e-5;
        for idx in 0..fmap.len() {
            let mut plus = fmap.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = fmap.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grad.as_slice().unwrap()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(PostNorm::default());
    }

    #[test]
    fn backward_with_post_normalization_matches_finite_differences() {
        fd_check(PostNorm { signed_sqrt: true, l2: true });
        fd_check(PostNorm { signed_sqrt: false, l2: true });
    }

    proptest! {
        #[test]
        fn count_sketch_is_linear(
            x in proptest::collection::vec(-3.0f64..3.0, 7),
            y in proptest::collection::vec(-3.0f64..3.0, 7),
            a in -2.0f64..2.0,
        ) {
            let p = make_sketch_params(7, 5, 17).unwrap();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + v).collect();
            let lhs = count_sketch(&combo, &p.h1, &p.s1, 5);
            let cx = count_sketch(&x, &p.h1, &p.s1, 5);
            let cy = count_sketch(&y, &p.h1, &p.s1, 5);
            for k in 0..5 {
                prop_assert!((lhs[k] - (a * cx[k] + cy[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn sketch_is_even_in_its_input(x in proptest::collection::vec(-3.0f64..3.0, 8), seed in 0u64..50) {
            let p = make_sketch_params(8, 16, seed).unwrap();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let a = tensor_sketch(&x, &p).unwrap();
            let b = tensor_sketch(&neg, &p).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sketch_inner_products_estimate_squared_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let exact = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().powi(2);
            let mean = (0..200u64)
                .map(|seed| {
                    let p = make_sketch_params(16, 64, seed).unwrap();
                    let (tx, ty) = (tensor_sketch(&x, &p).unwrap(), tensor_sketch(&y, &p).unwrap());
                    tx.iter().zip(&ty).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum::<f64>()
                / 200.0;
            assert!((mean - exact).abs() / exact < 0.1, "{mean} vs {exact}");
        }
    }
}
