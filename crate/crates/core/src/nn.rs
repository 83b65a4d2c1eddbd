//! Small dense building blocks shared by the model components.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

/// A set of named, contiguous `f64` tensors.
///
/// Gradient containers reuse the parameter type, so every group can be walked
/// in lockstep with its gradient by zipping the two tensor lists.
pub trait ParamGroup {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }
}

/// `dst += alpha * src`, tensor by tensor.
pub fn add_scaled<P: ParamGroup>(dst: &mut P, src: &P, alpha: f64) {
    let src = src.tensors();
    for ((_, d), (_, _, s)) in dst.tensors_mut().into_iter().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += alpha * b;
        }
    }
}

pub fn scale<P: ParamGroup>(p: &mut P, alpha: f64) {
    for (_, t) in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= alpha);
    }
}

pub fn all_finite<P: ParamGroup>(p: &P) -> bool {
    p.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
}

pub fn max_abs<P: ParamGroup>(p: &P) -> f64 {
    p.tensors()
        .iter()
        .flat_map(|(_, _, t)| t.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Affine map `y = W x + b` with `W: out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    /// Uniform `[-1/√in, 1/√in]` weights and zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            w: uniform_matrix(output, input, bound, rng),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(&x) + &self.b
    }

    /// Row-wise forward over a batch `X: n × in`.
    pub fn forward_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (mut row, &g) in grad.w.outer_iter_mut().zip(dy.iter()) {
            if g != 0.0 {
                row.scaled_add(g, &x);
            }
        }
        grad.b += &dy;
        self.w.t().dot(&dy)
    }

    pub fn backward_rows(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &dy.t().dot(&x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        out.push((
            format!("{prefix}.w"),
            self.w.shape().to_vec(),
            self.w.as_slice().expect("standard layout"),
        ));
        out.push((
            format!("{prefix}.b"),
            self.b.shape().to_vec(),
            self.b.as_slice().expect("standard layout"),
        ));
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.w"), self.w.as_slice_mut().expect("standard layout")));
        out.push((format!("{prefix}.b"), self.b.as_slice_mut().expect("standard layout")));
    }
}

impl ParamGroup for Linear {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        self.push_tensors("linear", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.push_tensors_mut("linear", &mut out);
        out
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Cross-entropy of `logits` against `label`, with `dL/dlogits`.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = logits.mapv(|v| (v - log_sum).exp());
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cross_entropy_of_uniform_prediction() {
        let (loss, grad) = cross_entropy(array![0.0, 0.0, 0.0, 0.0].view(), 2);
        assert_abs_diff_eq!(loss, 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(loss, 1.3863, epsilon = 1e-4);
        assert_abs_diff_eq!(grad.sum(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(array![1000.0, -3.0, 2.5].view());
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert!(sigmoid(1000.0) <= 1.0);
    }

    #[test]
    fn linear_backward_matches_differences() {
        let lin = Linear {
            w: array![[0.3, -0.2, 0.5], [1.1, 0.4, -0.7]],
            b: array![0.1, -0.3],
        };
        let x = array![0.2, -1.0, 0.7];
        let dy = array![0.6, -1.4];
        let mut grad = Linear::zeros(3, 2);
        let dx = lin.backward(x.view(), dy.view(), &mut grad);
        let f = |x: &Array1<f64>| lin.forward(x.view()).dot(&dy);
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            assert_abs_diff_eq!(dx[i], (f(&xp) - f(&xm)) / 2e-6, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(grad.w[[1, 2]], dy[1] * x[2], epsilon = 1e-15);
    }
}
