//! Dense double-precision parameter storage and the handful of vector
//! kernels the model needs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A named row-major matrix (vectors have `cols == 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamTensor {
            name: name.into(),
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "tensor data does not match shape");
        ParamTensor {
            name: name.into(),
            rows,
            cols,
            values,
        }
    }

    /// Same name and shape, all zeros. Gradient buffers are built this way.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.name.clone(), self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill_truncated_normal<R: Rng>(&mut self, rng: &mut R, std: f64) {
        for v in &mut self.values {
            *v = truncated_normal(rng, std);
        }
    }

    pub fn add_assign(&mut self, other: &ParamTensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self -= lr * grad`
    pub fn sgd(&mut self, grad: &ParamTensor, lr: f64) {
        debug_assert_eq!(self.shape(), grad.shape());
        for (p, g) in self.values.iter_mut().zip(&grad.values) {
            *p -= lr * g;
        }
    }
}

/// Zero-mean normal truncated (by rejection) to `[-2 std, 2 std]`.
pub fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += W x` for a `rows x cols` matrix `W`.
pub fn matvec_acc(w: &ParamTensor, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(w.row(r), x);
    }
}

/// `out += W^T y`.
pub fn matvec_t_acc(w: &ParamTensor, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.rows, y.len());
    debug_assert_eq!(w.cols, out.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, w.row(r), out);
        }
    }
}

/// `G += y x^T`.
pub fn outer_acc(g: &mut ParamTensor, y: &[f64], x: &[f64]) {
    debug_assert_eq!(g.rows, y.len());
    debug_assert_eq!(g.cols, x.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, x, g.row_mut(r));
        }
    }
}

/// `out += a * x`.
pub fn axpy(a: f64, x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub fn add_into(out: &mut [f64], x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn matvec_and_transpose_agree() {
        let w = ParamTensor::from_values("w", 2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let mut out = vec![0.0; 2];
        matvec_acc(&w, &[1., 0., -1.], &mut out);
        assert_eq!(out, vec![-2., -2.]);
        let mut back = vec![0.0; 3];
        matvec_t_acc(&w, &[1., 1.], &mut back);
        assert_eq!(back, vec![5., 7., 9.]);
    }

    #[test]
    fn outer_accumulates() {
        let mut g = ParamTensor::zeros("g", 2, 2);
        outer_acc(&mut g, &[1., 2.], &[3., 4.]);
        outer_acc(&mut g, &[1., 0.], &[1., 1.]);
        assert_eq!(g.values, vec![4., 5., 6., 8.]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn truncation_bound_holds() {
        let mut rng = stream(3, Stream::Init);
        let mut t = ParamTensor::zeros("t", 100, 100);
        t.fill_truncated_normal(&mut rng, 0.1);
        assert!(t.values.iter().all(|v| v.abs() <= 0.2));
    }

    #[test]
    fn truncated_normal_moments() {
        use statrs::distribution::{Continuous, ContinuousCDF, Normal};
        let n = Normal::standard();
        let expected_std = (1.0 - 4.0 * n.pdf(2.0) / (2.0 * n.cdf(2.0) - 1.0)).sqrt();
        let sigma = 0.3;
        let mut rng = stream(11, Stream::Init);
        let draws: Vec<f64> = (0..200_000).map(|_| truncated_normal(&mut rng, sigma)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.01 * sigma, "{mean}");
        assert!((var.sqrt() / (expected_std * sigma) - 1.0).abs() < 0.05, "{}", var.sqrt());
        assert!(draws.iter().all(|v| v.abs() <= 2.0 * sigma));
    }
}
