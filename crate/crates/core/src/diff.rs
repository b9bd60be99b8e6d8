//! The backward-pass contract shared by every trainable layer, and the
//! central-difference gradient verifier.
//!
//! Layers are composed by hand: a forward pass returns its output together
//! with whatever it needs for the backward pass, and the backward pass takes
//! that cache plus the upstream gradient, accumulates parameter gradients into
//! a caller-owned buffer, and returns the gradient w.r.t. its input. Running
//! the backward passes in reverse forward order yields dLoss/dθ.

use std::fmt;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::tensor::ParamTensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("token id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("empty sequence")]
    EmptySequence,
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<(), LayerError> {
    if expected == actual {
        Ok(())
    } else {
        Err(LayerError::ShapeMismatch {
            context,
            expected,
            actual,
        })
    }
}

/// A differentiable layer with an explicit cache.
pub trait Layer {
    type Input: ?Sized;
    type Output;
    type Cache;
    type InputGrad;
    /// Where parameter gradients accumulate. `()` for parameter-free layers.
    type Grad;

    fn forward(&self, input: &Self::Input) -> Result<(Self::Output, Self::Cache), LayerError>;

    /// Adds this layer's parameter gradients into `grad` and returns the
    /// gradient w.r.t. the input. Fails with `ShapeMismatch` when `d_output`
    /// disagrees with the cached output shape.
    fn backward(
        &self,
        cache: &Self::Cache,
        d_output: &Self::Output,
        grad: &mut Self::Grad,
    ) -> Result<Self::InputGrad, LayerError>;
}

/// Passes a vector through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Layer for Identity {
    type Input = [f64];
    type Output = Vec<f64>;
    type Cache = usize;
    type InputGrad = Vec<f64>;
    type Grad = ();

    fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, usize), LayerError> {
        Ok((input.to_vec(), input.len()))
    }

    fn backward(&self, cache: &usize, d_output: &Vec<f64>, _: &mut ()) -> Result<Vec<f64>, LayerError> {
        check_len("identity backward", *cache, d_output.len())?;
        Ok(d_output.clone())
    }
}

/// Anything exposing a fixed, ordered list of named parameter tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&ParamTensor>;
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn tensor_names(&self) -> Vec<String> {
        self.tensors().iter().map(|t| t.name.clone()).collect()
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl ParamSet for Vec<ParamTensor> {
    fn tensors(&self) -> Vec<&ParamTensor> {
        self.iter().collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("forward pass is not deterministic: {first} vs {second}")]
    NonDeterministicForward { first: f64, second: f64 },
    #[error("analytic gradient list does not line up with parameters at {index}: {reason}")]
    Misaligned { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tol: f64,
    /// Tensors with at most this many entries are checked exhaustively.
    pub exhaustive_limit: usize,
    /// Entries sampled from larger tensors (at least 64).
    pub sample: usize,
    pub seed: u64,
    /// Combine central differences at `epsilon` and `epsilon / 2` as
    /// `(4 D(ε/2) - D(ε)) / 3`, cancelling the `ε²` truncation term so a
    /// larger step (less roundoff) can be used.
    pub richardson: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tol: 1e-4,
            exhaustive_limit: 256,
            sample: 64,
            seed: 0,
            richardson: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entry with the largest error.
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn failing_tensors(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.pass).map(|t| t.tensor.as_str()).collect()
    }

    /// Concatenates reports (e.g. across seeds or loss modes).
    pub fn merge(reports: Vec<GradCheckReport>) -> GradCheckReport {
        let tol = reports.first().map_or(0.0, |r| r.tol);
        let mut out = GradCheckReport {
            entries: Vec::new(),
            tensors: Vec::new(),
            max_rel_error: 0.0,
            tol,
            pass: true,
        };
        for r in reports {
            out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
            out.pass &= r.pass;
            out.entries.extend(r.entries);
            out.tensors.extend(r.tensors);
        }
        out
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.tensors.iter().map(|t| t.tensor.len()).max().unwrap_or(6).max(6);
        writeln!(f, "{:<width$}  {:>7}  {:>12}  {:>6}  status", "tensor", "checked", "max_rel_err", "worst")?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<width$}  {:>7}  {:>12.3e}  {:>6}  {}",
                t.tensor,
                t.checked,
                t.max_rel_error,
                t.worst_index,
                if t.pass { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (tol {:.1e}): {}",
            self.max_rel_error,
            self.tol,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` (one dense gradient per tensor, in `params` order)
/// with central differences of `loss`.
///
/// Large tensors are sampled: `cfg.sample` entries drawn with the seeded
/// PRNG, preferring entries whose analytic gradient is nonzero so sparse
/// tensors (embedding tables) are not checked only on untouched rows.
pub fn finite_difference_check<P, F>(
    params: &mut P,
    analytic: &[ParamTensor],
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError>
where
    P: ParamSet,
    F: Fn(&P) -> f64,
{
    let first = loss(params);
    let second = loss(params);
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministicForward { first, second });
    }

    let shapes: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.name.clone(), t.len())).collect();
    if shapes.len() != analytic.len() {
        return Err(GradCheckError::Misaligned {
            index: shapes.len().min(analytic.len()),
            reason: format!("{} tensors vs {} gradients", shapes.len(), analytic.len()),
        });
    }
    let mut rng = rng::salted(cfg.seed, Stream::GradCheck, 0);
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for (ti, ((name, len), grad)) in shapes.iter().zip(analytic).enumerate() {
        if &grad.name != name || grad.len() != *len {
            return Err(GradCheckError::Misaligned {
                index: ti,
                reason: format!("{name}[{len}] vs {}[{}]", grad.name, grad.len()),
            });
        }
        let picks: Vec<usize> = if *len <= cfg.exhaustive_limit {
            (0..*len).collect()
        } else {
            let want = cfg.sample.max(64).min(*len);
            let nonzero: Vec<usize> = (0..*len).filter(|&i| grad.values[i] != 0.0).collect();
            let from_nonzero = (want * 3 / 4).min(nonzero.len());
            let mut picks: Vec<usize> = index::sample(&mut rng, nonzero.len(), from_nonzero)
                .into_iter()
                .map(|i| nonzero[i])
                .collect();
            for i in index::sample(&mut rng, *len, want).into_iter() {
                if picks.len() >= want {
                    break;
                }
                if !picks.contains(&i) {
                    picks.push(i);
                }
            }
            picks.sort_unstable();
            picks
        };

        let mut worst = (0.0f64, picks.first().copied().unwrap_or(0));
        for &i in &picks {
            let mut central = |h: f64| {
                let orig = params.tensors()[ti].values[i];
                params.tensors_mut()[ti].values[i] = orig + h;
                let plus = loss(params);
                params.tensors_mut()[ti].values[i] = orig - h;
                let minus = loss(params);
                params.tensors_mut()[ti].values[i] = orig;
                (plus - minus) / (2.0 * h)
            };
            let numeric = if cfg.richardson {
                let coarse = central(cfg.epsilon);
                (4.0 * central(cfg.epsilon / 2.0) - coarse) / 3.0
            } else {
                central(cfg.epsilon)
            };
            let a = grad.values[i];
            let rel = relative_error(a, numeric);
            if rel > worst.0 || rel.is_nan() {
                worst = (rel, i);
            }
            entries.push(EntryCheck {
                tensor: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
        tensors.push(TensorCheck {
            tensor: name.clone(),
            checked: picks.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            pass: worst.0 <= cfg.tol,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    let pass = tensors.iter().all(|t| t.pass);
    Ok(GradCheckReport {
        entries,
        tensors,
        max_rel_error,
        tol: cfg.tol,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(p: &Vec<ParamTensor>) -> f64 {
        0.5 * p[0].sq_norm()
    }

    #[test]
    fn quadratic_matches_tightly() {
        let mut p = vec![ParamTensor::from_values("theta", 2, 1, vec![3.0, -2.0])];
        let g = vec![ParamTensor::from_values("theta", 2, 1, vec![3.0, -2.0])];
        let r = finite_difference_check(&mut p, &g, quadratic, &GradCheckConfig::default()).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        // parameters restored
        assert_eq!(p[0].values, vec![3.0, -2.0]);
    }

    #[test]
    fn corrupted_entry_is_reported() {
        let mut p = vec![
            ParamTensor::from_values("a", 2, 1, vec![1.0, 2.0]),
            ParamTensor::from_values("b", 3, 1, vec![0.5, -1.0, 4.0]),
        ];
        let loss = |p: &Vec<ParamTensor>| 0.5 * p[0].sq_norm() + 0.5 * p[1].sq_norm();
        let mut g: Vec<ParamTensor> = p.clone();
        g[1].values[2] *= 2.0;
        let r = finite_difference_check(&mut p, &g, loss, &GradCheckConfig::default()).unwrap();
        assert!(!r.pass);
        assert_eq!(r.failing_tensors(), vec!["b"]);
        assert_eq!(r.tensors[1].worst_index, 2);
    }

    #[test]
    fn independent_loss_has_zero_gradient() {
        let mut p = vec![ParamTensor::from_values("theta", 3, 1, vec![1.0, 2.0, 3.0])];
        let g = vec![ParamTensor::zeros("theta", 3, 1)];
        let r = finite_difference_check(&mut p, &g, |_| 4.2, &GradCheckConfig::default()).unwrap();
        assert!(r.pass);
        assert!(r.entries.iter().all(|e| e.numeric == 0.0));
    }

    #[test]
    fn nondeterministic_forward_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let mut p = vec![ParamTensor::zeros("x", 1, 1)];
        let g = p.clone();
        let loss = |_: &Vec<ParamTensor>| {
            calls.set(calls.get() + 1);
            calls.get() as f64
        };
        assert!(matches!(
            finite_difference_check(&mut p, &g, loss, &GradCheckConfig::default()),
            Err(GradCheckError::NonDeterministicForward { .. })
        ));
    }

    #[test]
    fn large_tensors_are_sampled() {
        let n = 1000;
        let vals: Vec<f64> = (0..n).map(|i| i as f64 * 1e-3).collect();
        let mut p = vec![ParamTensor::from_values("big", n, 1, vals.clone())];
        let g = vec![ParamTensor::from_values("big", n, 1, vals)];
        let r = finite_difference_check(&mut p, &g, quadratic, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.tensors[0].checked, 64);
        assert!(r.pass);
    }

    #[test]
    fn identity_layer() {
        let (out, cache) = Identity.forward(&[1.0, -2.0]).unwrap();
        assert_eq!(out, vec![1.0, -2.0]);
        let d = Identity.backward(&cache, &vec![0.5, 0.25], &mut ()).unwrap();
        assert_eq!(d, vec![0.5, 0.25]);
        assert!(matches!(
            Identity.backward(&cache, &vec![1.0], &mut ()),
            Err(LayerError::ShapeMismatch { .. })
        ));
    }
}
