//! Peephole LSTM sequence encoder with backpropagation through time.
//!
//! Per step, with `x` the input, `(h, c)` the previous state:
//!
//! ```text
//! i  = σ(W_i x + U_i h + V_i ∘ c + b_i)
//! f  = σ(W_f x + U_f h + V_f ∘ c + b_f)
//! o  = σ(W_o x + U_o h + V_o ∘ c + b_o)
//! c̃  = tanh(W_c x + U_c h)
//! c' = f ∘ c + i ∘ c̃
//! h' = o ∘ tanh(c')
//! ```
//!
//! The output gate peeks at the previous cell and the candidate has no bias
//! unless [`LstmOptions`] says otherwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{check_len, Layer, LayerError, ParamSet};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, sigmoid, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Hidden state at the last valid step.
    #[default]
    Last,
    /// Mean of hidden states over valid steps.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LstmOptions {
    /// Add a bias `b_c` inside the candidate tanh.
    pub cell_bias: bool,
    /// Output gate peeks at the new cell `c'` instead of `c`.
    pub peephole_current_cell: bool,
    /// Peepholes are full m x m matrices instead of diagonals.
    pub full_peephole: bool,
    pub pooling: Pooling,
}

const GATES: [&str; 4] = ["i", "f", "o", "c"];
const I: usize = 0;
const F: usize = 1;
const O: usize = 2;
const C: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub options: LstmOptions,
    pub input_size: usize,
    pub hidden_size: usize,
    /// Input weights, m x d, for gates i, f, o and the candidate.
    pub w: [ParamTensor; 4],
    /// Recurrent weights, m x m.
    pub u: [ParamTensor; 4],
    /// Peepholes for i, f, o: length-m vectors, or m x m when `full_peephole`.
    pub v: [ParamTensor; 3],
    pub b: [ParamTensor; 3],
    pub b_c: Option<ParamTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(m: usize) -> Self {
        LstmState {
            h: vec![0.0; m],
            c: vec![0.0; m],
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; 4],
    c: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SequenceCache {
    /// `None` for masked steps, which copy the state through.
    steps: Vec<Option<StepCache>>,
    valid: usize,
    input_size: usize,
}

impl LstmParams {
    pub fn zeros(prefix: &str, input_size: usize, hidden_size: usize, options: LstmOptions) -> Self {
        let (d, m) = (input_size, hidden_size);
        let name = |kind: &str, g: &str| format!("{prefix}.{kind}_{g}");
        let peep_cols = if options.full_peephole { m } else { 1 };
        LstmParams {
            options,
            input_size,
            hidden_size,
            w: GATES.map(|g| ParamTensor::zeros(name("W", g), m, d)),
            u: GATES.map(|g| ParamTensor::zeros(name("U", g), m, m)),
            v: [I, F, O].map(|k| ParamTensor::zeros(name("V", GATES[k]), m, peep_cols)),
            b: [I, F, O].map(|k| ParamTensor::zeros(name("b", GATES[k]), m, 1)),
            b_c: options.cell_bias.then(|| ParamTensor::zeros(name("b", "c"), m, 1)),
        }
    }

    pub fn random<R: Rng>(prefix: &str, d: usize, m: usize, options: LstmOptions, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(prefix, d, m, options);
        for t in p.tensors_mut() {
            t.fill_truncated_normal(rng, std);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &LstmParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    /// Tensors subject to L2 regularisation: everything except biases.
    pub fn weight_matrices(&self) -> Vec<&ParamTensor> {
        self.w.iter().chain(&self.u).chain(&self.v).collect()
    }

    fn peep(&self, k: usize, c: &[f64], out: &mut [f64]) {
        if self.options.full_peephole {
            matvec_acc(&self.v[k], c, out);
        } else {
            for ((o, v), c) in out.iter_mut().zip(&self.v[k].values).zip(c) {
                *o += v * c;
            }
        }
    }

    fn peep_back(&self, k: usize, da: &[f64], out: &mut [f64]) {
        if self.options.full_peephole {
            matvec_t_acc(&self.v[k], da, out);
        } else {
            for ((o, v), d) in out.iter_mut().zip(&self.v[k].values).zip(da) {
                *o += v * d;
            }
        }
    }

    fn peep_grad(grad: &mut ParamTensor, full: bool, da: &[f64], c: &[f64]) {
        if full {
            outer_acc(grad, da, c);
        } else {
            for ((g, d), c) in grad.values.iter_mut().zip(da).zip(c) {
                *g += d * c;
            }
        }
    }

    fn preactivation(&self, k: usize, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.hidden_size];
        matvec_acc(&self.w[k], x, &mut a);
        matvec_acc(&self.u[k], h, &mut a);
        a
    }

    /// One transition. Returns the new state and what backward needs.
    pub fn step(&self, x: &[f64], prev: &LstmState) -> Result<(LstmState, StepCache), LayerError> {
        check_len("lstm input", self.input_size, x.len())?;
        check_len("lstm hidden", self.hidden_size, prev.h.len())?;
        check_len("lstm cell", self.hidden_size, prev.c.len())?;
        let gate = |k: usize, peek: &[f64]| -> Vec<f64> {
            let mut a = self.preactivation(k, x, &prev.h);
            self.peep(k, peek, &mut a);
            for (a, b) in a.iter_mut().zip(&self.b[k].values) {
                *a = sigmoid(*a + b);
            }
            a
        };
        let i = gate(I, &prev.c);
        let f = gate(F, &prev.c);
        let mut g = self.preactivation(C, x, &prev.h);
        if let Some(bc) = &self.b_c {
            for (a, b) in g.iter_mut().zip(&bc.values) {
                *a += b;
            }
        }
        g.iter_mut().for_each(|a| *a = a.tanh());
        let c: Vec<f64> = (0..self.hidden_size).map(|j| f[j] * prev.c[j] + i[j] * g[j]).collect();
        let o = if self.options.peephole_current_cell {
            gate(O, &c)
        } else {
            gate(O, &prev.c)
        };
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = o.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();
        let cache = StepCache {
            x: x.to_vec(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            gates: [i, f, o, g],
            c: c.clone(),
            tanh_c,
        };
        Ok((LstmState { h, c }, cache))
    }

    /// Encodes `xs` from a zero state; steps with `mask[t] == false` copy
    /// the state through unchanged.
    pub fn encode_masked(&self, xs: &[Vec<f64>], mask: &[bool]) -> Result<(Vec<f64>, SequenceCache), LayerError> {
        check_len("lstm mask", xs.len(), mask.len())?;
        let mut state = LstmState::zeros(self.hidden_size);
        let mut steps = Vec::with_capacity(xs.len());
        let mut valid = 0;
        let mut sum_h = vec![0.0; self.hidden_size];
        for (x, &m) in xs.iter().zip(mask) {
            if m {
                let (next, cache) = self.step(x, &state)?;
                state = next;
                valid += 1;
                if self.options.pooling == Pooling::Mean {
                    crate::tensor::add_into(&mut sum_h, &state.h);
                }
                steps.push(Some(cache));
            } else {
                steps.push(None);
            }
        }
        if valid == 0 {
            return Err(LayerError::EmptySequence);
        }
        let out = match self.options.pooling {
            Pooling::Last => state.h,
            Pooling::Mean => sum_h.into_iter().map(|v| v / valid as f64).collect(),
        };
        Ok((
            out,
            SequenceCache {
                steps,
                valid,
                input_size: self.input_size,
            },
        ))
    }

    pub fn encode_sequence(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, LayerError> {
        Ok(self.encode_masked(xs, &vec![true; xs.len()])?.0)
    }

    /// BPTT. Accumulates parameter gradients into `grad` (which must share
    /// this layout) and returns one input gradient per step (zero on masked
    /// steps).
    pub fn backward_sequence(
        &self,
        cache: &SequenceCache,
        d_out: &[f64],
        grad: &mut LstmParams,
    ) -> Result<Vec<Vec<f64>>, LayerError> {
        let m = self.hidden_size;
        check_len("lstm backward", m, d_out.len())?;
        let full = self.options.full_peephole;
        let mean_scale = 1.0 / cache.valid as f64;
        let mut dh = vec![0.0; m];
        let mut dc = vec![0.0; m];
        if self.options.pooling == Pooling::Last {
            dh.copy_from_slice(d_out);
        }
        let mut dxs = vec![vec![0.0; cache.input_size]; cache.steps.len()];
        for (t, step) in cache.steps.iter().enumerate().rev() {
            let Some(s) = step else { continue };
            if self.options.pooling == Pooling::Mean {
                for (a, b) in dh.iter_mut().zip(d_out) {
                    *a += b * mean_scale;
                }
            }
            let [i, f, o, g] = &s.gates;
            let mut da = [vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]];
            let mut dc_t = dc.clone();
            for j in 0..m {
                let d_o = dh[j] * s.tanh_c[j];
                da[O][j] = d_o * o[j] * (1.0 - o[j]);
                dc_t[j] += dh[j] * o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
            }
            if self.options.peephole_current_cell {
                self.peep_back(O, &da[O], &mut dc_t);
            }
            for j in 0..m {
                da[I][j] = dc_t[j] * g[j] * i[j] * (1.0 - i[j]);
                da[F][j] = dc_t[j] * s.c_prev[j] * f[j] * (1.0 - f[j]);
                da[C][j] = dc_t[j] * i[j] * (1.0 - g[j] * g[j]);
            }
            let mut dc_prev: Vec<f64> = dc_t.iter().zip(f).map(|(d, f)| d * f).collect();
            self.peep_back(I, &da[I], &mut dc_prev);
            self.peep_back(F, &da[F], &mut dc_prev);
            if !self.options.peephole_current_cell {
                self.peep_back(O, &da[O], &mut dc_prev);
            }

            let mut dh_prev = vec![0.0; m];
            for k in 0..4 {
                outer_acc(&mut grad.w[k], &da[k], &s.x);
                outer_acc(&mut grad.u[k], &da[k], &s.h_prev);
                matvec_t_acc(&self.w[k], &da[k], &mut dxs[t]);
                matvec_t_acc(&self.u[k], &da[k], &mut dh_prev);
            }
            for k in [I, F, O] {
                let peeked = if k == O && self.options.peephole_current_cell {
                    &s.c
                } else {
                    &s.c_prev
                };
                Self::peep_grad(&mut grad.v[k], full, &da[k], peeked);
                crate::tensor::add_into(&mut grad.b[k].values, &da[k]);
            }
            if let Some(bc) = grad.b_c.as_mut() {
                crate::tensor::add_into(&mut bc.values, &da[C]);
            }
            dh = dh_prev;
            dc = dc_prev;
        }
        Ok(dxs)
    }
}

impl ParamSet for LstmParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = self.w.iter().chain(&self.u).chain(&self.v).chain(&self.b).collect();
        out.extend(self.b_c.as_ref());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self
            .w
            .iter_mut()
            .chain(self.u.iter_mut())
            .chain(self.v.iter_mut())
            .chain(self.b.iter_mut())
            .collect();
        out.extend(self.b_c.as_mut());
        out
    }
}

impl Layer for LstmParams {
    type Input = [Vec<f64>];
    type Output = Vec<f64>;
    type Cache = SequenceCache;
    type InputGrad = Vec<Vec<f64>>;
    type Grad = LstmParams;

    fn forward(&self, xs: &[Vec<f64>]) -> Result<(Vec<f64>, SequenceCache), LayerError> {
        self.encode_masked(xs, &vec![true; xs.len()])
    }

    fn backward(&self, cache: &SequenceCache, d_out: &Vec<f64>, grad: &mut LstmParams) -> Result<Vec<Vec<f64>>, LayerError> {
        self.backward_sequence(cache, d_out, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference_check, GradCheckConfig};
    use crate::rng::{salted, Stream};
    use crate::tensor::dot;

    #[test]
    fn zero_parameters_give_zero_state() {
        let p = LstmParams::zeros("l", 3, 2, LstmOptions::default());
        let (s, cache) = p.step(&[1.0, -4.0, 2.0], &LstmState::zeros(2)).unwrap();
        assert_eq!(s.h, vec![0.0, 0.0]);
        assert_eq!(s.c, vec![0.0, 0.0]);
        for gate in &cache.gates[..3] {
            assert_eq!(gate, &vec![0.5, 0.5]);
        }
        assert_eq!(cache.gates[C], vec![0.0, 0.0]);
    }

    #[test]
    fn single_unit_hand_evaluation() {
        // i = f = o = 0.5, c̃ = tanh(1), c = 0.5 tanh(1), h = 0.5 tanh(c)
        let mut p = LstmParams::zeros("l", 1, 1, LstmOptions::default());
        p.w[C].values[0] = 1.0;
        let (s, _) = p.step(&[1.0], &LstmState::zeros(1)).unwrap();
        assert!((s.c[0] - 0.380797077977882).abs() < 1e-12, "{}", s.c[0]);
        assert!((s.h[0] - 0.18169974219452625).abs() < 1e-12, "{}", s.h[0]);
    }

    #[test]
    fn saturated_gates_retain_memory() {
        let mut p = LstmParams::zeros("l", 1, 1, LstmOptions::default());
        p.b[F].values[0] = 50.0;
        p.b[I].values[0] = -50.0;
        let prev = LstmState {
            h: vec![0.0],
            c: vec![1e3],
        };
        let (s, _) = p.step(&[0.3], &prev).unwrap();
        assert!((s.c[0] - 1e3).abs() < 1e-9);
    }

    fn seq(rng: &mut impl Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn length_one_equals_step() {
        let mut rng = salted(4, Stream::Init, 0);
        let p = LstmParams::random("l", 3, 4, LstmOptions::default(), 0.5, &mut rng);
        let xs = seq(&mut rng, 1, 3);
        let (s, _) = p.step(&xs[0], &LstmState::zeros(4)).unwrap();
        assert_eq!(p.encode_sequence(&xs).unwrap(), s.h);
    }

    #[test]
    fn composition_matches_manual_stepping() {
        let mut rng = salted(5, Stream::Init, 0);
        let p = LstmParams::random("l", 3, 4, LstmOptions::default(), 0.5, &mut rng);
        let xs = seq(&mut rng, 2, 3);
        let (s1, _) = p.step(&xs[0], &LstmState::zeros(4)).unwrap();
        let (s2, _) = p.step(&xs[1], &s1).unwrap();
        assert_eq!(p.encode_sequence(&xs).unwrap(), s2.h);
    }

    #[test]
    fn padding_is_invisible() {
        let mut rng = salted(6, Stream::Init, 0);
        for pooling in [Pooling::Last, Pooling::Mean] {
            let opts = LstmOptions { pooling, ..Default::default() };
            let p = LstmParams::random("l", 3, 4, opts, 0.5, &mut rng);
            let xs = seq(&mut rng, 4, 3);
            let plain = p.encode_masked(&xs, &[true; 4]).unwrap().0;
            let mut padded = xs.clone();
            padded.extend(seq(&mut rng, 3, 3));
            let mask = [true, true, true, true, false, false, false];
            assert_eq!(p.encode_masked(&padded, &mask).unwrap().0, plain);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = LstmParams::zeros("l", 2, 2, LstmOptions::default());
        assert_eq!(p.encode_sequence(&[]).unwrap_err(), LayerError::EmptySequence);
        assert_eq!(
            p.encode_masked(&[vec![0.0, 0.0]], &[false]).unwrap_err(),
            LayerError::EmptySequence
        );
    }

    #[test]
    fn backward_rejects_bad_upstream_shape() {
        let p = LstmParams::zeros("l", 2, 3, LstmOptions::default());
        let (_, cache) = p.forward(&[vec![1.0, 1.0]]).unwrap();
        let mut g = p.zeros_like();
        assert!(matches!(
            p.backward(&cache, &vec![1.0; 2], &mut g),
            Err(LayerError::ShapeMismatch { .. })
        ));
    }

    /// Projects the encoding onto a fixed direction so the loss is scalar.
    fn check_variant(opts: LstmOptions, seed: u64, t: usize) {
        let (d, m) = (8, 6);
        let mut rng = salted(seed, Stream::GradCheck, 1);
        let mut p = LstmParams::random("lstm", d, m, opts, 0.5, &mut rng);
        let xs = seq(&mut rng, t, d);
        let mut mask = vec![true; t];
        if t > 2 {
            mask[t - 1] = false;
        }
        let dir: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = p.encode_masked(&xs, &mask).unwrap();
        let mut g = p.zeros_like();
        let dxs = p.backward_sequence(&cache, &dir, &mut g).unwrap();
        if t > 2 {
            assert!(dxs[t - 1].iter().all(|v| *v == 0.0));
        }
        let analytic: Vec<ParamTensor> = g.tensors().into_iter().cloned().collect();
        let loss = |p: &LstmParams| dot(&p.encode_masked(&xs, &mask).unwrap().0, &dir);
        let report = finite_difference_check(&mut p, &analytic, loss, &GradCheckConfig::default()).unwrap();
        assert!(report.pass, "{opts:?} seed {seed} T={t}\n{report}");
    }

    #[test]
    fn bptt_matches_finite_differences() {
        for seed in 0..5 {
            for t in [1, 2, 7] {
                check_variant(LstmOptions::default(), seed, t);
            }
        }
    }

    #[test]
    fn bptt_variants_match_finite_differences() {
        let variants = [
            LstmOptions { cell_bias: true, ..Default::default() },
            LstmOptions { peephole_current_cell: true, ..Default::default() },
            LstmOptions { full_peephole: true, ..Default::default() },
            LstmOptions { pooling: Pooling::Mean, ..Default::default() },
            LstmOptions { cell_bias: true, peephole_current_cell: true, full_peephole: true, pooling: Pooling::Mean },
        ];
        for (k, opts) in variants.into_iter().enumerate() {
            check_variant(opts, 10 + k as u64, 5);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (d, m, t) = (3, 4, 3);
        let mut rng = salted(9, Stream::GradCheck, 2);
        let p = LstmParams::random("lstm", d, m, LstmOptions::default(), 0.5, &mut rng);
        let xs = seq(&mut rng, t, d);
        let dir: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = p.forward(&xs).unwrap();
        let dxs = p.backward(&cache, &dir, &mut p.zeros_like()).unwrap();
        let mut inputs = vec![ParamTensor::from_values("xs", t, d, xs.concat())];
        let analytic = vec![ParamTensor::from_values("xs", t, d, dxs.concat())];
        let loss = |x: &Vec<ParamTensor>| {
            let rows: Vec<Vec<f64>> = (0..t).map(|r| x[0].row(r).to_vec()).collect();
            dot(&p.encode_sequence(&rows).unwrap(), &dir)
        };
        let r = finite_difference_check(&mut inputs, &analytic, loss, &GradCheckConfig::default()).unwrap();
        assert!(r.pass, "{r}");
    }

    #[test]
    fn hidden_state_bounded() {
        let mut rng = salted(2, Stream::Init, 0);
        let p = LstmParams::random("l", 4, 5, LstmOptions::default(), 3.0, &mut rng);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random_range(-50.0..50.0)).collect()).collect();
        let h = p.encode_sequence(&xs).unwrap();
        assert!(h.iter().all(|v| v.abs() <= 1.0));
    }
}
