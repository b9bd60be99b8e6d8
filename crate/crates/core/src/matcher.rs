//! Scoring an input representation against label representations, the
//! per-sample and multi-task losses, and distance-based matching for the
//! unsupervised model.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{check_len, LayerError, ParamSet};
use crate::tensor::{axpy, dot, sigmoid, ParamTensor};

pub const SCORE_FLOOR: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("gold label {gold} out of range for {labels} labels")]
    GoldOutOfRange { gold: usize, labels: usize },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `-log s_gold` only.
    Literal,
    /// Binary cross-entropy: gold is positive, every other label negative.
    #[default]
    OneVsRest,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Literal => "literal",
            LossMode::OneVsRest => "one_vs_rest",
        })
    }
}

impl FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(LossMode::Literal),
            "one_vs_rest" | "one-vs-rest" => Ok(LossMode::OneVsRest),
            other => Err(format!("unknown loss mode {other:?}")),
        }
    }
}

/// Which 2m-vector the weight `M` is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherForm {
    /// `X ⊕ Y`. The logit splits into an input term shared by every label
    /// plus a label term, so the best label never depends on the input.
    Concat,
    /// `(X ⊙ Y) ⊕ (X − Y)²`, which lets input and label interact.
    #[default]
    Interaction,
}

impl fmt::Display for MatcherForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatcherForm::Concat => "concat",
            MatcherForm::Interaction => "interaction",
        })
    }
}

impl FromStr for MatcherForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(MatcherForm::Concat),
            "interaction" => Ok(MatcherForm::Interaction),
            other => Err(format!("unknown matcher form {other:?} (expected concat or interaction)")),
        }
    }
}

/// `s = σ(M · φ(X, Y) + bias)` with `M` of length 2m, see [`MatcherForm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherParams {
    pub hidden_size: usize,
    pub form: MatcherForm,
    pub weight: ParamTensor,
    /// Absent when the matcher is built without a bias.
    pub bias: Option<ParamTensor>,
}

impl MatcherParams {
    pub fn zeros(m: usize, with_bias: bool, form: MatcherForm) -> Self {
        MatcherParams {
            hidden_size: m,
            form,
            weight: ParamTensor::zeros("matcher.M", 2 * m, 1),
            bias: with_bias.then(|| ParamTensor::zeros("matcher.bias", 1, 1)),
        }
    }

    /// Random weights; the bias starts at zero.
    pub fn random<R: Rng>(m: usize, with_bias: bool, form: MatcherForm, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(m, with_bias, form);
        p.weight.fill_truncated_normal(rng, std);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hidden_size, self.bias.is_some(), self.form)
    }

    pub fn add_assign(&mut self, other: &MatcherParams) {
        self.weight.add_assign(&other.weight);
        if let (Some(a), Some(b)) = (self.bias.as_mut(), other.bias.as_ref()) {
            a.add_assign(b);
        }
    }

    pub fn bias_value(&self) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b.values[0])
    }

    /// The 2m-vector `M` is applied to.
    pub fn features(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, LayerError> {
        let m = self.hidden_size;
        check_len("matcher input", m, x.len())?;
        check_len("matcher label", m, y.len())?;
        Ok(match self.form {
            MatcherForm::Concat => x.iter().chain(y).copied().collect(),
            MatcherForm::Interaction => {
                let prod = x.iter().zip(y).map(|(a, b)| a * b);
                let sq = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b));
                prod.chain(sq).collect()
            }
        })
    }

    pub fn logit(&self, x: &[f64], y: &[f64]) -> Result<f64, LayerError> {
        Ok(dot(&self.weight.values, &self.features(x, y)?) + self.bias_value())
    }

    pub fn score(&self, x: &[f64], y: &[f64]) -> Result<f64, LayerError> {
        Ok(sigmoid(self.logit(x, y)?))
    }

    /// Scores of `x` against every label.
    pub fn scores(&self, x: &[f64], ys: &[Vec<f64>]) -> Result<Vec<f64>, LayerError> {
        ys.iter().map(|y| self.score(x, y)).collect()
    }

    /// Given dLoss/dlogit per label, accumulates parameter gradients and
    /// returns (dX, dY per label).
    pub fn backward(
        &self,
        x: &[f64],
        ys: &[Vec<f64>],
        d_logits: &[f64],
        grad: &mut MatcherParams,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), LayerError> {
        let m = self.hidden_size;
        check_len("matcher backward", ys.len(), d_logits.len())?;
        let (wa, wb) = self.weight.values.split_at(m);
        let mut dx = vec![0.0; m];
        let mut dys = Vec::with_capacity(ys.len());
        for (y, &dz) in ys.iter().zip(d_logits) {
            let phi = self.features(x, y)?;
            axpy(dz, &phi, &mut grad.weight.values);
            if let Some(b) = grad.bias.as_mut() {
                b.values[0] += dz;
            }
            match self.form {
                MatcherForm::Concat => {
                    axpy(dz, wa, &mut dx);
                    dys.push(wb.iter().map(|w| w * dz).collect());
                }
                MatcherForm::Interaction => {
                    let mut dy = vec![0.0; m];
                    for k in 0..m {
                        let diff = 2.0 * (x[k] - y[k]) * wb[k];
                        dx[k] += dz * (wa[k] * y[k] + diff);
                        dy[k] = dz * (wa[k] * x[k] - diff);
                    }
                    dys.push(dy);
                }
            }
        }
        Ok((dx, dys))
    }
}

impl ParamSet for MatcherParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

fn clamp(s: f64) -> f64 {
    s.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)
}

fn check_gold(scores: &[f64], gold: usize) -> Result<(), MatchError> {
    if gold < scores.len() {
        Ok(())
    } else {
        Err(MatchError::GoldOutOfRange {
            gold,
            labels: scores.len(),
        })
    }
}

/// Cross-entropy of one sample; scores are clamped to `[1e-7, 1 - 1e-7]`.
pub fn sample_loss(scores: &[f64], gold: usize, mode: LossMode) -> Result<f64, MatchError> {
    check_gold(scores, gold)?;
    let mut loss = -clamp(scores[gold]).ln();
    if mode == LossMode::OneVsRest {
        for (j, &s) in scores.iter().enumerate() {
            if j != gold {
                loss -= (1.0 - clamp(s)).ln();
            }
        }
    }
    Ok(loss)
}

/// dLoss/dlogit for each label. Zero where the clamp is active, which is
/// the exact derivative of the clamped loss.
pub fn sample_loss_grad(scores: &[f64], gold: usize, mode: LossMode) -> Result<Vec<f64>, MatchError> {
    check_gold(scores, gold)?;
    let live = |s: f64| (SCORE_FLOOR..=1.0 - SCORE_FLOOR).contains(&s);
    Ok(scores
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            if !live(s) {
                0.0
            } else if j == gold {
                s - 1.0
            } else if mode == LossMode::OneVsRest {
                s
            } else {
                0.0
            }
        })
        .collect())
}

/// `Σ_k λ_k Σ_i l_i` over per-task groups of sample losses.
pub fn total_loss(groups: &[(&str, &[f64])], weights: &HashMap<String, f64>) -> Result<f64, MatchError> {
    groups.iter().try_fold(0.0, |acc, (task, losses)| {
        let w = weights.get(*task).ok_or_else(|| MatchError::UnknownTask(task.to_string()))?;
        Ok(acc + w * losses.iter().sum::<f64>())
    })
}

/// First index of the maximum; NaN never wins.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub loss: Option<f64>,
}

impl MatchResult {
    pub fn new(scores: Vec<f64>, gold: Option<usize>, mode: LossMode) -> Result<Self, MatchError> {
        let loss = gold.map(|g| sample_loss(&scores, g, mode)).transpose()?;
        Ok(MatchResult {
            predicted: argmax(&scores),
            scores,
            loss,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    L2,
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        })
    }
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Highest cosine, or smallest L2 distance; ties go to the lowest index.
pub fn unsupervised_match(x: &[f64], labels: &[Vec<f64>], metric: Metric) -> usize {
    let score: Vec<f64> = match metric {
        Metric::Cosine => labels.iter().map(|y| cosine(x, y)).collect(),
        Metric::L2 => labels.iter().map(|y| -l2_distance(x, y)).collect(),
    };
    argmax(&score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matcher(w: &[f64], bias: f64) -> MatcherParams {
        let mut p = MatcherParams::zeros(w.len() / 2, true, MatcherForm::Concat);
        p.weight.values.copy_from_slice(w);
        p.bias.as_mut().unwrap().values[0] = bias;
        p
    }

    #[test]
    fn score_examples() {
        assert_eq!(matcher(&[0.0, 0.0], 0.0).score(&[3.0], &[-7.0]).unwrap(), 0.5);
        assert_eq!(matcher(&[1.0, 1.0], 0.0).score(&[2.0], &[-2.0]).unwrap(), 0.5);
        let s = matcher(&[1.0, 0.0], 0.0).score(&[1.0], &[123.0]).unwrap();
        assert!((s - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        let sc = [0.9, 0.4];
        assert!((sample_loss(&sc, 0, LossMode::Literal).unwrap() - 0.10536051565782628).abs() < 1e-12);
        assert!((sample_loss(&sc, 0, LossMode::OneVsRest).unwrap() - 0.6161861394238171).abs() < 1e-12);
        let half = [0.5; 4];
        assert!((sample_loss(&half, 3, LossMode::Literal).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(
            sample_loss(&sc, 2, LossMode::Literal),
            Err(MatchError::GoldOutOfRange { gold: 2, labels: 2 })
        );
    }

    #[test]
    fn total_loss_examples() {
        let w: HashMap<String, f64> = [("a".into(), 1.0), ("b".into(), 2.0)].into();
        assert_eq!(total_loss(&[("a", &[0.5, 0.25])], &w).unwrap(), 0.75);
        assert_eq!(total_loss(&[("a", &[0.5]), ("b", &[0.25])], &w).unwrap(), 1.0);
        assert_eq!(total_loss(&[], &w).unwrap(), 0.0);
        assert_eq!(
            total_loss(&[("zz", &[1.0])], &w),
            Err(MatchError::UnknownTask("zz".into()))
        );
    }

    #[test]
    fn ties_break_low() {
        let p = matcher(&[0.3, -0.2, 0.1, 0.4], 0.1);
        let y = vec![0.5, 0.5];
        let r = MatchResult::new(p.scores(&[1.0, 2.0], &[y.clone(), y]).unwrap(), Some(1), LossMode::OneVsRest).unwrap();
        assert_eq!(r.predicted, 0);
        assert!(r.loss.unwrap() > 0.0);
    }

    #[test]
    fn unsupervised_examples() {
        assert_eq!(unsupervised_match(&[1.0, 0.0], &[vec![0.0, 1.0], vec![1.0, 0.0]], Metric::Cosine), 1);
        assert_eq!(unsupervised_match(&[1.0, 0.0], &[vec![2.0, 0.0], vec![0.0, 1.0]], Metric::L2), 0);
        assert_eq!(unsupervised_match(&[0.0, 0.0], &[vec![2.0, 0.0], vec![0.0, 1.0]], Metric::Cosine), 0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn grad_zero_under_clamp() {
        let g = sample_loss_grad(&[1.0 - 1e-9, 1e-9], 0, LossMode::OneVsRest).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = sample_loss_grad(&[0.25, 0.75], 0, LossMode::Literal).unwrap();
        assert_eq!(g, vec![-0.75, 0.0]);
    }

    #[test]
    fn y_half_zeroed_ignores_label() {
        let p = matcher(&[0.7, -0.3, 0.0, 0.0], 0.2);
        assert_eq!(p.score(&[1.0, 2.0], &[5.0, 5.0]).unwrap(), p.score(&[1.0, 2.0], &[-3.0, 0.1]).unwrap());
    }

    #[test]
    fn interaction_features() {
        let mut p = matcher(&[1.0, 0.0], 0.0);
        p.form = MatcherForm::Interaction;
        assert_eq!(p.features(&[3.0], &[-1.0]).unwrap(), vec![-3.0, 16.0]);
        assert_eq!(p.logit(&[3.0], &[-1.0]).unwrap(), -3.0);
        // the input changes which label wins
        let ys = [vec![1.0], vec![-1.0]];
        assert_eq!(argmax(&p.scores(&[1.0], &ys).unwrap()), 0);
        assert_eq!(argmax(&p.scores(&[-1.0], &ys).unwrap()), 1);
    }

    #[test]
    fn concat_prediction_ignores_the_input() {
        let p = matcher(&[0.4, -1.2, 0.9, 0.3], 0.1);
        let ys = [vec![0.2, -0.5], vec![-0.7, 0.6], vec![0.1, 0.1]];
        let first = argmax(&p.scores(&[1.0, 1.0], &ys).unwrap());
        for x in [[-3.0, 2.0], [0.0, 0.0], [5.0, -5.0]] {
            assert_eq!(argmax(&p.scores(&x, &ys).unwrap()), first);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::diff::{finite_difference_check, GradCheckConfig};
        for form in [MatcherForm::Concat, MatcherForm::Interaction] {
            let mut p = MatcherParams::random(3, true, form, 0.5, &mut crate::rng::stream(2, crate::rng::Stream::GradCheck));
            let x = vec![0.3, -0.8, 0.5];
            let ys = vec![vec![0.1, 0.4, -0.6], vec![-0.9, 0.2, 0.7]];
            let loss = |p: &MatcherParams, x: &[f64], ys: &[Vec<f64>]| sample_loss(&p.scores(x, ys).unwrap(), 1, LossMode::OneVsRest).unwrap();
            let dz = sample_loss_grad(&p.scores(&x, &ys).unwrap(), 1, LossMode::OneVsRest).unwrap();
            let mut g = p.zeros_like();
            let (dx, dys) = p.backward(&x, &ys, &dz, &mut g).unwrap();
            let r = finite_difference_check(&mut p, &g.tensors().into_iter().cloned().collect::<Vec<_>>(), |p| loss(p, &x, &ys), &GradCheckConfig::default()).unwrap();
            assert!(r.pass, "{form}\n{r}");
            let eps = 1e-6;
            for k in 0..3 {
                let mut xp = x.clone();
                xp[k] += eps;
                let mut xm = x.clone();
                xm[k] -= eps;
                let num = (loss(&p, &xp, &ys) - loss(&p, &xm, &ys)) / (2.0 * eps);
                assert!((num - dx[k]).abs() < 1e-8, "{form} dx[{k}]");
                for j in 0..2 {
                    let mut yp = ys.clone();
                    yp[j][k] += eps;
                    let mut ym = ys.clone();
                    ym[j][k] -= eps;
                    let num = (loss(&p, &x, &yp) - loss(&p, &x, &ym)) / (2.0 * eps);
                    assert!((num - dys[j][k]).abs() < 1e-8, "{form} dy[{j}][{k}]");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn one_vs_rest_dominates_literal(scores in proptest::collection::vec(0.0f64..1.0, 2..6), g in 0usize..6) {
            let gold = g % scores.len();
            let a = sample_loss(&scores, gold, LossMode::OneVsRest).unwrap();
            let b = sample_loss(&scores, gold, LossMode::Literal).unwrap();
            prop_assert!(a >= b);
        }

        #[test]
        fn total_loss_linear_in_weight(losses in proptest::collection::vec(0.0f64..5.0, 0..6), other in 0.0f64..3.0, w in 0.0f64..4.0) {
            let one: HashMap<String, f64> = [("k".into(), w), ("o".into(), 1.0)].into();
            let two: HashMap<String, f64> = [("k".into(), 2.0 * w), ("o".into(), 1.0)].into();
            let base = total_loss(&[("o", &[other])], &one).unwrap();
            let a = total_loss(&[("k", &losses), ("o", &[other])], &one).unwrap() - base;
            let b = total_loss(&[("k", &losses), ("o", &[other])], &two).unwrap() - base;
            prop_assert!((b - 2.0 * a).abs() <= 1e-9 * (1.0 + b.abs()));
        }

        #[test]
        fn cosine_match_scale_invariant(x in proptest::collection::vec(-3.0f64..3.0, 3), ys in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 2..5), k in 0.1f64..10.0, ks in proptest::collection::vec(0.1f64..10.0, 5)) {
            let a = unsupervised_match(&x, &ys, Metric::Cosine);
            let xs: Vec<f64> = x.iter().map(|v| v * k).collect();
            let scaled: Vec<Vec<f64>> = ys.iter().zip(&ks).map(|(y, s)| y.iter().map(|v| v * s).collect()).collect();
            let b = unsupervised_match(&xs, &scaled, Metric::Cosine);
            let sims: Vec<f64> = ys.iter().map(|y| cosine(&x, y)).collect();
            // only meaningful when the winner is not a near tie
            let second = sims.iter().enumerate().filter(|(j, _)| *j != a).map(|(_, s)| *s).fold(f64::MIN, f64::max);
            prop_assume!(sims[a] - second > 1e-9);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn argmax_unaffected_by_clamp(scores in proptest::collection::vec(0.0f64..1.0, 2..6)) {
            let clamped: Vec<f64> = scores.iter().map(|s| clamp(*s)).collect();
            let a = argmax(&scores);
            prop_assume!(scores.iter().enumerate().all(|(j, s)| j == a || (scores[a] - s) > 1e-6));
            prop_assert_eq!(a, argmax(&clamped));
        }
    }
}
