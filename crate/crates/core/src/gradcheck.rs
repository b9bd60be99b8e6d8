//! Finite-difference verification of the whole network on tiny random
//! models, over several seeds, sequence lengths and loss modes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{finite_difference_check, GradCheckConfig, GradCheckError, GradCheckReport, ParamSet};
use crate::encoder::LstmOptions;
use crate::matcher::{LossMode, MatcherForm};
use crate::model::{Model, ModelOptions};
use crate::par;
use crate::rng::{salted, Stream};

#[derive(Debug, thiserror::Error)]
pub enum GradCheckSetupError {
    #[error("no tensor named `{name}`; known tensors: {known}")]
    UnknownTensor { name: String, known: String },
    #[error("invalid gradient-check setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Check(#[from] GradCheckError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSetup {
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub labels: usize,
    pub vocab_size: usize,
    pub seeds: Vec<u64>,
    pub lengths: Vec<usize>,
    pub modes: Vec<LossMode>,
    pub matcher_form: MatcherForm,
    pub lstm: LstmOptions,
    pub init_std: f64,
    pub check: GradCheckConfig,
    /// Doubles the largest analytic entry of this tensor before checking.
    pub corrupt: Option<String>,
    pub parallel: bool,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            embed_dim: 8,
            hidden_size: 6,
            labels: 3,
            vocab_size: 16,
            seeds: vec![0],
            lengths: vec![5],
            modes: vec![LossMode::Literal, LossMode::OneVsRest],
            matcher_form: MatcherForm::default(),
            lstm: LstmOptions::default(),
            init_std: 0.5,
            check: GradCheckConfig {
                epsilon: 1e-2,
                richardson: true,
                ..GradCheckConfig::default()
            },
            corrupt: None,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub seed: u64,
    pub length: usize,
    pub mode: LossMode,
    pub report: GradCheckReport,
}

/// Tensor names of the model the setup builds, in check order.
pub fn tensor_names(setup: &GradCheckSetup) -> Vec<String> {
    build(setup, LossMode::OneVsRest, 0).tensor_names()
}

fn build(setup: &GradCheckSetup, mode: LossMode, seed: u64) -> Model {
    let options = ModelOptions {
        embed_dim: setup.embed_dim,
        hidden_size: setup.hidden_size,
        lstm: setup.lstm,
        loss_mode: mode,
        matcher_bias: true,
        matcher_form: setup.matcher_form,
        tie_lookups: false,
    };
    Model::init(options, setup.vocab_size, setup.init_std, &mut salted(seed, Stream::GradCheck, 1))
}

fn run_case(setup: &GradCheckSetup, seed: u64, length: usize, mode: LossMode) -> Result<GradCheckCase, GradCheckSetupError> {
    let mut model = build(setup, mode, seed);
    let mut rng = salted(seed, Stream::GradCheck, 2 + length as u64);
    let v = setup.vocab_size;
    let ids: Vec<usize> = (0..length).map(|_| rng.random_range(2..v)).collect();
    let labels: Vec<Vec<usize>> = (0..setup.labels)
        .map(|_| (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..v)).collect())
        .collect();
    let gold = rng.random_range(0..setup.labels);

    let g = model
        .batch_gradient(&[(&ids, gold)], &labels, 1.0, false)
        .map_err(|e| GradCheckSetupError::Invalid(e.to_string()))?;
    let mut analytic = g.grads.to_dense(&model);
    if let Some(name) = &setup.corrupt {
        let t = analytic.iter_mut().find(|t| &t.name == name).ok_or_else(|| GradCheckSetupError::UnknownTensor {
            name: name.clone(),
            known: model.tensor_names().join(", "),
        })?;
        let (i, _) = t
            .values
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
        t.values[i] = if t.values[i] == 0.0 { 1.0 } else { 2.0 * t.values[i] };
    }
    let mut cfg = GradCheckConfig { seed, ..setup.check };
    if setup.corrupt.is_some() {
        cfg.exhaustive_limit = usize::MAX;
    }
    let loss = |m: &Model| {
        let enc = m.encode_labels(&labels).expect("label ids in range");
        m.loss(&ids, gold, &enc).expect("gold in range")
    };
    let report = finite_difference_check(&mut model, &analytic, loss, &cfg)?;
    Ok(GradCheckCase {
        seed,
        length,
        mode,
        report,
    })
}

pub fn check_model(setup: &GradCheckSetup) -> Result<Vec<GradCheckCase>, GradCheckSetupError> {
    if setup.embed_dim == 0 || setup.hidden_size == 0 {
        return Err(GradCheckSetupError::Invalid("dimensions must be positive".into()));
    }
    if setup.labels < 2 || setup.vocab_size < 3 {
        return Err(GradCheckSetupError::Invalid("needs at least 2 labels and 3 vocabulary rows".into()));
    }
    if setup.lengths.contains(&0) {
        return Err(GradCheckSetupError::Invalid("sequence lengths must be positive".into()));
    }
    let mut cases = Vec::new();
    for &seed in &setup.seeds {
        for &length in &setup.lengths {
            for &mode in &setup.modes {
                cases.push((seed, length, mode));
            }
        }
    }
    par::map(&cases, setup.parallel, |&(s, t, m)| run_case(setup, s, t, m)).into_iter().collect()
}
