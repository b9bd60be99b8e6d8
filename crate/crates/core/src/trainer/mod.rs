//! Minibatch SGD over several tasks, the update workflows for adding tasks,
//! the ablation driver and checkpoint persistence.

mod ablation;
mod checkpoint;
mod schedule;
mod update;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, Example, Split, TaskData, TaskSpec, TokenId, Vocabulary};
use crate::diff::LayerError;
use crate::encoder::LstmOptions;
use crate::matcher::{LossMode, MatchError, MatcherForm};
use crate::model::{label_ids, Model, ModelError, ModelOptions};
use crate::par;
use crate::rng::{self, EngineRng, Stream};

pub use ablation::{pairwise_ablation, AblationReport, AblationRun, MAX_ABLATION_TASKS};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, ModelCheckpoint, CHECKPOINT_VERSION};
pub use schedule::{make_schedule, Batch, BatchSchedule};
pub use update::{cold_update, hot_update, zero_update_eval, ZeroShotReport};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss or parameter in tensor `{tensor}`")]
    NonFiniteLoss { tensor: String },
    #[error("no training data{}", .task_id.as_ref().map(|t| format!(" for task `{t}`")).unwrap_or_default())]
    NoTrainingData { task_id: Option<String> },
    #[error("task `{0}` has no test data")]
    NoTestData(String),
    #[error("task `{0}` is already registered")]
    DuplicateTaskId(String),
    #[error("task `{0}` is not registered")]
    UnknownTask(String),
    #[error("data for registered task `{0}` was not supplied")]
    MissingTaskData(String),
    #[error("ablation supports at most {max} tasks, got {got}")]
    TooManyTasks { got: usize, max: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Layer(e) => TrainError::Layer(e),
            ModelError::Match(e) => TrainError::Match(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub reg: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub init_std: f64,
    /// Per-task loss weights; tasks not listed use the weight in their file.
    pub task_weights: BTreeMap<String, f64>,
    /// `lr / (1 + lr_decay * epoch)`; zero keeps the rate constant.
    pub lr_decay: f64,
    pub clip_norm: Option<f64>,
    pub tie_lookups: bool,
    pub matcher_bias: bool,
    pub matcher_form: MatcherForm,
    pub lstm: LstmOptions,
    pub min_count: usize,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 300,
            hidden_size: 100,
            batch_size: 32,
            lr: 0.1,
            reg: 1e-5,
            epochs: 20,
            seed: 0,
            loss_mode: LossMode::OneVsRest,
            init_std: 0.2,
            task_weights: BTreeMap::new(),
            lr_decay: 0.0,
            clip_norm: None,
            tie_lookups: false,
            matcher_bias: true,
            matcher_form: MatcherForm::Interaction,
            lstm: LstmOptions::default(),
            min_count: 1,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.embed_dim == 0 || self.hidden_size == 0 {
            return bad("dimensions must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.reg.is_finite() && self.reg >= 0.0) {
            return bad("reg must be finite and non-negative");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay >= 0.0) {
            return bad("lr_decay must be finite and non-negative");
        }
        if matches!(self.clip_norm, Some(c) if !(c.is_finite() && c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        if self.task_weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("task weights must be finite and non-negative");
        }
        Ok(())
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            embed_dim: self.embed_dim,
            hidden_size: self.hidden_size,
            lstm: self.lstm,
            loss_mode: self.loss_mode,
            matcher_bias: self.matcher_bias,
            matcher_form: self.matcher_form,
            tie_lookups: self.tie_lookups,
        }
    }

    pub fn task_weight(&self, spec: &TaskSpec) -> f64 {
        self.task_weights.get(&spec.task_id).copied().unwrap_or(spec.weight)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / (1.0 + self.lr_decay * epoch as f64)
    }

    /// Adopts the architecture of an existing model, keeping the
    /// optimisation settings of `self`.
    pub fn with_architecture(&self, options: &ModelOptions) -> TrainConfig {
        TrainConfig {
            embed_dim: options.embed_dim,
            hidden_size: options.hidden_size,
            lstm: options.lstm,
            loss_mode: options.loss_mode,
            matcher_bias: options.matcher_bias,
            matcher_form: options.matcher_form,
            tie_lookups: options.tie_lookups,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub spec: TaskSpec,
    pub source: Option<String>,
    /// Bumped whenever parameters change, so cached label encodings can be
    /// recognised as stale.
    pub label_version: u64,
}

/// Registered tasks in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    entries: Vec<RegistryEntry>,
}

impl TaskRegistry {
    pub fn from_specs<'a>(specs: impl IntoIterator<Item = &'a TaskSpec>) -> Result<Self, TrainError> {
        let mut r = TaskRegistry::default();
        for s in specs {
            r.insert(s.clone(), None)?;
        }
        Ok(r)
    }

    pub fn insert(&mut self, spec: TaskSpec, source: Option<String>) -> Result<(), TrainError> {
        if self.contains(&spec.task_id) {
            return Err(TrainError::DuplicateTaskId(spec.task_id));
        }
        self.entries.push(RegistryEntry {
            spec,
            source,
            label_version: 0,
        });
        Ok(())
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.get(task_id).is_some()
    }

    pub fn get(&self, task_id: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.spec.task_id == task_id)
    }

    pub fn set_source(&mut self, task_id: &str, source: Option<String>) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.spec.task_id == task_id) {
            e.source = source;
        }
    }

    pub fn bump_versions(&mut self, by: u64) {
        for e in &mut self.entries {
            e.label_version += by;
        }
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.spec.task_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Accuracy, mean per-sample loss and confusion counts (`[gold][predicted]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(
    model: &Model,
    labels: &[Vec<TokenId>],
    examples: &[Example],
    parallel: bool,
) -> Result<SplitMetrics, TrainError> {
    let c = labels.len();
    let enc = model.encode_labels(labels)?;
    let results = par::map(examples, parallel, |ex| -> Result<(usize, f64), TrainError> {
        let scores = model.scores(&ex.tokens, &enc)?;
        let loss = crate::matcher::sample_loss(&scores, ex.gold, model.options.loss_mode)?;
        Ok((crate::matcher::argmax(&scores), loss))
    });
    let mut confusion = vec![vec![0; c]; c];
    let mut loss = 0.0;
    let mut correct = 0;
    for (ex, r) in examples.iter().zip(results) {
        let (pred, l) = r?;
        confusion[ex.gold][pred] += 1;
        correct += usize::from(pred == ex.gold);
        loss += l;
    }
    let n = examples.len();
    let denom = n.max(1) as f64;
    Ok(SplitMetrics {
        n,
        loss: loss / denom,
        accuracy: correct as f64 / denom,
        confusion,
    })
}

/// One metrics record: `epoch=<n> task=<id> split=<s> loss=<f> acc=<f>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub task: String,
    pub split: Split,
    pub loss: f64,
    pub acc: f64,
}

impl fmt::Display for EpochMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} task={} split={} loss={:.6} acc={:.4}",
            self.epoch, self.task, self.split, self.loss, self.acc
        )
    }
}

/// Applies one SGD step on a single-task batch and returns the objective
/// `weight * Σ l + reg * ||θ||²` at the pre-update parameters.
pub fn train_step(
    model: &mut Model,
    batch: &[&Example],
    labels: &[Vec<TokenId>],
    weight: f64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let items: Vec<(&[TokenId], usize)> = batch.iter().map(|e| (e.tokens.as_slice(), e.gold)).collect();
    let mut bg = model.batch_gradient(&items, labels, weight, cfg.parallel)?;
    let data_loss = weight * bg.losses.iter().sum::<f64>();
    let penalty = model.add_l2(&mut bg.grads, cfg.reg);
    let loss = data_loss + penalty;
    if let Some(tensor) = model.first_non_finite().or_else(|| bg.grads.first_non_finite()) {
        return Err(TrainError::NonFiniteLoss { tensor });
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { tensor: "loss".into() });
    }
    if let Some(max) = cfg.clip_norm {
        let norm = bg.grads.norm();
        if norm > max {
            bg.grads.scale(max / norm);
        }
    }
    model.apply_sgd(&bg.grads, lr);
    if let Some(tensor) = model.first_non_finite() {
        return Err(TrainError::NonFiniteLoss { tensor });
    }
    Ok(loss)
}

/// Fresh parameters for `cfg`, and the init stream positioned after them.
pub fn init_parameters(cfg: &TrainConfig, vocab_size: usize) -> (Model, EngineRng) {
    let mut rng = rng::stream(cfg.seed, Stream::Init);
    let model = Model::init(cfg.model_options(), vocab_size, cfg.init_std, &mut rng);
    (model, rng)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub metrics: Vec<EpochMetric>,
    /// Epoch whose parameters were kept; 0 means the starting parameters.
    pub best_epoch: usize,
    pub steps: usize,
}

impl TrainOutcome {
    /// Metrics recorded at the kept epoch.
    pub fn best_metrics(&self) -> impl Iterator<Item = &EpochMetric> {
        self.metrics.iter().filter(move |m| m.epoch == self.best_epoch)
    }

    pub fn accuracy(&self, task: &str, split: Split) -> Option<f64> {
        self.best_metrics().find(|m| m.task == task && m.split == split).map(|m| m.acc)
    }
}

/// Trains on every task in `tasks` starting from `init` (or fresh
/// parameters), keeping the epoch with the best mean test accuracy.
pub fn train(
    init: Option<Model>,
    tasks: &[TaskData],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (fresh, rng) = init_parameters(cfg, vocab.len());
    let model = match init {
        Some(m) => {
            if m.vocab_size() != vocab.len() {
                return Err(TrainError::InvalidConfig(format!(
                    "model has {} embedding rows but the vocabulary has {} tokens",
                    m.vocab_size(),
                    vocab.len()
                )));
            }
            m
        }
        None => fresh,
    };
    let registry = TaskRegistry::from_specs(tasks.iter().map(|t| &t.spec))?;
    let all: Vec<usize> = (0..tasks.len()).collect();
    let run = run_epochs(model, tasks, &all, vocab, cfg)?;
    let mut registry = registry;
    registry.bump_versions(run.steps as u64);
    Ok(run.into_outcome(ModelCheckpoint::new(vocab.clone(), registry, cfg.clone(), rng)))
}

pub(crate) struct RunResult {
    pub model: Model,
    pub metrics: Vec<EpochMetric>,
    pub best_epoch: usize,
    pub steps: usize,
}

impl RunResult {
    pub(crate) fn into_outcome(self, mut template: ModelCheckpoint) -> TrainOutcome {
        template.model = Some(self.model);
        template.epochs_trained += self.best_epoch;
        TrainOutcome {
            checkpoint: template,
            metrics: self.metrics,
            best_epoch: self.best_epoch,
            steps: self.steps,
        }
    }
}

/// Trains on the tasks listed in `train_on`, evaluating every task in
/// `tasks` after each epoch.
pub(crate) fn run_epochs(
    mut model: Model,
    tasks: &[TaskData],
    train_on: &[usize],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<RunResult, TrainError> {
    if tasks.is_empty() || train_on.is_empty() {
        return Err(TrainError::NoTrainingData { task_id: None });
    }
    let labels: Vec<Vec<Vec<TokenId>>> = tasks.iter().map(|t| label_ids(vocab, &t.spec.label_tokens)).collect();
    let weights: Vec<f64> = tasks.iter().map(|t| cfg.task_weight(&t.spec)).collect();
    let trained: Vec<&TaskData> = train_on.iter().map(|&i| &tasks[i]).collect();
    let any_test = tasks.iter().any(|t| !t.test.is_empty());

    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    if cfg.epochs == 0 {
        best = Some((0.0, 0, model.clone()));
    }
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for batch in make_schedule(&trained, cfg.batch_size, cfg.seed, epoch)? {
            let t = train_on[batch.task];
            let examples: Vec<&Example> = batch.examples.iter().map(|&i| &tasks[t].train.examples[i]).collect();
            train_step(&mut model, &examples, &labels[t], weights[t], lr, cfg)?;
            steps += 1;
        }
        let mut sum = 0.0;
        let mut count = 0;
        for (t, task) in tasks.iter().enumerate() {
            for split in [Split::Train, Split::Test] {
                let data = task.split(split);
                if data.is_empty() {
                    continue;
                }
                let m = evaluate(&model, &labels[t], &data.examples, cfg.parallel)?;
                let record = EpochMetric {
                    epoch: epoch + 1,
                    task: task.spec.task_id.clone(),
                    split,
                    loss: m.loss,
                    acc: m.accuracy,
                };
                log::info!("{record}");
                if (split == Split::Test) == any_test {
                    sum += m.accuracy;
                    count += 1;
                }
                metrics.push(record);
            }
        }
        let score = sum / count.max(1) as f64;
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch + 1, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one candidate");
    Ok(RunResult {
        model,
        metrics,
        best_epoch,
        steps,
    })
}
