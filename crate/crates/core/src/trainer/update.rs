use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, RawTask, TaskData, Vocabulary};
use crate::model::label_ids;

use super::{evaluate, run_epochs, train, ModelCheckpoint, SplitMetrics, TrainConfig, TrainError, TrainOutcome};

fn source_of(task: &RawTask) -> Option<String> {
    task.source.as_ref().map(|p| p.display().to_string())
}

/// Data for every registered task, in registry order, encoded with `vocab`.
fn registered_data(old: &ModelCheckpoint, old_tasks: &[RawTask], vocab: &Vocabulary) -> Result<Vec<TaskData>, TrainError> {
    old.registry
        .ids()
        .into_iter()
        .map(|id| {
            old_tasks
                .iter()
                .find(|t| t.spec.task_id == id)
                .map(|t| t.encode(vocab))
                .ok_or_else(|| TrainError::MissingTaskData(id.to_string()))
        })
        .collect()
}

fn check_new(old: &ModelCheckpoint, new_task: &RawTask) -> Result<(), TrainError> {
    if old.registry.contains(&new_task.spec.task_id) {
        return Err(TrainError::DuplicateTaskId(new_task.spec.task_id.clone()));
    }
    Ok(())
}

/// Keeps the parameters, extends the vocabulary with the new task's tokens
/// and trains on the new task's data only. All parameters stay trainable.
pub fn hot_update(
    old: &ModelCheckpoint,
    old_tasks: &[RawTask],
    new_task: &RawTask,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    check_new(old, new_task)?;
    let cfg = cfg.with_architecture(&old.model().options);
    cfg.validate()?;
    let mut vocab = old.vocab.clone();
    vocab.extend(&new_task.corpus());
    let mut rng = old.rng.clone();
    let mut model = old.model().clone();
    model.grow_vocab(vocab.len(), cfg.init_std, &mut rng);

    let mut tasks = registered_data(old, old_tasks, &vocab)?;
    tasks.push(new_task.encode(&vocab));
    let run = run_epochs(model, &tasks, &[tasks.len() - 1], &vocab, &cfg)?;

    let mut registry = old.registry.clone();
    registry.insert(new_task.spec.clone(), source_of(new_task))?;
    registry.bump_versions(run.steps as u64);
    let mut template = ModelCheckpoint::new(vocab, registry, cfg, rng);
    template.epochs_trained = old.epochs_trained;
    Ok(run.into_outcome(template))
}

/// Extends the vocabulary, re-initialises every parameter from the config
/// seed and trains from scratch on the old and new tasks together. This is
/// exactly [`train`] on the union with the extended vocabulary.
pub fn cold_update(
    old: &ModelCheckpoint,
    old_tasks: &[RawTask],
    new_task: &RawTask,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    check_new(old, new_task)?;
    let mut vocab = old.vocab.clone();
    vocab.extend(&new_task.corpus());
    let mut tasks = registered_data(old, old_tasks, &vocab)?;
    tasks.push(new_task.encode(&vocab));
    let mut out = train(None, &tasks, &vocab, cfg)?;
    for t in old_tasks.iter().chain(std::iter::once(new_task)) {
        out.checkpoint.registry.set_source(&t.spec.task_id, source_of(t));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub task_id: String,
    pub metrics: SplitMetrics,
    /// Label tokens missing from the vocabulary; they are read as `<unk>`.
    pub oov_label_tokens: Vec<String>,
    pub random_baseline: f64,
}

/// Scores a task the model was never trained on, using only its label
/// phrases. Nothing in `ckpt` is modified.
pub fn zero_update_eval(ckpt: &ModelCheckpoint, task: &RawTask, parallel: bool) -> Result<ZeroShotReport, TrainError> {
    let data = task.encode(&ckpt.vocab);
    if data.test.is_empty() {
        return Err(TrainError::NoTestData(task.spec.task_id.clone()));
    }
    let oov: Vec<String> = task
        .spec
        .labels
        .iter()
        .flat_map(|l| tokenize(l))
        .filter(|t| ckpt.vocab.get(t).is_none())
        .collect();
    if !oov.is_empty() {
        log::warn!("label tokens not in vocabulary, read as <unk>: {}", oov.join(" "));
    }
    let labels = label_ids(&ckpt.vocab, &data.spec.label_tokens);
    let metrics = evaluate(ckpt.model(), &labels, &data.test.examples, parallel)?;
    Ok(ZeroShotReport {
        task_id: task.spec.task_id.clone(),
        metrics,
        oov_label_tokens: oov,
        random_baseline: 1.0 / task.spec.num_labels() as f64,
    })
}
