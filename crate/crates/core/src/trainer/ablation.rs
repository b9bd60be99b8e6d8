use std::fmt;

use serde::{Deserialize, Serialize};

use crate::baseline::train_baseline;
use crate::corpus::{Split, TaskData, Vocabulary};
use crate::par;

use super::{train, TrainConfig, TrainError};

pub const MAX_ABLATION_TASKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub index: usize,
    pub seed: u64,
    /// Positions into the task list, ascending.
    pub tasks: Vec<usize>,
    /// Test accuracy of each member task at the kept epoch, parallel to `tasks`.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task_ids: Vec<String>,
    /// Single-task softmax-LSTM test accuracy per task.
    pub baseline: Vec<f64>,
    pub runs: Vec<AblationRun>,
    /// Percentage points over the baseline. Diagonal: task trained alone;
    /// off-diagonal: mean gain of the two tasks trained as a pair.
    pub gains: Vec<Vec<f64>>,
}

/// Every non-empty subset in order of size, then lexicographically.
fn subsets(k: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u32..(1 << k)).map(|mask| (0..k).filter(|i| mask & (1 << i) != 0).collect()).collect();
    out.sort_by(|a: &Vec<usize>, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

fn test_accuracy(out: &super::TrainOutcome, task: &TaskData) -> f64 {
    let split = if task.test.is_empty() { Split::Train } else { Split::Test };
    out.accuracy(&task.spec.task_id, split).unwrap_or(0.0)
}

/// Trains the label-embedding model on every non-empty subset of `tasks`
/// (run `r` uses seed `cfg.seed + r`) plus one softmax baseline per task,
/// and summarises the gains. With `parallel_runs` the independent runs are
/// spread over threads; the report is identical either way.
pub fn pairwise_ablation(
    tasks: &[TaskData],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    parallel_runs: bool,
) -> Result<AblationReport, TrainError> {
    let k = tasks.len();
    if k == 0 {
        return Err(TrainError::NoTrainingData { task_id: None });
    }
    if k > MAX_ABLATION_TASKS {
        return Err(TrainError::TooManyTasks {
            got: k,
            max: MAX_ABLATION_TASKS,
        });
    }
    cfg.validate()?;
    let sets = subsets(k);
    let n_runs = sets.len() as u64;
    let runs = par::map_range(sets.len(), parallel_runs, |r| -> Result<AblationRun, TrainError> {
        let seed = cfg.seed + r as u64;
        let members: Vec<TaskData> = sets[r].iter().map(|&i| tasks[i].clone()).collect();
        let out = train(None, &members, vocab, &TrainConfig { seed, ..cfg.clone() })?;
        Ok(AblationRun {
            index: r,
            seed,
            tasks: sets[r].clone(),
            accuracy: members.iter().map(|t| test_accuracy(&out, t)).collect(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let baseline = par::map_range(k, parallel_runs, |i| {
        let seed = cfg.seed + n_runs + i as u64;
        train_baseline(&tasks[i], vocab.len(), &TrainConfig { seed, ..cfg.clone() }).map(|b| b.test_accuracy)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut gains = vec![vec![0.0; k]; k];
    for run in &runs {
        let gain = |pos: usize| 100.0 * (run.accuracy[pos] - baseline[run.tasks[pos]]);
        match run.tasks.as_slice() {
            &[i] => gains[i][i] = gain(0),
            &[i, j] => {
                let g = (gain(0) + gain(1)) / 2.0;
                gains[i][j] = g;
                gains[j][i] = g;
            }
            _ => {}
        }
    }
    Ok(AblationReport {
        task_ids: tasks.iter().map(|t| t.spec.task_id.clone()).collect(),
        baseline,
        runs,
        gains,
    })
}

impl AblationReport {
    /// Gain matrix with a header row and column of task ids.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for id in &self.task_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (id, row) in self.task_ids.iter().zip(&self.gains) {
            out.push_str(id);
            for g in row {
                out.push_str(&format!(",{g:.2}"));
            }
            out.push('\n');
        }
        out
    }

    /// Mean gain over member tasks for each subset size.
    pub fn mean_gain_by_size(&self) -> Vec<(usize, f64)> {
        let max = self.task_ids.len();
        (1..=max)
            .map(|size| {
                let gains: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| r.tasks.len() == size)
                    .flat_map(|r| r.tasks.iter().zip(&r.accuracy).map(|(&t, a)| 100.0 * (a - self.baseline[t])))
                    .collect();
                (size, gains.iter().sum::<f64>() / gains.len().max(1) as f64)
            })
            .collect()
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.task_ids.iter().map(String::len).max().unwrap_or(4).max(8);
        write!(f, "{:<w$}", "gain")?;
        for id in &self.task_ids {
            write!(f, " {id:>w$}")?;
        }
        writeln!(f)?;
        for (id, row) in self.task_ids.iter().zip(&self.gains) {
            write!(f, "{id:<w$}")?;
            for g in row {
                write!(f, " {g:>w$.2}")?;
            }
            writeln!(f)?;
        }
        write!(f, "{:<w$}", "baseline")?;
        for b in &self.baseline {
            write!(f, " {:>w$.2}", 100.0 * b)?;
        }
        writeln!(f)?;
        for (size, g) in self.mean_gain_by_size() {
            writeln!(f, "mean gain with {size} task(s): {g:.2}")?;
        }
        Ok(())
    }
}
