use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::TaskData;
use crate::rng::{derive_seed, salted, Stream};

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    /// Position of the task in the dataset list handed to the scheduler.
    pub task: usize,
    pub task_id: String,
    /// Indices into that task's training split.
    pub examples: Vec<usize>,
}

/// One epoch's worth of task-pure batches in consumption order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub epoch: usize,
    pub batches: Vec<Batch>,
    pub cursor: usize,
}

impl BatchSchedule {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.batches.len() - self.cursor
    }
}

impl Iterator for BatchSchedule {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.batches.get(self.cursor).cloned();
        if b.is_some() {
            self.cursor += 1;
        }
        b
    }
}

/// Shuffles each task's training examples, chunks them into batches of at
/// most `batch_size`, then shuffles the batches of all tasks together.
/// Every shuffle is seeded by `(seed, epoch)`.
pub fn make_schedule(
    tasks: &[&TaskData],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<BatchSchedule, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::NoTrainingData { task_id: None });
    }
    if batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
    }
    let epoch_salt = derive_seed(epoch as u64, 0);
    let mut batches = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let n = task.train.len();
        if n == 0 {
            return Err(TrainError::NoTrainingData {
                task_id: Some(task.spec.task_id.clone()),
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut salted(seed, Stream::Schedule, derive_seed(epoch_salt, t as u64 + 1)));
        batches.extend(order.chunks(batch_size).map(|c| Batch {
            task: t,
            task_id: task.spec.task_id.clone(),
            examples: c.to_vec(),
        }));
    }
    batches.shuffle(&mut salted(seed, Stream::Schedule, epoch_salt));
    Ok(BatchSchedule {
        epoch,
        batches,
        cursor: 0,
    })
}
