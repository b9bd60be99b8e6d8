//! Label matching without supervision: inputs and label phrases are both
//! averaged word vectors from one embedding table, and each input takes the
//! nearest label.

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TaskData, Vocabulary};
use crate::diff::LayerError;
use crate::embedding::{pool_ids, EmbeddingTable};
use crate::matcher::{unsupervised_match, Metric};
use crate::model::label_ids;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsupervisedReport {
    pub task_id: String,
    pub n: usize,
    pub accuracy: f64,
    pub random_baseline: f64,
}

pub fn label_vectors(table: &EmbeddingTable, vocab: &Vocabulary, task: &TaskData) -> Result<Vec<Vec<f64>>, LayerError> {
    label_ids(vocab, &task.spec.label_tokens).iter().map(|ids| pool_ids(table, ids)).collect()
}

pub fn predict(table: &EmbeddingTable, labels: &[Vec<f64>], example: &Example, metric: Metric) -> Result<usize, LayerError> {
    Ok(unsupervised_match(&pool_ids(table, &example.tokens)?, labels, metric))
}

/// Accuracy of nearest-label matching over `examples`.
pub fn evaluate_unsupervised(
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    task: &TaskData,
    examples: &[Example],
    metric: Metric,
    parallel: bool,
) -> Result<UnsupervisedReport, LayerError> {
    let labels = label_vectors(table, vocab, task)?;
    let preds = par::map(examples, parallel, |e| predict(table, &labels, e, metric));
    let mut correct = 0;
    for (e, p) in examples.iter().zip(preds) {
        correct += usize::from(p? == e.gold);
    }
    Ok(UnsupervisedReport {
        task_id: task.spec.task_id.clone(),
        n: examples.len(),
        accuracy: correct as f64 / examples.len().max(1) as f64,
        random_baseline: 1.0 / task.spec.num_labels() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RawRecord, RawTask, Split, TaskSpec};
    use crate::embedding::Role;
    use crate::tensor::ParamTensor;

    fn fixture() -> (EmbeddingTable, Vocabulary, TaskData) {
        let spec = TaskSpec::new("t", vec!["hot".into(), "cold".into()], 1.0).unwrap();
        let records = vec![
            RawRecord { split: Split::Test, gold: 0, text: "sun fire".into() },
            RawRecord { split: Split::Test, gold: 1, text: "ice snow".into() },
        ];
        let raw = RawTask { spec, records, source: None };
        let vocab = Vocabulary::build(&raw.corpus(), 1).unwrap();
        let mut w = ParamTensor::zeros("embedding", vocab.len(), 2);
        for (tok, v) in [("hot", [1.0, 0.1]), ("sun", [0.9, 0.0]), ("fire", [1.0, 0.2]), ("cold", [0.1, 1.0]), ("ice", [0.0, 0.9]), ("snow", [0.2, 1.0])] {
            w.row_mut(vocab.id(tok)).copy_from_slice(&v);
        }
        let data = raw.encode(&vocab);
        (EmbeddingTable { weights: w, role: Role::Input }, vocab, data)
    }

    #[test]
    fn nearest_label_wins_under_both_metrics() {
        let (table, vocab, data) = fixture();
        for metric in [Metric::Cosine, Metric::L2] {
            let r = evaluate_unsupervised(&table, &vocab, &data, &data.test.examples, metric, false).unwrap();
            assert_eq!((r.n, r.accuracy, r.random_baseline), (2, 1.0, 0.5));
        }
    }

    #[test]
    fn parallel_matches_serial() {
        let (table, vocab, data) = fixture();
        let a = evaluate_unsupervised(&table, &vocab, &data, &data.test.examples, Metric::Cosine, true).unwrap();
        let b = evaluate_unsupervised(&table, &vocab, &data, &data.test.examples, Metric::Cosine, false).unwrap();
        assert_eq!(a, b);
    }
}
