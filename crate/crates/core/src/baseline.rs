//! Single-task LSTM classifier with a softmax head over one-hot labels: the
//! reference point for label-embedding and multi-task gains.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TaskData, TokenId, PAD};
use crate::diff::{Layer, LayerError, ParamSet};
use crate::embedding::{EmbeddingTable, Role, SparseRows};
use crate::encoder::{LstmOptions, LstmParams};
use crate::matcher::{argmax, MatchError};
use crate::par;
use crate::rng::{self, Stream};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, ParamTensor};
use crate::trainer::{make_schedule, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineClassifier {
    pub lookup: EmbeddingTable,
    pub lstm: LstmParams,
    /// `C × m` output projection.
    pub head: ParamTensor,
    pub head_bias: ParamTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineGrad {
    pub lookup: SparseRows,
    pub lstm: LstmParams,
    pub head: ParamTensor,
    pub head_bias: ParamTensor,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl BaselineClassifier {
    pub fn init<R: Rng>(
        vocab_size: usize,
        d: usize,
        m: usize,
        classes: usize,
        lstm: LstmOptions,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let lookup = EmbeddingTable::random("baseline.lookup", vocab_size, d, Role::Input, std, rng);
        let lstm = LstmParams::random("baseline.lstm", d, m, lstm, std, rng);
        let mut head = ParamTensor::zeros("baseline.head", classes, m);
        head.fill_truncated_normal(rng, std);
        BaselineClassifier {
            lookup,
            lstm,
            head,
            head_bias: ParamTensor::zeros("baseline.head_bias", classes, 1),
        }
    }

    pub fn logits(&self, ids: &[TokenId]) -> Result<Vec<f64>, LayerError> {
        let xs = self.lookup.lookup(ids)?;
        let mask: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let (h, _) = self.lstm.encode_masked(&xs, &mask)?;
        Ok(self.project(&h))
    }

    fn project(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.head_bias.values.clone();
        matvec_acc(&self.head, h, &mut z);
        z
    }

    pub fn predict(&self, ids: &[TokenId]) -> Result<usize, LayerError> {
        Ok(argmax(&self.logits(ids)?))
    }

    fn check_gold(&self, gold: usize) -> Result<(), MatchError> {
        let labels = self.head.rows;
        if gold >= labels {
            return Err(MatchError::GoldOutOfRange { gold, labels });
        }
        Ok(())
    }

    /// Cross-entropy `-log softmax(z)_gold`.
    pub fn loss(&self, ids: &[TokenId], gold: usize) -> Result<f64, TrainError> {
        self.check_gold(gold)?;
        Ok(-log_softmax(&self.logits(ids)?)[gold])
    }

    pub fn sample_gradient(&self, ids: &[TokenId], gold: usize) -> Result<(f64, BaselineGrad), TrainError> {
        self.check_gold(gold)?;
        let (xs, lookup_cache) = self.lookup.forward(ids)?;
        let mask: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let (h, cache) = self.lstm.encode_masked(&xs, &mask)?;
        let logp = log_softmax(&self.project(&h));
        let mut dz: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        dz[gold] -= 1.0;

        let mut g = self.zero_grad();
        outer_acc(&mut g.head, &dz, &h);
        g.head_bias.values.clone_from(&dz);
        let mut dh = vec![0.0; h.len()];
        matvec_t_acc(&self.head, &dz, &mut dh);
        let dxs = self.lstm.backward_sequence(&cache, &dh, &mut g.lstm)?;
        self.lookup.backward(&lookup_cache, &dxs, &mut g.lookup)?;
        Ok((-logp[gold], g))
    }

    pub fn zero_grad(&self) -> BaselineGrad {
        BaselineGrad {
            lookup: SparseRows::new(self.lookup.dim()),
            lstm: self.lstm.zeros_like(),
            head: self.head.zeros_like(),
            head_bias: self.head_bias.zeros_like(),
        }
    }

    pub fn accuracy(&self, examples: &[Example], parallel: bool) -> Result<f64, TrainError> {
        let preds = par::map(examples, parallel, |e| self.predict(&e.tokens));
        let mut correct = 0;
        for (e, p) in examples.iter().zip(preds) {
            correct += usize::from(p? == e.gold);
        }
        Ok(correct as f64 / examples.len().max(1) as f64)
    }

    fn step(&mut self, batch: &[&Example], lr: f64, cfg: &TrainConfig) -> Result<f64, TrainError> {
        let per = par::map(batch, cfg.parallel, |e| self.sample_gradient(&e.tokens, e.gold));
        let mut g = self.zero_grad();
        let mut loss = 0.0;
        for r in per {
            let (l, s) = r?;
            loss += l;
            g.add_assign(&s);
        }
        if cfg.reg > 0.0 {
            let regularized = self.lstm.tensors().into_iter().zip(g.lstm.tensors_mut()).take(11);
            for (p, gt) in regularized.chain(std::iter::once((&self.head, &mut g.head))) {
                loss += cfg.reg * p.sq_norm();
                for (gv, pv) in gt.values.iter_mut().zip(&p.values) {
                    *gv += 2.0 * cfg.reg * pv;
                }
            }
        }
        if !loss.is_finite() {
            let tensor = self.tensors().into_iter().find(|t| !t.is_finite()).map_or("loss".into(), |t| t.name.clone());
            return Err(TrainError::NonFiniteLoss { tensor });
        }
        self.lookup.apply_sparse(&g.lookup, lr);
        for (p, gt) in self.lstm.tensors_mut().into_iter().zip(g.lstm.tensors()) {
            p.sgd(gt, lr);
        }
        self.head.sgd(&g.head, lr);
        self.head_bias.sgd(&g.head_bias, lr);
        Ok(loss)
    }
}

impl BaselineGrad {
    pub fn add_assign(&mut self, o: &BaselineGrad) {
        self.lookup.add_assign(&o.lookup);
        self.lstm.add_assign(&o.lstm);
        self.head.add_assign(&o.head);
        self.head_bias.add_assign(&o.head_bias);
    }

    pub fn to_dense(&self, model: &BaselineClassifier) -> Vec<ParamTensor> {
        let mut v = vec![self.lookup.to_dense(&model.lookup.weights)];
        v.extend(self.lstm.tensors().into_iter().cloned());
        v.push(self.head.clone());
        v.push(self.head_bias.clone());
        v
    }
}

impl ParamSet for BaselineClassifier {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = vec![&self.lookup.weights];
        v.extend(self.lstm.tensors());
        v.push(&self.head);
        v.push(&self.head_bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = vec![&mut self.lookup.weights];
        v.extend(self.lstm.tensors_mut());
        v.push(&mut self.head);
        v.push(&mut self.head_bias);
        v
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: BaselineClassifier,
    pub best_epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains with the same schedule, optimiser and selection rule as the
/// label-embedding model (best epoch by test accuracy).
pub fn train_baseline(task: &TaskData, vocab_size: usize, cfg: &TrainConfig) -> Result<BaselineOutcome, TrainError> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::Init);
    let mut model = BaselineClassifier::init(
        vocab_size,
        cfg.embed_dim,
        cfg.hidden_size,
        task.spec.num_labels(),
        cfg.lstm,
        cfg.init_std,
        &mut rng,
    );
    let select = |m: &BaselineClassifier| -> Result<(f64, f64), TrainError> {
        let train = m.accuracy(&task.train.examples, cfg.parallel)?;
        let test = if task.test.is_empty() {
            train
        } else {
            m.accuracy(&task.test.examples, cfg.parallel)?
        };
        Ok((train, test))
    };
    let (tr, te) = select(&model)?;
    let mut best = BaselineOutcome {
        model: model.clone(),
        best_epoch: 0,
        train_accuracy: tr,
        test_accuracy: te,
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for batch in make_schedule(&[task], cfg.batch_size, cfg.seed, epoch)? {
            let examples: Vec<&Example> = batch.examples.iter().map(|&i| &task.train.examples[i]).collect();
            model.step(&examples, lr, cfg)?;
        }
        let (tr, te) = select(&model)?;
        if epoch == 0 || te > best.test_accuracy {
            best = BaselineOutcome {
                model: model.clone(),
                best_epoch: epoch + 1,
                train_accuracy: tr,
                test_accuracy: te,
            };
        }
    }
    Ok(best)
}
