//! The supervised label-embedding network: input encoder (lookup + LSTM),
//! label encoder (lookup + LSTM) and matcher, wired together with a
//! hand-composed backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocabulary, PAD};
use crate::diff::{Layer, LayerError, ParamSet};
use crate::embedding::{EmbeddingTable, Role, SparseRows};
use crate::encoder::{LstmOptions, LstmParams, SequenceCache};
use crate::matcher::{argmax, sample_loss, sample_loss_grad, LossMode, MatchError, MatcherForm, MatcherParams};
use crate::par;
use crate::tensor::{add_into, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub lstm: LstmOptions,
    pub loss_mode: LossMode,
    pub matcher_bias: bool,
    pub matcher_form: MatcherForm,
    /// Labels are looked up in the input table.
    pub tie_lookups: bool,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub options: ModelOptions,
    pub input_lookup: EmbeddingTable,
    pub label_lookup: EmbeddingTable,
    pub input_lstm: LstmParams,
    pub label_lstm: LstmParams,
    pub matcher: MatcherParams,
}

/// Encoded labels of one task, with what the label-side backward pass needs.
#[derive(Debug, Clone)]
pub struct LabelEncoding {
    pub ys: Vec<Vec<f64>>,
    caches: Vec<(Vec<TokenId>, SequenceCache)>,
}

/// Gradient with the same layout as [`Model`]; lookup tables are row-sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub input_lookup: SparseRows,
    pub label_lookup: SparseRows,
    pub input_lstm: LstmParams,
    pub label_lstm: LstmParams,
    pub matcher: MatcherParams,
}

/// Contribution of one sample, before the label-side backward pass.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    input_lookup: SparseRows,
    input_lstm: LstmParams,
    matcher: MatcherParams,
    d_labels: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Unweighted loss of each sample in batch order.
    pub losses: Vec<f64>,
    pub grads: Gradients,
}

pub fn label_ids(vocab: &Vocabulary, label_tokens: &[Vec<String>]) -> Vec<Vec<TokenId>> {
    label_tokens.iter().map(|t| vocab.encode(t)).collect()
}

fn pad_mask(ids: &[TokenId]) -> Vec<bool> {
    ids.iter().map(|&id| id != PAD).collect()
}

impl Model {
    /// Truncated-normal init for every trainable entry; the matcher bias
    /// starts at zero and PAD rows stay zero.
    pub fn init<R: Rng>(options: ModelOptions, vocab_size: usize, init_std: f64, rng: &mut R) -> Self {
        let (d, m) = (options.embed_dim, options.hidden_size);
        let input_lookup = EmbeddingTable::random("lu_input", vocab_size, d, Role::Input, init_std, rng);
        let label_lookup = EmbeddingTable::random("lu_label", vocab_size, d, Role::Label, init_std, rng);
        let input_lstm = LstmParams::random("lstm_input", d, m, options.lstm, init_std, rng);
        let label_lstm = LstmParams::random("lstm_label", d, m, options.lstm, init_std, rng);
        let matcher = MatcherParams::random(m, options.matcher_bias, options.matcher_form, init_std, rng);
        let mut model = Model {
            options,
            input_lookup,
            label_lookup,
            input_lstm,
            label_lstm,
            matcher,
        };
        if options.tie_lookups {
            model.label_lookup.weights.values = model.input_lookup.weights.values.clone();
        }
        model
    }

    pub fn vocab_size(&self) -> usize {
        self.input_lookup.vocab_size()
    }

    pub fn label_table(&self) -> &EmbeddingTable {
        if self.options.tie_lookups {
            &self.input_lookup
        } else {
            &self.label_lookup
        }
    }

    /// Sets both lookup tables from one initial table (e.g. skip-gram vectors).
    pub fn set_lookups(&mut self, table: &EmbeddingTable) {
        self.input_lookup.weights.values.clone_from(&table.weights.values);
        self.label_lookup.weights.values.clone_from(&table.weights.values);
        self.input_lookup.zero_pad();
        self.label_lookup.zero_pad();
    }

    pub fn grow_vocab<R: Rng>(&mut self, vocab_size: usize, init_std: f64, rng: &mut R) {
        self.input_lookup.grow(vocab_size, init_std, rng);
        if self.options.tie_lookups {
            self.label_lookup = EmbeddingTable {
                role: Role::Label,
                weights: ParamTensor {
                    name: self.label_lookup.weights.name.clone(),
                    ..self.input_lookup.weights.clone()
                },
            };
        } else {
            self.label_lookup.grow(vocab_size, init_std, rng);
        }
    }

    pub fn encode_input(&self, ids: &[TokenId]) -> Result<Vec<f64>, LayerError> {
        let xs = self.input_lookup.lookup(ids)?;
        Ok(self.input_lstm.encode_masked(&xs, &pad_mask(ids))?.0)
    }

    pub fn encode_labels(&self, labels: &[Vec<TokenId>]) -> Result<LabelEncoding, LayerError> {
        let table = self.label_table();
        let mut ys = Vec::with_capacity(labels.len());
        let mut caches = Vec::with_capacity(labels.len());
        for ids in labels {
            let xs = table.lookup(ids)?;
            let (y, cache) = self.label_lstm.encode_masked(&xs, &pad_mask(ids))?;
            ys.push(y);
            caches.push((ids.clone(), cache));
        }
        Ok(LabelEncoding { ys, caches })
    }

    pub fn scores(&self, ids: &[TokenId], labels: &LabelEncoding) -> Result<Vec<f64>, LayerError> {
        let x = self.encode_input(ids)?;
        self.matcher.scores(&x, &labels.ys)
    }

    /// Best-scoring label; ties go to the lowest index.
    pub fn predict(&self, ids: &[TokenId], labels: &LabelEncoding) -> Result<usize, LayerError> {
        Ok(argmax(&self.scores(ids, labels)?))
    }

    pub fn loss(&self, ids: &[TokenId], gold: usize, labels: &LabelEncoding) -> Result<f64, ModelError> {
        Ok(sample_loss(&self.scores(ids, labels)?, gold, self.options.loss_mode)?)
    }

    /// Forward and backward for one sample with the label encodings held
    /// fixed; `weight` scales the loss gradient (the task weight).
    pub fn sample_gradient(
        &self,
        ids: &[TokenId],
        gold: usize,
        labels: &LabelEncoding,
        weight: f64,
    ) -> Result<SampleGrad, ModelError> {
        let (xs, lookup_cache) = self.input_lookup.forward(ids)?;
        let (x, seq_cache) = self.input_lstm.encode_masked(&xs, &pad_mask(ids))?;
        let scores = self.matcher.scores(&x, &labels.ys)?;
        let loss = sample_loss(&scores, gold, self.options.loss_mode)?;
        let mut d_logits = sample_loss_grad(&scores, gold, self.options.loss_mode)?;
        d_logits.iter_mut().for_each(|g| *g *= weight);

        let mut matcher = self.matcher.zeros_like();
        let (dx, d_labels) = self.matcher.backward(&x, &labels.ys, &d_logits, &mut matcher)?;
        let mut input_lstm = self.input_lstm.zeros_like();
        let dxs = self.input_lstm.backward_sequence(&seq_cache, &dx, &mut input_lstm)?;
        let mut input_lookup = SparseRows::new(self.options.embed_dim);
        self.input_lookup.backward(&lookup_cache, &dxs, &mut input_lookup)?;
        Ok(SampleGrad {
            loss,
            input_lookup,
            input_lstm,
            matcher,
            d_labels,
        })
    }

    /// Gradient of `weight * Σ_i l_i` over a single-task batch.
    ///
    /// Labels are encoded once; per-sample gradients are computed (in
    /// parallel when asked) and then summed in batch order, followed by one
    /// label-side backward pass per label with the summed label gradients.
    /// The result does not depend on `parallel`.
    pub fn batch_gradient(
        &self,
        batch: &[(&[TokenId], usize)],
        labels: &[Vec<TokenId>],
        weight: f64,
        parallel: bool,
    ) -> Result<BatchGradient, ModelError> {
        let enc = self.encode_labels(labels)?;
        let per_sample = par::map(batch, parallel, |(ids, gold)| self.sample_gradient(ids, *gold, &enc, weight));
        let mut grads = Gradients::zeros(self);
        let mut d_labels = vec![vec![0.0; self.options.hidden_size]; labels.len()];
        let mut losses = Vec::with_capacity(batch.len());
        for s in per_sample {
            let s = s?;
            losses.push(s.loss);
            grads.input_lookup.add_assign(&s.input_lookup);
            grads.input_lstm.add_assign(&s.input_lstm);
            grads.matcher.add_assign(&s.matcher);
            for (acc, d) in d_labels.iter_mut().zip(&s.d_labels) {
                add_into(acc, d);
            }
        }
        let table = self.label_table();
        for ((ids, cache), dy) in enc.caches.iter().zip(&d_labels) {
            let dxs = self.label_lstm.backward_sequence(cache, dy, &mut grads.label_lstm)?;
            table.backward(ids, &dxs, &mut grads.label_lookup)?;
        }
        Ok(BatchGradient { losses, grads })
    }

    /// Tensors that receive L2 regularisation (LSTM and matcher weights).
    pub fn regularized(&self) -> Vec<&ParamTensor> {
        let mut v = self.input_lstm.weight_matrices();
        v.extend(self.label_lstm.weight_matrices());
        v.push(&self.matcher.weight);
        v
    }

    /// Adds `reg * ||θ||²` over the regularised tensors to `grads` (as
    /// `2 reg θ`) and returns the penalty.
    pub fn add_l2(&self, grads: &mut Gradients, reg: f64) -> f64 {
        if reg == 0.0 {
            return 0.0;
        }
        let penalty: f64 = self.regularized().iter().map(|t| t.sq_norm()).sum::<f64>() * reg;
        let pairs = self
            .input_lstm
            .tensors()
            .into_iter()
            .zip(grads.input_lstm.tensors_mut())
            .take(11)
            .chain(self.label_lstm.tensors().into_iter().zip(grads.label_lstm.tensors_mut()).take(11))
            .chain(std::iter::once((&self.matcher.weight, &mut grads.matcher.weight)));
        for (p, g) in pairs {
            for (gv, pv) in g.values.iter_mut().zip(&p.values) {
                *gv += 2.0 * reg * pv;
            }
        }
        penalty
    }

    /// `θ ← θ - lr · g`. PAD rows are left alone.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        if self.options.tie_lookups {
            let mut merged = grads.input_lookup.clone();
            merged.add_assign(&grads.label_lookup);
            self.input_lookup.apply_sparse(&merged, lr);
            self.label_lookup.weights.values.clone_from(&self.input_lookup.weights.values);
        } else {
            self.input_lookup.apply_sparse(&grads.input_lookup, lr);
            self.label_lookup.apply_sparse(&grads.label_lookup, lr);
        }
        for (p, g) in self.input_lstm.tensors_mut().into_iter().zip(grads.input_lstm.tensors()) {
            p.sgd(g, lr);
        }
        for (p, g) in self.label_lstm.tensors_mut().into_iter().zip(grads.label_lstm.tensors()) {
            p.sgd(g, lr);
        }
        for (p, g) in self.matcher.tensors_mut().into_iter().zip(grads.matcher.tensors()) {
            p.sgd(g, lr);
        }
    }

    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors().into_iter().find(|t| !t.is_finite()).map(|t| t.name.clone())
    }
}

impl ParamSet for Model {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = vec![&self.input_lookup.weights, &self.label_lookup.weights];
        v.extend(self.input_lstm.tensors());
        v.extend(self.label_lstm.tensors());
        v.extend(self.matcher.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = vec![&mut self.input_lookup.weights, &mut self.label_lookup.weights];
        v.extend(self.input_lstm.tensors_mut());
        v.extend(self.label_lstm.tensors_mut());
        v.extend(self.matcher.tensors_mut());
        v
    }
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        Gradients {
            input_lookup: SparseRows::new(model.options.embed_dim),
            label_lookup: SparseRows::new(model.options.embed_dim),
            input_lstm: model.input_lstm.zeros_like(),
            label_lstm: model.label_lstm.zeros_like(),
            matcher: model.matcher.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.input_lookup.add_assign(&other.input_lookup);
        self.label_lookup.add_assign(&other.label_lookup);
        self.input_lstm.add_assign(&other.input_lstm);
        self.label_lstm.add_assign(&other.label_lstm);
        self.matcher.add_assign(&other.matcher);
    }

    fn dense_tensors(&self) -> Vec<&ParamTensor> {
        let mut v = self.input_lstm.tensors();
        v.extend(self.label_lstm.tensors());
        v.extend(self.matcher.tensors());
        v
    }

    fn dense_tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.input_lstm.tensors_mut();
        v.extend(self.label_lstm.tensors_mut());
        v.extend(self.matcher.tensors_mut());
        v
    }

    pub fn scale(&mut self, k: f64) {
        self.input_lookup.scale(k);
        self.label_lookup.scale(k);
        for t in self.dense_tensors_mut() {
            t.scale(k);
        }
    }

    pub fn norm(&self) -> f64 {
        let dense: f64 = self.dense_tensors().iter().map(|t| t.sq_norm()).sum();
        (dense + self.input_lookup.sq_norm() + self.label_lookup.sq_norm()).sqrt()
    }

    pub fn first_non_finite(&self) -> Option<String> {
        if self.input_lookup.rows.values().flatten().any(|v| !v.is_finite()) {
            return Some("lu_input".into());
        }
        if self.label_lookup.rows.values().flatten().any(|v| !v.is_finite()) {
            return Some("lu_label".into());
        }
        self.dense_tensors().into_iter().find(|t| !t.is_finite()).map(|t| t.name.clone())
    }

    /// Dense gradients in [`Model::tensors`] order, as the finite-difference
    /// checker expects. With tied lookups the label-table gradient is folded
    /// into the input table, because that is the tensor the label path reads.
    pub fn to_dense(&self, model: &Model) -> Vec<ParamTensor> {
        let mut input = self.input_lookup.clone();
        let mut label = self.label_lookup.clone();
        if model.options.tie_lookups {
            input.add_assign(&label);
            label = SparseRows::new(label.dim);
        }
        let mut out = vec![
            input.to_dense(&model.input_lookup.weights),
            label.to_dense(&model.label_lookup.weights),
        ];
        out.extend(self.dense_tensors().into_iter().cloned());
        out
    }
}
