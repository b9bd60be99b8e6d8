//! Skip-gram with negative sampling over token-id sequences.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, PAD};
use crate::embedding::{EmbeddingError, EmbeddingTable, Role};
use crate::rng::{self, Stream};
use crate::tensor::{axpy, dot, sigmoid, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 300,
            window: 4,
            negatives: 5,
            epochs: 15,
            lr: 0.025,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipGramReport {
    /// Mean negative-sampling loss per (center, context) pair, one per epoch.
    pub epoch_losses: Vec<f64>,
    pub pairs_per_epoch: usize,
}

/// Returns the input-side vectors, usable to initialise either lookup table.
///
/// Input vectors start uniform in `(-0.5/d, 0.5/d)`, output vectors at zero.
/// Negatives come from the unigram distribution raised to 3/4. The learning
/// rate decays linearly to `lr * 1e-4` over the whole run.
pub fn train_skipgram(
    corpora: &[Vec<TokenId>],
    vocab_size: usize,
    cfg: &SkipGramConfig,
) -> Result<(EmbeddingTable, SkipGramReport), EmbeddingError> {
    let seqs: Vec<Vec<TokenId>> = corpora
        .iter()
        .map(|s| s.iter().copied().filter(|&t| t != PAD && t < vocab_size).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    if seqs.is_empty() {
        return Err(EmbeddingError::EmptyCorpora);
    }
    let window = cfg.window.max(1);
    let negatives = cfg.negatives.max(1);
    let d = cfg.dim;
    let mut rng = rng::stream(cfg.seed, Stream::SkipGram);

    let mut input = ParamTensor::zeros("skipgram.in", vocab_size, d);
    let half = 0.5 / d as f64;
    for v in &mut input.values {
        *v = rng.random_range(-half..half);
    }
    let mut output = ParamTensor::zeros("skipgram.out", vocab_size, d);

    let mut counts = vec![0.0f64; vocab_size];
    for s in &seqs {
        for &t in s {
            counts[t] += 1.0;
        }
    }
    let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let noise = WeightedIndex::new(&weights).map_err(|_| EmbeddingError::EmptyCorpora)?;

    let tokens_per_epoch: usize = seqs.iter().map(Vec::len).sum();
    let total = (tokens_per_epoch * cfg.epochs).max(1) as f64;
    let mut seen = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut pairs_per_epoch = 0;
    let mut grad_in = vec![0.0; d];

    for _ in 0..cfg.epochs {
        let mut loss = 0.0;
        let mut pairs = 0usize;
        for s in &seqs {
            for (pos, &center) in s.iter().enumerate() {
                let lr = cfg.lr * (1.0 - seen as f64 / total).max(1e-4);
                seen += 1;
                let reach = rng.random_range(1..=window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(s.len() - 1);
                for (cpos, &context) in s.iter().enumerate().take(hi + 1).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    pairs += 1;
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let targets = std::iter::once((context, 1.0))
                        .chain((0..negatives).map(|_| (noise.sample(&mut rng), 0.0)));
                    for (target, label) in targets {
                        if label == 0.0 && target == context {
                            continue;
                        }
                        let score = sigmoid(dot(input.row(center), output.row(target)));
                        loss -= if label == 1.0 {
                            score.max(1e-12).ln()
                        } else {
                            (1.0 - score).max(1e-12).ln()
                        };
                        let g = lr * (label - score);
                        axpy(g, output.row(target), &mut grad_in);
                        let center_row = input.row(center).to_vec();
                        axpy(g, &center_row, output.row_mut(target));
                    }
                    let row = input.row_mut(center);
                    for (w, g) in row.iter_mut().zip(&grad_in) {
                        *w += g;
                    }
                }
            }
        }
        pairs_per_epoch = pairs;
        epoch_losses.push(loss / pairs.max(1) as f64);
    }

    let mut table = EmbeddingTable {
        weights: ParamTensor {
            name: "embedding".into(),
            ..input
        },
        role: Role::Input,
    };
    table.zero_pad();
    Ok((
        table,
        SkipGramReport {
            epoch_losses,
            pairs_per_epoch,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Vocabulary};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    fn toy() -> (Vocabulary, Vec<Vec<TokenId>>) {
        let mut lines = Vec::new();
        for _ in 0..60 {
            lines.push("the film was good and fun");
            lines.push("the film was great and fun");
            lines.push("rain made bad roads worse");
            lines.push("cold made bad days longer");
        }
        let toks: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).collect();
        let vocab = Vocabulary::build(&toks, 1).unwrap();
        let ids = toks.iter().map(|t| vocab.encode(t)).collect();
        (vocab, ids)
    }

    fn cfg(epochs: usize) -> SkipGramConfig {
        SkipGramConfig {
            dim: 16,
            epochs,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn shared_contexts_pull_vectors_together() {
        let (vocab, ids) = toy();
        let (t, _) = train_skipgram(&ids, vocab.len(), &cfg(15)).unwrap();
        let good = t.row(vocab.id("good"));
        let great = t.row(vocab.id("great"));
        let bad = t.row(vocab.id("bad"));
        assert!(cosine(good, great) > cosine(good, bad), "{} vs {}", cosine(good, great), cosine(good, bad));
    }

    #[test]
    fn zero_epochs_is_the_initialisation() {
        let (vocab, ids) = toy();
        let (a, r) = train_skipgram(&ids, vocab.len(), &cfg(0)).unwrap();
        assert!(r.epoch_losses.is_empty());
        let half = 0.5 / 16.0;
        assert!(a.weights.values.iter().all(|v| v.abs() <= half));
        // a different corpus of the same vocabulary size gives the same init
        let (b, _) = train_skipgram(&ids[..3], vocab.len(), &cfg(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_per_seed() {
        let (vocab, ids) = toy();
        let (a, _) = train_skipgram(&ids, vocab.len(), &cfg(3)).unwrap();
        let (b, _) = train_skipgram(&ids, vocab.len(), &cfg(3)).unwrap();
        assert_eq!(a, b);
        let (c, _) = train_skipgram(&ids, vocab.len(), &SkipGramConfig { seed: 12, ..cfg(3) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn loss_non_increasing_within_noise() {
        let (vocab, ids) = toy();
        let (_, r) = train_skipgram(&ids, vocab.len(), &cfg(10)).unwrap();
        for w in r.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{:?}", r.epoch_losses);
        }
    }

    #[test]
    fn empty_corpora_rejected() {
        assert!(matches!(
            train_skipgram(&[vec![PAD]], 3, &cfg(1)),
            Err(EmbeddingError::EmptyCorpora)
        ));
    }
}
