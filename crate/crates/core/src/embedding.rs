//! Lookup tables for inputs and labels, average pooling, and the
//! word2vec-style text vector format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, Vocabulary, PAD, PAD_TOKEN};
use crate::diff::{check_len, Layer, LayerError};
use crate::tensor::{add_into, ParamTensor};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("vector file has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{path}:{line}: malformed vector line")]
    MalformedVectorLine { path: String, line: usize },
    #[error("skip-gram corpus has no usable tokens")]
    EmptyCorpora,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Label,
}

/// |V| x d lookup table. The PAD row stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub weights: ParamTensor,
    pub role: Role,
}

/// Row-sparse gradient of a lookup table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub dim: usize,
    pub rows: BTreeMap<TokenId, Vec<f64>>,
}

impl SparseRows {
    pub fn new(dim: usize) -> Self {
        SparseRows {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn add_row(&mut self, id: TokenId, g: &[f64]) {
        let dim = self.dim;
        add_into(self.rows.entry(id).or_insert_with(|| vec![0.0; dim]), g);
    }

    pub fn add_assign(&mut self, other: &SparseRows) {
        for (&id, g) in &other.rows {
            self.add_row(id, g);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.rows.values_mut() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.rows.values().flatten().map(|v| v * v).sum()
    }

    pub fn to_dense(&self, like: &ParamTensor) -> ParamTensor {
        let mut out = like.zeros_like();
        for (&id, g) in &self.rows {
            out.row_mut(id).copy_from_slice(g);
        }
        out
    }
}

impl EmbeddingTable {
    pub fn zeros(name: &str, vocab_size: usize, dim: usize, role: Role) -> Self {
        EmbeddingTable {
            weights: ParamTensor::zeros(name, vocab_size, dim),
            role,
        }
    }

    /// Truncated-normal init with the PAD row zeroed.
    pub fn random<R: Rng>(name: &str, vocab_size: usize, dim: usize, role: Role, std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(name, vocab_size, dim, role);
        t.weights.fill_truncated_normal(rng, std);
        t.zero_pad();
        t
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows
    }

    pub fn dim(&self) -> usize {
        self.weights.cols
    }

    pub fn zero_pad(&mut self) {
        if PAD < self.weights.rows {
            self.weights.row_mut(PAD).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        self.weights.row(id)
    }

    /// Appends freshly initialised rows until the table has `vocab_size` rows.
    pub fn grow<R: Rng>(&mut self, vocab_size: usize, std: f64, rng: &mut R) {
        let dim = self.dim();
        while self.weights.rows < vocab_size {
            for _ in 0..dim {
                self.weights.values.push(crate::tensor::truncated_normal(rng, std));
            }
            self.weights.rows += 1;
        }
    }

    pub fn lookup(&self, ids: &[TokenId]) -> Result<Vec<Vec<f64>>, LayerError> {
        ids.iter()
            .map(|&id| {
                if id < self.vocab_size() {
                    Ok(self.row(id).to_vec())
                } else {
                    Err(LayerError::IdOutOfRange {
                        id,
                        rows: self.vocab_size(),
                    })
                }
            })
            .collect()
    }

    pub fn apply_sparse(&mut self, grad: &SparseRows, lr: f64) {
        for (&id, g) in &grad.rows {
            if id == PAD {
                continue;
            }
            for (w, v) in self.weights.row_mut(id).iter_mut().zip(g) {
                *w -= lr * v;
            }
        }
    }
}

impl Layer for EmbeddingTable {
    type Input = [TokenId];
    type Output = Vec<Vec<f64>>;
    type Cache = Vec<TokenId>;
    type InputGrad = ();
    type Grad = SparseRows;

    fn forward(&self, ids: &[TokenId]) -> Result<(Self::Output, Self::Cache), LayerError> {
        Ok((self.lookup(ids)?, ids.to_vec()))
    }

    /// Scatters `d_output[t]` into row `ids[t]`; the PAD row never
    /// receives gradient.
    fn backward(&self, ids: &Vec<TokenId>, d_output: &Vec<Vec<f64>>, grad: &mut SparseRows) -> Result<(), LayerError> {
        check_len("lookup backward", ids.len(), d_output.len())?;
        for (&id, g) in ids.iter().zip(d_output) {
            check_len("lookup backward row", self.dim(), g.len())?;
            if id != PAD {
                grad.add_row(id, g);
            }
        }
        Ok(())
    }
}

/// Mean over the positions where `mask` is true.
pub fn average_pool(vectors: &[Vec<f64>], mask: &[bool]) -> Result<Vec<f64>, LayerError> {
    check_len("average_pool mask", vectors.len(), mask.len())?;
    let valid: Vec<&Vec<f64>> = vectors.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).collect();
    let first = valid.first().ok_or(LayerError::EmptySequence)?;
    let mut out = vec![0.0; first.len()];
    for v in &valid {
        add_into(&mut out, v);
    }
    let n = valid.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

/// Average of the table rows for `ids`, skipping PAD.
pub fn pool_ids(table: &EmbeddingTable, ids: &[TokenId]) -> Result<Vec<f64>, LayerError> {
    let vectors = table.lookup(ids)?;
    let mask: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
    average_pool(&vectors, &mask)
}

/// Reads word vectors in the textual word2vec format. Vocabulary words that
/// the file lacks keep the values already present in `init`.
pub fn load_pretrained(path: &Path, vocab: &Vocabulary, init: EmbeddingTable) -> Result<EmbeddingTable, EmbeddingError> {
    let io = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io)?;
    let d = init.dim();
    let mut table = init;
    let malformed = |line| EmbeddingError::MalformedVectorLine {
        path: path.display().to_string(),
        line,
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if n == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            let found: usize = fields[1].parse().unwrap_or(0);
            if found != d {
                return Err(EmbeddingError::DimensionMismatch { expected: d, found });
            }
            continue;
        }
        if fields.len() < 2 {
            return Err(malformed(n + 1));
        }
        let values: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| malformed(n + 1))?;
        if values.len() != d {
            return Err(EmbeddingError::DimensionMismatch {
                expected: d,
                found: values.len(),
            });
        }
        if let Some(id) = vocab.get(fields[0]) {
            if id != PAD {
                table.weights.row_mut(id).copy_from_slice(&values);
            }
        }
    }
    table.zero_pad();
    Ok(table)
}

/// Writes every non-PAD row as `word v1 ... vd` under a `<count> <d>` header.
pub fn write_vectors(table: &EmbeddingTable, vocab: &Vocabulary, path: &Path) -> Result<(), EmbeddingError> {
    let io = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::new();
    let rows: Vec<(usize, &String)> = vocab
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_str() != PAD_TOKEN)
        .collect();
    out.push_str(&format!("{} {}\n", rows.len(), table.dim()));
    for (id, tok) in rows {
        out.push_str(tok);
        for v in table.row(id) {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(out.as_bytes()).map_err(io)
}
