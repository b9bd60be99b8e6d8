//! Tokenization, vocabulary, and task/dataset ingestion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

pub mod synth;

pub use synth::{generate_synthetic_tasks, Scenario, SynthOptions};

pub type TokenId = usize;

pub const UNK: TokenId = 0;
pub const PAD: TokenId = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no token reaches min_count={0}")]
    AllTokensFiltered(usize),
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: label {label:?} is not declared in the task header")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },
    #[error("invalid task {task_id:?}: {reason}")]
    InvalidTask { task_id: String, reason: String },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: TokenId, size: usize },
    #[error("k-fold split needs 2 <= k <= n and fold < k (k={k}, fold={fold}, n={n})")]
    BadFold { k: usize, fold: usize, n: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Lowercases, splits on whitespace, and peels leading and trailing ASCII
/// punctuation off each chunk as one-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase();
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && chars[start].is_ascii_punctuation() {
            start += 1;
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            end -= 1;
        }
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}

/// Token string <-> id table. Ids 0 and 1 are reserved for UNK and PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    min_count: usize,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let index = r
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens: r.tokens,
            index,
            min_count: r.min_count,
        }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            tokens: v.tokens,
            min_count: v.min_count,
        }
    }
}

/// Descending frequency, ties broken lexicographically.
fn rank_by_frequency(counts: HashMap<&str, usize>, min_count: usize) -> Vec<String> {
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.into_iter().map(|(t, _)| t.to_string()).collect()
}

fn count_tokens<'a, I, S>(corpora: I) -> HashMap<&'a str, usize>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<[String]> + 'a + ?Sized,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in corpora {
        for tok in seq.as_ref() {
            if tok != UNK_TOKEN && tok != PAD_TOKEN {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    counts
}

impl Vocabulary {
    /// Builds a vocabulary over input sequences and label phrases alike.
    pub fn build<S: AsRef<[String]>>(corpora: &[S], min_count: usize) -> Result<Self, CorpusError> {
        let min_count = min_count.max(1);
        let ranked = rank_by_frequency(count_tokens(corpora.iter()), min_count);
        if ranked.is_empty() {
            return Err(CorpusError::AllTokensFiltered(min_count));
        }
        let mut tokens = vec![UNK_TOKEN.to_string(), PAD_TOKEN.to_string()];
        tokens.extend(ranked);
        Ok(VocabRepr { tokens, min_count }.into())
    }

    /// Appends tokens from `corpora` not yet present, using the same
    /// frequency threshold and ordering. Returns how many were added.
    pub fn extend<S: AsRef<[String]>>(&mut self, corpora: &[S]) -> usize {
        let counts: HashMap<&str, usize> = count_tokens(corpora.iter())
            .into_iter()
            .filter(|(t, _)| !self.index.contains_key(*t))
            .collect();
        let fresh = rank_by_frequency(counts, self.min_count);
        for t in &fresh {
            self.index.insert(t.clone(), self.tokens.len());
            self.tokens.push(t.clone());
        }
        fresh.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// One classification task: its label phrases and loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    /// Label phrases as written in the task file.
    pub labels: Vec<String>,
    /// Tokenized label phrases, parallel to `labels`.
    pub label_tokens: Vec<Vec<String>>,
    pub weight: f64,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, labels: Vec<String>, weight: f64) -> Result<Self, CorpusError> {
        let task_id = task_id.into();
        let invalid = |reason: String| CorpusError::InvalidTask {
            task_id: task_id.clone(),
            reason,
        };
        if task_id.is_empty() {
            return Err(invalid("empty task id".into()));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(invalid(format!("weight must be finite and >= 0, got {weight}")));
        }
        if labels.len() < 2 {
            return Err(invalid(format!("needs at least 2 labels, got {}", labels.len())));
        }
        let label_tokens: Vec<Vec<String>> = labels.iter().map(|l| tokenize(l)).collect();
        let mut seen = HashSet::new();
        for (label, toks) in labels.iter().zip(&label_tokens) {
            if toks.is_empty() {
                return Err(invalid(format!("label {label:?} has no tokens")));
            }
            if !seen.insert(toks.clone()) {
                return Err(invalid(format!("label {label:?} duplicates another label")));
            }
        }
        Ok(TaskSpec {
            task_id,
            labels,
            label_tokens,
            weight,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub task_id: String,
    pub tokens: Vec<TokenId>,
    pub gold: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub split: Split,
    pub examples: Vec<Example>,
}

impl DatasetSplit {
    pub fn new(split: Split) -> Self {
        DatasetSplit {
            split,
            examples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// A record before id-mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub split: Split,
    pub gold: usize,
    pub text: String,
}

/// A task file parsed into strings; id-mapping happens in [`RawTask::encode`]
/// so the same file can be encoded against a vocabulary that grows.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTask {
    pub spec: TaskSpec,
    pub records: Vec<RawRecord>,
    pub source: Option<PathBuf>,
}

/// A task with its id-mapped splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &DatasetSplit {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

impl RawTask {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CorpusError> {
        let malformed = |line: usize, reason: &str| CorpusError::MalformedRecord {
            path: origin.to_string(),
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));

        let (n, header) = lines.next().ok_or_else(|| malformed(1, "missing task header"))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 3 || fields[0] != "task" {
            return Err(malformed(n, "expected `task<TAB>id<TAB>weight`"));
        }
        let weight: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| malformed(n, "task weight is not a number"))?;
        let task_id = fields[1].to_string();

        let (n, label_line) = lines.next().ok_or_else(|| malformed(2, "missing labels line"))?;
        let fields: Vec<&str> = label_line.split('\t').collect();
        if fields.len() < 3 || fields[0] != "labels" {
            return Err(malformed(n, "expected `labels<TAB>phrase<TAB>phrase...`"));
        }
        let labels: Vec<String> = fields[1..].iter().map(|s| s.to_string()).collect();
        let spec = TaskSpec::new(task_id, labels, weight).map_err(|e| malformed(n, &e.to_string()))?;

        let mut records = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (split, label, body) = match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(l), Some(t)) => (s, l, t),
                _ => return Err(malformed(n, "expected `split<TAB>label<TAB>text`")),
            };
            let split: Split = split.parse().map_err(|e: String| malformed(n, &e))?;
            let gold = spec.label_index(label).ok_or_else(|| CorpusError::UnknownLabel {
                path: origin.to_string(),
                line: n,
                label: label.to_string(),
            })?;
            if body.contains('\t') {
                return Err(malformed(n, "text may not contain tabs"));
            }
            if tokenize(body).is_empty() {
                return Err(malformed(n, "text has no tokens"));
            }
            records.push(RawRecord {
                split,
                gold,
                text: body.to_string(),
            });
        }
        Ok(RawTask {
            spec,
            records,
            source: None,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut task = Self::parse(&text, &path.display().to_string())?;
        task.source = Some(path.to_path_buf());
        Ok(task)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("task\t{}\t{}\nlabels", self.spec.task_id, self.spec.weight);
        for l in &self.spec.labels {
            out.push('\t');
            out.push_str(l);
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.split, self.spec.labels[r.gold], r.text));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_file_string().as_bytes()).map_err(io_err(path))
    }

    /// Every tokenized input plus every label phrase; the vocabulary corpus.
    pub fn corpus(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self.records.iter().map(|r| tokenize(&r.text)).collect();
        out.extend(self.spec.label_tokens.iter().cloned());
        out
    }

    pub fn encode(&self, vocab: &Vocabulary) -> TaskData {
        let mut train = DatasetSplit::new(Split::Train);
        let mut test = DatasetSplit::new(Split::Test);
        for r in &self.records {
            let ex = Example {
                task_id: self.spec.task_id.clone(),
                tokens: vocab.encode(&tokenize(&r.text)),
                gold: r.gold,
            };
            match r.split {
                Split::Train => train.examples.push(ex),
                Split::Test => test.examples.push(ex),
            }
        }
        TaskData {
            spec: self.spec.clone(),
            train,
            test,
        }
    }
}

/// Vocabulary over inputs and labels of every task.
pub fn build_vocabulary(tasks: &[RawTask], min_count: usize) -> Result<Vocabulary, CorpusError> {
    let corpora: Vec<Vec<String>> = tasks.iter().flat_map(RawTask::corpus).collect();
    Vocabulary::build(&corpora, min_count)
}

pub fn load_task_dataset(path: &Path, vocab: &Vocabulary) -> Result<TaskData, CorpusError> {
    Ok(RawTask::read(path)?.encode(vocab))
}

/// Checks an example against a vocabulary size and task.
pub fn validate_example(ex: &Example, spec: &TaskSpec, vocab_size: usize) -> Result<(), CorpusError> {
    if let Some(&id) = ex.tokens.iter().find(|&&id| id >= vocab_size) {
        return Err(CorpusError::TokenOutOfRange { id, size: vocab_size });
    }
    if ex.gold >= spec.num_labels() || ex.task_id != spec.task_id || ex.tokens.is_empty() {
        return Err(CorpusError::InvalidTask {
            task_id: spec.task_id.clone(),
            reason: format!("example with gold={} and {} tokens does not fit", ex.gold, ex.tokens.len()),
        });
    }
    Ok(())
}

/// Re-splits a task's training examples into k folds and returns
/// (train, held-out) for `fold`.
pub fn kfold_split(
    examples: &[Example],
    k: usize,
    fold: usize,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit), CorpusError> {
    let n = examples.len();
    if k < 2 || fold >= k || k > n {
        return Err(CorpusError::BadFold { k, fold, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::salted(seed, Stream::Schedule, u64::MAX));
    let mut train = DatasetSplit::new(Split::Train);
    let mut test = DatasetSplit::new(Split::Test);
    for (pos, &i) in order.iter().enumerate() {
        if pos % k == fold {
            test.examples.push(examples[i].clone());
        } else {
            train.examples.push(examples[i].clone());
        }
    }
    Ok((train, test))
}

/// Counts of token occurrences, used by the skip-gram sampler and reports.
pub fn token_frequencies(seqs: &[Vec<TokenId>]) -> BTreeMap<TokenId, usize> {
    let mut counts = BTreeMap::new();
    for s in seqs {
        for &t in s {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}
