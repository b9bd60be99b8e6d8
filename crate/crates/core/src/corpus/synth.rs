//! Seeded synthetic task families.
//!
//! Every label is signalled by its own keyword set; keywords are scattered
//! through filler drawn from a per-task filler vocabulary. Keyword sets are
//! derived from the label phrase, so two tasks that share a label phrase also
//! share its keywords; that is what makes tasks "related".

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RawRecord, RawTask, Split, TaskSpec};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Class count and sequence length differ between tasks.
    Cardinality,
    /// Same label phrases, disjoint filler vocabularies.
    Domain,
    /// Disjoint label phrase sets.
    Objective,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Cardinality => "cardinality",
            Scenario::Domain => "domain",
            Scenario::Objective => "objective",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cardinality" => Ok(Scenario::Cardinality),
            "domain" => Ok(Scenario::Domain),
            "objective" => Ok(Scenario::Objective),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub seed: u64,
    pub scenario: Scenario,
    /// Training examples per task; one task per entry.
    pub train_sizes: Vec<usize>,
    /// Test examples per task; `None` means `max(train, 100)`.
    pub test_size: Option<usize>,
    /// Keywords available per label.
    pub keywords_per_label: usize,
    /// Filler words per task.
    pub filler_size: usize,
    /// Probability that an input also contains its label phrase verbatim.
    pub label_leak: f64,
    /// Index of the first task; names and filler vocabularies are taken
    /// from this offset on, so a later call can add a fresh related task.
    pub first_task: usize,
}

impl SynthOptions {
    pub fn new(seed: u64, scenario: Scenario, train_sizes: Vec<usize>) -> Self {
        SynthOptions {
            seed,
            scenario,
            train_sizes,
            test_size: None,
            keywords_per_label: 24,
            filler_size: 80,
            label_leak: 0.25,
            first_task: 0,
        }
    }
}

const DOMAINS: &[&str] = &["books", "dvd", "electronics", "kitchen", "apparel", "music", "toys", "sports"];
const BINARY: &[&str] = &["positive", "negative"];
const FINE: &[&str] = &["very positive", "positive", "neutral", "negative", "very negative"];
const OBJECTIVES: &[(&str, &[&str])] = &[
    ("sentiment", &["positive", "negative"]),
    ("topic", &["world", "sports", "business", "science"]),
    ("question", &["person", "location", "number"]),
    ("subjectivity", &["subjective", "objective"]),
];

struct TaskPlan {
    task_id: String,
    labels: Vec<String>,
    filler_prefix: String,
    mean_len: usize,
}

fn plan(scenario: Scenario, index: usize) -> TaskPlan {
    let cycle = index / 8;
    let suffix = |name: &str| if cycle == 0 { name.to_string() } else { format!("{name}{cycle}") };
    let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match scenario {
        Scenario::Domain => {
            let name = suffix(DOMAINS[index % DOMAINS.len()]);
            TaskPlan {
                filler_prefix: name.clone(),
                task_id: name,
                labels: strs(BINARY),
                mean_len: 10,
            }
        }
        Scenario::Cardinality => {
            let (name, labels, mean_len) = if index % 2 == 0 {
                ("fine", FINE, 10)
            } else {
                ("long", BINARY, 40)
            };
            let name = if index < 2 { name.to_string() } else { format!("{name}{}", index / 2) };
            TaskPlan {
                filler_prefix: format!("{name}w"),
                task_id: name,
                labels: strs(labels),
                mean_len,
            }
        }
        Scenario::Objective => {
            let (name, labels) = OBJECTIVES[index % OBJECTIVES.len()];
            let round = index / OBJECTIVES.len();
            let name = if round == 0 { name.to_string() } else { format!("{name}{round}") };
            let labels = if round == 0 {
                strs(labels)
            } else {
                labels.iter().map(|l| format!("{l}{round}")).collect()
            };
            TaskPlan {
                filler_prefix: format!("{name}w"),
                task_id: name,
                labels,
                mean_len: 10,
            }
        }
    }
}

/// "very positive" -> "verypositive"; keywords are `<stem>_<k>`.
fn keyword(label: &str, k: usize) -> String {
    let stem: String = label.split_whitespace().collect();
    format!("{stem}_{k}")
}

fn sample_text<R: Rng>(rng: &mut R, plan: &TaskPlan, gold: usize, opts: &SynthOptions) -> String {
    let lo = (plan.mean_len / 2).max(2);
    let hi = plan.mean_len + plan.mean_len / 2;
    let len = rng.random_range(lo..=hi);
    let n_keywords = (len / 10).max(1);
    let mut words: Vec<String> = (0..len)
        .map(|_| format!("{}{}", plan.filler_prefix, rng.random_range(0..opts.filler_size)))
        .collect();
    for _ in 0..n_keywords {
        let pos = rng.random_range(0..words.len());
        words[pos] = keyword(&plan.labels[gold], rng.random_range(0..opts.keywords_per_label));
    }
    if rng.random_bool(opts.label_leak) {
        let pos = rng.random_range(0..=words.len());
        let phrase: Vec<String> = plan.labels[gold].split_whitespace().map(str::to_string).collect();
        words.splice(pos..pos, phrase);
    }
    words.join(" ")
}

pub fn generate(opts: &SynthOptions) -> Vec<RawTask> {
    opts.train_sizes
        .iter()
        .enumerate()
        .map(|(i, &n_train)| {
            let index = opts.first_task + i;
            let plan = plan(opts.scenario, index);
            let mut rng = rng::salted(opts.seed, Stream::Synth, index as u64);
            let n_test = opts.test_size.unwrap_or(n_train.max(100));
            let c = plan.labels.len();
            let mut records = Vec::with_capacity(n_train + n_test);
            for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
                for k in 0..n {
                    let gold = k % c;
                    records.push(RawRecord {
                        split,
                        gold,
                        text: sample_text(&mut rng, &plan, gold, opts),
                    });
                }
            }
            let spec = TaskSpec::new(plan.task_id.clone(), plan.labels.clone(), 1.0)
                .expect("built-in label sets are valid");
            RawTask {
                spec,
                records,
                source: None,
            }
        })
        .collect()
}

/// Convenience wrapper with default generator knobs.
pub fn generate_synthetic_tasks(seed: u64, scenario: Scenario, sizes: &[usize]) -> Vec<RawTask> {
    generate(&SynthOptions::new(seed, scenario, sizes.to_vec()))
}
