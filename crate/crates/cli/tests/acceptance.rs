//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::Rng;

use mtle_core::corpus::synth::{generate, Scenario, SynthOptions};
use mtle_core::corpus::{build_vocabulary, RawTask, Split, TaskData};
use mtle_core::encoder::{LstmOptions, LstmParams, LstmState};
use mtle_core::matcher::{sample_loss, total_loss, LossMode, MatcherForm, MatcherParams};
use mtle_core::model::label_ids;
use mtle_core::rng::{salted, Stream};
use mtle_core::trainer::{
    cold_update, hot_update, load_checkpoint, pairwise_ablation, save_checkpoint, train, zero_update_eval, TrainConfig,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn mtle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtle"))
        .args(args)
        .current_dir(dir)
        .env_remove("MTLE_SEED")
        .output()
        .expect("binary runs")
}

fn mtle_ok(dir: &Path, args: &[&str]) -> String {
    let o = mtle(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        embed_dim: 16,
        hidden_size: 12,
        batch_size: 8,
        lr: 0.1,
        epochs,
        seed,
        ..Default::default()
    }
}

fn encoded(raw: &[RawTask]) -> (mtle_core::corpus::Vocabulary, Vec<TaskData>) {
    let vocab = build_vocabulary(raw, 1).unwrap();
    let data = raw.iter().map(|t| t.encode(&vocab)).collect();
    (vocab, data)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn gradients() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    let start = Instant::now();
    for matcher in ["interaction", "concat"] {
        let o = mtle(
            dir.path(),
            &["gradcheck", "--seeds", "0,1,2,3,4", "--lengths", "1,2,7", "--loss", "both", "--tol", "1e-4", "--matcher", matcher],
        );
        let out = String::from_utf8_lossy(&o.stdout);
        let summary = out.lines().rev().nth(1).unwrap_or("").to_string();
        pass &= o.status.success() && out.contains("30 cases x 32 tensors") && out.trim_end().ends_with("PASS");
        lines.push(format!("{matcher}: {summary}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    verdict(pass, format!("{}; {:.1}s", lines.join("; "), elapsed.as_secs_f64()))
}

fn lstm_oracle() -> Verdict {
    let mut p = LstmParams::zeros("l", 1, 1, LstmOptions::default());
    p.w[3].values[0] = 1.0;
    let (s, _) = p.step(&[1.0], &LstmState::zeros(1)).unwrap();
    let oracle = 0.18169974219452625;
    let zero = LstmParams::zeros("z", 3, 2, LstmOptions::default());
    let (z, _) = zero.step(&[0.4, -1.0, 2.0], &LstmState::zeros(2)).unwrap();
    let pass = (s.h[0] - oracle).abs() < 1e-5 && z.h == vec![0.0, 0.0];
    verdict(pass, format!("h={:.8} (oracle {oracle:.8}), zero-param h={:?}", s.h[0], z.h))
}

fn loss_arithmetic() -> Verdict {
    let mut m = MatcherParams::zeros(1, true, MatcherForm::Concat);
    m.weight.values.copy_from_slice(&[1.0, 0.0]);
    let s = m.score(&[1.0], &[123.0]).unwrap();
    let sc = [0.9, 0.4];
    let w: HashMap<String, f64> = [("a".into(), 1.0), ("b".into(), 2.0)].into();
    let checks = [
        (s, 0.7310585786300049),
        (sample_loss(&sc, 0, LossMode::Literal).unwrap(), -(0.9f64).ln()),
        (sample_loss(&sc, 0, LossMode::OneVsRest).unwrap(), -(0.9f64).ln() - (0.6f64).ln()),
        (sample_loss(&[0.5; 4], 3, LossMode::Literal).unwrap(), std::f64::consts::LN_2),
        (total_loss(&[("a", &[0.5, 0.25])], &w).unwrap(), 0.75),
        (total_loss(&[("a", &[0.5]), ("b", &[0.25])], &w).unwrap(), 1.0),
    ];
    let worst = checks.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(worst < 1e-12, format!("{} cases, max |err| {worst:.1e}", checks.len()))
}

fn supervised() -> Verdict {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let raw = generate(&SynthOptions::new(seed, Scenario::Domain, vec![200, 200]));
        let (vocab, data) = encoded(&raw);
        let out = train(None, &data, &vocab, &cfg(seed, 30)).unwrap();
        for t in &data {
            let id = &t.spec.task_id;
            let (tr, te) = (out.accuracy(id, Split::Train).unwrap(), out.accuracy(id, Split::Test).unwrap());
            pass &= tr >= 0.95 && te >= 0.85;
            parts.push(format!("s{seed}/{id} {:.1}/{:.1}", 100.0 * tr, 100.0 * te));
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    verdict(pass, format!("train/test % {}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn multitask_gain() -> Verdict {
    let (mut joint, mut separate) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let raw = generate(&SynthOptions::new(seed, Scenario::Domain, vec![50, 50]));
        let (vocab, data) = encoded(&raw);
        let c = cfg(seed, 60);
        let out = train(None, &data, &vocab, &c).unwrap();
        joint.push(mean(&data.iter().map(|t| out.accuracy(&t.spec.task_id, Split::Test).unwrap()).collect::<Vec<_>>()));
        let alone: Vec<f64> = data
            .iter()
            .map(|t| train(None, std::slice::from_ref(t), &vocab, &c).unwrap().accuracy(&t.spec.task_id, Split::Test).unwrap())
            .collect();
        separate.push(mean(&alone));
    }
    let gain = 100.0 * (mean(&joint) - mean(&separate));
    verdict(
        gain >= 2.0,
        format!("joint {:.2}% separate {:.2}% gain {gain:+.2} points", 100.0 * mean(&joint), 100.0 * mean(&separate)),
    )
}

fn update_regimes() -> Verdict {
    let (mut zero, mut random, mut hot, mut cold, mut drop) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut untouched = true;
    for seed in 0..5 {
        let raw = generate(&SynthOptions::new(seed, Scenario::Domain, vec![300; 3]));
        let (old, new) = (&raw[..2], &raw[2]);
        let (vocab, data) = encoded(old);
        let c = cfg(seed, 30);
        let base = train(None, &data, &vocab, &c).unwrap();
        let before = base.checkpoint.to_bytes();
        let z = zero_update_eval(&base.checkpoint, new, true).unwrap();
        untouched &= base.checkpoint.to_bytes() == before;
        zero.push(z.metrics.accuracy);
        random.push(z.random_baseline);
        let h = hot_update(&base.checkpoint, old, new, &c).unwrap();
        let k = cold_update(&base.checkpoint, old, new, &c).unwrap();
        let id = &new.spec.task_id;
        hot.push(h.accuracy(id, Split::Test).unwrap());
        cold.push(k.accuracy(id, Split::Test).unwrap());
        for t in old {
            let i = &t.spec.task_id;
            drop.push(base.accuracy(i, Split::Test).unwrap() - h.accuracy(i, Split::Test).unwrap());
        }
    }
    let pts = |x: f64| 100.0 * x;
    let (zero, random, hot, cold, drop) = (pts(mean(&zero)), pts(mean(&random)), pts(mean(&hot)), pts(mean(&cold)), pts(mean(&drop)));
    let pass = cold >= hot - 1.0 && drop <= 3.0 && zero >= random + 20.0 && untouched;
    verdict(
        pass,
        format!(
            "new task cold {cold:.2}% hot {hot:.2}%; old-task drop under hot {drop:+.2} points; zero update {zero:.2}% vs random {random:.2}%; checkpoint unchanged: {untouched}"
        ),
    )
}

fn model_one() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut accs = Vec::new();
    let mut random = Vec::new();
    for seed in 0..3u64 {
        let s = seed.to_string();
        let unl = (seed + 100).to_string();
        mtle_ok(d, &["synth", "--seed", &s, "--train-size", "200", "--out", &format!("t{s}")]);
        mtle_ok(d, &["synth", "--seed", &unl, "--train-size", "2000", "--out", &format!("u{s}")]);
        let vec = format!("v{s}.vec");
        mtle_ok(
            d,
            &[
                "embed-train", "--corpus", &format!("u{s}/books.tsv"), "--corpus", &format!("u{s}/dvd.tsv"), "--dim", "32", "--epochs", "15",
                "--seed", &s, "--out", &vec,
            ],
        );
        let out = mtle_ok(
            d,
            &[
                "train", "--mode", "model1", "--pretrained", &vec, "--metric", "cosine", "--task", &format!("t{s}/books.tsv"), "--task",
                &format!("t{s}/dvd.tsv"), "--seed", &s,
            ],
        );
        for line in out.lines() {
            let field = |k: &str| line.split(' ').find_map(|f| f.strip_prefix(k)).and_then(|v| v.parse::<f64>().ok());
            if let (Some(a), Some(r)) = (field("acc="), field("random=")) {
                accs.push(a);
                random.push(r);
            }
        }
    }
    let (acc, rnd) = (mean(&accs), mean(&random));
    verdict(accs.len() == 6 && acc >= rnd + 15.0, format!("cosine matching {acc:.2}% vs random {rnd:.2}% over {} task runs", accs.len()))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    mtle_ok(d, &["synth", "--seed", "3", "--train-size", "40", "--out", "data"]);
    let train_args = ["train", "--task", "data/books.tsv", "--task", "data/dvd.tsv", "--d", "8", "--m", "6", "--epochs", "3", "--seed", "3"];
    mtle_ok(d, &[&train_args[..], &["--out", "a.ckpt", "--metrics", "a.log", "--manifest", "run.json"]].concat());
    let first = fs::read(d.join("a.log")).unwrap();
    fs::remove_file(d.join("a.log")).unwrap();
    mtle_ok(d, &["replay", "run.json"]);
    let logs_equal = fs::read(d.join("a.log")).unwrap() == first && !first.is_empty();

    let raw = generate(&SynthOptions::new(5, Scenario::Domain, vec![40, 40]));
    let (vocab, data) = encoded(&raw);
    let out = train(None, &data, &vocab, &TrainConfig { embed_dim: 8, hidden_size: 6, ..cfg(5, 2) }).unwrap();
    let path = d.join("rt.ckpt");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let mut rng = salted(8, Stream::Synth, 0);
    let mut same = 0;
    for n in 0..100 {
        let spec = &data[n % data.len()].spec;
        let labels = label_ids(&loaded.vocab, &spec.label_tokens);
        let len = rng.random_range(1..12);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..loaded.vocab.len())).collect();
        let a = out.checkpoint.model();
        let b = loaded.model();
        let sa = a.scores(&ids, &a.encode_labels(&labels).unwrap()).unwrap();
        let sb = b.scores(&ids, &b.encode_labels(&labels).unwrap()).unwrap();
        same += usize::from(sa == sb && a.predict(&ids, &a.encode_labels(&labels).unwrap()).unwrap() == b.predict(&ids, &b.encode_labels(&labels).unwrap()).unwrap());
    }
    verdict(logs_equal && same == 100, format!("replayed metrics log identical: {logs_equal}; round-trip parity {same}/100"))
}

fn ablation() -> Verdict {
    let raw = generate(&SynthOptions::new(1, Scenario::Domain, vec![200; 4]));
    let (vocab, data) = encoded(&raw);
    let r = pairwise_ablation(&data, &vocab, &cfg(1, 60), true).unwrap();
    let diag: Vec<f64> = (0..4).map(|i| r.gains[i][i]).collect();
    let pass = r.runs.len() == 15 && diag.iter().all(|&g| g >= -0.5);
    verdict(pass, format!("{} runs; diagonal gains {:?}", r.runs.len(), diag.iter().map(|g| format!("{g:+.2}")).collect::<Vec<_>>()))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient correctness", gradients),
        ("LSTM step oracle", lstm_oracle),
        ("loss arithmetic", loss_arithmetic),
        ("supervised learning", supervised),
        ("multi-task gain", multitask_gain),
        ("update regimes", update_regimes),
        ("unsupervised matching", model_one),
        ("determinism and persistence", determinism),
        ("ablation driver", ablation),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} criterion {} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
