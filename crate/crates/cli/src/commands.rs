use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use mtle_core::corpus::synth::{generate, SynthOptions};
use mtle_core::corpus::{build_vocabulary, kfold_split, tokenize, RawTask, Split, TaskData, Vocabulary};
use mtle_core::diff::GradCheckConfig;
use mtle_core::embedding::{load_pretrained, write_vectors, EmbeddingError, EmbeddingTable, Role};
use mtle_core::gradcheck::{check_model, GradCheckSetup};
use mtle_core::matcher::LossMode;
use mtle_core::model::label_ids;
use mtle_core::rng::{salted, Stream};
use mtle_core::skipgram::{train_skipgram, SkipGramConfig};
use mtle_core::trainer::{
    cold_update, evaluate, hot_update, init_parameters, load_checkpoint, pairwise_ablation, save_checkpoint, train,
    zero_update_eval, EpochMetric, ModelCheckpoint, SplitMetrics, TrainConfig, TrainError, TrainOutcome,
};
use mtle_core::unsupervised::evaluate_unsupervised;

use crate::args::*;
use crate::config::{resolve_parallel, resolve_seed, resolve_train, ConfigFile, EMBED_KEYS};
use crate::manifest::{read_manifest, sha256_file, verify_inputs, ManifestBuilder};
use crate::{init_logging, CliError};

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out, text: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn dispatch(cli: Cli, argv: &[String], out: Out) -> Result<(), CliError> {
    init_logging(cli.verbose);
    match cli.command {
        Command::EmbedTrain(a) => embed_train(a, argv, out),
        Command::Train(a) => cmd_train(a, argv, out),
        Command::Eval(a) => cmd_eval(a, argv, out),
        Command::AddTask(a) => add_task(a, argv, out),
        Command::Ablate(a) => ablate(a, argv, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Replay(a) => replay(a, out),
    }
}

fn read_tasks(paths: &[PathBuf]) -> Result<Vec<RawTask>, CliError> {
    paths.iter().map(|p| RawTask::read(p).map_err(CliError::from)).collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn metric_lines(metrics: &[EpochMetric]) -> String {
    metrics.iter().map(|m| format!("{m}\n")).collect()
}

fn print_outcome(out: Out, outcome: &TrainOutcome, metrics_path: Option<&Path>) -> Result<(), CliError> {
    let lines = metric_lines(&outcome.metrics);
    write!(out, "{lines}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    if let Some(p) = metrics_path {
        write_file(p, &lines)?;
    }
    emit(out, format!("best epoch {} ({} steps)", outcome.best_epoch, outcome.steps))?;
    for entry in outcome.checkpoint.registry.entries() {
        let id = &entry.spec.task_id;
        let fmt = |s| outcome.accuracy(id, s).map_or("-".into(), percent);
        emit(out, format!("task={id} train_acc={} test_acc={}", fmt(Split::Train), fmt(Split::Test)))?;
    }
    Ok(())
}

fn absolute(p: &Path) -> String {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

/// Dimension of a word-vector file, from its header or first row.
fn vector_file_dim(path: &Path) -> Result<usize, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut first = String::new();
    BufReader::new(f).read_line(&mut first).map_err(|e| CliError::io(path, e))?;
    let fields: Vec<&str> = first.split_whitespace().collect();
    let dim = match fields.as_slice() {
        [_, d] if fields.iter().all(|f| f.parse::<usize>().is_ok()) => d.parse().ok(),
        [_, rest @ ..] if !rest.is_empty() => Some(rest.len()),
        _ => None,
    };
    dim.ok_or_else(|| {
        CliError::Embedding(EmbeddingError::MalformedVectorLine {
            path: path.display().to_string(),
            line: 1,
        })
    })
}

#[derive(Serialize)]
struct EmbedSettings {
    skipgram: SkipGramConfig,
    min_count: usize,
}

fn embed_train(a: EmbedTrainArgs, argv: &[String], out: Out) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("embed-train", argv, &a.corpus)?;
    let file = ConfigFile::load(a.common.config.as_deref())?;
    file.check_keys(&[EMBED_KEYS, &["seed"]])?;
    let d = SkipGramConfig::default();
    let pick = |flag: Option<usize>, key: &str, def: usize| -> Result<usize, CliError> {
        Ok(flag.or(file.get(key)?).unwrap_or(def))
    };
    let cfg = SkipGramConfig {
        dim: pick(a.dim, "dim", d.dim)?,
        window: pick(a.window, "window", d.window)?,
        negatives: pick(a.negatives, "negatives", d.negatives)?,
        epochs: pick(a.epochs, "epochs", d.epochs)?,
        lr: match a.lr {
            Some(lr) => lr,
            None => file.get("lr")?.unwrap_or(d.lr),
        },
        seed: resolve_seed(a.common.seed, &file, 0)?,
    };
    if cfg.dim == 0 {
        return Err(CliError::Usage("--dim must be positive".into()));
    }
    let min_count = pick(a.min_count, "min-count", 1)?;

    let mut sentences: Vec<Vec<String>> = Vec::new();
    for path in &a.corpus {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if text.starts_with("task\t") {
            sentences.extend(RawTask::parse(&text, &path.display().to_string())?.corpus());
        } else {
            sentences.extend(text.lines().map(tokenize).filter(|s| !s.is_empty()));
        }
    }
    let vocab = Vocabulary::build(&sentences, min_count)?;
    let ids: Vec<Vec<usize>> = sentences.iter().map(|s| vocab.encode(s)).collect();
    let (table, report) = train_skipgram(&ids, vocab.len(), &cfg)?;
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        emit(out, format!("epoch={} loss={loss:.6}", e + 1))?;
    }
    write_vectors(&table, &vocab, &a.out)?;
    emit(out, format!("wrote {} vectors of dimension {} to {}", vocab.len() - 1, cfg.dim, a.out.display()))?;
    manifest.config(cfg.seed, &EmbedSettings { skipgram: cfg, min_count });
    manifest.finish(&[a.out.clone()], a.common.manifest.as_deref(), Some(&a.out))?;
    Ok(())
}

fn apply_folds(data: &mut [TaskData], folds: Option<(usize, usize)>, seed: u64) -> Result<(), CliError> {
    if let Some((k, fold)) = folds {
        for t in data {
            let (train, test) = kfold_split(&t.train.examples, k, fold, seed)?;
            t.train = train;
            t.test = test;
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, argv: &[String], out: Out) -> Result<(), CliError> {
    let mut inputs = a.tasks.clone();
    inputs.extend(a.pretrained.clone());
    inputs.extend(a.common.config.clone());
    let mut manifest = ManifestBuilder::start("train", argv, &inputs)?;
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let mut cfg = resolve_train(TrainConfig::default(), &a.hyper, &a.common, &file)?;
    let raw = read_tasks(&a.tasks)?;
    let folds = a.folds.zip(a.fold);

    match a.mode {
        Mode::Model1 => {
            let pretrained = a
                .pretrained
                .as_deref()
                .ok_or_else(|| CliError::Usage("--mode model1 needs --pretrained word vectors".into()))?;
            let dim = vector_file_dim(pretrained)?;
            if a.hyper.embed_dim.is_some_and(|d| d != dim) {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: cfg.embed_dim,
                    found: dim,
                }
                .into());
            }
            cfg.embed_dim = dim;
            let vocab = build_vocabulary(&raw, cfg.min_count)?;
            let mut data: Vec<TaskData> = raw.iter().map(|t| t.encode(&vocab)).collect();
            apply_folds(&mut data, folds, cfg.seed)?;
            let mut rng = salted(cfg.seed, Stream::Init, 0);
            let init = EmbeddingTable::random("model1", vocab.len(), dim, Role::Input, cfg.init_std, &mut rng);
            let table = load_pretrained(pretrained, &vocab, init)?;
            for t in &data {
                let (split, examples) = if t.test.is_empty() {
                    (Split::Train, &t.train.examples)
                } else {
                    (Split::Test, &t.test.examples)
                };
                let r = evaluate_unsupervised(&table, &vocab, t, examples, a.metric, cfg.parallel).map_err(TrainError::from)?;
                emit(
                    out,
                    format!(
                        "task={} split={split} metric={} n={} acc={} random={}",
                        r.task_id,
                        a.metric,
                        r.n,
                        percent(r.accuracy),
                        percent(r.random_baseline)
                    ),
                )?;
            }
            manifest.config(cfg.seed, &cfg);
            manifest.finish(&[], a.common.manifest.as_deref(), None)?;
        }
        Mode::Model2 => {
            let ckpt_path = a
                .out
                .as_deref()
                .ok_or_else(|| CliError::Usage("train needs --out for the checkpoint".into()))?;
            if let Some(p) = &a.pretrained {
                let dim = vector_file_dim(p)?;
                if dim != cfg.embed_dim {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: cfg.embed_dim,
                        found: dim,
                    }
                    .into());
                }
            }
            let vocab = build_vocabulary(&raw, cfg.min_count)?;
            let mut data: Vec<TaskData> = raw.iter().map(|t| t.encode(&vocab)).collect();
            apply_folds(&mut data, folds, cfg.seed)?;
            let init = match &a.pretrained {
                None => None,
                Some(p) => {
                    let (mut model, _) = init_parameters(&cfg, vocab.len());
                    let table = load_pretrained(p, &vocab, model.input_lookup.clone())?;
                    model.set_lookups(&table);
                    Some(model)
                }
            };
            let mut outcome = train(init, &data, &vocab, &cfg)?;
            for (t, path) in raw.iter().zip(&a.tasks) {
                outcome.checkpoint.registry.set_source(&t.spec.task_id, Some(absolute(path)));
            }
            print_outcome(out, &outcome, a.metrics.as_deref())?;
            save_checkpoint(&outcome.checkpoint, ckpt_path)?;
            emit(out, format!("checkpoint {} sha256 {}", ckpt_path.display(), sha256_file(ckpt_path)?))?;
            let mut outputs = vec![ckpt_path.to_path_buf()];
            outputs.extend(a.metrics.clone());
            manifest.config(cfg.seed, &cfg);
            manifest.finish(&outputs, a.common.manifest.as_deref(), Some(ckpt_path))?;
        }
    }
    Ok(())
}

fn report_metrics(out: Out, id: &str, split: Split, labels: &[String], m: &SplitMetrics) -> Result<(), CliError> {
    emit(out, format!("task={id} split={split} n={} loss={:.6} acc={}", m.n, m.loss, percent(m.accuracy)))?;
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(4).max(9);
    let mut header = format!("{:<width$}", "gold\\pred");
    for l in labels {
        header.push_str(&format!("  {l:>width$}"));
    }
    emit(out, header)?;
    for (l, row) in labels.iter().zip(&m.confusion) {
        let mut line = format!("{l:<width$}");
        for c in row {
            line.push_str(&format!("  {c:>width$}"));
        }
        emit(out, line)?;
    }
    Ok(())
}

fn split_metrics(ckpt: &ModelCheckpoint, data: &TaskData, split: Split, parallel: bool) -> Result<SplitMetrics, CliError> {
    let examples = &data.split(split).examples;
    if examples.is_empty() {
        let id = data.spec.task_id.clone();
        return Err(match split {
            Split::Test => TrainError::NoTestData(id),
            Split::Train => TrainError::NoTrainingData { task_id: Some(id) },
        }
        .into());
    }
    let labels = label_ids(&ckpt.vocab, &data.spec.label_tokens);
    Ok(evaluate(ckpt.model(), &labels, examples, parallel)?)
}

fn cmd_eval(a: EvalArgs, argv: &[String], out: Out) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("eval", argv, &[a.checkpoint.clone(), a.task.clone()])?;
    let file = ConfigFile::load(a.common.config.as_deref())?;
    file.check_keys(&[&["seed", "serial"]])?;
    let parallel = resolve_parallel(&a.common, &file)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let raw = RawTask::read(&a.task)?;
    let id = raw.spec.task_id.clone();
    if a.zero_shot {
        if a.split != Split::Test {
            return Err(CliError::Usage("--zero-shot always scores the test split".into()));
        }
        let r = zero_update_eval(&ckpt, &raw, parallel)?;
        emit(out, format!("zero-shot task={id} random={}", percent(r.random_baseline)))?;
        if !r.oov_label_tokens.is_empty() {
            emit(out, format!("label tokens read as <unk>: {}", r.oov_label_tokens.join(" ")))?;
        }
        report_metrics(out, &id, Split::Test, &raw.spec.labels, &r.metrics)?;
    } else {
        let entry = ckpt.registry.get(&id).ok_or_else(|| TrainError::UnknownTask(id.clone()))?;
        let mut data = raw.encode(&ckpt.vocab);
        data.spec = entry.spec.clone();
        let m = split_metrics(&ckpt, &data, a.split, parallel)?;
        report_metrics(out, &id, a.split, &entry.spec.labels, &m)?;
    }
    manifest.config(ckpt.config.seed, &ckpt.config);
    manifest.finish(&[], a.common.manifest.as_deref(), None)?;
    Ok(())
}

fn add_task(a: AddTaskArgs, argv: &[String], out: Out) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let new_task = RawTask::read(&a.task)?;
    let old_paths: Vec<PathBuf> = if a.old_tasks.is_empty() {
        ckpt.registry
            .entries()
            .iter()
            .map(|e| {
                e.source
                    .as_ref()
                    .map(PathBuf::from)
                    .ok_or_else(|| CliError::from(TrainError::MissingTaskData(e.spec.task_id.clone())))
            })
            .collect::<Result<_, _>>()?
    } else {
        a.old_tasks.clone()
    };
    let old_raw = read_tasks(&old_paths)?;
    let mut inputs = vec![a.checkpoint.clone(), a.task.clone()];
    inputs.extend(old_paths.iter().cloned());
    let mut manifest = ManifestBuilder::start("add-task", argv, &inputs)?;
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let cfg = resolve_train(ckpt.config.clone(), &a.hyper, &a.common, &file)?;

    let new_id = new_task.spec.task_id.clone();
    let mut before = Vec::new();
    for t in &old_raw {
        if ckpt.registry.contains(&t.spec.task_id) {
            let data = t.encode(&ckpt.vocab);
            before.push((t.spec.task_id.clone(), split_metrics(&ckpt, &data, Split::Test, cfg.parallel)?.accuracy));
        }
    }
    let zero = zero_update_eval(&ckpt, &new_task, cfg.parallel)?;
    before.push((new_id.clone(), zero.metrics.accuracy));

    let (regime, outcome) = if a.hot {
        ("hot", hot_update(&ckpt, &old_raw, &new_task, &cfg)?)
    } else {
        ("cold", cold_update(&ckpt, &old_raw, &new_task, &cfg)?)
    };
    let mut outcome = outcome;
    outcome.checkpoint.registry.set_source(&new_id, Some(absolute(&a.task)));
    for (t, p) in old_raw.iter().zip(&old_paths) {
        outcome.checkpoint.registry.set_source(&t.spec.task_id, Some(absolute(p)));
    }
    print_outcome(out, &outcome, None)?;

    let width = before.iter().map(|(id, _)| id.len()).max().unwrap_or(4).max(4);
    emit(out, format!("{regime} update: test accuracy before and after (new task before = zero update)"))?;
    emit(out, format!("{:<width$}  {:>7}  {:>7}  {:>7}", "task", "before", "after", "delta"))?;
    for (id, b) in &before {
        let after = outcome.accuracy(id, Split::Test).unwrap_or(f64::NAN);
        let marker = if *id == new_id { "  (new)" } else { "" };
        emit(
            out,
            format!("{id:<width$}  {:>7}  {:>7}  {:>+7.2}{marker}", percent(*b), percent(after), 100.0 * (after - b)),
        )?;
    }
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    emit(out, format!("checkpoint {} sha256 {}", a.out.display(), sha256_file(&a.out)?))?;
    manifest.config(cfg.seed, &cfg);
    manifest.finish(&[a.out.clone()], a.common.manifest.as_deref(), Some(&a.out))?;
    Ok(())
}

fn ablate(a: AblateArgs, argv: &[String], out: Out) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("ablate", argv, &a.tasks)?;
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let cfg = resolve_train(TrainConfig::default(), &a.hyper, &a.common, &file)?;
    let raw = read_tasks(&a.tasks)?;
    let vocab = build_vocabulary(&raw, cfg.min_count)?;
    let data: Vec<TaskData> = raw.iter().map(|t| t.encode(&vocab)).collect();
    let report = pairwise_ablation(&data, &vocab, &cfg, a.parallel)?;
    if a.csv {
        write!(out, "{}", report.to_csv()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    } else {
        emit(out, format!("{} runs", report.runs.len()))?;
        emit(out, report.to_string())?;
    }
    let mut outputs = Vec::new();
    if let Some(p) = &a.out {
        write_file(p, &report.to_csv())?;
        outputs.push(p.clone());
    }
    manifest.config(cfg.seed, &cfg);
    manifest.finish(&outputs, a.common.manifest.as_deref(), a.out.as_deref())?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: Out) -> Result<(), CliError> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    file.check_keys(&[&["seed", "serial"]])?;
    let seeds = if a.seeds.is_empty() {
        vec![resolve_seed(a.common.seed, &file, 0)?]
    } else {
        a.seeds.clone()
    };
    let modes = match a.loss {
        LossChoice::Both => vec![LossMode::Literal, LossMode::OneVsRest],
        LossChoice::Literal => vec![LossMode::Literal],
        LossChoice::OneVsRest => vec![LossMode::OneVsRest],
    };
    let setup = GradCheckSetup {
        embed_dim: a.embed_dim,
        hidden_size: a.hidden_size,
        labels: a.labels,
        vocab_size: a.vocab,
        seeds,
        lengths: a.lengths.clone(),
        modes,
        matcher_form: a.matcher,
        init_std: a.init_std,
        check: GradCheckConfig {
            epsilon: a.eps,
            tol: a.tol,
            richardson: a.stencil == Stencil::Richardson,
            ..GradCheckConfig::default()
        },
        corrupt: a.corrupt.clone(),
        parallel: resolve_parallel(&a.common, &file)?,
        ..GradCheckSetup::default()
    };
    let cases = check_model(&setup)?;
    let mut failing: Vec<String> = Vec::new();
    let mut worst = 0.0f64;
    for c in &cases {
        let r = &c.report;
        worst = worst.max(r.max_rel_error);
        emit(
            out,
            format!(
                "seed={} T={} loss={} tensors={} max_rel_err={:.3e} {}",
                c.seed,
                c.length,
                c.mode,
                r.tensors.len(),
                r.max_rel_error,
                if r.pass { "PASS" } else { "FAIL" }
            ),
        )?;
        if a.full || !r.pass {
            emit(out, r.to_string())?;
        }
        for t in r.failing_tensors() {
            if !failing.iter().any(|f| f == t) {
                failing.push(t.to_string());
            }
        }
    }
    let tensors = cases.first().map_or(0, |c| c.report.tensors.len());
    let stencil = match a.stencil {
        Stencil::Richardson => "richardson",
        Stencil::Central => "central",
    };
    emit(
        out,
        format!(
            "gradcheck: {} cases x {tensors} tensors, {stencil} eps={:e}, tol={:e}, worst {worst:.3e}",
            cases.len(),
            a.eps,
            a.tol
        ),
    )?;
    if failing.is_empty() {
        emit(out, "PASS")?;
        Ok(())
    } else {
        let msg = format!("gradient check failed for: {}", failing.join(", "));
        emit(out, format!("FAIL {}", failing.join(", ")))?;
        Err(CliError::CheckFailed(msg))
    }
}

fn synth(a: SynthArgs, out: Out) -> Result<(), CliError> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    file.check_keys(&[&["seed"]])?;
    let seed = resolve_seed(a.common.seed, &file, 0)?;
    if a.tasks == 0 || a.train_size == 0 {
        return Err(CliError::Usage("--tasks and --train-size must be positive".into()));
    }
    let mut opts = SynthOptions::new(seed, a.scenario, vec![a.train_size; a.tasks]);
    opts.test_size = a.test_size;
    opts.first_task = a.first_task;
    if let Some(k) = a.keywords_per_label {
        opts.keywords_per_label = k;
    }
    if let Some(p) = a.label_leak {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::Usage("--label-leak must be in [0, 1]".into()));
        }
        opts.label_leak = p;
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    for task in generate(&opts) {
        let path = a.out.join(format!("{}.tsv", task.spec.task_id));
        task.write(&path)?;
        emit(out, path.display().to_string())?;
    }
    Ok(())
}

fn replay(a: ReplayArgs, out: Out) -> Result<(), CliError> {
    let m = read_manifest(&a.manifest)?;
    if !a.ignore_digests {
        verify_inputs(&m)?;
    }
    let cli = <Cli as clap::Parser>::try_parse_from(&m.args).map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Usage("a manifest cannot replay another replay".into()));
    }
    dispatch(cli, &m.args, out)
}
