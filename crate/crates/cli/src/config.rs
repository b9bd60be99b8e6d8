//! Settings resolution: command-line flags, then the `--config` file, then
//! `MTLE_SEED` (seed only), then built-in defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mtle_core::trainer::TrainConfig;

use crate::args::{Common, Hyper};
use crate::CliError;

pub const SEED_ENV: &str = "MTLE_SEED";

const HYPER_KEYS: &[&str] = &[
    "d",
    "m",
    "batch-size",
    "lr",
    "lr-decay",
    "reg",
    "epochs",
    "init-std",
    "loss",
    "matcher",
    "clip-norm",
    "tie-lookups",
    "matcher-bias",
    "min-count",
    "task-weight",
];
const COMMON_KEYS: &[&str] = &["seed", "serial"];
pub const EMBED_KEYS: &[&str] = &["dim", "window", "negatives", "epochs", "lr", "min-count"];

/// Parsed `key=value` lines; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, Vec<String>>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value", n + 1)))?;
            let key = k.trim().trim_start_matches("--").replace('_', "-");
            values.entry(key).or_default().push(v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                ConfigFile::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Rejects keys that the command does not understand.
    pub fn check_keys(&self, groups: &[&[&str]]) -> Result<(), CliError> {
        for key in self.values.keys() {
            if !groups.iter().any(|g| g.contains(&key.as_str())) {
                return Err(CliError::Usage(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key).and_then(|v| v.last()) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))),
        }
    }

    pub fn all(&self, key: &str) -> &[String] {
        self.values.get(key).map_or(&[], |v| v.as_slice())
    }
}

pub fn resolve_seed(flag: Option<u64>, file: &ConfigFile, default: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = file.get("seed")? {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

pub fn resolve_parallel(common: &Common, file: &ConfigFile) -> Result<bool, CliError> {
    let serial = common.serial || file.get::<bool>("serial")?.unwrap_or(false);
    Ok(!serial)
}

fn pick<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, current: T) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(current),
    })
}

fn parse_weight(entry: &str) -> Result<(String, f64), CliError> {
    let bad = || CliError::Usage(format!("task weight `{entry}` is not TASK=WEIGHT"));
    let (task, w) = entry.rsplit_once('=').ok_or_else(bad)?;
    let w: f64 = w.trim().parse().map_err(|_| bad())?;
    Ok((task.trim().to_string(), w))
}

/// Applies the config file and flags on top of `base`.
pub fn resolve_train(
    base: TrainConfig,
    hyper: &Hyper,
    common: &Common,
    file: &ConfigFile,
) -> Result<TrainConfig, CliError> {
    file.check_keys(&[HYPER_KEYS, COMMON_KEYS])?;
    let b = base.clone();
    let mut cfg = TrainConfig {
        embed_dim: pick(hyper.embed_dim, file, "d", b.embed_dim)?,
        hidden_size: pick(hyper.hidden_size, file, "m", b.hidden_size)?,
        batch_size: pick(hyper.batch_size, file, "batch-size", b.batch_size)?,
        lr: pick(hyper.lr, file, "lr", b.lr)?,
        lr_decay: pick(hyper.lr_decay, file, "lr-decay", b.lr_decay)?,
        reg: pick(hyper.reg, file, "reg", b.reg)?,
        epochs: pick(hyper.epochs, file, "epochs", b.epochs)?,
        init_std: pick(hyper.init_std, file, "init-std", b.init_std)?,
        loss_mode: pick(hyper.loss, file, "loss", b.loss_mode)?,
        matcher_form: pick(hyper.matcher, file, "matcher", b.matcher_form)?,
        tie_lookups: pick(hyper.tie_lookups, file, "tie-lookups", b.tie_lookups)?,
        matcher_bias: pick(hyper.matcher_bias, file, "matcher-bias", b.matcher_bias)?,
        min_count: pick(hyper.min_count, file, "min-count", b.min_count)?,
        seed: resolve_seed(common.seed, file, b.seed)?,
        parallel: resolve_parallel(common, file)?,
        ..base
    };
    cfg.clip_norm = match hyper.clip_norm {
        Some(c) => Some(c),
        None => file.get("clip-norm")?.or(cfg.clip_norm),
    };
    for entry in file.all("task-weight").iter().chain(&hyper.task_weights) {
        let (task, w) = parse_weight(entry)?;
        cfg.task_weights.insert(task, w);
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common() -> Common {
        Common {
            seed: None,
            config: None,
            manifest: None,
            serial: false,
        }
    }

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let file = ConfigFile::parse("# comment\nd = 16\nm=12\nlr=0.5\nloss=literal\n", "cfg").unwrap();
        let hyper = Hyper {
            lr: Some(0.2),
            ..Default::default()
        };
        let cfg = resolve_train(TrainConfig::default(), &hyper, &common(), &file).unwrap();
        assert_eq!((cfg.embed_dim, cfg.hidden_size, cfg.lr), (16, 12, 0.2));
        assert_eq!(cfg.loss_mode, mtle_core::matcher::LossMode::Literal);
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let file = ConfigFile::parse("learning_rate=0.1", "cfg").unwrap();
        let err = resolve_train(TrainConfig::default(), &Hyper::default(), &common(), &file).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn bad_lines_and_values_rejected() {
        assert!(ConfigFile::parse("just words", "cfg").is_err());
        let file = ConfigFile::parse("epochs=many", "cfg").unwrap();
        assert!(resolve_train(TrainConfig::default(), &Hyper::default(), &common(), &file).is_err());
    }

    #[test]
    fn task_weights_from_both_sources() {
        let file = ConfigFile::parse("task-weight=books=2\ntask-weight=dvd=0.5", "cfg").unwrap();
        let hyper = Hyper {
            task_weights: vec!["dvd=3".into()],
            ..Default::default()
        };
        let cfg = resolve_train(TrainConfig::default(), &hyper, &common(), &file).unwrap();
        assert_eq!(cfg.task_weights.get("books"), Some(&2.0));
        assert_eq!(cfg.task_weights.get("dvd"), Some(&3.0));
    }

    #[test]
    fn seed_precedence() {
        let file = ConfigFile::parse("seed=7", "cfg").unwrap();
        assert_eq!(resolve_seed(Some(3), &file, 0).unwrap(), 3);
        assert_eq!(resolve_seed(None, &file, 0).unwrap(), 7);
    }
}
