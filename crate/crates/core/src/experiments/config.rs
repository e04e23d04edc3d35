use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::{AutoencoderConfig, Backbone, ClassifierConfig, ImputerKind, MaskProtocol};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Reconstruct,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "reconstruct" => Ok(Task::Reconstruct),
            _ => Err(Error::Config(format!(
                "unknown task '{s}' (expected classify or reconstruct)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Reconstruct => "reconstruct",
        })
    }
}

/// A training run described by a `key=value` file.
///
/// Blank lines and `#` comments are ignored. Unknown or repeated keys are
/// errors. [`RunConfig::to_text`] lists every key, defaults included, and
/// parses back to the same config.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub model: Backbone,
    pub imputer: Option<ImputerKind>,
    /// Directory holding the four MNIST IDX files.
    pub data_dir: PathBuf,
    /// Leading images of the training and test files actually used.
    pub train_size: usize,
    pub test_size: usize,
    pub mask_size: usize,
    pub resample: bool,
    pub seed: u64,
    pub eval_seed: u64,
    pub layers: usize,
    pub width: usize,
    pub filters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub classes: usize,
    pub knn_k: usize,
    pub knn_pool: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: [usize; 4],
    pub batch_norm: bool,
    pub bn_refresh: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        let a = AutoencoderConfig::default();
        RunConfig {
            task: Task::Classify,
            model: c.backbone,
            imputer: c.imputer,
            data_dir: PathBuf::from("data/mnist"),
            train_size: 10_000,
            test_size: 2_000,
            mask_size: c.masks.size,
            resample: c.masks.resample,
            seed: c.seed,
            eval_seed: c.masks.eval_seed,
            layers: c.layers,
            width: c.width,
            filters: c.filters,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            classes: c.classes,
            knn_k: c.knn_k,
            knn_pool: c.knn_pool,
            encoder_widths: a.encoder_widths,
            decoder_widths: a.decoder_widths,
            batch_norm: a.batch_norm,
            bn_refresh: c.bn_refresh,
        }
    }
}

const KEYS: [&str; 23] = [
    "task",
    "model",
    "imputer",
    "data_dir",
    "train_size",
    "test_size",
    "mask_size",
    "resample",
    "seed",
    "eval_seed",
    "layers",
    "width",
    "filters",
    "epochs",
    "batch_size",
    "lr",
    "classes",
    "knn_k",
    "knn_pool",
    "encoder_widths",
    "decoder_widths",
    "batch_norm",
    "bn_refresh",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: key '{key}' given twice", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        RunConfig::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = value.parse()?,
            "model" => self.model = value.parse()?,
            "imputer" => {
                self.imputer = match value {
                    "none" => None,
                    v => Some(v.parse()?),
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(value),
            "train_size" => self.train_size = parse_value(key, value)?,
            "test_size" => self.test_size = parse_value(key, value)?,
            "mask_size" => self.mask_size = parse_value(key, value)?,
            "resample" => self.resample = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "eval_seed" => self.eval_seed = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "filters" => self.filters = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "classes" => self.classes = parse_value(key, value)?,
            "knn_k" => self.knn_k = parse_value(key, value)?,
            "knn_pool" => self.knn_pool = parse_value(key, value)?,
            "encoder_widths" => self.encoder_widths = parse_list(key, value)?,
            "decoder_widths" => {
                let v = parse_list(key, value)?;
                self.decoder_widths = v
                    .try_into()
                    .map_err(|_| Error::Config("decoder_widths needs exactly 4 values".into()))?;
            }
            "batch_norm" => self.batch_norm = parse_value(key, value)?,
            "bn_refresh" => self.bn_refresh = parse_value(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}' (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let value = match key {
                "task" => self.task.to_string(),
                "model" => self.model.to_string(),
                "imputer" => self.imputer.map_or_else(|| "none".to_string(), |k| k.to_string()),
                "data_dir" => self.data_dir.display().to_string(),
                "train_size" => self.train_size.to_string(),
                "test_size" => self.test_size.to_string(),
                "mask_size" => self.mask_size.to_string(),
                "resample" => self.resample.to_string(),
                "seed" => self.seed.to_string(),
                "eval_seed" => self.eval_seed.to_string(),
                "layers" => self.layers.to_string(),
                "width" => self.width.to_string(),
                "filters" => self.filters.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => format!("{:?}", self.lr),
                "classes" => self.classes.to_string(),
                "knn_k" => self.knn_k.to_string(),
                "knn_pool" => self.knn_pool.to_string(),
                "encoder_widths" => join(&self.encoder_widths),
                "decoder_widths" => join(&self.decoder_widths),
                "batch_norm" => self.batch_norm.to_string(),
                "bn_refresh" => self.bn_refresh.to_string(),
                _ => unreachable!("every key is listed"),
            };
            writeln!(s, "{key}={value}").expect("write to string");
        }
        s
    }

    pub fn masks(&self) -> MaskProtocol {
        MaskProtocol {
            size: self.mask_size,
            resample: self.resample,
            eval_seed: self.eval_seed,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            backbone: self.model,
            imputer: self.imputer,
            layers: self.layers,
            width: self.width,
            filters: self.filters,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            classes: self.classes,
            masks: self.masks(),
            knn_k: self.knn_k,
            knn_pool: self.knn_pool,
            bn_refresh: self.bn_refresh,
        }
    }

    pub fn autoencoder(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            encoder_widths: self.encoder_widths.clone(),
            filters: self.filters,
            batch_norm: self.batch_norm,
            decoder_widths: self.decoder_widths,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            masks: self.masks(),
            bn_refresh: self.bn_refresh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("train_size and test_size must be positive".into()));
        }
        match self.task {
            Task::Classify => self.classifier().validate(),
            Task::Reconstruct => {
                if self.model != Backbone::Sgcn || self.imputer.is_some() {
                    return Err(Error::Config(
                        "reconstruct runs use model=sgcn and imputer=none".into(),
                    ));
                }
                self.autoencoder().validate()
            }
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    let s = e.to_string();
    s.strip_prefix("invalid configuration: ").map(str::to_string).unwrap_or(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_parses_back_to_the_same_config() {
        let cfg = RunConfig {
            lr: 0.1 + 0.2,
            task: Task::Reconstruct,
            encoder_widths: vec![8, 4],
            ..RunConfig::default()
        };
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("# gcn baseline\nmodel = gcn\n\nepochs=3  # short\n").unwrap();
        assert_eq!(cfg.model, Backbone::Gcn);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.width, 32);
        assert_eq!(cfg.train_size, 10_000);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "colour=red",
            "epochs=3\nepochs=4",
            "epochs",
            "epochs=three",
            "model=cnn",
            "model=sgcn\nimputer=knn",
            "task=reconstruct\nmodel=gcn",
            "decoder_widths=1,2,3",
            "batch_size=1",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text:?} accepted");
        }
        let e = RunConfig::parse("epochs=2\ncolour=red").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("colour"), "{e}");
    }
}
