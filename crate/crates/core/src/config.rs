//! Flat `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment. Unknown keys are rejected.
//!
//! | key | default |
//! |-----|---------|
//! | `model.kind` | `TSNet` (`S`, `PS`, `TSNet`, `SStar`, `TSNetFusionAt(FC1\|FC2\|FC3\|FeatureTower)`) |
//! | `model.loss_mode` | `ThreeEntropy` (or `OneEntropy`) |
//! | `model.width` | `1` (tower channel multiplier) |
//! | `model.bottleneck` | `1` (bottleneck multiplier) |
//! | `train.lr` | `0.001` |
//! | `train.momentum` | `0.95` |
//! | `train.l2` | `0.001` |
//! | `train.batch_size` | `32` |
//! | `train.epochs` | `auto` (40 on synthetic data, 150 otherwise) |
//! | `train.seed` | `0` |
//! | `loss.lambda` | `0.01` |
//! | `loss.beta` | `0.01` |
//! | `loss.q` | `50` |
//! | `loss.normalize_features` | `false` |
//! | `data.cache` | `data` (directory written by `gen-data`) |
//! | `output.dir` | `runs` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::TowerShape;
use crate::model::{LossMode, ModelKind, ModelSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// `None` picks the epoch count from the data source.
    pub epochs: Option<usize>,
    pub data_cache: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSpec {
                kind: ModelKind::TSNet,
                loss_mode: LossMode::ThreeEntropy,
                tower: TowerShape::default(),
            },
            train: TrainConfig::default(),
            epochs: None,
            data_cache: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
        }
    }
}

pub const KEYS: [&str; 16] = [
    "model.kind",
    "model.loss_mode",
    "model.width",
    "model.bottleneck",
    "train.lr",
    "train.momentum",
    "train.l2",
    "train.batch_size",
    "train.epochs",
    "train.seed",
    "loss.lambda",
    "loss.beta",
    "loss.q",
    "loss.normalize_features",
    "data.cache",
    "output.dir",
];

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(None, format!("invalid value `{v}` for `{key}`")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                Error::config(
                    Some(line),
                    format!("expected `key = value`, got `{content}`"),
                )
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(Error::config(Some(line), format!("duplicate key `{key}`")));
            }
            c.set(key, value).map_err(|e| match e {
                Error::Config { line: None, msg } => Error::config(Some(line), msg),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Assigns one key; the error carries no line number.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model.kind" => self.model.kind = v.parse::<ModelKind>()?,
            "model.loss_mode" => self.model.loss_mode = v.parse()?,
            "model.width" => self.model.tower.width_multiplier = parse_value(key, v)?,
            "model.bottleneck" => self.model.tower.bottleneck_multiplier = parse_value(key, v)?,
            "train.lr" => self.train.lr = parse_value(key, v)?,
            "train.momentum" => self.train.momentum = parse_value(key, v)?,
            "train.l2" => self.train.l2 = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.epochs" => {
                self.epochs = if v == "auto" {
                    None
                } else {
                    Some(parse_value(key, v)?)
                }
            }
            "train.seed" => self.train.seed = parse_value(key, v)?,
            "loss.lambda" => self.train.loss.lambda = parse_value(key, v)?,
            "loss.beta" => self.train.loss.beta = parse_value(key, v)?,
            "loss.q" => self.train.loss.q = parse_value(key, v)?,
            "loss.normalize_features" => self.train.loss.normalize_features = parse_value(key, v)?,
            "data.cache" => self.data_cache = PathBuf::from(v),
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::config(None, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.epochs == Some(0) {
            return Err(Error::config(None, "train.epochs must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its value, in [`KEYS`] order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let rows: [(&str, String); 16] = [
            ("model.kind", self.model.kind.to_string()),
            ("model.loss_mode", self.model.loss_mode.to_string()),
            ("model.width", self.model.tower.width_multiplier.to_string()),
            (
                "model.bottleneck",
                self.model.tower.bottleneck_multiplier.to_string(),
            ),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.l2", t.l2.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            (
                "train.epochs",
                self.epochs.map_or("auto".to_string(), |e| e.to_string()),
            ),
            ("train.seed", t.seed.to_string()),
            ("loss.lambda", t.loss.lambda.to_string()),
            ("loss.beta", t.loss.beta.to_string()),
            ("loss.q", t.loss.q.to_string()),
            (
                "loss.normalize_features",
                t.loss.normalize_features.to_string(),
            ),
            ("data.cache", self.data_cache.display().to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Training configuration with the epoch count resolved.
    pub fn resolved_train(&self, synthetic_data: bool) -> TrainConfig {
        let default = if synthetic_data {
            crate::train::DESK_EPOCHS
        } else {
            crate::train::DATASET_EPOCHS
        };
        TrainConfig {
            epochs: self.epochs.unwrap_or(default),
            ..self.train
        }
    }
}
