//! Flat `key = value` training configuration.
//!
//! Lines are UTF-8, `#` starts a comment, unknown keys are rejected. Values
//! given later override earlier ones, so command-line overrides are applied
//! with [`TrainConfig::set`] after the file has been read.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::preprocess::INPUT_SIZE;
use crate::data::{DatasetKind, SplitMode, SyntheticSizes};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::real::DType;
use crate::routing::RoutingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `lr_decay_factor` every `lr_decay_epochs` epochs.
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub split: SplitMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub lr_decay_epochs: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub routing_iterations: usize,
    pub lambda_base: f64,
    pub lambda_growth: f64,
    pub branched: bool,
    pub coordinate_addition: bool,
    pub per_kernel_offset_rotors: bool,
    pub margin_clamp: bool,
    pub augment_fashion: bool,
    pub dtype: DType,
    pub primary_types: usize,
    pub pose_blocks: Vec<(usize, usize)>,
    pub act_blocks: Vec<(usize, usize)>,
    pub trunk_blocks: Vec<(usize, usize)>,
    pub caps_types: Vec<usize>,
    pub caps_kernel: usize,
    pub caps_stride: usize,
    pub out_dir: PathBuf,
    pub checkpoint: String,
    pub metrics: String,
    /// Evaluate every this many epochs; 0 evaluates only after the last one.
    pub eval_every: usize,
    /// Save a checkpoint every this many steps in addition to epoch ends.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Keep only the first N samples of a split; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        let synth = SyntheticSizes::default();
        let routing = RoutingConfig::default();
        TrainConfig {
            dataset: DatasetKind::Synthetic,
            data_dir: PathBuf::from("data"),
            split: SplitMode::Standard,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.0,
            lr_schedule: LrSchedule::Constant,
            lr_decay_epochs: 10,
            lr_decay_factor: 0.1,
            seed: 0,
            routing_iterations: routing.iterations,
            lambda_base: routing.lambda_base,
            lambda_growth: routing.lambda_growth,
            branched: arch.branched,
            coordinate_addition: arch.coordinate_addition,
            per_kernel_offset_rotors: arch.per_kernel_offset_rotors,
            margin_clamp: true,
            augment_fashion: false,
            dtype: DType::F32,
            primary_types: arch.primary_types,
            pose_blocks: arch.pose_blocks,
            act_blocks: arch.act_blocks,
            trunk_blocks: arch.trunk_blocks,
            caps_types: arch.caps_types,
            caps_kernel: arch.caps_kernel,
            caps_stride: arch.caps_stride,
            out_dir: PathBuf::from("runs"),
            checkpoint: "checkpoint.qcn".into(),
            metrics: "metrics.csv".into(),
            eval_every: 1,
            checkpoint_every: 0,
            log_every: 1,
            train_limit: 0,
            test_limit: 0,
            synthetic_train: synth.train,
            synthetic_test: synth.test,
            threads: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "split",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "momentum",
    "lr_schedule",
    "lr_decay_epochs",
    "lr_decay_factor",
    "seed",
    "routing_iterations",
    "lambda_base",
    "lambda_growth",
    "branched",
    "coordinate_addition",
    "per_kernel_offset_rotors",
    "margin_clamp",
    "augment_fashion",
    "dtype",
    "primary_types",
    "pose_blocks",
    "act_blocks",
    "trunk_blocks",
    "caps_types",
    "caps_kernel",
    "caps_stride",
    "out_dir",
    "checkpoint",
    "metrics",
    "eval_every",
    "checkpoint_every",
    "log_every",
    "train_limit",
    "test_limit",
    "synthetic_train",
    "synthetic_test",
    "threads",
];

fn invalid(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::ConfigInvalid(format!("{key} = {value}: {why}"))
}

fn num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    value.parse().map_err(|e| invalid(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

/// `channels:stride` pairs, comma separated.
fn blocks(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|b| {
            let (c, s) = b.trim().split_once(':').ok_or_else(|| invalid(key, value, "expected channels:stride"))?;
            Ok((num(key, c.trim())?, num(key, s.trim())?))
        })
        .collect()
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn show_blocks(v: &[(usize, usize)]) -> String {
    v.iter().map(|(c, s)| format!("{c}:{s}")).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "split" => self.split = v.parse()?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(invalid(key, v, "expected adam or sgd")),
                }
            }
            "momentum" => self.momentum = num(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "step" => LrSchedule::Step,
                    _ => return Err(invalid(key, v, "expected constant or step")),
                }
            }
            "lr_decay_epochs" => self.lr_decay_epochs = num(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "routing_iterations" => self.routing_iterations = num(key, v)?,
            "lambda_base" => self.lambda_base = num(key, v)?,
            "lambda_growth" => self.lambda_growth = num(key, v)?,
            "branched" => self.branched = flag(key, v)?,
            "coordinate_addition" => self.coordinate_addition = flag(key, v)?,
            "per_kernel_offset_rotors" => self.per_kernel_offset_rotors = flag(key, v)?,
            "margin_clamp" => self.margin_clamp = flag(key, v)?,
            "augment_fashion" => self.augment_fashion = flag(key, v)?,
            "dtype" => self.dtype = v.parse().map_err(|e| invalid(key, v, e))?,
            "primary_types" => self.primary_types = num(key, v)?,
            "pose_blocks" => self.pose_blocks = blocks(key, v)?,
            "act_blocks" => self.act_blocks = blocks(key, v)?,
            "trunk_blocks" => self.trunk_blocks = blocks(key, v)?,
            "caps_types" => self.caps_types = list(key, v)?,
            "caps_kernel" => self.caps_kernel = num(key, v)?,
            "caps_stride" => self.caps_stride = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = v.to_string(),
            "metrics" => self.metrics = v.to_string(),
            "eval_every" => self.eval_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "train_limit" => self.train_limit = num(key, v)?,
            "test_limit" => self.test_limit = num(key, v)?,
            "synthetic_train" => self.synthetic_train = num(key, v)?,
            "synthetic_test" => self.synthetic_test = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            other => return Err(Error::ConfigInvalid(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dataset" => self.dataset.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "split" => self.split.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
            "momentum" => self.momentum.to_string(),
            "lr_schedule" => match self.lr_schedule {
                LrSchedule::Constant => "constant".into(),
                LrSchedule::Step => "step".into(),
            },
            "lr_decay_epochs" => self.lr_decay_epochs.to_string(),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "seed" => self.seed.to_string(),
            "routing_iterations" => self.routing_iterations.to_string(),
            "lambda_base" => self.lambda_base.to_string(),
            "lambda_growth" => self.lambda_growth.to_string(),
            "branched" => self.branched.to_string(),
            "coordinate_addition" => self.coordinate_addition.to_string(),
            "per_kernel_offset_rotors" => self.per_kernel_offset_rotors.to_string(),
            "margin_clamp" => self.margin_clamp.to_string(),
            "augment_fashion" => self.augment_fashion.to_string(),
            "dtype" => self.dtype.name().into(),
            "primary_types" => self.primary_types.to_string(),
            "pose_blocks" => show_blocks(&self.pose_blocks),
            "act_blocks" => show_blocks(&self.act_blocks),
            "trunk_blocks" => show_blocks(&self.trunk_blocks),
            "caps_types" => show_list(&self.caps_types),
            "caps_kernel" => self.caps_kernel.to_string(),
            "caps_stride" => self.caps_stride.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint" => self.checkpoint.clone(),
            "metrics" => self.metrics.clone(),
            "eval_every" => self.eval_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log_every" => self.log_every.to_string(),
            "train_limit" => self.train_limit.to_string(),
            "test_limit" => self.test_limit.to_string(),
            "synthetic_train" => self.synthetic_train.to_string(),
            "synthetic_test" => self.synthetic_test.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::ConfigInvalid(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::ConfigInvalid(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn routing(&self) -> RoutingConfig {
        RoutingConfig {
            iterations: self.routing_iterations,
            lambda_base: self.lambda_base,
            lambda_growth: self.lambda_growth,
            ..RoutingConfig::default()
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_channels: self.dataset.channels(),
            image_size: INPUT_SIZE,
            classes: self.dataset.classes(),
            primary_types: self.primary_types,
            pose_blocks: self.pose_blocks.clone(),
            act_blocks: self.act_blocks.clone(),
            trunk_blocks: self.trunk_blocks.clone(),
            caps_types: self.caps_types.clone(),
            caps_kernel: self.caps_kernel,
            caps_stride: self.caps_stride,
            branched: self.branched,
            coordinate_addition: self.coordinate_addition,
            per_kernel_offset_rotors: self.per_kernel_offset_rotors,
            routing: self.routing(),
        }
    }

    pub fn synthetic_sizes(&self) -> SyntheticSizes {
        SyntheticSizes {
            train: self.synthetic_train,
            test: self.synthetic_test,
            seed: self.seed,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(&self.checkpoint)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(&self.metrics)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.lr_schedule == LrSchedule::Step && (self.lr_decay_epochs == 0 || self.lr_decay_factor <= 0.0) {
            return bad("step decay needs positive lr_decay_epochs and lr_decay_factor");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if self.dataset == DatasetKind::Synthetic && (self.synthetic_train == 0 || self.synthetic_test == 0) {
            return bad("synthetic_train and synthetic_test must be positive");
        }
        if self.split != SplitMode::Standard && !self.dataset.has_viewpoints() {
            return Err(Error::ConfigInvalid(format!(
                "split {} needs viewpoint metadata, which {} does not carry",
                self.split, self.dataset
            )));
        }
        self.architecture().field_chain().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("caps_types", "8, 8").unwrap();
        c.set("pose_blocks", "16:1,32:2").unwrap();
        c.set("dtype", "f64").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let c = TrainConfig::parse("# run\nepochs = 3 # short\n\nseed=5\n").unwrap();
        assert_eq!((c.epochs, c.seed), (3, 5));
        assert!(matches!(TrainConfig::parse("epoch = 3"), Err(Error::ConfigInvalid(_))));
        assert!(matches!(TrainConfig::parse("epochs 3"), Err(Error::ConfigInvalid(_))));
        assert!(matches!(TrainConfig::parse("branched = maybe"), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn novel_split_needs_viewpoints() {
        assert!(TrainConfig::parse("dataset = mnist\nsplit = novel-azimuth").is_err());
        assert!(TrainConfig::parse("dataset = smallnorb\nsplit = novel-azimuth").is_ok());
    }

    #[test]
    fn every_key_is_readable() {
        let c = TrainConfig::default();
        for k in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }
}
