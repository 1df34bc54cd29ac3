//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{gen_synthetic, load_cifar10_binary, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Activation, LossProfile, Topology, TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// A directory written by `gen-data` holding `train.cnmd` and `test.cnmd`.
    Dir(PathBuf),
    /// A directory with the CIFAR-10 binary batches.
    Cifar10(PathBuf),
}

impl DataSource {
    fn parse(s: &str) -> Result<Self> {
        if s == "synthetic" {
            Ok(DataSource::Synthetic)
        } else if let Some(p) = s.strip_prefix("dir:") {
            Ok(DataSource::Dir(PathBuf::from(p)))
        } else if let Some(p) = s.strip_prefix("cifar10:") {
            Ok(DataSource::Cifar10(PathBuf::from(p)))
        } else {
            Err(Error::Config(format!(
                "data source {s:?} is not synthetic, dir:<path> or cifar10:<path>"
            )))
        }
    }

    fn render(&self) -> String {
        match self {
            DataSource::Synthetic => "synthetic".into(),
            DataSource::Dir(p) => format!("dir:{}", p.display()),
            DataSource::Cifar10(p) => format!("cifar10:{}", p.display()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Chain,
    Multiscale,
}

/// Every setting of a run. [`RunConfig::render`] lists all keys, and parsing
/// that text reproduces the configuration exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub layout: Layout,
    pub steps: usize,
    pub channels: usize,
    /// Steps per block of the multiscale layout.
    pub scales: usize,
    /// Empty for the layout's default.
    pub exits: Vec<usize>,
    /// 0 for `8 * channels`.
    pub embed_dim: usize,
    pub activation: Activation,

    pub data: DataSource,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,

    pub train: TrainConfig,
    pub eval_batch: usize,

    pub checkpoint: Option<PathBuf>,
    /// 0 for the final step.
    pub exit: usize,
    pub n_mc: usize,
    /// Empty for every level of the schedule.
    pub levels: Vec<usize>,

    pub oracle_steps: usize,
    pub trials: usize,
    /// Perturbation injected into the oracle fast path; 0 for none.
    pub inject_fault: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layout: Layout::Chain,
            steps: 8,
            channels: 16,
            scales: 2,
            exits: Vec::new(),
            embed_dim: 0,
            activation: Activation::Relu,
            data: DataSource::Synthetic,
            classes: 3,
            train_per_class: 667,
            test_per_class: 200,
            image_size: 12,
            noise_sigma: 0.25,
            train: TrainConfig {
                epochs: 40,
                ..TrainConfig::default()
            },
            eval_batch: 256,
            checkpoint: None,
            exit: 0,
            n_mc: 0,
            levels: Vec::new(),
            oracle_steps: 4,
            trials: 100,
            inject_fault: 0.0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "topology" => {
                self.layout = match v {
                    "chain" => Layout::Chain,
                    "multiscale" => Layout::Multiscale,
                    _ => {
                        return Err(Error::Config(format!(
                            "topology {v:?} is not chain or multiscale"
                        )))
                    }
                }
            }
            "steps" => self.steps = num(key, v)?,
            "channels" => self.channels = num(key, v)?,
            "scales" => self.scales = num(key, v)?,
            "exits" => self.exits = list(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "activation" => {
                self.activation = match v {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => {
                        return Err(Error::Config(format!(
                            "activation {v:?} is not relu or identity"
                        )))
                    }
                }
            }
            "data" => self.data = DataSource::parse(v)?,
            "classes" => self.classes = num(key, v)?,
            "train_per_class" => self.train_per_class = num(key, v)?,
            "test_per_class" => self.test_per_class = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "noise_sigma" => self.noise_sigma = num(key, v)?,
            "variant" => self.train.variant = Variant::parse(v)?,
            "train_with_expectations" => {
                if flag(key, v)? {
                    self.train.variant = Variant::Expectations;
                } else if self.train.variant == Variant::Expectations {
                    self.train.variant = Variant::Sampled;
                }
            }
            "deterministic_sum" => {
                if flag(key, v)? {
                    self.train.variant = Variant::DeterministicSum;
                } else if self.train.variant == Variant::DeterministicSum {
                    self.train.variant = Variant::Sampled;
                }
            }
            "loss" => {
                self.train.loss = match v {
                    "anytime" => LossProfile::Anytime,
                    "single" => LossProfile::Single,
                    _ => {
                        return Err(Error::Config(format!(
                            "loss {v:?} is not anytime or single"
                        )))
                    }
                }
            }
            "temperature" => self.train.temperature = num(key, v)?,
            "lr" => self.train.learning_rate = num(key, v)?,
            "momentum" => self.train.momentum = num(key, v)?,
            "weight_decay" => self.train.weight_decay = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "augment" => self.train.augment = flag(key, v)?,
            "learn_table" => self.train.learn_table = flag(key, v)?,
            "eval_batch" => self.eval_batch = num(key, v)?,
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "exit" => self.exit = num(key, v)?,
            "n_mc" => self.n_mc = num(key, v)?,
            "levels" => self.levels = list(key, v)?,
            "oracle_steps" => self.oracle_steps = num(key, v)?,
            "trials" => self.trials = num(key, v)?,
            "inject_fault" => self.inject_fault = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Applies every `key = value` line of `text` on top of `self`; blank
    /// lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value.
    pub fn render(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv(
            "topology",
            match self.layout {
                Layout::Chain => "chain",
                Layout::Multiscale => "multiscale",
            }
            .into(),
        );
        kv("steps", self.steps.to_string());
        kv("channels", self.channels.to_string());
        kv("scales", self.scales.to_string());
        kv("exits", join(&self.exits));
        kv("embed_dim", self.embed_dim.to_string());
        kv(
            "activation",
            match self.activation {
                Activation::Relu => "relu",
                Activation::Identity => "identity",
            }
            .into(),
        );
        kv("data", self.data.render());
        kv("classes", self.classes.to_string());
        kv("train_per_class", self.train_per_class.to_string());
        kv("test_per_class", self.test_per_class.to_string());
        kv("image_size", self.image_size.to_string());
        kv("noise_sigma", format!("{:?}", self.noise_sigma));
        kv("variant", t.variant.name().into());
        kv(
            "loss",
            match t.loss {
                LossProfile::Anytime => "anytime",
                LossProfile::Single => "single",
            }
            .into(),
        );
        kv("temperature", format!("{:?}", t.temperature));
        kv("lr", format!("{:?}", t.learning_rate));
        kv("momentum", format!("{:?}", t.momentum));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("augment", t.augment.to_string());
        kv("learn_table", t.learn_table.to_string());
        kv("eval_batch", self.eval_batch.to_string());
        kv(
            "checkpoint",
            self.checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("exit", self.exit.to_string());
        kv("n_mc", self.n_mc.to_string());
        kv("levels", join(&self.levels));
        kv("oracle_steps", self.oracle_steps.to_string());
        kv("trials", self.trials.to_string());
        kv("inject_fault", format!("{:?}", self.inject_fault));
        s
    }

    /// Training settings with the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// The model topology for images of `extent`.
    pub fn topology(&self, extent: (usize, usize), num_classes: usize) -> Result<Topology> {
        let mut topo = match self.layout {
            Layout::Chain => Topology::chain(self.steps, self.channels, extent, num_classes),
            Layout::Multiscale => {
                if self.scales == 0 || !self.steps.is_multiple_of(self.scales) {
                    return Err(Error::Config(format!(
                        "multiscale needs steps ({}) divisible by scales ({})",
                        self.steps, self.scales
                    )));
                }
                Topology::multiscale(
                    self.steps / self.scales,
                    self.scales,
                    self.channels,
                    extent,
                    num_classes,
                )
            }
        };
        if !self.exits.is_empty() {
            topo = topo.with_exits(self.exits.clone());
        }
        if self.embed_dim > 0 {
            topo = topo.with_embed_dim(self.embed_dim);
        }
        topo = topo.with_activation(self.activation);
        topo.validate()?;
        Ok(topo)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            height: self.image_size,
            width: self.image_size,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    /// Training and test splits of the configured source.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic => gen_synthetic(&self.synthetic_spec()),
            DataSource::Dir(dir) => Ok((
                Dataset::load(&dir.join("train.cnmd"))?,
                Dataset::load(&dir.join("test.cnmd"))?,
            )),
            DataSource::Cifar10(dir) => Ok((
                load_cifar10_binary(dir, Split::Train)?,
                load_cifar10_binary(dir, Split::Test)?,
            )),
        }
    }
}
