//! Run settings: defaults, overridden by a `key=value` file, then by flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use tiedmulti::data::{ToyTask, ToyTaskSpec};
use tiedmulti::decode::{BeamConfig, DecodeMode};
use tiedmulti::model::ModelConfig;
use tiedmulti::selector::SelectorConfig;
use tiedmulti::train::{ModelKind, TrainingConfig};
use tiedmulti::vocab::RESERVED;

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub kind: ModelKind,
    /// Use the mean of the kept checkpoints as the trained model.
    pub average: bool,
    pub task: ToyTaskSpec,
    pub beam: BeamConfig,
    pub mode: DecodeMode,
    pub selector: SelectorConfig,
    pub selector_grid: bool,
}

impl Default for Settings {
    fn default() -> Self {
        let task = ToyTaskSpec::default();
        Settings {
            model: ModelConfig { vocab: task.vocab + RESERVED, ..ModelConfig::default() },
            training: TrainingConfig::default(),
            kind: ModelKind::TiedMulti,
            average: true,
            task,
            beam: BeamConfig::default(),
            mode: DecodeMode::Greedy,
            selector: SelectorConfig::default(),
            selector_grid: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| anyhow!("{key}={value}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}={value}: expected true or false"),
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.set_seed(parse(key, v)?),
            "model.enc_layers" => self.model.enc_layers = parse(key, v)?,
            "model.dec_layers" => self.model.dec_layers = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "model.rs" => self.model.recurrent_stacking = parse_bool(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "train.kind" => self.kind = parse(key, v)?,
            "train.steps" => self.training.steps = parse(key, v)?,
            "train.batch_size" => self.training.batch_size = parse(key, v)?,
            "train.lr" => self.training.lr = parse(key, v)?,
            "train.warmup" => self.training.warmup = parse(key, v)?,
            "train.label_smoothing" => self.training.label_smoothing = parse(key, v)?,
            "train.checkpoint_every" => self.training.checkpoint_every = parse(key, v)?,
            "train.keep_last" => self.training.keep_last = parse(key, v)?,
            "train.average" => self.average = parse_bool(key, v)?,
            "task.name" => self.task.task = parse::<ToyTask>(key, v)?,
            "task.symbols" => {
                self.task.vocab = parse(key, v)?;
                self.model.vocab = self.task.vocab + RESERVED;
            }
            "task.min_len" => self.task.min_len = parse(key, v)?,
            "task.max_len" => self.task.max_len = parse(key, v)?,
            "task.size" => self.task.size = parse(key, v)?,
            "task.noise" => self.task.noise = parse(key, v)?,
            "decode.beam" => self.beam.beam = parse(key, v)?,
            "decode.alpha" => self.beam.alpha = parse(key, v)?,
            "decode.max_len" => self.beam.max_len = parse(key, v)?,
            "decode.mode" => self.mode = parse(key, v)?,
            "selector.layers" => self.selector.layers = parse(key, v)?,
            "selector.heads" => self.selector.heads = parse(key, v)?,
            "selector.d_ff" => self.selector.d_ff = parse(key, v)?,
            "selector.alpha" => self.selector.alpha = parse(key, v)?,
            "selector.beta" => self.selector.beta = parse(key, v)?,
            "selector.lambda" => self.selector.lambda = parse(key, v)?,
            "selector.threshold" => self.selector.threshold = parse(key, v)?,
            "selector.lr" => self.selector.lr = parse(key, v)?,
            "selector.momentum" => self.selector.momentum = parse(key, v)?,
            "selector.epochs" => self.selector.epochs = parse(key, v)?,
            "selector.batch_size" => self.selector.batch_size = parse(key, v)?,
            "selector.grid" => self.selector_grid = parse_bool(key, v)?,
            _ => bail!("unknown setting '{key}'"),
        }
        Ok(())
    }

    /// One master seed drives data generation, initialisation and shuffling.
    pub fn set_seed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.training.seed = seed;
        self.selector.seed = seed;
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key=value", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.task.validate()?;
        self.task.check_model(&self.model)?;
        self.beam.validate()?;
        self.selector.validate()?;
        Ok(())
    }

    /// Every setting as `key -> value`, for provenance in JSON reports.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let t = &self.training;
        let s = &self.selector;
        let kind = match self.kind {
            ModelKind::Vanilla => "vanilla",
            ModelKind::TiedMulti => "tied-multi",
        };
        [
            ("seed", t.seed.to_string()),
            ("model.enc_layers", m.enc_layers.to_string()),
            ("model.dec_layers", m.dec_layers.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.max_len", m.max_len.to_string()),
            ("model.rs", m.recurrent_stacking.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("train.kind", kind.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.warmup", t.warmup.to_string()),
            ("train.label_smoothing", t.label_smoothing.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.keep_last", t.keep_last.to_string()),
            ("train.average", self.average.to_string()),
            ("task.name", self.task.task.to_string()),
            ("task.symbols", self.task.vocab.to_string()),
            ("task.min_len", self.task.min_len.to_string()),
            ("task.max_len", self.task.max_len.to_string()),
            ("task.size", self.task.size.to_string()),
            ("task.noise", self.task.noise.to_string()),
            ("decode.beam", self.beam.beam.to_string()),
            ("decode.alpha", self.beam.alpha.to_string()),
            ("decode.max_len", self.beam.max_len.to_string()),
            ("decode.mode", self.mode.to_string()),
            ("selector.layers", s.layers.to_string()),
            ("selector.heads", s.heads.to_string()),
            ("selector.d_ff", s.d_ff.to_string()),
            ("selector.alpha", s.alpha.to_string()),
            ("selector.beta", s.beta.to_string()),
            ("selector.lambda", s.lambda.to_string()),
            ("selector.threshold", s.threshold.to_string()),
            ("selector.lr", s.lr.to_string()),
            ("selector.momentum", s.momentum.to_string()),
            ("selector.epochs", s.epochs.to_string()),
            ("selector.batch_size", s.batch_size.to_string()),
            ("selector.grid", self.selector_grid.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
