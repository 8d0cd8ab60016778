//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors. [`RunConfig::to_text`] writes every key, so a snapshot
//! parses back to the same configuration.

use crate::correlated::{TrainConfig, Variant};
use crate::data::ToyConfig;
use crate::generator::Condition;
use crate::model::HiddenSizes;
use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Instances written by `gen-data`.
    pub instances: usize,
    pub data_seed: u64,
    pub grid: ToyConfig,
    /// Leading instances used for training; the next `val_size` and
    /// `test_size` form the held-out splits.
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub hidden: HiddenSizes,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// The desk-scale preset: the reference architecture with a larger step
    /// size and smaller batches, tuned so the toy task converges in 50 epochs.
    fn default() -> Self {
        let mut train = TrainConfig {
            batch_size: 32,
            disc_lr: 0.01,
            ..TrainConfig::default()
        };
        train.hyper.lr = 0.003;
        Self {
            instances: 1400,
            data_seed: 1,
            grid: ToyConfig::default(),
            train_size: 1000,
            val_size: 200,
            test_size: 200,
            hidden: HiddenSizes::default(),
            train,
        }
    }
}

fn condition_name(c: Condition) -> &'static str {
    match c {
        Condition::GroundTruth => "ground_truth",
        Condition::Predicted => "predicted",
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Reference optimizer settings: step size 0.0007, batch 64, and the
    /// discriminator sharing the generator's step size.
    pub fn reference() -> Self {
        Self {
            train: TrainConfig::default(),
            ..Self::default()
        }
    }

    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let h = &self.hidden;
        let t = &self.train;
        let o = &t.hyper;
        vec![
            ("instances", self.instances.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("grid_width", self.grid.width.to_string()),
            ("grid_height", self.grid.height.to_string()),
            ("train_size", self.train_size.to_string()),
            ("val_size", self.val_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("word_dim", h.word_dim.to_string()),
            ("question_hidden", h.question_hidden.to_string()),
            ("fusion_dim", h.fusion_dim.to_string()),
            ("attention_hidden", h.attention_hidden.to_string()),
            ("answer_hidden", h.answer_hidden.to_string()),
            ("answer_embed", h.answer_embed.to_string()),
            ("decoder_hidden", h.decoder_hidden.to_string()),
            ("disc_hidden", h.disc_hidden.to_string()),
            ("max_len", h.max_len.to_string()),
            ("variant", t.variant.name().to_string()),
            ("eta", t.eta.to_string()),
            ("disc_steps", t.disc_steps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("lr", o.lr.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("epsilon", o.epsilon.to_string()),
            ("momentum", o.momentum.to_string()),
            ("clip_bound", o.clip_bound.to_string()),
            ("decay_factor", o.decay_factor.to_string()),
            ("decay_interval", o.decay_interval.to_string()),
            ("disc_lr", t.disc_lr.to_string()),
            ("condition_on", condition_name(t.condition_on).to_string()),
            ("non_saturating", t.non_saturating.to_string()),
            ("fresh_adversarial_batch", t.fresh_adversarial_batch.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let value = value.trim();
        let h = &mut self.hidden;
        let t = &mut self.train;
        match key {
            "instances" => self.instances = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "grid_width" => self.grid.width = parse(key, value)?,
            "grid_height" => self.grid.height = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "val_size" => self.val_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "word_dim" => h.word_dim = parse(key, value)?,
            "question_hidden" => h.question_hidden = parse(key, value)?,
            "fusion_dim" => h.fusion_dim = parse(key, value)?,
            "attention_hidden" => h.attention_hidden = parse(key, value)?,
            "answer_hidden" => h.answer_hidden = parse(key, value)?,
            "answer_embed" => h.answer_embed = parse(key, value)?,
            "decoder_hidden" => h.decoder_hidden = parse(key, value)?,
            "disc_hidden" => h.disc_hidden = parse(key, value)?,
            "max_len" => h.max_len = parse(key, value)?,
            "variant" => t.variant = value.parse::<Variant>()?,
            "eta" => t.eta = parse(key, value)?,
            "disc_steps" => t.disc_steps = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "lr" => t.hyper.lr = parse(key, value)?,
            "beta1" => t.hyper.beta1 = parse(key, value)?,
            "beta2" => t.hyper.beta2 = parse(key, value)?,
            "epsilon" => t.hyper.epsilon = parse(key, value)?,
            "momentum" => t.hyper.momentum = parse(key, value)?,
            "clip_bound" => t.hyper.clip_bound = parse(key, value)?,
            "decay_factor" => t.hyper.decay_factor = parse(key, value)?,
            "decay_interval" => t.hyper.decay_interval = parse(key, value)?,
            "disc_lr" => t.disc_lr = parse(key, value)?,
            "condition_on" => {
                t.condition_on = match value {
                    "ground_truth" => Condition::GroundTruth,
                    "predicted" => Condition::Predicted,
                    _ => return Err(Error::Config(format!("condition_on must be ground_truth or predicted, got {value:?}"))),
                }
            }
            "non_saturating" => t.non_saturating = parse(key, value)?,
            "fresh_adversarial_batch" => t.fresh_adversarial_batch = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Error> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", i + 1)));
            }
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, Error> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.grid.width == 0 || self.grid.height == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        self.hidden.validate()?;
        self.train.validate()
    }
}
