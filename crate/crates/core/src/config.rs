//! Model and training configuration.
//!
//! Both structs are read from one flat `key = value` file (TOML syntax).
//! Unknown keys are rejected so typos do not silently fall back to defaults.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which entailment reasoning blocks run before the state classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Explicit graph, implicit graph and inter-sentence attention.
    Full,
    /// Inter-sentence attention over the sentence states only.
    InterAttentionOnly,
}

/// Where per-EDU entailment supervision comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// Edit-distance matching of history questions to EDUs.
    Heuristic,
    /// States stored with the example, falling back to the heuristic.
    Gold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub rgcn_layers: usize,
    pub inter_layers: usize,
    /// Filled in from the vocabulary when a model is built.
    pub vocab_size: usize,
    pub max_len: usize,
    pub max_answer_len: usize,
    /// Weight of the entailment loss.
    pub lambda: f64,
    pub beam_width: usize,
    pub variant: Variant,
    /// When false the entailment decoder is never built or trained.
    pub entail_decoder: bool,
    /// Use `E - G_c` (instead of `E - G_l`) in the contextual fusion branch.
    pub fusion_symmetric: bool,
    /// Learning rate of the encoder and answer decoder.
    pub backbone_lr: f64,
    /// Learning rate of the entailment decoder.
    pub auxiliary_lr: f64,
    /// Average the answer loss over tokens instead of summing.
    pub answer_loss_mean: bool,
    pub label_source: LabelSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            ff_width: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            rgcn_layers: 2,
            inter_layers: 1,
            vocab_size: 0,
            max_len: 256,
            max_answer_len: 24,
            lambda: 1.0,
            beam_width: 5,
            variant: Variant::Full,
            entail_decoder: true,
            fusion_symmetric: false,
            backbone_lr: 2e-3,
            auxiliary_lr: 2e-4,
            answer_loss_mean: false,
            label_source: LabelSource::Heuristic,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.ff_width == 0 {
            return bad("ff_width must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1".into());
        }
        if self.max_len == 0 || self.max_answer_len == 0 {
            return bad("max_len and max_answer_len must be positive".into());
        }
        if !(self.backbone_lr >= 0.0 && self.auxiliary_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        Ok(())
    }

    /// Whether the entailment decoder participates in training.
    pub fn trains_entailment(&self) -> bool {
        self.entail_decoder && self.lambda > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Dev-loss evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            seed: 0,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            eval_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn keys_of<T: Serialize>(value: &T) -> BTreeSet<String> {
    match toml::Value::try_from(value) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let model_keys = keys_of(&ModelConfig::default());
        let train_keys = keys_of(&TrainConfig::default());
        if let Some(k) = table.keys().find(|k| !model_keys.contains(*k) && !train_keys.contains(*k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let pick = |keys: &BTreeSet<String>| -> toml::Table {
            table.iter().filter(|(k, _)| keys.contains(*k)).map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        let model: ModelConfig = toml::Value::Table(pick(&model_keys))
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let train: TrainConfig = toml::Value::Table(pick(&train_keys))
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(Self { model, train })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut t = toml::Table::new();
        for v in [toml::Value::try_from(&self.model), toml::Value::try_from(&self.train)] {
            if let Ok(toml::Value::Table(part)) = v {
                t.extend(part);
            }
        }
        toml::to_string(&t).expect("config tables always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
