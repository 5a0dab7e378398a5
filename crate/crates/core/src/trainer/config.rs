//! Run configuration. Files are JSON objects whose keys are dotted paths
//! (`"mask.ratio": 0.5`) or nested sections; both override the defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::alignment::Misalignment;
use crate::autodiff::EventTerm;
use crate::contrastive::ContrastiveConfig;
use crate::downstream::Task;
use crate::embedding::EmbeddingConfig;
use crate::encoder::{EncoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::MaskConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextLossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for PretextLossWeights {
    fn default() -> Self {
        PretextLossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl PretextLossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidConfig("at least one pretext loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub methods: Vec<Misalignment>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            methods: Misalignment::CORRUPTIONS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TppConfig {
    pub mc_samples: usize,
    pub event_term: EventTerm,
    /// Prediction horizon in multiples of the mean training interval.
    pub horizon_factor: f64,
}

impl Default for TppConfig {
    fn default() -> Self {
        TppConfig {
            mc_samples: 20,
            event_term: EventTerm::Marked,
            horizon_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeConfig {
    /// Missing ratio used while fine-tuning and for dev selection.
    pub train_ratio: f64,
    pub eval_ratios: Vec<f64>,
    /// Mask draws per sequence at ratio `r` are `ceil(eval_draws / r)`, so
    /// every ratio sees a similar number of hidden events.
    pub eval_draws: f64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            train_ratio: 0.5,
            eval_ratios: (1..=9).map(|i| i as f64 / 10.0).collect(),
            eval_draws: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub pretext_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    /// Fraction of the pretext training set used (few-shot protocol).
    pub pretext_fraction: f64,
    /// Fraction of the fine-tuning training set used.
    pub train_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            pretext_epochs: 10,
            finetune_epochs: 300,
            batch_size: 4,
            seed: 0,
            freeze_backbone: false,
            pretext_fraction: 1.0,
            train_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub mask: MaskConfig,
    pub contrastive: ContrastiveConfig,
    pub alignment: AlignmentConfig,
    pub loss: PretextLossWeights,
    pub tpp: TppConfig,
    pub impute: ImputeConfig,
    pub train: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Tpp,
            embedding: EmbeddingConfig::default(),
            encoder: EncoderConfig::default(),
            mask: MaskConfig::default(),
            contrastive: ContrastiveConfig::default(),
            alignment: AlignmentConfig::default(),
            loss: PretextLossWeights::default(),
            tpp: TppConfig::default(),
            impute: ImputeConfig::default(),
            train: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            embedding: self.embedding.clone(),
            encoder: self.encoder.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.mask.validate()?;
        self.contrastive.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if (self.loss.beta > 0.0 || self.loss.gamma > 0.0) && t.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "contrastive and alignment losses need batch size >= 2".into(),
            ));
        }
        for f in [t.pretext_fraction, t.train_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidConfig(format!("fraction {f} outside (0, 1]")));
            }
        }
        if self.loss.gamma > 0.0
            && !self.alignment.methods.iter().any(|&m| m != Misalignment::None)
        {
            return Err(Error::InvalidConfig("alignment.methods enables no corruption".into()));
        }
        if self.tpp.mc_samples == 0 || !(self.tpp.horizon_factor > 0.0) {
            return Err(Error::InvalidConfig("tpp.mc_samples and tpp.horizon_factor must be positive".into()));
        }
        let im = &self.impute;
        if !(im.train_ratio > 0.0 && im.train_ratio < 1.0)
            || im.eval_ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0))
            || !(im.eval_draws > 0.0)
        {
            return Err(Error::InvalidConfig("imputation ratios must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Defaults overridden by a JSON object of dotted keys or nested sections.
    pub fn from_json(value: &Value) -> Result<Self> {
        let Value::Object(overrides) = value else {
            return Err(Error::InvalidConfig("config must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(TrainConfig::default())?;
        for (key, v) in overrides {
            set_path(&mut base, key, v.clone())?;
        }
        let cfg: TrainConfig =
            serde_json::from_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }

    /// Applies one `key=value` override; values parse as JSON, falling back to strings.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut base = serde_json::to_value(&*self)?;
        set_path(&mut base, key, v)?;
        *self = serde_json::from_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Fully resolved configuration as a flat map of dotted keys.
    pub fn to_dotted(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("serializable"), &mut out);
        out
    }
}

fn set_path(base: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = base;
    while let Some(p) = parts.next() {
        let Value::Object(map) = cur else {
            return Err(Error::InvalidConfig(format!("{key}: {p} is not a section")));
        };
        let Some(slot) = map.get_mut(p) else {
            return Err(Error::InvalidConfig(format!("unknown config key {key}")));
        };
        if parts.peek().is_none() {
            match (slot, v) {
                (Value::Object(dst), Value::Object(src)) => {
                    for (k, x) in src {
                        let mut sub = Value::Object(std::mem::take(dst));
                        set_path(&mut sub, &k, x)?;
                        let Value::Object(m) = sub else { unreachable!() };
                        *dst = m;
                    }
                }
                (slot, v) => *slot = v,
            }
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::InvalidConfig("empty config key".into()))
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dotted_and_nested_overrides() {
        let cfg = TrainConfig::from_json(&json!({
            "mask.ratio": 0.5,
            "contrastive": {"similarity": "cosine"},
            "train.lr": 0.001,
        }))
        .unwrap();
        assert_eq!(cfg.mask.ratio, 0.5);
        assert_eq!(cfg.contrastive.similarity, crate::contrastive::Similarity::Cosine);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(TrainConfig::from_json(&json!({"mask.ratoi": 0.5})).is_err());
        assert!(TrainConfig::from_json(&json!({"mask": {"bogus": 1}})).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let cfg = TrainConfig::default();
        let flat = Value::Object(cfg.to_dotted());
        assert_eq!(TrainConfig::from_json(&flat).unwrap(), cfg);
        assert!(cfg.to_dotted().contains_key("mask.window_duration"));
    }

    #[test]
    fn set_parses_values() {
        let mut cfg = TrainConfig::default();
        cfg.set("mask.strategy", "random").unwrap();
        cfg.set("train.batch_size", "8").unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.mask.strategy, crate::masking::MaskStrategy::Random);
    }

    #[test]
    fn weights_need_one_positive() {
        let mut cfg = TrainConfig::default();
        cfg.loss = PretextLossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert!(cfg.validate().is_err());
    }
}
