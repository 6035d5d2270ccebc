use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::DEFAULT_INIT_STDDEV;
use crate::prune::PruneMode;

/// Fine-tuning hyper-parameters.
///
/// Config keys use the usual fine-tuning names (`lora_r`, `warmup_steps`,
/// `USE_QLORA`, ...). The fields after `num_nodes` are extensions for the
/// desk-scale trainer. Keys missing from a config file take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Token-sequence limit; only used by annotation length checks.
    #[serde(rename = "MAX_LENGTH")]
    pub max_length: usize,
    /// Name of the model the table was written for. Informational.
    #[serde(rename = "MODEL")]
    pub model: String,
    #[serde(rename = "USE_QLORA")]
    pub use_qlora: bool,
    #[serde(rename = "QLORA_BITS")]
    pub qlora_bits: u8,
    pub batch_size: usize,
    pub lora_r: usize,
    pub lora_alpha: f64,
    pub max_epochs: usize,
    pub val_check_interval: f64,
    pub check_val_every_n_epoch: usize,
    pub gradient_clip_val: f64,
    pub accumulate_grad_batches: usize,
    pub learning_rate: f64,
    pub num_nodes: usize,
    pub warmup_steps: usize,

    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init_stddev: f64,
    /// Layer indices that receive adapters; empty means every layer.
    pub lora_layers: Vec<usize>,
    pub pruning: Option<PruneConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// When pruning happens relative to adapter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneOrder {
    /// Masks are taken from the frozen bases before training and enforced on
    /// the effective weights after every optimizer step.
    BeforeFinetune,
    /// Training is unmasked; the merged weights are pruned afterwards.
    #[default]
    AfterFinetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub sparsity: f64,
    #[serde(default)]
    pub mode: PruneMode,
    #[serde(default)]
    pub order: PruneOrder,
    /// Layer indices left unpruned.
    #[serde(default)]
    pub exclude: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_length: 400,
            model: "LLaVA-NeXT-Video-7B-hf".to_string(),
            use_qlora: true,
            qlora_bits: 4,
            batch_size: 2,
            lora_r: 64,
            lora_alpha: 128.0,
            max_epochs: 1,
            val_check_interval: 0.2,
            check_val_every_n_epoch: 1,
            gradient_clip_val: 1.0,
            accumulate_grad_batches: 1,
            learning_rate: 1e-4,
            num_nodes: 1,
            warmup_steps: 50,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_stddev: DEFAULT_INIT_STDDEV,
            lora_layers: Vec::new(),
            pruning: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::param(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive".into());
        }
        if self.accumulate_grad_batches == 0 {
            return fail("accumulate_grad_batches must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.gradient_clip_val.is_nan() || self.gradient_clip_val <= 0.0 {
            return fail(format!(
                "gradient_clip_val must be positive, got {}",
                self.gradient_clip_val
            ));
        }
        if !(self.val_check_interval > 0.0 && self.val_check_interval <= 1.0) {
            return fail(format!(
                "val_check_interval must lie in (0, 1], got {}",
                self.val_check_interval
            ));
        }
        if self.use_qlora && self.qlora_bits != 4 && self.qlora_bits != 8 {
            return fail(format!("QLORA_BITS must be 4 or 8, got {}", self.qlora_bits));
        }
        if let Some(p) = &self.pruning {
            if !(0.0..1.0).contains(&p.sparsity) {
                return fail(format!("pruning sparsity must lie in [0, 1), got {}", p.sparsity));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    /// Learning rate for optimizer step `step`: linear ramp from 0 over
    /// `warmup_steps`, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_table() {
        let c = TrainConfig::default();
        assert_eq!(c.max_length, 400);
        assert_eq!(c.model, "LLaVA-NeXT-Video-7B-hf");
        assert!(c.use_qlora);
        assert_eq!(c.qlora_bits, 4);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.lora_r, 64);
        assert_eq!(c.lora_alpha, 128.0);
        assert_eq!(c.max_epochs, 1);
        assert_eq!(c.val_check_interval, 0.2);
        assert_eq!(c.check_val_every_n_epoch, 1);
        assert_eq!(c.gradient_clip_val, 1.0);
        assert_eq!(c.accumulate_grad_batches, 1);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.num_nodes, 1);
        assert_eq!(c.warmup_steps, 50);
    }

    #[test]
    fn toml_roundtrip_is_lossless() {
        let c = TrainConfig {
            pruning: Some(PruneConfig {
                sparsity: 0.05,
                mode: PruneMode::PerLayer,
                order: PruneOrder::BeforeFinetune,
                exclude: vec![0],
            }),
            lora_layers: vec![1, 2],
            learning_rate: 3.3e-4,
            ..TrainConfig::default()
        };
        let text = c.to_toml();
        assert!(text.contains("lora_r = 64"));
        assert!(text.contains("USE_QLORA = true"));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{}\nbogus = 1\n", TrainConfig::default().to_toml());
        assert!(matches!(TrainConfig::from_toml(&text), Err(Error::Format(_))));
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(25), 0.5 * c.learning_rate);
        assert_eq!(c.lr_at(50), c.learning_rate);
        assert_eq!(c.lr_at(5000), c.learning_rate);
        let lrs: Vec<f64> = (0..80).map(|s| c.lr_at(s)).collect();
        assert!(lrs.windows(2).all(|w| w[0] <= w[1]));
    }
}
