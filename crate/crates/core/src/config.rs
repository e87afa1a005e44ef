//! Experiment configuration: model hyperparameters, training schedule,
//! loss weights, and data sources, with one canonical JSON serialization
//! (sorted keys, shortest-roundtrip floats) so config hashes are stable.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_rope_base() -> f64 {
    10_000.0
}
fn default_conv_kernel() -> usize {
    3
}
fn default_conv_dilation() -> usize {
    2
}
fn default_true() -> bool {
    true
}

/// Architecture hyperparameters. The defaults are the desk-scale
/// configuration: small enough to train on CPU in minutes while keeping
/// routing non-trivial (more experts than active slots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width.
    pub h: usize,
    /// Decoder depth.
    pub layers: usize,
    /// Attention heads; must divide `h` into even-sized slices.
    pub heads: usize,
    /// Experts per layer.
    pub experts: usize,
    /// Active experts per token.
    pub top_k: usize,
    /// Expert inner width.
    pub expert_width: usize,
    /// Instance normalization with learnable affine at the input/output.
    #[serde(default = "default_true")]
    pub revin: bool,
    /// Frequency-time experts; `false` swaps in plain feed-forward experts
    /// of matched parameter count (the ablation baseline).
    #[serde(default = "default_true")]
    pub ftc: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "default_conv_dilation")]
    pub conv_dilation: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h: 64,
            layers: 2,
            heads: 4,
            experts: 8,
            top_k: 2,
            expert_width: 64,
            revin: true,
            ftc: true,
            rope_base: default_rope_base(),
            conv_kernel: default_conv_kernel(),
            conv_dilation: default_conv_dilation(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.h / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.h", self.h),
            ("model.layers", self.layers),
            ("model.heads", self.heads),
            ("model.experts", self.experts),
            ("model.top_k", self.top_k),
            ("model.expert_width", self.expert_width),
            ("model.conv_kernel", self.conv_kernel),
            ("model.conv_dilation", self.conv_dilation),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    field: field.into(),
                    detail: "must be positive".into(),
                });
            }
        }
        if self.h % self.heads != 0 {
            return Err(Error::InvalidConfig {
                field: "model.heads".into(),
                detail: format!("h={} not divisible by heads={}", self.h, self.heads),
            });
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::InvalidConfig {
                field: "model.heads".into(),
                detail: format!("head dim {} must be even for rotary pairs", self.head_dim()),
            });
        }
        if self.top_k > self.experts {
            return Err(Error::InvalidConfig {
                field: "model.top_k".into(),
                detail: format!("top_k={} exceeds experts={}", self.top_k, self.experts),
            });
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::InvalidConfig {
                field: "model.rope_base".into(),
                detail: "must be positive and finite".into(),
            });
        }
        Ok(())
    }

    /// Names of fields that differ from `other`; empty when compatible.
    pub fn diff_fields(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($field:ident) => {
                if self.$field != other.$field {
                    out.push(stringify!($field).to_string());
                }
            };
        }
        cmp!(h);
        cmp!(layers);
        cmp!(heads);
        cmp!(experts);
        cmp!(top_k);
        cmp!(expert_width);
        cmp!(revin);
        cmp!(ftc);
        cmp!(rope_base);
        cmp!(conv_kernel);
        cmp!(conv_dilation);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Optimization schedule for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Fraction of `steps` spent ramping linearly from 0 to `lr`.
    pub warmup_fraction: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub phase: Phase,
}

impl TrainConfig {
    /// Pretraining defaults: warm start over the first tenth of training.
    pub fn pretrain() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            warmup_fraction: 0.1,
            steps: 500,
            batch_size: 2,
            seed: 0,
            phase: Phase::Pretrain,
        }
    }

    /// Transfer defaults: low learning rate, no warmup.
    pub fn finetune() -> Self {
        TrainConfig {
            lr: 5e-6,
            warmup_fraction: 0.0,
            steps: 50,
            phase: Phase::Finetune,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig {
                field: "train.lr".into(),
                detail: "must be non-negative and finite".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig {
                field: "train.warmup_fraction".into(),
                detail: "must be in [0, 1]".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                field: "train.batch_size".into(),
                detail: "must be positive".into(),
            });
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig {
                    field: field.into(),
                    detail: "must be in [0, 1)".into(),
                });
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig {
                field: "train.weight_decay".into(),
                detail: "must be non-negative and finite".into(),
            });
        }
        Ok(())
    }
}

fn default_huber_delta() -> f64 {
    1.0
}
fn default_aux_weight() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Knee of the Huber penalty; residuals are O(1) in normalized space.
    #[serde(default = "default_huber_delta")]
    pub huber_delta: f64,
    /// Weight of the expert load-balance term.
    #[serde(default = "default_aux_weight")]
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            huber_delta: default_huber_delta(),
            aux_weight: default_aux_weight(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(Error::InvalidConfig {
                field: "loss.huber_delta".into(),
                detail: "must be positive".into(),
            });
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return Err(Error::InvalidConfig {
                field: "loss.aux_weight".into(),
                detail: "must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Where series come from: a CSV file or a synthesized sinusoid composite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: String,
    },
    Synth {
        freqs_hz: Vec<f64>,
        amps: Vec<f64>,
        sample_rate_hz: f64,
        n: usize,
        noise_std: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub t_x: usize,
    pub t_y: usize,
    pub stride: usize,
    /// Train / validation / test window fractions; must sum to 1.
    pub split: [f64; 3],
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_x == 0 || self.t_y == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig {
                field: "data".into(),
                detail: "t_x, t_y, and stride must be positive".into(),
            });
        }
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|&f| f < 0.0) {
            return Err(Error::InvalidConfig {
                field: "data.split".into(),
                detail: format!("fractions must be non-negative and sum to 1, got {:?}", self.split),
            });
        }
        Ok(())
    }
}

/// Top-level experiment description consumed by the command-line driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub data: DataConfig,
    /// Checkpoint consumed by finetune / forecast / eval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.data.validate()
    }
}

/// Serialize with sorted keys and shortest-roundtrip floats. The output is
/// the hashing and on-disk format for configs.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json maps are BTree-backed, so going through Value sorts keys.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}

/// First 12 hex chars of the SHA-256 of the canonical serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = canonical_json(value)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
}
