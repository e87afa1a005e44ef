//! Desk-scale decoder-only time-series forecaster whose feed-forward
//! layers are a routed mixture of frequency-time experts, built on a
//! from-scratch reverse-mode tensor tape.
//!
//! The crate is organized along the pipeline:
//!
//! - [`tensor`]: dense f64 tensors with gradient recording and AdamW-ready
//!   backward;
//! - [`preprocess`]: reversible instance normalization, windowing, CSV
//!   and sinusoid sources;
//! - [`embedding`]: gated point-wise embedding plus causal dilated
//!   context mixing;
//! - [`model`]: the decoder (causal attention, routed experts, scalar
//!   head) and autoregressive rollout;
//! - [`objective`]: Huber next-point loss and the expert load-balance
//!   penalty;
//! - [`trainer`]: deterministic training/finetuning and gradient
//!   checking;
//! - [`checkpoint`]: binary persistence with integrity checking;
//! - [`analysis`]: metrics, hidden-state spectra, ablation harness, and
//!   inference timing.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod error;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod tensor;
pub mod trainer;

pub use analysis::{MetricReport, MetricSpace, SpectralReport};
pub use checkpoint::Checkpoint;
pub use config::{DataConfig, DataSource, ExperimentConfig, LossConfig, ModelConfig, Phase, TrainConfig};
pub use error::{Error, Result};
pub use model::RoutingStats;
pub use params::{ModelParams, Param};
pub use preprocess::{RawSeries, RevInParams, RevInStats, SeriesWindow};
pub use tensor::{Tape, TensorId};
