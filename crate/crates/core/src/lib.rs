//! Online surgical phase recognition with a segment-attentive hierarchical
//! consistency network: causal dilated temporal convolutions over per-frame
//! features, a multi-level segment hierarchy, segment-to-frame attention and
//! hierarchy-consistent training losses.
//!
//! Everything runs on a small reverse-mode tape ([`autodiff`]) over dense
//! row-major tensors ([`tensor`]).

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use config::{FusionMode, LossConfig, ModelConfig, TrainConfig};
pub use data::{FeatureSequence, Split, SplitManifest};
pub use error::{Error, Result};
pub use evaluation::{MetricsReport, VideoMetrics};
pub use model::{init_model, ModelParams, StreamState};
pub use tensor::Tensor;
pub use training::{Checkpoint, EpochRecord};
