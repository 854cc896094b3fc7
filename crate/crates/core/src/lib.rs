//! Multi-stage contrastive regression for action quality assessment.
//!
//! A video is scored relative to same-class exemplars with known scores. A
//! per-frame backbone with gated temporal shifts produces frame features; a
//! bidirectional recurrent segmenter finds stage transitions; each stage is
//! resampled to a fixed length; a cross-attention decoder embeds the
//! query/exemplar difference per stage; and a small regressor turns the
//! concatenated stage embeddings into a relative score. Training adds a
//! stage-level contrastive term that pulls matching stages of paired videos
//! together.
//!
//! Everything runs on the in-crate [`tensor`] and tape-based [`autodiff`]
//! modules, so the whole pipeline is deterministic on CPU for a fixed seed.
//!
//! ```no_run
//! use mcore::data::{generate_synthetic_dataset, SynthSpec};
//! use mcore::engine::{evaluate, train, TrainConfig};
//!
//! let config = TrainConfig::load("configs/proxy.toml")?;
//! let mut spec = SynthSpec::new(250, 5, 7).with_layout(config.frames, config.num_stages);
//! spec.height = 16;
//! spec.width = 16;
//! let data = generate_synthetic_dataset(&spec)?;
//! let (checkpoint, _log) = train(&config, &data)?;
//! let report = evaluate(&checkpoint.model()?, &data)?;
//! println!("test SRCC {:?}", report.srcc);
//! # Ok::<(), mcore::Error>(())
//! ```

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod contrast;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod scorer;
pub mod segmenter;
pub mod tensor;

pub use backbone::BackboneConfig;
pub use contrast::ContrastConfig;
pub use data::{AnnotatedVideo, Dataset, ScoreRange, Split};
pub use engine::{Checkpoint, Model, TrainConfig};
pub use error::{Error, ErrorKind, Result};
pub use metrics::MetricsReport;
pub use nn::Params;
pub use scorer::{ScorePrediction, ScorerConfig};
pub use segmenter::{SegmenterConfig, StageBoundaries};
pub use tensor::{DType, Scalar, Tensor};
