//! Joint training, exemplar-averaged inference, evaluation and checkpoints.

mod checkpoint;
mod config;
mod infer;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use config::{LossWeights, ModelConfig, Schedule, TrainConfig};
pub use infer::{evaluate, evaluate_with, infer_score, AqaPredictor, InferenceDetails};
pub use model::{Model, Partition, VideoAnalysis};
pub use optim::{scheduled_lr, Adam, AdamState};
pub use train::{train, train_with, StepRecord, TrainOptions, TrainingLog};

#[cfg(test)]
pub(crate) mod testutil {
    use super::TrainConfig;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_synthetic_dataset, Dataset, SynthSpec};

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig {
            frames: 24,
            stage_len: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        c.model.backbone = BackboneConfig {
            in_channels: 3,
            height: 8,
            width: 8,
            widths: vec![4, 8],
            strides: vec![2, 2],
            gate_shift: vec![true, true],
            feature_dim: 8,
            norm_groups: 2,
        };
        c.model.segmenter_hidden = 4;
        c.model.heads = 2;
        c.model.ffn_hidden = 8;
        c.model.reg_hidden = 8;
        c.model.decoder_blocks = 1;
        c
    }

    pub(crate) fn tiny_dataset(num_videos: usize, seed: u64) -> Dataset {
        let mut s = SynthSpec::new(num_videos, 2, seed).with_layout(24, 3);
        s.height = 8;
        s.width = 8;
        generate_synthetic_dataset(&s).unwrap()
    }
}
