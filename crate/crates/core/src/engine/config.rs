use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::contrast::ContrastConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::ParamSpec;
use crate::scorer::ScorerConfig;
use crate::segmenter::SegmenterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `lr_t = lr / 2 * (1 + cos(pi * t / T))`.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub aqa: f64,
    pub ce: f64,
    pub cont: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            aqa: 1.0,
            ce: 1.0,
            cont: 1.0,
        }
    }
}

/// Network shape. Stage count, stage length and the feature width shared by
/// the segmenter and scorer come from [`TrainConfig`] and the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub segmenter_hidden: usize,
    pub min_gap: usize,
    pub weight_positives: bool,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub reg_hidden: usize,
    pub symmetric_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            segmenter_hidden: 64,
            min_gap: 4,
            weight_positives: true,
            decoder_blocks: 2,
            heads: 4,
            ffn_hidden: 256,
            reg_hidden: 128,
            symmetric_decoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: Schedule,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    #[serde(rename = "K_s")]
    pub num_stages: usize,
    #[serde(rename = "M")]
    pub stage_len: usize,
    pub tau: f64,
    /// Exemplars per test video at inference.
    #[serde(rename = "P")]
    pub num_exemplars: usize,
    #[serde(rename = "L")]
    pub frames: usize,
    pub loss_weights: LossWeights,
    /// Partition with ground-truth boundaries during training.
    pub teacher_forcing: bool,
    /// Global gradient-norm threshold; off when absent.
    pub grad_clip: Option<f64>,
    /// Seed for exemplar selection at evaluation.
    pub eval_seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            schedule: Schedule::Cosine,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            num_stages: 3,
            stage_len: 16,
            tau: 0.5,
            num_exemplars: 10,
            frames: 96,
            loss_weights: LossWeights::default(),
            teacher_forcing: true,
            grad_clip: None,
            eval_seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("K_s", self.num_stages),
            ("P", self.num_exemplars),
            ("L", self.frames),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.stage_len < 2 {
            return bad(format!("M must be at least 2, got {}", self.stage_len));
        }
        let w = self.loss_weights;
        if [w.aqa, w.ce, w.cont].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if w.aqa + w.ce + w.cont == 0.0 {
            return bad("at least one loss weight must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.model.backbone.validate()?;
        self.segmenter().validate()?;
        self.scorer().validate()?;
        self.contrast().validate()?;
        let seg = self.segmenter();
        if self.frames < seg.min_frames() {
            return bad(format!(
                "L = {} is below K_s * min_gap = {}",
                self.frames,
                seg.min_frames()
            ));
        }
        Ok(())
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.model.backbone
    }

    pub fn segmenter(&self) -> SegmenterConfig {
        SegmenterConfig {
            input_dim: self.model.backbone.feature_dim,
            hidden: self.model.segmenter_hidden,
            num_stages: self.num_stages,
            min_gap: self.model.min_gap,
            weight_positives: self.model.weight_positives,
        }
    }

    pub fn scorer(&self) -> ScorerConfig {
        ScorerConfig {
            dim: self.model.backbone.feature_dim,
            stage_len: self.stage_len,
            num_stages: self.num_stages,
            blocks: self.model.decoder_blocks,
            heads: self.model.heads,
            ffn_hidden: self.model.ffn_hidden,
            reg_hidden: self.model.reg_hidden,
            symmetric: self.model.symmetric_decoder,
        }
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            ..ContrastConfig::default()
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.model.backbone.param_specs();
        specs.extend(self.segmenter().param_specs());
        specs.extend(self.scorer().param_specs());
        specs
    }

    pub fn steps_per_epoch(&self, num_train: usize) -> usize {
        num_train.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, num_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(num_train)
    }

    /// Checks that stage count, clip length and frame shape agree with `d`.
    pub fn check_dataset(&self, d: &Dataset) -> Result<()> {
        if d.num_stages != self.num_stages {
            return Err(Error::Config(format!(
                "dataset has {} stages, config K_s = {}",
                d.num_stages, self.num_stages
            )));
        }
        let bb = &self.model.backbone;
        for v in &d.videos {
            let s = v.frames.shape();
            if s[0] != self.frames {
                return Err(Error::Config(format!(
                    "video {} has {} frames, config L = {}",
                    v.id, s[0], self.frames
                )));
            }
            if s[1..] != [bb.in_channels, bb.height, bb.width] {
                return Err(Error::Config(format!(
                    "video {} frames are {:?}, backbone expects [{}, {}, {}]",
                    v.id,
                    &s[1..],
                    bb.in_channels,
                    bb.height,
                    bb.width
                )));
            }
        }
        Ok(())
    }
}
