//! Annotated multi-stage action videos, the dataset container and samplers.
//!
//! Real footage plugs in by producing [`AnnotatedVideo`]s that satisfy the
//! same invariants as the synthetic generator's output; everything
//! downstream only depends on this contract.

mod io;
mod sampling;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::StageBoundaries;
use crate::tensor::Tensor;

pub use io::{load_dataset, save_dataset, FORMAT_VERSION, MANIFEST_FILE};
pub use sampling::{sample_training_pair, select_exemplars, select_exemplars_excluding, PairSample};
pub use synth::{class_ideal, generate_synthetic_dataset, motion_score, render_video, StageMotion, SynthSpec};

/// Closed interval of admissible quality scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

impl ScoreRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::InvalidArgument(format!(
                "score range [{min}, {max}] is degenerate"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.min && s <= self.max
    }

    pub fn clip(&self, s: f64) -> f64 {
        s.clamp(self.min, self.max)
    }
}

/// Per-frame binary transition labels: frame `i` is 1 iff its stage differs
/// from frame `i - 1`'s. Frame 0 is never a transition.
pub fn transition_labels_from_stage_labels(stage_labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(stage_labels.len());
    for (i, &s) in stage_labels.iter().enumerate() {
        if i == 0 {
            out.push(0);
            continue;
        }
        let prev = stage_labels[i - 1];
        if s < prev {
            return Err(Error::InvalidLabel(format!(
                "stage labels decrease at frame {i} ({prev} -> {s})"
            )));
        }
        out.push(u8::from(s != prev));
    }
    Ok(out)
}

/// One video with its class, quality score and per-frame stage annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedVideo {
    pub id: String,
    /// `[L, C, H, W]`.
    pub frames: Tensor<f32>,
    pub class_code: String,
    pub score: f64,
    pub stage_labels: Vec<usize>,
    pub transition_labels: Vec<u8>,
}

impl AnnotatedVideo {
    /// Builds a video, deriving transition labels and checking that stages
    /// are contiguous and cover `0..num_stages`.
    pub fn new(
        id: impl Into<String>,
        frames: Tensor<f32>,
        class_code: impl Into<String>,
        score: f64,
        stage_labels: Vec<usize>,
        num_stages: usize,
    ) -> Result<Self> {
        let id = id.into();
        if frames.ndim() != 4 {
            return Err(Error::Shape(format!(
                "video {id}: frames must be [L, C, H, W], got {:?}",
                frames.shape()
            )));
        }
        if frames.shape()[0] != stage_labels.len() {
            return Err(Error::Shape(format!(
                "video {id}: {} frames but {} stage labels",
                frames.shape()[0],
                stage_labels.len()
            )));
        }
        let transition_labels = transition_labels_from_stage_labels(&stage_labels)?;
        let seen: BTreeSet<usize> = stage_labels.iter().copied().collect();
        if seen != (0..num_stages).collect() {
            return Err(Error::InvalidLabel(format!(
                "video {id}: stage labels {seen:?} do not cover 0..{num_stages}"
            )));
        }
        if !score.is_finite() {
            return Err(Error::InvalidLabel(format!("video {id}: non-finite score")));
        }
        Ok(Self {
            id,
            frames,
            class_code: class_code.into(),
            score,
            stage_labels,
            transition_labels,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.stage_labels.len()
    }

    pub fn num_stages(&self) -> usize {
        self.stage_labels.last().map_or(0, |s| s + 1)
    }

    /// Ground-truth stage boundaries (first frame of every stage after the first).
    pub fn boundaries(&self) -> StageBoundaries {
        let transitions = self
            .transition_labels
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == 1)
            .map(|(i, _)| i)
            .collect();
        StageBoundaries::new_unchecked(transitions, self.num_frames())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<AnnotatedVideo>,
    pub score_range: ScoreRange,
    pub num_stages: usize,
    pub split: Split,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(videos: Vec<AnnotatedVideo>, score_range: ScoreRange, num_stages: usize, split: Split) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, v) in videos.iter().enumerate() {
            if index.insert(v.id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate video id {:?}", v.id)));
            }
        }
        let d = Self {
            videos,
            score_range,
            num_stages,
            split,
            index,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        ScoreRange::new(self.score_range.min, self.score_range.max)?;
        for v in &self.videos {
            if v.num_stages() != self.num_stages {
                return Err(Error::InvalidLabel(format!(
                    "video {} has {} stages, dataset declares {}",
                    v.id,
                    v.num_stages(),
                    self.num_stages
                )));
            }
            if !self.score_range.contains(v.score) {
                return Err(Error::InvalidLabel(format!(
                    "video {} score {} outside [{}, {}]",
                    v.id, v.score, self.score_range.min, self.score_range.max
                )));
            }
        }
        for id in self.split.train.iter().chain(&self.split.test) {
            if !self.index.contains_key(id) {
                return Err(Error::Format(format!("split references unknown video {id:?}")));
            }
        }
        let train_classes: BTreeSet<&str> = self.train().map(|v| v.class_code.as_str()).collect();
        if let Some(v) = self.test().find(|v| !train_classes.contains(v.class_code.as_str())) {
            return Err(Error::Format(format!(
                "test video {} has class {:?} absent from the train split",
                v.id, v.class_code
            )));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedVideo> {
        self.index.get(id).map(|&i| &self.videos[i])
    }

    pub fn train(&self) -> impl Iterator<Item = &AnnotatedVideo> {
        self.split.train.iter().filter_map(|id| self.get(id))
    }

    pub fn test(&self) -> impl Iterator<Item = &AnnotatedVideo> {
        self.split.test.iter().filter_map(|id| self.get(id))
    }

    /// Train videos grouped by class code, in split order.
    pub fn train_by_class(&self) -> BTreeMap<&str, Vec<&AnnotatedVideo>> {
        let mut out: BTreeMap<&str, Vec<&AnnotatedVideo>> = BTreeMap::new();
        for v in self.train() {
            out.entry(v.class_code.as_str()).or_default().push(v);
        }
        out
    }

    /// `[L, C, H, W]` shared by all videos, if any.
    pub fn frame_shape(&self) -> Option<[usize; 4]> {
        self.videos
            .first()
            .map(|v| v.frames.shape().try_into().expect("4-D frames"))
    }
}
