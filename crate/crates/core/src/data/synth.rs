//! Synthetic multi-stage action videos.
//!
//! Each video shows a single Gaussian blob. Every stage has its own motion
//! regime: a horizontal drift speed and a vertical oscillation amplitude, and
//! the blob is tinted with a per-stage colour. Frames integrate the blob over
//! the exposure interval, so faster motion produces visibly longer streaks.
//!
//! A class fixes the ideal `(speed, amplitude)` for every stage. Executions
//! only ever overshoot the ideal, and the quality score drops by the summed
//! per-stage Euclidean deviation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnnotatedVideo, Dataset, ScoreRange, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames need at least this many frames per stage.
pub const MIN_STAGE_FRAMES: usize = 4;

const OSCILLATION_PERIOD: f64 = 6.0;
const EXPOSURE_SAMPLES: usize = 6;
const BLOB_SIGMA: f64 = 1.0;
const IDEAL_SPEED: (f64, f64) = (0.5, 1.5);
const IDEAL_AMPLITUDE: (f64, f64) = (0.5, 2.0);
const MAX_SPEED_DEVIATION: f64 = 1.5;
const MAX_AMPLITUDE_DEVIATION: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_videos: usize,
    #[serde(rename = "L")]
    pub frames: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "K_s")]
    pub num_stages: usize,
    pub num_classes: usize,
    /// Inclusive `(lo, hi)` frame range for each transition.
    pub transition_windows: Vec<(usize, usize)>,
    pub noise_std: f64,
    pub seed: u64,
    pub score_range: ScoreRange,
    /// Weight of each stage's deviation in the score.
    pub stage_weight: f64,
    /// Fraction of each class held out for testing.
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::new(100, 5, 0)
    }
}

impl SynthSpec {
    pub fn new(num_videos: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_videos,
            frames: 96,
            channels: 3,
            height: 32,
            width: 32,
            num_stages: 3,
            num_classes,
            transition_windows: Self::default_windows(96, 3),
            noise_std: 0.05,
            seed,
            score_range: ScoreRange { min: 0.0, max: 10.0 },
            stage_weight: 1.0,
            test_fraction: 0.2,
        }
    }

    /// Windows centred on the uniform split points `k * L / K_s`, each
    /// `L / (2 K_s)` frames wide. For `L = 96, K_s = 3`: `[(24, 40), (56, 72)]`.
    pub fn default_windows(frames: usize, num_stages: usize) -> Vec<(usize, usize)> {
        let half = frames / (4 * num_stages.max(1));
        (1..num_stages)
            .map(|k| {
                let c = k * frames / num_stages;
                (c.saturating_sub(half), c + half)
            })
            .collect()
    }

    /// Changes the frame count and stage count, resetting the windows.
    pub fn with_layout(mut self, frames: usize, num_stages: usize) -> Self {
        self.frames = frames;
        self.num_stages = num_stages;
        self.transition_windows = Self::default_windows(frames, num_stages);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_stages < 1 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return cfg("stages, channels and spatial dims must be positive".into());
        }
        if self.num_classes == 0 || self.num_videos < 2 * self.num_classes {
            return cfg(format!(
                "{} videos cannot give every one of {} classes at least two videos",
                self.num_videos, self.num_classes
            ));
        }
        if self.transition_windows.len() + 1 != self.num_stages {
            return cfg(format!(
                "{} transition windows for {} stages",
                self.transition_windows.len(),
                self.num_stages
            ));
        }
        let mut prev_hi: Option<usize> = None;
        for &(lo, hi) in &self.transition_windows {
            if lo > hi {
                return cfg(format!("window ({lo}, {hi}) is reversed"));
            }
            let min_lo = prev_hi.map_or(MIN_STAGE_FRAMES, |p| p + MIN_STAGE_FRAMES);
            if lo < min_lo {
                return cfg(format!(
                    "window ({lo}, {hi}) overlaps or leaves fewer than {MIN_STAGE_FRAMES} frames for the preceding stage"
                ));
            }
            prev_hi = Some(hi);
        }
        if let Some(hi) = prev_hi {
            if hi + MIN_STAGE_FRAMES > self.frames {
                return cfg(format!(
                    "last window ends at {hi}, leaving fewer than {MIN_STAGE_FRAMES} frames of {}",
                    self.frames
                ));
            }
        } else if self.frames < MIN_STAGE_FRAMES {
            return cfg("too few frames".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return cfg("noise_std must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return cfg("test_fraction must lie in [0, 1)".into());
        }
        ScoreRange::new(self.score_range.min, self.score_range.max).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn class_code(class: usize) -> String {
        format!("C{class:02}")
    }
}

/// Motion parameters of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMotion {
    /// Horizontal drift, pixels per frame.
    pub speed: f64,
    /// Vertical oscillation amplitude, pixels.
    pub amplitude: f64,
}

impl StageMotion {
    fn distance(&self, other: &StageMotion) -> f64 {
        (self.speed - other.speed).hypot(self.amplitude - other.amplitude)
    }
}

/// The ideal per-stage motion of `class`, fixed by the dataset seed.
pub fn class_ideal(spec: &SynthSpec, class: usize) -> Vec<StageMotion> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX - class as u64);
    (0..spec.num_stages)
        .map(|_| StageMotion {
            speed: rng.random_range(IDEAL_SPEED.0..IDEAL_SPEED.1),
            amplitude: rng.random_range(IDEAL_AMPLITUDE.0..IDEAL_AMPLITUDE.1),
        })
        .collect()
}

/// `max - w * sum_k |actual_k - ideal_k|`, clipped into the range.
pub fn motion_score(actual: &[StageMotion], ideal: &[StageMotion], range: ScoreRange, stage_weight: f64) -> f64 {
    let penalty: f64 = actual
        .iter()
        .zip(ideal)
        .map(|(a, i)| stage_weight * a.distance(i))
        .sum();
    range.clip(range.max - penalty)
}

/// Per-stage tint: full intensity on channel `k mod C`, a quarter elsewhere.
fn stage_color(stage: usize, channels: usize) -> Vec<f32> {
    (0..channels)
        .map(|c| if c == stage % channels { 1.0 } else { 0.25 })
        .collect()
}

/// Renders `[L, C, H, W]` frames for the given per-stage motions and
/// transition frames (first frame of each new stage).
pub fn render_video(
    spec: &SynthSpec,
    motions: &[StageMotion],
    transitions: &[usize],
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let (l, c, h, w) = (spec.frames, spec.channels, spec.height, spec.width);
    let radius = (3.0 * BLOB_SIGMA).ceil() as isize;
    let inv2s2 = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
    let colors: Vec<Vec<f32>> = (0..spec.num_stages).map(|k| stage_color(k, c)).collect();

    let mut x = rng.random_range(0.0..w as f64);
    let y_center = h as f64 / 2.0 + rng.random_range(-0.15..0.15) * h as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("valid noise std");

    let mut data = vec![0.0f32; l * c * h * w];
    let mut stage = 0;
    let mut stage_start = 0;
    let mut plane = vec![0.0f64; h * w];
    for t in 0..l {
        while stage < transitions.len() && t >= transitions[stage] {
            stage_start = transitions[stage];
            stage += 1;
        }
        let m = motions[stage];
        plane.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..EXPOSURE_SAMPLES {
            // The shutter stays open for the whole frame interval, so the
            // streak length tracks the instantaneous velocity.
            let dt = s as f64 / (EXPOSURE_SAMPLES - 1) as f64;
            let local = (t - stage_start) as f64 + dt;
            let px = (x + m.speed * dt).rem_euclid(w as f64);
            let py = y_center + m.amplitude * (std::f64::consts::TAU * local / OSCILLATION_PERIOD + phase).sin();
            let (cx, cy) = (px.floor() as isize, py.round() as isize);
            for dy in -radius..=radius {
                let yy = cy + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -radius - 1..=radius + 1 {
                    let xx = (cx + dx).rem_euclid(w as isize);
                    let mut ddx = (xx as f64 - px).abs();
                    ddx = ddx.min(w as f64 - ddx);
                    let ddy = yy as f64 - py;
                    plane[yy as usize * w + xx as usize] +=
                        (-(ddx * ddx + ddy * ddy) * inv2s2).exp() / EXPOSURE_SAMPLES as f64;
                }
            }
        }
        x = (x + m.speed).rem_euclid(w as f64);
        for (ch, &tint) in colors[stage].iter().enumerate() {
            let base = (t * c + ch) * h * w;
            for (p, &v) in plane.iter().enumerate() {
                let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data[base + p] = (v as f32) * tint + n as f32;
            }
        }
    }
    Tensor::new([l, c, h, w], data).expect("rendered shape")
}

/// Generates a full dataset. Deterministic given `spec` (including seed);
/// videos are rendered in parallel from independent per-video streams.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let ideals: Vec<Vec<StageMotion>> = (0..spec.num_classes).map(|c| class_ideal(spec, c)).collect();

    let videos: Vec<AnnotatedVideo> = (0..spec.num_videos)
        .into_par_iter()
        .map(|i| {
            let class = i % spec.num_classes;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let transitions: Vec<usize> = spec
                .transition_windows
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..=hi))
                .collect();
            let motions: Vec<StageMotion> = ideals[class]
                .iter()
                .map(|ideal| StageMotion {
                    speed: ideal.speed + rng.random_range(0.0..MAX_SPEED_DEVIATION),
                    amplitude: ideal.amplitude + rng.random_range(0.0..MAX_AMPLITUDE_DEVIATION),
                })
                .collect();
            let score = motion_score(&motions, &ideals[class], spec.score_range, spec.stage_weight);
            let frames = render_video(spec, &motions, &transitions, &mut rng);
            let stage_labels = (0..spec.frames)
                .map(|t| transitions.iter().filter(|&&b| t >= b).count())
                .collect();
            AnnotatedVideo::new(
                format!("v{i:05}"),
                frames,
                SynthSpec::class_code(class),
                score,
                stage_labels,
                spec.num_stages,
            )
        })
        .collect::<Result<_>>()?;

    let mut split = Split::default();
    for class in 0..spec.num_classes {
        let members: Vec<&AnnotatedVideo> = videos
            .iter()
            .filter(|v| v.class_code == SynthSpec::class_code(class))
            .collect();
        let n = members.len();
        let n_test = ((n as f64 * spec.test_fraction).round() as usize).min(n - 1);
        for (j, v) in members.iter().enumerate() {
            if j < n - n_test {
                split.train.push(v.id.clone());
            } else {
                split.test.push(v.id.clone());
            }
        }
    }
    Dataset::new(videos, spec.score_range, spec.num_stages, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthSpec {
        let mut s = SynthSpec::new(10, 2, seed);
        s.height = 16;
        s.width = 16;
        s
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(&small_spec(7)).unwrap();
        let b = generate_synthetic_dataset(&small_spec(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small_spec(8)).unwrap();
        assert_ne!(a.videos[0].frames, c.videos[0].frames);
    }

    #[test]
    fn transitions_fall_inside_windows() {
        let spec = small_spec(3);
        assert_eq!(spec.transition_windows, vec![(24, 40), (56, 72)]);
        let d = generate_synthetic_dataset(&spec).unwrap();
        for v in &d.videos {
            // Exhaustive scan of every frame's label.
            let ts: Vec<usize> = (0..v.num_frames()).filter(|&i| v.transition_labels[i] == 1).collect();
            assert_eq!(ts.len(), 2);
            assert!((24..=40).contains(&ts[0]), "{ts:?}");
            assert!((56..=72).contains(&ts[1]), "{ts:?}");
            assert_eq!(v.transition_labels.iter().map(|&x| x as usize).sum::<usize>(), 2);
            assert!(v.stage_labels.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn ideal_execution_scores_max() {
        let mut spec = small_spec(1);
        spec.noise_std = 0.0;
        let ideal = class_ideal(&spec, 0);
        let s = motion_score(&ideal, &ideal, spec.score_range, spec.stage_weight);
        assert_eq!(s, spec.score_range.max);
        let frames = render_video(&spec, &ideal, &[32, 64], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(frames.all_finite());
    }

    #[test]
    fn split_keeps_every_test_class_in_train() {
        let d = generate_synthetic_dataset(&small_spec(2)).unwrap();
        assert_eq!(d.split.train.len() + d.split.test.len(), 10);
        assert_eq!(d.split.test.len(), 2);
    }

    #[test]
    fn infeasible_windows_are_config_errors() {
        let mut s = small_spec(0);
        s.transition_windows = vec![(24, 40), (42, 50)];
        assert!(matches!(generate_synthetic_dataset(&s), Err(Error::Config(_))));
        s.transition_windows = vec![(2, 10), (56, 72)];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.transition_windows = vec![(24, 40), (56, 93)];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.transition_windows = vec![(24, 40)];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = small_spec(0);
        s.num_videos = 3;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }
}
