//! Procedure segmentation: per-frame transition probabilities from a
//! bidirectional GRU, greedy boundary selection, the transition
//! cross-entropy, and partitioning of frame features into fixed-length
//! stage sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::FrameFeatures;
use crate::error::{Error, Result};
use crate::nn::{Binding, Init, ParamSpec, Params};
use crate::tensor::{Scalar, Tensor};

pub const PREFIX: &str = "segmenter.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_stages: usize,
    pub min_gap: usize,
    /// Up-weight transition frames by `(L - (K_s - 1)) / (K_s - 1)` in the loss.
    pub weight_positives: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            input_dim: 128,
            hidden: 64,
            num_stages: 3,
            min_gap: 4,
            weight_positives: true,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("segmenter: dims must be positive".into()));
        }
        if self.num_stages < 2 {
            return Err(Error::Config("segmenter: need at least two stages".into()));
        }
        if self.min_gap == 0 {
            return Err(Error::Config("segmenter: min_gap must be positive".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, h) = (self.input_dim, self.hidden);
        let mut specs = Vec::new();
        for dir in ["gru_fwd", "gru_bwd"] {
            let p = format!("{PREFIX}{dir}");
            specs.push(ParamSpec::new(
                format!("{p}.w_ih"),
                [d, 3 * h],
                Init::FanInUniform { fan_in: h },
            ));
            specs.push(ParamSpec::new(
                format!("{p}.w_hh"),
                [h, 3 * h],
                Init::FanInUniform { fan_in: h },
            ));
            specs.push(ParamSpec::new(format!("{p}.b_ih"), [3 * h], Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.b_hh"), [3 * h], Init::Zeros));
        }
        specs.push(ParamSpec::new(
            format!("{PREFIX}fc.weight"),
            [2 * h, 2],
            Init::FanInUniform { fan_in: 2 * h },
        ));
        specs.push(ParamSpec::new(format!("{PREFIX}fc.bias"), [2], Init::Zeros));
        specs
    }

    pub fn init<T: Scalar>(&self, rng: &mut impl Rng) -> Result<Params<T>> {
        self.validate()?;
        Ok(Params::init(&self.param_specs(), rng))
    }

    /// Smallest sequence the segmenter accepts.
    pub fn min_frames(&self) -> usize {
        self.num_stages * self.min_gap
    }

    pub fn positive_weight(&self, num_frames: usize) -> Option<f64> {
        let k = self.num_stages - 1;
        (self.weight_positives && num_frames > k).then(|| (num_frames - k) as f64 / k as f64)
    }
}

/// Ordered transition frames splitting `num_frames` frames into stages
/// `[0, t1), [t1, t2), ..., [t_last, L)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBoundaries {
    transitions: Vec<usize>,
    num_frames: usize,
}

impl StageBoundaries {
    /// Checks strict ordering and that every stage spans at least `min_gap` frames.
    pub fn new(transitions: Vec<usize>, num_frames: usize, min_gap: usize) -> Result<Self> {
        let b = Self {
            transitions,
            num_frames,
        };
        if !b.is_valid(min_gap) {
            return Err(Error::InvalidArgument(format!(
                "boundaries {:?} invalid for L={num_frames}, min_gap={min_gap}",
                b.transitions
            )));
        }
        Ok(b)
    }

    pub(crate) fn new_unchecked(transitions: Vec<usize>, num_frames: usize) -> Self {
        Self {
            transitions,
            num_frames,
        }
    }

    /// Transitions at `round(k * L / K_s)`.
    pub fn uniform(num_frames: usize, num_stages: usize) -> Self {
        let transitions = (1..num_stages)
            .map(|k| ((k * num_frames) as f64 / num_stages as f64).round() as usize)
            .collect();
        Self::new_unchecked(transitions, num_frames)
    }

    pub fn is_valid(&self, min_gap: usize) -> bool {
        let mut prev = 0;
        for &t in &self.transitions {
            if t < prev + min_gap {
                return false;
            }
            prev = t;
        }
        self.num_frames >= prev + min_gap
    }

    pub fn transitions(&self) -> &[usize] {
        &self.transitions
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_stages(&self) -> usize {
        self.transitions.len() + 1
    }

    /// Half-open `(start, end)` frame ranges of every stage.
    pub fn stages(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.transitions.len() + 2);
        edges.push(0);
        edges.extend_from_slice(&self.transitions);
        edges.push(self.num_frames);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Per-frame `[P(no transition), P(transition)]`, shape `[L, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionProbs {
    pub probs: Tensor<f64>,
}

impl TransitionProbs {
    pub fn new(probs: Tensor<f64>) -> Result<Self> {
        if probs.ndim() != 2 || probs.shape()[1] != 2 {
            return Err(Error::Shape(format!(
                "transition probs must be [L, 2], got {:?}",
                probs.shape()
            )));
        }
        Ok(Self { probs })
    }

    /// Probabilities that frame `i` starts a new stage.
    pub fn transition_column(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.probs.get(&[i, 1])).collect()
    }

    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gru_pass<T: Scalar>(b: &Binding<T>, dir: &str, xs: Var, hidden: usize, reverse: bool) -> Result<Vec<Var>> {
    let g = b.graph();
    let p = format!("{PREFIX}{dir}");
    let xp = g.linear(xs, b.var(&format!("{p}.w_ih"))?, b.var(&format!("{p}.b_ih"))?);
    let w_hh = b.var(&format!("{p}.w_hh"))?;
    let b_hh = b.var(&format!("{p}.b_hh"))?;
    let len = g.shape(xs)[0];
    let mut h = g.constant(Tensor::zeros([1, hidden]));
    let mut states = vec![h; len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in order {
        let x = g.slice_rows(xp, t, 1);
        let hp = g.linear(h, w_hh, b_hh);
        let gate = |start: usize, v: Var| g.slice_cols(v, start * hidden, hidden);
        let r = g.sigmoid(g.add(gate(0, x), gate(0, hp)));
        let z = g.sigmoid(g.add(gate(1, x), gate(1, hp)));
        let n = g.tanh(g.add(gate(2, x), g.mul(r, gate(2, hp))));
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        h = g.add(n, g.mul(z, g.sub(h, n)));
        states[t] = h;
    }
    Ok(states)
}

/// Graph-level transition logits `[L, 2]` for `features: [L, D]`.
pub fn forward_logits<T: Scalar>(cfg: &SegmenterConfig, b: &Binding<T>, features: Var) -> Result<Var> {
    let g = b.graph();
    let shape = g.shape(features);
    if shape.len() != 2 || shape[1] != cfg.input_dim {
        return Err(Error::Shape(format!(
            "segmenter expects [L, {}], got {shape:?}",
            cfg.input_dim
        )));
    }
    if shape[0] < cfg.min_frames() {
        return Err(Error::InvalidArgument(format!(
            "{} frames is below the minimum of {} for {} stages with min_gap {}",
            shape[0],
            cfg.min_frames(),
            cfg.num_stages,
            cfg.min_gap
        )));
    }
    let fwd = gru_pass(b, "gru_fwd", features, cfg.hidden, false)?;
    let bwd = gru_pass(b, "gru_bwd", features, cfg.hidden, true)?;
    let hs = g.concat_cols(&[g.concat_rows(&fwd), g.concat_rows(&bwd)]);
    Ok(g.linear(
        hs,
        b.var(&format!("{PREFIX}fc.weight"))?,
        b.var(&format!("{PREFIX}fc.bias"))?,
    ))
}

pub fn predict_transition_probs<T: Scalar>(
    features: &FrameFeatures<T>,
    params: &Params<T>,
    cfg: &SegmenterConfig,
) -> Result<TransitionProbs> {
    let g = Graph::new();
    let b = Binding::frozen(&g, params);
    let x = g.constant(features.values.clone());
    let logits = forward_logits(cfg, &b, x)?;
    let probs = g.softmax_rows(logits);
    TransitionProbs::new(g.value(probs).cast())
}

/// Greedy peak picking: frames in descending transition probability (ties
/// to the smaller index), skipping any frame closer than `min_gap` to an
/// accepted one or to either end of the sequence. Falls back to the uniform
/// partition if not enough frames can be accepted.
pub fn select_boundaries(probs: &TransitionProbs, num_transitions: usize, min_gap: usize) -> StageBoundaries {
    let len = probs.len();
    let column = probs.transition_column();
    let key = |p: f64| if p.is_nan() { f64::NEG_INFINITY } else { p };
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| key(column[b]).total_cmp(&key(column[a])).then(a.cmp(&b)));

    let mut accepted: Vec<usize> = Vec::with_capacity(num_transitions);
    for i in order {
        if accepted.len() == num_transitions {
            break;
        }
        if i < min_gap || i + min_gap > len {
            continue;
        }
        if accepted.iter().all(|&a| a.abs_diff(i) >= min_gap) {
            accepted.push(i);
        }
    }
    if accepted.len() < num_transitions {
        return StageBoundaries::uniform(len, num_transitions + 1);
    }
    accepted.sort_unstable();
    StageBoundaries::new_unchecked(accepted, len)
}

fn check_labels(labels: &[u8], len: usize) -> Result<()> {
    if labels.len() != len {
        return Err(Error::Shape(format!("{} labels for {len} frames", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidLabel(format!("transition label {bad} not in {{0, 1}}")));
    }
    Ok(())
}

fn frame_weights(labels: &[u8], positive_weight: Option<f64>) -> Vec<f64> {
    let w = positive_weight.unwrap_or(1.0);
    labels.iter().map(|&l| if l == 1 { w } else { 1.0 }).collect()
}

/// Weighted mean two-class cross-entropy; with `positive_weight = None`
/// this is the plain per-frame mean.
pub fn segmentation_loss(probs: &TransitionProbs, labels: &[u8], positive_weight: Option<f64>) -> Result<f64> {
    check_labels(labels, probs.len())?;
    let w = frame_weights(labels, positive_weight);
    let total: f64 = w.iter().sum();
    let loss: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -w[i] * probs.probs.get(&[i, l as usize]).ln())
        .sum();
    Ok(loss / total)
}

/// Graph-level [`segmentation_loss`] computed from logits via log-softmax.
pub fn segmentation_loss_var<T: Scalar>(
    g: &Graph<T>,
    logits: Var,
    labels: &[u8],
    positive_weight: Option<f64>,
) -> Result<Var> {
    let len = g.shape(logits)[0];
    check_labels(labels, len)?;
    let w = frame_weights(labels, positive_weight);
    let total: f64 = w.iter().sum();
    let mut mask = Tensor::zeros([len, 2]);
    for (i, &l) in labels.iter().enumerate() {
        mask.set(&[i, l as usize], T::from_f64_lossy(-w[i] / total));
    }
    let logp = g.log_softmax_rows(logits);
    Ok(g.sum(g.mul_const(logp, mask)))
}

/// Resamples a `[T, D]` segment onto `m` rows; see [`Graph::resample_rows`].
pub fn linear_resample<T: Scalar>(segment: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("resample length {m} < 2")));
    }
    if segment.ndim() != 2 || segment.shape()[0] == 0 {
        return Err(Error::Shape(format!(
            "segment must be [T>=1, D], got {:?}",
            segment.shape()
        )));
    }
    let g = Graph::new();
    let x = g.constant(segment.clone());
    let y = g.resample_rows(x, 0, segment.shape()[0], m);
    Ok(g.value(y).as_ref().clone())
}

/// Stage sequences `[K_s, M, D]` and their time means `[K_s, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatureSet<T> {
    pub per_stage: Tensor<T>,
    pub pooled: Tensor<T>,
}

/// Graph-level partition: one `[M, D]` node per stage plus the `[K_s, D]`
/// pooled node. Boundaries are constants; gradients flow to `features`.
pub struct StageVars {
    pub per_stage: Vec<Var>,
    pub pooled: Var,
}

pub fn partition_and_resample_var<T: Scalar>(
    g: &Graph<T>,
    features: Var,
    boundaries: &StageBoundaries,
    m: usize,
) -> Result<StageVars> {
    let shape = g.shape(features);
    if shape.len() != 2 || shape[0] != boundaries.num_frames() {
        return Err(Error::Shape(format!(
            "features {shape:?} do not match boundaries over {} frames",
            boundaries.num_frames()
        )));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!("resample length {m} < 2")));
    }
    let mut per_stage = Vec::with_capacity(boundaries.num_stages());
    let mut means = Vec::with_capacity(boundaries.num_stages());
    for (start, end) in boundaries.stages() {
        if end <= start {
            return Err(Error::InvalidArgument(format!("empty stage [{start}, {end})")));
        }
        let s = g.resample_rows(features, start, end - start, m);
        means.push(g.mean_rows(s));
        per_stage.push(s);
    }
    Ok(StageVars {
        per_stage,
        pooled: g.concat_rows(&means),
    })
}

pub fn partition_and_resample<T: Scalar>(
    features: &FrameFeatures<T>,
    boundaries: &StageBoundaries,
    m: usize,
) -> Result<StageFeatureSet<T>> {
    let g = Graph::new();
    let x = g.constant(features.values.clone());
    let vars = partition_and_resample_var(&g, x, boundaries, m)?;
    let d = features.dim();
    let mut data = Vec::with_capacity(vars.per_stage.len() * m * d);
    for &s in &vars.per_stage {
        data.extend_from_slice(g.value(s).data());
    }
    Ok(StageFeatureSet {
        per_stage: Tensor::new([vars.per_stage.len(), m, d], data)?,
        pooled: g.value(vars.pooled).as_ref().clone(),
    })
}
