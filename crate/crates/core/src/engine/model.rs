use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone;
use crate::contrast::stage_contrastive_loss_var;
use crate::data::AnnotatedVideo;
use crate::engine::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Binding, Params};
use crate::scorer::{self, predict_score, ScorePrediction};
use crate::segmenter::{
    self, partition_and_resample_var, segmentation_loss_var, select_boundaries, StageBoundaries, StageFeatureSet,
    TransitionProbs,
};
use crate::tensor::Tensor;

/// Configuration plus every named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub params: Params<f32>,
}

/// Everything inference needs from one video, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnalysis {
    pub id: String,
    pub probs: TransitionProbs,
    pub boundaries: StageBoundaries,
    pub stages: StageFeatureSet<f32>,
}

/// Graph nodes for one training pair; losses are unweighted.
pub(crate) struct PairOutput {
    pub l_aqa: Var,
    pub l_ce: Var,
    pub l_cont: Var,
    #[cfg_attr(not(test), allow(dead_code))]
    pub s_hat: Var,
}

/// Which boundaries partition the frame features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    GroundTruth,
    Predicted,
}

impl Model {
    pub fn init(config: TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config.param_specs(), rng);
        Ok(Self { config, params })
    }

    /// Checks every expected tensor is present with the configured shape.
    pub fn from_params(config: TrainConfig, params: Params<f32>) -> Result<Self> {
        config.validate()?;
        params.validate(&config.param_specs())?;
        Ok(Self { config, params })
    }

    fn features(&self, b: &Binding<f32>, video: &AnnotatedVideo) -> Result<Var> {
        let g = b.graph();
        backbone::forward(self.config.backbone(), b, g.constant(video.frames.clone()))
    }

    fn predicted_boundaries(&self, g: &Graph<f32>, logits: Var) -> Result<(TransitionProbs, StageBoundaries)> {
        let probs = TransitionProbs::new(g.value(g.softmax_rows(logits)).cast())?;
        let seg = self.config.segmenter();
        let b = select_boundaries(&probs, seg.num_stages - 1, seg.min_gap);
        Ok((probs, b))
    }

    pub(crate) fn pair_forward(
        &self,
        b: &Binding<f32>,
        query: &AnnotatedVideo,
        exemplar: &AnnotatedVideo,
        partition: Partition,
    ) -> Result<PairOutput> {
        let g = b.graph();
        let seg = self.config.segmenter();
        let m = self.config.stage_len;
        let mut ce = Vec::with_capacity(2);
        let mut stages = Vec::with_capacity(2);
        for v in [query, exemplar] {
            let f = self.features(b, v)?;
            let logits = segmenter::forward_logits(&seg, b, f)?;
            let weight = seg.positive_weight(v.num_frames());
            ce.push(segmentation_loss_var(g, logits, &v.transition_labels, weight)?);
            let bounds = match partition {
                Partition::GroundTruth => v.boundaries(),
                Partition::Predicted => self.predicted_boundaries(g, logits)?.1,
            };
            stages.push(partition_and_resample_var(g, f, &bounds, m)?);
        }
        let l_ce = g.scale(g.add(ce[0], ce[1]), 0.5);
        let (sq, se) = (&stages[0], &stages[1]);
        let l_cont = stage_contrastive_loss_var(g, sq.pooled, se.pooled, &self.config.contrast())?;
        let sc = self.config.scorer();
        let f_rel = scorer::relative_features_var(&sc, b, &sq.per_stage, &se.per_stage)?;
        let s_rel = scorer::regress_relative_score_var(&sc, b, f_rel)?;
        let s_hat = g.add_scalar(s_rel, exemplar.score as f32);
        let l_aqa = g.square(g.add_scalar(s_hat, -(query.score as f32)));
        let flat = |v: Var| g.reshape(v, &[1]);
        let (l_aqa, l_ce, l_cont, s_hat) = (flat(l_aqa), flat(l_ce), flat(l_cont), flat(s_hat));
        Ok(PairOutput {
            l_aqa,
            l_ce,
            l_cont,
            s_hat,
        })
    }

    /// Features, predicted boundaries and stage features for one video.
    pub fn analyze(&self, video: &AnnotatedVideo) -> Result<VideoAnalysis> {
        self.analyze_with(video, Partition::Predicted)
    }

    /// Like [`Model::analyze`], but stage features may come from the
    /// annotated boundaries instead; `boundaries` then holds those.
    pub fn analyze_with(&self, video: &AnnotatedVideo, partition: Partition) -> Result<VideoAnalysis> {
        let g = Graph::new();
        let b = Binding::frozen(&g, &self.params);
        let f = self.features(&b, video)?;
        let logits = segmenter::forward_logits(&self.config.segmenter(), &b, f)?;
        let (probs, predicted) = self.predicted_boundaries(&g, logits)?;
        let boundaries = match partition {
            Partition::GroundTruth => video.boundaries(),
            Partition::Predicted => predicted,
        };
        let fv = backbone::FrameFeatures {
            values: g.value(f).as_ref().clone(),
        };
        let stages = segmenter::partition_and_resample(&fv, &boundaries, self.config.stage_len)?;
        Ok(VideoAnalysis {
            id: video.id.clone(),
            probs,
            boundaries,
            stages,
        })
    }

    /// Predicted score offset of `query` relative to `exemplar`.
    pub fn relative_score(&self, query: &VideoAnalysis, exemplar: &VideoAnalysis) -> Result<f64> {
        let g = Graph::new();
        let b = Binding::frozen(&g, &self.params);
        let stage_vars = |s: &StageFeatureSet<f32>| -> Result<Vec<Var>> {
            let shape = s.per_stage.shape();
            let (m, d) = (shape[1], shape[2]);
            (0..shape[0])
                .map(|k| {
                    let rows = s.per_stage.data()[k * m * d..(k + 1) * m * d].to_vec();
                    Ok(g.constant(Tensor::new([m, d], rows)?))
                })
                .collect()
        };
        let sc = self.config.scorer();
        let f_rel =
            scorer::relative_features_var(&sc, &b, &stage_vars(&query.stages)?, &stage_vars(&exemplar.stages)?)?;
        let s_rel = g.scalar(scorer::regress_relative_score_var(&sc, &b, f_rel)?);
        if !s_rel.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite relative score for {} against {}",
                query.id, exemplar.id
            )));
        }
        Ok(s_rel)
    }

    /// Single-pair prediction `S_e + s_rel` using predicted boundaries.
    pub fn predict_pair(&self, query: &AnnotatedVideo, exemplar: &AnnotatedVideo) -> Result<ScorePrediction> {
        let s_rel = self.relative_score(&self.analyze(query)?, &self.analyze(exemplar)?)?;
        Ok(predict_score(exemplar.score, s_rel))
    }
}
