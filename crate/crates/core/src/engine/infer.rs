use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{select_exemplars_excluding, AnnotatedVideo, Dataset};
use crate::engine::model::{Model, VideoAnalysis};
use crate::error::{Error, Result};
use crate::metrics::{interval_iou, MetricsReport};
use crate::scorer::{predict_score, ScorePrediction};
use crate::segmenter::StageBoundaries;

/// Anything that can score a video relative to an exemplar. Analyses are
/// computed once per video and reused across pairs.
pub trait AqaPredictor: Sync {
    type Analysis: Send + Sync;

    fn analyze(&self, video: &AnnotatedVideo) -> Result<Self::Analysis>;

    /// Predicted stage boundaries of an analyzed video.
    fn boundaries<'a>(&self, analysis: &'a Self::Analysis) -> &'a StageBoundaries;

    /// Predicted `S_q - S_e`.
    fn relative_score(&self, query: &Self::Analysis, exemplar: &Self::Analysis) -> Result<f64>;
}

impl AqaPredictor for Model {
    type Analysis = VideoAnalysis;

    fn analyze(&self, video: &AnnotatedVideo) -> Result<VideoAnalysis> {
        Model::analyze(self, video)
    }

    fn boundaries<'a>(&self, analysis: &'a VideoAnalysis) -> &'a StageBoundaries {
        &analysis.boundaries
    }

    fn relative_score(&self, query: &VideoAnalysis, exemplar: &VideoAnalysis) -> Result<f64> {
        Model::relative_score(self, query, exemplar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceDetails {
    pub exemplar_ids: Vec<String>,
    pub per_exemplar: Vec<ScorePrediction>,
    pub boundaries: StageBoundaries,
}

fn average_over<P: AqaPredictor>(
    predictor: &P,
    query: &P::Analysis,
    exemplars: &[(&AnnotatedVideo, &P::Analysis)],
) -> Result<(f64, Vec<ScorePrediction>)> {
    let per: Vec<ScorePrediction> = exemplars
        .iter()
        .map(|(v, a)| Ok(predict_score(v.score, predictor.relative_score(query, a)?)))
        .collect::<Result<_>>()?;
    let mean = per.iter().map(|p| p.s_hat).sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// Mean of `S_e + relative_score` over up to `p` same-class train exemplars.
/// The video itself is never its own exemplar.
pub fn infer_score<P: AqaPredictor>(
    predictor: &P,
    video: &AnnotatedVideo,
    dataset: &Dataset,
    p: usize,
    rng: &mut impl Rng,
) -> Result<(f64, InferenceDetails)> {
    let exemplars = select_exemplars_excluding(dataset, &video.class_code, p, Some(&video.id), rng)?;
    let query = predictor.analyze(video)?;
    let analyses = exemplars
        .par_iter()
        .map(|v| predictor.analyze(v))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = exemplars.iter().copied().zip(analyses.iter()).collect();
    let (s_hat, per_exemplar) = average_over(predictor, &query, &pairs)?;
    Ok((
        s_hat,
        InferenceDetails {
            exemplar_ids: exemplars.iter().map(|v| v.id.clone()).collect(),
            per_exemplar,
            boundaries: predictor.boundaries(&query).clone(),
        },
    ))
}

/// Scores every test video with `model` using its configured exemplar count
/// and evaluation seed.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<MetricsReport> {
    model.config.check_dataset(dataset)?;
    evaluate_with(model, dataset, model.config.num_exemplars, model.config.eval_seed)
}

/// Exemplars are drawn for test videos in split order from one rng seeded
/// with `eval_seed`; each distinct video is analyzed once.
pub fn evaluate_with<P: AqaPredictor>(
    predictor: &P,
    dataset: &Dataset,
    p: usize,
    eval_seed: u64,
) -> Result<MetricsReport> {
    let tests: Vec<&AnnotatedVideo> = dataset.test().collect();
    if tests.is_empty() {
        return Err(Error::Sampling("test split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let chosen = tests
        .iter()
        .map(|v| select_exemplars_excluding(dataset, &v.class_code, p, Some(&v.id), &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let mut needed: Vec<&AnnotatedVideo> = tests.clone();
    let mut seen: HashSet<&str> = tests.iter().map(|v| v.id.as_str()).collect();
    for v in chosen.iter().flatten() {
        if seen.insert(v.id.as_str()) {
            needed.push(v);
        }
    }
    let analyses = needed
        .par_iter()
        .map(|v| predictor.analyze(v))
        .collect::<Result<Vec<_>>>()?;
    let by_id: HashMap<&str, &P::Analysis> = needed.iter().map(|v| v.id.as_str()).zip(analyses.iter()).collect();

    let results = tests
        .par_iter()
        .zip(&chosen)
        .map(|(v, ex)| -> Result<(f64, f64)> {
            let query = by_id[v.id.as_str()];
            let pairs: Vec<_> = ex.iter().map(|e| (*e, by_id[e.id.as_str()])).collect();
            let (s_hat, _) = average_over(predictor, query, &pairs)?;
            let iou = interval_iou(predictor.boundaries(query), &v.boundaries())?;
            Ok((s_hat, iou))
        })
        .collect::<Result<Vec<_>>>()?;

    let (pred, ious): (Vec<f64>, Vec<f64>) = results.into_iter().unzip();
    MetricsReport::build(
        tests.iter().map(|v| v.id.clone()).collect(),
        tests.iter().map(|v| v.score).collect(),
        pred,
        ious,
        &dataset.score_range,
        eval_seed,
    )
}
