//! Trains and evaluates on a generated proxy dataset, reporting test metrics
//! every `EVAL_EVERY` steps:
//! `cargo run --release --example proxy -- CONFIG [NUM_VIDEOS] [EVAL_EVERY]`.
//!
//! The last column scores with annotated stage boundaries instead of predicted
//! ones, which separates scorer quality from segmentation quality.

use mcore::data::{generate_synthetic_dataset, AnnotatedVideo, SynthSpec};
use mcore::engine::{
    evaluate, evaluate_with, train_with, AqaPredictor, Model, Partition, StepRecord, TrainConfig, TrainOptions,
    VideoAnalysis,
};
use mcore::segmenter::StageBoundaries;

/// Scores with annotated stage boundaries.
struct Oracle(Model);

impl AqaPredictor for Oracle {
    type Analysis = VideoAnalysis;
    fn analyze(&self, v: &AnnotatedVideo) -> mcore::Result<VideoAnalysis> {
        self.0.analyze_with(v, Partition::GroundTruth)
    }
    fn boundaries<'a>(&self, a: &'a VideoAnalysis) -> &'a StageBoundaries {
        &a.boundaries
    }
    fn relative_score(&self, q: &VideoAnalysis, e: &VideoAnalysis) -> mcore::Result<f64> {
        self.0.relative_score(q, e)
    }
}

fn main() -> mcore::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let config = TrainConfig::load(&args[1])?;
    let n = args.get(2).map_or(250, |s| s.parse().unwrap());
    let every: usize = args.get(3).map_or(100, |s| s.parse().unwrap());
    let bb = &config.model.backbone;
    let mut spec = SynthSpec::new(n, 5, 7).with_layout(config.frames, config.num_stages);
    spec.height = bb.height;
    spec.width = bb.width;
    spec.channels = bb.in_channels;
    let data = generate_synthetic_dataset(&spec)?;
    let total = config.total_steps(data.split.train.len());
    let mean = std::sync::Mutex::new((0.0, 0usize));
    let log = |r: &StepRecord| {
        let mut m = mean.lock().unwrap();
        m.0 += r.l_aqa;
        m.1 += 1;
    };
    let mut resume = None;
    let mut done = 0;
    while done < total {
        done = (done + every).min(total);
        let (ck, _) = train_with(
            &config,
            &data,
            TrainOptions {
                resume: resume.take(),
                max_steps: Some(done),
                on_step: Some(&log),
            },
        )?;
        let r = evaluate(&ck.model()?, &data)?;
        let o = evaluate_with(&Oracle(ck.model()?), &data, config.num_exemplars, config.eval_seed)?;
        let mut m = mean.lock().unwrap();
        println!(
            "step {done:5}: train aqa {:.3} | test srcc {:.3} r_l2 {:.3} aiou@0.5 {:.2} | gt-partition srcc {:.3}",
            m.0 / m.1.max(1) as f64,
            r.srcc.unwrap_or(f64::NAN),
            r.r_l2_x100,
            r.aiou_at(0.5).unwrap_or(f64::NAN),
            o.srcc.unwrap_or(f64::NAN)
        );
        *m = (0.0, 0);
        resume = Some(ck);
    }
    Ok(())
}
