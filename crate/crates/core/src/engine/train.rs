use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{sample_training_pair, Dataset};
use crate::engine::checkpoint::{Checkpoint, RngState};
use crate::engine::config::TrainConfig;
use crate::engine::model::{Model, Partition};
use crate::engine::optim::{scheduled_lr, Adam};
use crate::error::{Error, Result};
use crate::nn::{Binding, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_aqa: f64,
    pub l_ce: f64,
    pub l_cont: f64,
    /// Weighted sum of the three components.
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub wall_clock_secs: f64,
}

impl TrainingLog {
    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

/// Optional knobs for [`train_with`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from this checkpoint's parameters, optimizer and rng.
    pub resume: Option<Checkpoint>,
    /// Stop after this many steps in total, even if the schedule is longer.
    pub max_steps: Option<usize>,
    pub on_step: Option<&'a (dyn Fn(&StepRecord) + Sync)>,
}

struct PairResult {
    grads: Params<f32>,
    l_aqa: f64,
    l_ce: f64,
    l_cont: f64,
}

/// Trains from scratch with the configured seed.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, TrainingLog)> {
    train_with(config, dataset, TrainOptions::default())
}

pub fn train_with(config: &TrainConfig, dataset: &Dataset, opts: TrainOptions) -> Result<(Checkpoint, TrainingLog)> {
    config.validate()?;
    config.check_dataset(dataset)?;
    let started = Instant::now();
    let num_train = dataset.split.train.len();
    let total = config.total_steps(num_train);
    let last = opts.max_steps.map_or(total, |m| m.min(total));

    let (mut model, mut adam, mut rng, start) = match opts.resume {
        Some(ck) => {
            ck.validate_against(config)?;
            let model = Model::from_params(config.clone(), ck.params)?;
            let mut adam = Adam::new(&model.params, config.betas, config.eps);
            if let Some(state) = ck.optimizer {
                adam.state = state;
            }
            (model, adam, ck.rng.restore()?, ck.step as usize)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let model = Model::init(config.clone(), &mut rng)?;
            let adam = Adam::new(&model.params, config.betas, config.eps);
            (model, adam, rng, 0)
        }
    };

    let partition = if config.teacher_forcing {
        Partition::GroundTruth
    } else {
        Partition::Predicted
    };
    let w = config.loss_weights;
    let mut log = TrainingLog::default();
    for step in start..last {
        let lr = scheduled_lr(config.schedule, config.lr, step, total);
        let pairs = (0..config.batch_size)
            .map(|_| sample_training_pair(dataset, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let results = pairs
            .par_iter()
            .map(|p| -> Result<PairResult> {
                let g = Graph::new();
                let b = Binding::trainable(&g, &model.params);
                let out = model.pair_forward(&b, p.query, p.exemplar, partition)?;
                let weighted = [(out.l_aqa, w.aqa), (out.l_ce, w.ce), (out.l_cont, w.cont)]
                    .iter()
                    .filter(|(_, wt)| *wt > 0.0)
                    .map(|&(v, wt)| g.scale(v, wt as f32))
                    .collect::<Vec<_>>();
                let objective = weighted
                    .into_iter()
                    .reduce(|a, v| g.add(a, v))
                    .expect("config validation requires a positive loss weight");
                let mut grads = g.backward(objective);
                let grads = b.grads(&mut grads);
                Ok(PairResult {
                    grads,
                    l_aqa: g.scalar(out.l_aqa),
                    l_ce: g.scalar(out.l_ce),
                    l_cont: g.scalar(out.l_cont),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        // Fixed reduction order keeps runs bit-for-bit reproducible.
        let n = results.len() as f64;
        let mut grads = model.params.zeros_like();
        let (mut l_aqa, mut l_ce, mut l_cont) = (0.0, 0.0, 0.0);
        for r in &results {
            grads.add_scaled(&r.grads, (1.0 / n) as f32);
            l_aqa += r.l_aqa / n;
            l_ce += r.l_ce / n;
            l_cont += r.l_cont / n;
        }
        let record = StepRecord {
            step,
            l_aqa,
            l_ce,
            l_cont,
            total: w.aqa * l_aqa + w.ce * l_ce + w.cont * l_cont,
            lr,
        };
        if !record.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: aqa {l_aqa}, ce {l_ce}, cont {l_cont}"
            )));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
        }
        if let Some(clip) = config.grad_clip {
            if norm > clip {
                let s = (clip / norm) as f32;
                for (_, t) in grads.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        adam.step(&mut model.params, &grads, lr);
        if let Some(cb) = opts.on_step {
            cb(&record);
        }
        log.steps.push(record);
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    let checkpoint = Checkpoint {
        config: config.clone(),
        params: model.params,
        step: last.max(start) as u64,
        rng: RngState::capture(&rng),
        optimizer: Some(adam.state),
    };
    Ok((checkpoint, log))
}
