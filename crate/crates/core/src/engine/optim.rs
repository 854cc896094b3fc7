use std::f64::consts::PI;

use crate::engine::config::Schedule;
use crate::nn::Params;

/// Learning rate for update `step` of `total` (0-based).
pub fn scheduled_lr(schedule: Schedule, base: f64, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let t = step.min(total) as f64 / total.max(1) as f64;
            0.5 * base * (1.0 + (PI * t).cos())
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

/// Step count and moment estimates, saved with checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl AdamState {
    pub fn new(params: &Params<f32>) -> Self {
        Self {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

impl Adam {
    pub fn new(params: &Params<f32>, (beta1, beta2): (f64, f64), eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: AdamState::new(params),
        }
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64) {
        let s = &mut self.state;
        s.t += 1;
        let t = s.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        for (name, p) in params.iter_mut() {
            let (Some(g), Some(m), Some(v)) = (grads.get(name), s.m.get_mut(name), s.v.get_mut(name)) else {
                continue;
            };
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (m, v)) in it {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
