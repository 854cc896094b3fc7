//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates the forward graph, so it stays
//! independent of every backward rule it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero do not divide finite-difference noise by ~0.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences with step `h`. `max_per_input` caps how many (evenly strided)
/// entries of each input are probed.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64, max_per_input: Option<usize>) -> GradCheckReport
where
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&graph, &vars);
    assert_eq!(graph.value(out).len(), 1, "gradient check needs a scalar output");
    let grads = graph.backward(out);

    let eval = |inputs: &[Tensor<f64>]| {
        let g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let o = f(&g, &vs);
        g.scalar(o)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ti])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let stride = max_per_input.map_or(1, |cap| input.len().div_ceil(cap.max(1)).max(1));
        for idx in (0..input.len()).step_by(stride) {
            let orig = input.data()[idx];
            probe[ti].data_mut()[idx] = orig + h;
            let plus = eval(&probe);
            probe[ti].data_mut()[idx] = orig - h;
            let minus = eval(&probe);
            probe[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights, so a
/// gradient check exercises every output entry with distinct sensitivity.
pub fn weighted_sum(graph: &Graph<f64>, v: Var, seed: u64) -> Var {
    let shape = graph.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let weighted = graph.mul_const(v, weights);
    graph.sum(weighted)
}

/// Uniform random tensor in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}
