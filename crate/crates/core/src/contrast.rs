//! Stage contrastive loss over pooled stage vectors.
//!
//! For anchor stage `i` of the query, the positive is the exemplar's stage
//! `i`; negatives are the exemplar's other stages and the query's own other
//! stages. The loss is the InfoNCE term `-log(pos / (pos + neg))`, averaged
//! over both anchoring directions and all stages.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::segmenter::StageFeatureSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    /// Temperature.
    pub tau: f64,
    /// Guard added to vector norms before normalizing.
    pub epsilon_norm: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            epsilon_norm: 1e-12,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "contrast: tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.epsilon_norm >= 0.0) {
            return Err(Error::Config("contrast: epsilon_norm must be non-negative".into()));
        }
        Ok(())
    }
}

fn normalized(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
    v.iter().map(|x| x / n).collect()
}

/// Cosine similarity of guarded-normalized vectors; a zero vector scores 0.
pub fn stage_similarity(a: &[f64], b: &[f64], cfg: &ContrastConfig) -> f64 {
    let a = normalized(a, cfg.epsilon_norm);
    let b = normalized(b, cfg.epsilon_norm);
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

fn check_pooled(q: &Tensor<f64>, e: &Tensor<f64>) -> Result<usize> {
    if q.ndim() != 2 || q.shape() != e.shape() {
        return Err(Error::Shape(format!(
            "pooled stage features must share a [K, D] shape, got {:?} and {:?}",
            q.shape(),
            e.shape()
        )));
    }
    Ok(q.shape()[0])
}

fn check_anchor(q: &Tensor<f64>, e: &Tensor<f64>, i: usize) -> Result<usize> {
    let k = check_pooled(q, e)?;
    if i >= k {
        return Err(Error::InvalidArgument(format!(
            "stage index {i} out of range for {k} stages"
        )));
    }
    Ok(k)
}

fn energy(a: &[f64], b: &[f64], cfg: &ContrastConfig) -> f64 {
    (stage_similarity(a, b, cfg) / cfg.tau).exp()
}

/// `exp(sim(q_i, e_i) / tau)` for zero-based stage `i`.
pub fn positive_energy(q: &Tensor<f64>, e: &Tensor<f64>, i: usize, cfg: &ContrastConfig) -> Result<f64> {
    check_anchor(q, e, i)?;
    Ok(energy(q.row(i), e.row(i), cfg))
}

/// Sum of `exp(sim / tau)` over the `2 (K - 1)` negatives of query stage `i`.
pub fn negative_energy(q: &Tensor<f64>, e: &Tensor<f64>, i: usize, cfg: &ContrastConfig) -> Result<f64> {
    let k = check_anchor(q, e, i)?;
    if k < 2 {
        return Err(Error::Config("contrastive loss needs at least two stages".into()));
    }
    Ok((0..k)
        .filter(|&j| j != i)
        .map(|j| energy(q.row(i), e.row(j), cfg) + energy(q.row(i), q.row(j), cfg))
        .sum())
}

/// `-log(pos / (pos + neg))` anchored at query stage `i`.
pub fn pairwise_objective(q: &Tensor<f64>, e: &Tensor<f64>, i: usize, cfg: &ContrastConfig) -> Result<f64> {
    let pos = positive_energy(q, e, i, cfg)?;
    let neg = negative_energy(q, e, i, cfg)?;
    Ok(-(pos / (pos + neg)).ln())
}

/// Graph-level symmetric loss on pooled `[K, D]` nodes.
pub fn stage_contrastive_loss_var<T: Scalar>(g: &Graph<T>, q: Var, e: Var, cfg: &ContrastConfig) -> Result<Var> {
    cfg.validate()?;
    let (qs, es) = (g.shape(q), g.shape(e));
    if qs.len() != 2 || qs != es {
        return Err(Error::Shape(format!("pooled stage features differ: {qs:?} vs {es:?}")));
    }
    let k = qs[0];
    if k < 2 {
        return Err(Error::Config("contrastive loss needs at least two stages".into()));
    }
    let qn = g.normalize_rows(q, cfg.epsilon_norm);
    let en = g.normalize_rows(e, cfg.epsilon_norm);
    let inv_tau = T::from_f64_lossy(1.0 / cfg.tau);
    // Cosines are at most 1, so shifting logits by -1/tau keeps every
    // exponential <= 1 without changing any ratio.
    let logits = |a: Var, b: Var| g.scale(g.add_scalar(g.matmul_t(a, b, false, true), -T::one()), inv_tau);
    let l_qe = logits(qn, en);
    let l_qq = logits(qn, qn);
    let l_ee = logits(en, en);

    let eye = Tensor::from_fn([k, k], |idx| if idx / k == idx % k { T::one() } else { T::zero() });
    let off = eye.map(|v| T::one() - v);
    let anchored = |cross: Var, own: Var| {
        let pos_logit = g.sum_cols(g.mul_const(cross, eye.clone()));
        let all = g.add(
            g.sum_cols(g.exp(cross)),
            g.sum_cols(g.mul_const(g.exp(own), off.clone())),
        );
        g.sum(g.sub(g.log(all), pos_logit))
    };
    let from_query = anchored(l_qe, l_qq);
    let from_exemplar = anchored(g.transpose(l_qe), l_ee);
    let total = g.add(from_query, from_exemplar);
    Ok(g.scale(total, T::from_f64_lossy(1.0 / (2 * k) as f64)))
}

/// Symmetric stage contrastive loss between two stage feature sets.
pub fn stage_contrastive_loss<T: Scalar>(
    q: &StageFeatureSet<T>,
    e: &StageFeatureSet<T>,
    cfg: &ContrastConfig,
) -> Result<f64> {
    let g = Graph::new();
    let qv = g.constant(q.pooled.clone());
    let ev = g.constant(e.pooled.clone());
    let loss = stage_contrastive_loss_var(&g, qv, ev, cfg)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};

    const CFG: ContrastConfig = ContrastConfig {
        tau: 0.5,
        epsilon_norm: 1e-12,
    };

    fn set(pooled: Tensor<f64>) -> StageFeatureSet<f64> {
        let [k, d] = [pooled.shape()[0], pooled.shape()[1]];
        StageFeatureSet {
            per_stage: Tensor::zeros([k, 1, d]),
            pooled,
        }
    }

    /// Direct transcription of the per-term sums, one exponential at a time.
    fn oracle(q: &Tensor<f64>, e: &Tensor<f64>, tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let term = |a: &Tensor<f64>, b: &Tensor<f64>, i: usize| {
            let k = a.shape()[0];
            let pos = (cos(a.row(i), b.row(i)) / tau).exp();
            let mut neg = 0.0;
            for j in (0..k).filter(|&j| j != i) {
                neg += (cos(a.row(i), b.row(j)) / tau).exp();
                neg += (cos(a.row(i), a.row(j)) / tau).exp();
            }
            -(pos / (pos + neg)).ln()
        };
        let k = q.shape()[0];
        (0..k).map(|i| term(q, e, i) + term(e, q, i)).sum::<f64>() / (2 * k) as f64
    }

    #[test]
    fn similarity_examples() {
        let a = [1.0, 2.0, -0.5];
        assert!((stage_similarity(&a, &a, &CFG) - 1.0).abs() < 1e-12);
        assert!(stage_similarity(&[1.0, 0.0], &[0.0, 3.0], &CFG).abs() < 1e-15);
        assert!((stage_similarity(&a, &a.map(|v| -v), &CFG) + 1.0).abs() < 1e-12);
        assert_eq!(stage_similarity(&[0.0; 3], &a, &CFG), 0.0);
    }

    fn eye(k: usize) -> Tensor<f64> {
        Tensor::from_fn([k, k], |i| if i / k == i % k { 1.0 } else { 0.0 })
    }

    trait Rows {
        fn subset_rows(&self, n: usize) -> Tensor<f64>;
    }

    impl Rows for Tensor<f64> {
        fn subset_rows(&self, n: usize) -> Tensor<f64> {
            let d = self.shape()[1];
            Tensor::new([n, d], self.data()[..n * d].to_vec()).unwrap()
        }
    }

    #[test]
    fn energy_examples() {
        let e2 = 2f64.exp();
        let basis = eye(3);
        assert!((positive_energy(&basis, &basis, 0, &CFG).unwrap() - e2).abs() < 1e-10);
        let neg = basis.map(|v| -v);
        assert!((positive_energy(&basis, &neg, 1, &CFG).unwrap() - (-2f64).exp()).abs() < 1e-12);
        assert!((negative_energy(&basis, &basis, 2, &CFG).unwrap() - 4.0).abs() < 1e-12);

        let same = Tensor::full([3, 4], 1.0);
        assert!((negative_energy(&same, &same, 0, &CFG).unwrap() - 4.0 * e2).abs() < 1e-9);
        assert!((negative_energy(&eye(2), &eye(2), 0, &CFG).unwrap() - 2.0).abs() < 1e-12);

        let one = Tensor::full([1, 4], 1.0);
        assert!(matches!(negative_energy(&one, &one, 0, &CFG), Err(Error::Config(_))));
        assert!(positive_energy(&basis, &basis, 3, &CFG).is_err());
    }

    #[test]
    fn objective_examples() {
        let basis = eye(3);
        let l = pairwise_objective(&basis, &basis, 0, &CFG).unwrap();
        let exact = -(2f64.exp() / (2f64.exp() + 4.0)).ln();
        assert!((l - exact).abs() < 1e-10);
        // The closed form is 0.432653..., quoted elsewhere as 0.43269.
        assert!((l - 0.432_69).abs() < 1e-4, "{l}");
        let same = Tensor::full([3, 4], 0.7);
        let l = pairwise_objective(&same, &same, 2, &CFG).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let opposed = Tensor::new([2, 2], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let l = pairwise_objective(&opposed, &opposed, 0, &CFG).unwrap();
        assert!((l - (1.0 + 2.0 * (-4f64).exp()).ln()).abs() < 1e-10);
        assert!((l - 0.035_974).abs() < 1e-5, "{l}");
    }

    #[test]
    fn loss_examples() {
        let basis = set(eye(3));
        let l = stage_contrastive_loss(&basis, &basis, &CFG).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 4.0)).ln();
        assert!((l - expected).abs() < 1e-10);
        assert!((l - 0.432_69).abs() < 1e-4);

        let same = set(Tensor::full([3, 5], -1.3));
        let l = stage_contrastive_loss(&same, &same, &CFG).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let mismatch = set(Tensor::full([2, 5], 1.0));
        assert!(matches!(
            stage_contrastive_loss(&same, &mismatch, &CFG),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matches_oracle_and_is_symmetric() {
        for seed in 0..100 {
            let k = 2 + (seed as usize % 4);
            let q = random_tensor(&[k, 6], 1.0, 2 * seed);
            let e = random_tensor(&[k, 6], 1.0, 2 * seed + 1);
            let a = stage_contrastive_loss(&set(q.clone()), &set(e.clone()), &CFG).unwrap();
            let b = stage_contrastive_loss(&set(e.clone()), &set(q.clone()), &CFG).unwrap();
            assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
            assert!(a > 0.0);
            assert!((a - oracle(&q, &e, 0.5)).abs() < 1e-10, "seed {seed}");
            let direct: f64 = (0..k)
                .map(|i| pairwise_objective(&q, &e, i, &CFG).unwrap() + pairwise_objective(&e, &q, i, &CFG).unwrap())
                .sum::<f64>()
                / (2 * k) as f64;
            assert!((a - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn scale_invariance() {
        let q = random_tensor(&[3, 5], 1.0, 40);
        let e = random_tensor(&[3, 5], 1.0, 41);
        let base = stage_contrastive_loss(&set(q.clone()), &set(e.clone()), &CFG).unwrap();
        let mut scaled = q.clone();
        for v in &mut scaled.data_mut()[5..10] {
            *v *= 37.5;
        }
        let mut e2 = e.clone();
        e2.scale_assign(0.01);
        let l = stage_contrastive_loss(&set(scaled), &set(e2), &CFG).unwrap();
        assert!((l - base).abs() < 1e-9);
    }

    #[test]
    fn loss_falls_as_negatives_turn_away() {
        // Two stages, identical across videos so positives stay at cosine 1;
        // the second stage rotates from orthogonal to anti-parallel.
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let phi = std::f64::consts::FRAC_PI_2 * (1.0 + step as f64 / 10.0);
            let t = Tensor::new([2, 2], vec![1.0, 0.0, phi.cos(), phi.sin()]).unwrap();
            let l = stage_contrastive_loss(&set(t.clone()), &set(t), &CFG).unwrap();
            assert!(l > 0.0 && l < prev, "step {step}: {l}");
            prev = l;
        }
        let two = Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let cold = ContrastConfig { tau: 0.2, ..CFG };
        let l = stage_contrastive_loss(&set(two.clone()), &set(two), &cold).unwrap();
        assert!((l - (1.0 + 2.0 * (-10f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn raising_one_positive_cosine_lowers_loss() {
        // Stage 1 of the exemplar rotates from an axis orthogonal to every
        // other vector onto the query's stage 1, so only that cosine moves.
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let theta = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 10.0);
            let q = eye(4).subset_rows(3);
            let mut e = q.clone();
            e.set(&[1, 1], theta.cos());
            e.set(&[1, 3], theta.sin());
            let l = stage_contrastive_loss(&set(q.clone()), &set(e.clone()), &CFG).unwrap();
            assert!((stage_similarity(q.row(1), e.row(1), &CFG) - theta.cos()).abs() < 1e-10);
            assert!(l < prev, "step {step}");
            prev = l;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let q = random_tensor(&[3, 5], 1.0, 70);
        let e = random_tensor(&[3, 5], 1.0, 71);
        let r = check_gradients(
            &[q, e],
            |g, v| stage_contrastive_loss_var(g, v[0], v[1], &CFG).unwrap(),
            1e-6,
            None,
        );
        assert!(r.passes(1e-5), "{r:?}");
    }
}
