//! Relative scoring: a cross-attention decoder turns each (query stage,
//! exemplar stage) pair into a difference embedding, and an MLP regresses the
//! concatenated embeddings to a score offset added to the exemplar's score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Init, ParamSpec, Params};
use crate::tensor::{Scalar, Tensor};

pub const PREFIX: &str = "scorer.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    /// Feature width `D`.
    pub dim: usize,
    /// Resampled stage length `M`.
    pub stage_len: usize,
    pub num_stages: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub reg_hidden: usize,
    /// Also decode exemplar-to-query and use half the difference of the two
    /// embeddings.
    pub symmetric: bool,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            stage_len: 16,
            num_stages: 3,
            blocks: 2,
            heads: 4,
            ffn_hidden: 256,
            reg_hidden: 128,
            symmetric: false,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("stage_len", self.stage_len),
            ("num_stages", self.num_stages),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("reg_hidden", self.reg_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("scorer: {name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "scorer: dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, f, r) = (self.dim, self.ffn_hidden, self.reg_hidden);
        let uniform = |fan_in| Init::FanInUniform { fan_in };
        let mut s = vec![ParamSpec::new(
            format!("{PREFIX}pos_embed"),
            [self.stage_len, d],
            uniform(d),
        )];
        for b in 0..self.blocks {
            let p = format!("{PREFIX}block{b}");
            for proj in ["q", "k", "v", "o"] {
                s.push(ParamSpec::new(format!("{p}.attn.w_{proj}"), [d, d], uniform(d)));
                s.push(ParamSpec::new(format!("{p}.attn.b_{proj}"), [d], Init::Zeros));
            }
            s.push(ParamSpec::new(format!("{p}.ffn.w1"), [d, f], uniform(d)));
            s.push(ParamSpec::new(format!("{p}.ffn.b1"), [f], Init::Zeros));
            s.push(ParamSpec::new(format!("{p}.ffn.w2"), [f, d], uniform(f)));
            s.push(ParamSpec::new(format!("{p}.ffn.b2"), [d], Init::Zeros));
        }
        let p = format!("{PREFIX}reg");
        s.push(ParamSpec::new(
            format!("{p}.w1"),
            [self.num_stages * d, r],
            uniform(self.num_stages * d),
        ));
        s.push(ParamSpec::new(format!("{p}.b1"), [r], Init::Zeros));
        s.push(ParamSpec::new(format!("{p}.w2"), [r, r], uniform(r)));
        s.push(ParamSpec::new(format!("{p}.b2"), [r], Init::Zeros));
        // Zero output layer: an untrained model predicts the exemplar's score.
        s.push(ParamSpec::new(format!("{p}.w3"), [r, 1], Init::Zeros));
        s.push(ParamSpec::new(format!("{p}.b3"), [1], Init::Zeros));
        s
    }

    pub fn init<T: Scalar>(&self, rng: &mut impl Rng) -> Result<Params<T>> {
        self.validate()?;
        Ok(Params::init(&self.param_specs(), rng))
    }
}

/// Per-stage difference embeddings `[K_s, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeFeatures<T> {
    pub f_rel: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub s_rel: f64,
    pub s_hat: f64,
    pub exemplar_score: f64,
}

/// Graph outputs of one decoder pass.
pub struct Decoded {
    /// Time-mean of the final block output, `[1, D]`.
    pub pooled: Var,
    /// Attention weights `[M, M]`, block-major then head.
    pub attention: Vec<Var>,
}

fn attention_block<T: Scalar>(
    cfg: &ScorerConfig,
    b: &Binding<T>,
    block: usize,
    x: Var,
    mem: Var,
    attn: &mut Vec<Var>,
) -> Result<Var> {
    let g = b.graph();
    let p = format!("{PREFIX}block{block}");
    let proj = |input: Var, name: &str| -> Result<Var> {
        Ok(g.linear(
            input,
            b.var(&format!("{p}.attn.w_{name}"))?,
            b.var(&format!("{p}.attn.b_{name}"))?,
        ))
    };
    let q = proj(x, "q")?;
    let k = proj(mem, "k")?;
    let v = proj(mem, "v")?;
    let dh = cfg.dim / cfg.heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let a = g.softmax_rows(g.scale(g.matmul_t(qh, kh, false, true), scale));
        attn.push(a);
        heads.push(g.matmul(a, vh));
    }
    let o = proj(g.concat_cols(&heads), "o")?;
    let x = g.add(x, o);
    let hidden = g.silu(g.linear(x, b.var(&format!("{p}.ffn.w1"))?, b.var(&format!("{p}.ffn.b1"))?));
    let ffn = g.linear(hidden, b.var(&format!("{p}.ffn.w2"))?, b.var(&format!("{p}.ffn.b2"))?);
    Ok(g.add(x, ffn))
}

fn decode_once<T: Scalar>(cfg: &ScorerConfig, b: &Binding<T>, fq: Var, fe: Var) -> Result<Decoded> {
    let g = b.graph();
    let pos = b.var(&format!("{PREFIX}pos_embed"))?;
    let mut x = g.add(fq, pos);
    let mem = g.add(fe, pos);
    let mut attention = Vec::with_capacity(cfg.blocks * cfg.heads);
    for block in 0..cfg.blocks {
        x = attention_block(cfg, b, block, x, mem, &mut attention)?;
    }
    Ok(Decoded {
        pooled: g.mean_rows(x),
        attention,
    })
}

/// Query stage `[M, D]` attends over exemplar stage `[M, D]`; returns the
/// pooled difference embedding.
pub fn decode_stage_difference_var<T: Scalar>(cfg: &ScorerConfig, b: &Binding<T>, fq: Var, fe: Var) -> Result<Decoded> {
    let g = b.graph();
    let (qs, es) = (g.shape(fq), g.shape(fe));
    let expected = [cfg.stage_len, cfg.dim];
    if qs != expected || es != expected {
        return Err(Error::Shape(format!(
            "decoder expects two {expected:?} stages, got {qs:?} and {es:?}"
        )));
    }
    let forward = decode_once(cfg, b, fq, fe)?;
    if !cfg.symmetric {
        return Ok(forward);
    }
    let backward = decode_once(cfg, b, fe, fq)?;
    let mut attention = forward.attention;
    attention.extend(backward.attention);
    Ok(Decoded {
        pooled: g.scale(g.sub(forward.pooled, backward.pooled), T::from_f64_lossy(0.5)),
        attention,
    })
}

/// Pooled decoder output `[D]` plus every attention map.
pub fn decode_stage_difference<T: Scalar>(
    fq: &Tensor<T>,
    fe: &Tensor<T>,
    params: &Params<T>,
    cfg: &ScorerConfig,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let g = Graph::new();
    let b = Binding::frozen(&g, params);
    let d = decode_stage_difference_var(cfg, &b, g.constant(fq.clone()), g.constant(fe.clone()))?;
    let pooled = g.value(d.pooled).as_ref().clone().reshape([cfg.dim])?;
    let attn = d.attention.iter().map(|&a| g.value(a).as_ref().clone()).collect();
    Ok((pooled, attn))
}

/// Stacks per-stage decoder outputs into `[K_s, D]`.
pub fn relative_features_var<T: Scalar>(
    cfg: &ScorerConfig,
    b: &Binding<T>,
    query: &[Var],
    exemplar: &[Var],
) -> Result<Var> {
    if query.len() != cfg.num_stages || exemplar.len() != cfg.num_stages {
        return Err(Error::Shape(format!(
            "expected {} stages, got {} and {}",
            cfg.num_stages,
            query.len(),
            exemplar.len()
        )));
    }
    let rows = query
        .iter()
        .zip(exemplar)
        .map(|(&q, &e)| decode_stage_difference_var(cfg, b, q, e).map(|d| d.pooled))
        .collect::<Result<Vec<_>>>()?;
    Ok(b.graph().concat_rows(&rows))
}

/// MLP on the flattened `[K_s, D]` embeddings; returns a `[1, 1]` node.
pub fn regress_relative_score_var<T: Scalar>(cfg: &ScorerConfig, b: &Binding<T>, f_rel: Var) -> Result<Var> {
    let g = b.graph();
    let width = cfg.num_stages * cfg.dim;
    if g.shape(f_rel).iter().product::<usize>() != width {
        return Err(Error::Shape(format!(
            "regressor expects {width} inputs, got {:?}",
            g.shape(f_rel)
        )));
    }
    let p = format!("{PREFIX}reg");
    let w = |n: &str| b.var(&format!("{p}.{n}"));
    let x = g.reshape(f_rel, &[1, width]);
    let h1 = g.silu(g.linear(x, w("w1")?, w("b1")?));
    let h2 = g.silu(g.linear(h1, w("w2")?, w("b2")?));
    Ok(g.linear(h2, w("w3")?, w("b3")?))
}

pub fn regress_relative_score<T: Scalar>(
    f_rel: &RelativeFeatures<T>,
    params: &Params<T>,
    cfg: &ScorerConfig,
) -> Result<f64> {
    let g = Graph::new();
    let b = Binding::frozen(&g, params);
    let out = regress_relative_score_var(cfg, &b, g.constant(f_rel.f_rel.clone()))?;
    Ok(g.scalar(out))
}

pub fn predict_score(exemplar_score: f64, s_rel: f64) -> ScorePrediction {
    ScorePrediction {
        s_rel,
        s_hat: exemplar_score + s_rel,
        exemplar_score,
    }
}

/// Mean squared error over the batch.
pub fn aqa_loss(true_scores: &[f64], predicted: &[f64]) -> Result<f64> {
    if true_scores.is_empty() || true_scores.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "aqa loss needs equal non-empty batches, got {} and {}",
            true_scores.len(),
            predicted.len()
        )));
    }
    let sum: f64 = true_scores.iter().zip(predicted).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(sum / true_scores.len() as f64)
}

/// Graph-level [`aqa_loss`]: `predicted` holds `[1, 1]` score nodes.
pub fn aqa_loss_var<T: Scalar>(g: &Graph<T>, true_scores: &[f64], predicted: &[Var]) -> Result<Var> {
    if true_scores.is_empty() || true_scores.len() != predicted.len() {
        return Err(Error::InvalidArgument("aqa loss needs equal non-empty batches".into()));
    }
    let errs: Vec<Var> = predicted
        .iter()
        .zip(true_scores)
        .map(|(&p, &t)| g.square(g.add_scalar(g.reshape(p, &[1, 1]), T::from_f64_lossy(-t))))
        .collect();
    let n = T::from_f64_lossy(1.0 / errs.len() as f64);
    Ok(g.scale(g.sum(g.concat_rows(&errs)), n))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor, weighted_sum};

    fn cfg(m: usize, d: usize, heads: usize, blocks: usize) -> ScorerConfig {
        ScorerConfig {
            dim: d,
            stage_len: m,
            num_stages: 2,
            blocks,
            heads,
            ffn_hidden: 5,
            reg_hidden: 4,
            symmetric: false,
        }
    }

    fn random_params(c: &ScorerConfig, seed: u64) -> Params<f64> {
        let mut p: Params<f64> = c.init(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // Exercise every path, including the zero-initialized output layer.
        for (i, (_, t)) in p.iter_mut().enumerate() {
            let r = random_tensor(t.shape(), 0.5, seed * 100 + i as u64);
            *t = r;
        }
        p
    }

    fn set(p: &mut Params<f64>, name: &str, f: impl Fn(usize, &[usize]) -> f64) {
        let t = p.get_mut(&format!("{PREFIX}{name}")).unwrap();
        let shape = t.shape().to_vec();
        *t = Tensor::from_fn(shape.clone(), |i| f(i, &shape));
    }

    #[test]
    fn hand_example_uniform_attention() {
        let c = cfg(2, 2, 1, 1);
        let mut p = random_params(&c, 1);
        let identity = |i: usize, s: &[usize]| if i / s[1] == i % s[1] { 1.0 } else { 0.0 };
        let zero = |_: usize, _: &[usize]| 0.0;
        set(&mut p, "block0.attn.w_v", identity);
        set(&mut p, "block0.attn.w_o", identity);
        for name in [
            "pos_embed",
            "block0.attn.w_k",
            "block0.attn.b_v",
            "block0.attn.b_o",
            "block0.ffn.w2",
            "block0.ffn.b2",
        ] {
            set(&mut p, name, zero);
        }
        let fq = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fe = Tensor::new([2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let (pooled, attn) = decode_stage_difference(&fq, &fe, &p, &c).unwrap();
        // Block output rows: [1+6, 2+7] and [3+6, 4+7]; their mean is [8, 10].
        assert_eq!(pooled.data(), &[8.0, 10.0]);
        assert_eq!(attn.len(), 1);
        assert!(attn[0].data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut c = cfg(5, 8, 4, 2);
        c.symmetric = true;
        let p = random_params(&c, 2);
        let (pooled, attn) =
            decode_stage_difference(&random_tensor(&[5, 8], 1.0, 3), &random_tensor(&[5, 8], 1.0, 4), &p, &c).unwrap();
        assert_eq!(pooled.shape(), &[8]);
        assert_eq!(attn.len(), 2 * 2 * 4);
        for a in &attn {
            assert_eq!(a.shape(), &[5, 5]);
            for i in 0..5 {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_keys_make_exemplar_order_irrelevant() {
        let c = cfg(4, 4, 2, 2);
        let mut p = random_params(&c, 5);
        for block in 0..2 {
            set(&mut p, &format!("block{block}.attn.w_k"), |_, _| 0.0);
        }
        set(&mut p, "pos_embed", |_, _| 0.0);
        let fq = random_tensor(&[4, 4], 1.0, 6);
        let fe = random_tensor(&[4, 4], 1.0, 7);
        let perm = [2, 0, 3, 1];
        let fe_perm = Tensor::from_fn([4, 4], |i| fe.get(&[perm[i / 4], i % 4]));
        let (a, _) = decode_stage_difference(&fq, &fe, &p, &c).unwrap();
        let (b, _) = decode_stage_difference(&fq, &fe_perm, &p, &c).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let c = cfg(4, 4, 2, 1);
        let p = random_params(&c, 8);
        assert!(matches!(
            decode_stage_difference(&Tensor::zeros([4, 4]), &Tensor::zeros([3, 4]), &p, &c),
            Err(Error::Shape(_))
        ));
        let bad = RelativeFeatures {
            f_rel: Tensor::zeros([3, 4]),
        };
        assert!(matches!(regress_relative_score(&bad, &p, &c), Err(Error::Shape(_))));
        assert!(matches!(
            ScorerConfig { heads: 3, ..c }.validate(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decoder_gradient() {
        let c = cfg(3, 4, 2, 1);
        let p = random_params(&c, 9);
        let names: Vec<String> = p.names().filter(|n| !n.contains(".reg.")).cloned().collect();
        let mut inputs = vec![random_tensor(&[3, 4], 1.0, 10), random_tensor(&[3, 4], 1.0, 11)];
        inputs.extend(names.iter().map(|n| p.get(n).unwrap().clone()));
        let r = check_gradients(
            &inputs,
            |g, v| {
                let b = Binding::from_vars(g, names.iter().cloned().zip(v[2..].iter().copied()));
                weighted_sum(g, decode_stage_difference_var(&c, &b, v[0], v[1]).unwrap().pooled, 12)
            },
            1e-6,
            None,
        );
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn regressor_examples_and_gradient() {
        let c = cfg(3, 4, 2, 1);
        let mut p = random_params(&c, 13);
        let x = RelativeFeatures {
            f_rel: random_tensor(&[2, 4], 1.0, 14),
        };
        let zero = RelativeFeatures {
            f_rel: Tensor::zeros([2, 4]),
        };
        let scaled = RelativeFeatures {
            f_rel: x.f_rel.map(|v| v * 0.0),
        };
        assert_eq!(
            regress_relative_score(&scaled, &p, &c).unwrap(),
            regress_relative_score(&zero, &p, &c).unwrap()
        );

        let names: Vec<String> = p.names().filter(|n| n.contains(".reg.")).cloned().collect();
        let mut inputs = vec![x.f_rel.clone()];
        inputs.extend(names.iter().map(|n| p.get(n).unwrap().clone()));
        let r = check_gradients(
            &inputs,
            |g, v| {
                let b = Binding::from_vars(g, names.iter().cloned().zip(v[1..].iter().copied()));
                regress_relative_score_var(&c, &b, v[0]).unwrap()
            },
            1e-6,
            None,
        );
        assert!(r.passes(1e-5), "{r:?}");

        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(regress_relative_score(&x, &p, &c).unwrap(), 0.0);
    }

    #[test]
    fn score_composition_and_loss() {
        assert_eq!(predict_score(80.0, 5.0).s_hat, 85.0);
        assert_eq!(predict_score(42.25, 0.0).s_hat, 42.25);
        assert_eq!(predict_score(90.0, -7.5).s_hat, 82.5);
        let p = predict_score(7.3, 0.1);
        assert_eq!(p.s_hat - p.exemplar_score, 0.1 + 7.3 - 7.3);

        assert_eq!(aqa_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(aqa_loss(&[80.0], &[90.0]).unwrap(), 100.0);
        assert_eq!(aqa_loss(&[0.0, 10.0], &[3.0, 6.0]).unwrap(), 12.5);
        assert!(aqa_loss(&[], &[]).is_err());

        let g = Graph::<f64>::new();
        let preds = [g.constant(Tensor::scalar(3.0)), g.constant(Tensor::scalar(6.0))];
        assert_eq!(g.scalar(aqa_loss_var(&g, &[0.0, 10.0], &preds).unwrap()), 12.5);
    }

    #[test]
    fn end_to_end_gradient_wrt_query_stage() {
        let c = cfg(3, 4, 2, 1);
        let p = random_params(&c, 15);
        let other = [
            random_tensor(&[3, 4], 1.0, 16),
            random_tensor(&[3, 4], 1.0, 17),
            random_tensor(&[3, 4], 1.0, 18),
        ];
        let r = check_gradients(
            &[random_tensor(&[3, 4], 1.0, 19)],
            |g, v| {
                let b = Binding::frozen(g, &p);
                let q1 = g.constant(other[0].clone());
                let e0 = g.constant(other[1].clone());
                let e1 = g.constant(other[2].clone());
                let f_rel = relative_features_var(&c, &b, &[v[0], q1], &[e0, e1]).unwrap();
                let s_rel = regress_relative_score_var(&c, &b, f_rel).unwrap();
                let s_hat = g.add_scalar(s_rel, 6.5);
                aqa_loss_var(g, &[7.0], &[s_hat]).unwrap()
            },
            1e-6,
            None,
        );
        assert!(r.passes(1e-4), "{r:?}");
    }
}
