//! Per-frame 2-D convolutional feature extractor with gated temporal shifts.
//!
//! Each stage is `conv3x3/stride -> GN -> SiLU -> [gate shift] -> conv3x3 ->
//! GN -> SiLU`. A global spatial average and a linear head turn every frame
//! into a `D`-dimensional feature. Without gate shifts the network sees each
//! frame in isolation; the gate shift lets part of every activation move one
//! frame forward or backward in time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Init, ParamSpec, Params};
use crate::tensor::{Scalar, Tensor};

pub const PREFIX: &str = "backbone.";
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Gate shift before the last conv of each stage.
    pub gate_shift: Vec<bool>,
    pub feature_dim: usize,
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 32,
            width: 32,
            widths: vec![32, 64, 96, 128],
            strides: vec![2, 2, 2, 2],
            gate_shift: vec![true; 4],
            feature_dim: 128,
            norm_groups: 4,
        }
    }
}

/// Per-frame features `[L, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> FrameFeatures<T> {
    pub fn num_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.in_channels == 0 || self.height == 0 || self.width == 0 || self.feature_dim == 0 {
            return err("input dims and feature_dim must be positive".into());
        }
        if self.widths.is_empty() {
            return err("at least one stage is required".into());
        }
        if self.strides.len() != self.widths.len() || self.gate_shift.len() != self.widths.len() {
            return err("widths, strides and gate_shift must have equal length".into());
        }
        if self.norm_groups == 0 {
            return err("norm_groups must be positive".into());
        }
        for (i, (&w, &s)) in self.widths.iter().zip(&self.strides).enumerate() {
            if w == 0 || s == 0 {
                return err(format!("stage {i} has zero width or stride"));
            }
            if w % self.norm_groups != 0 {
                return err(format!(
                    "stage {i} width {w} not divisible by {} groups",
                    self.norm_groups
                ));
            }
            if self.gate_shift[i] && w % 2 != 0 {
                return err(format!("stage {i} width {w} must be even for the gate shift"));
            }
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            let p = format!("{PREFIX}stage{i}");
            specs.push(ParamSpec::new(
                format!("{p}.conv_a.weight"),
                [w, c_in, 3, 3],
                Init::FanInUniform { fan_in: c_in * 9 },
            ));
            specs.push(ParamSpec::new(format!("{p}.conv_a.bias"), [w], Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.norm_a.gamma"), [w], Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.norm_a.beta"), [w], Init::Zeros));
            if self.gate_shift[i] {
                specs.push(ParamSpec::new(
                    format!("{p}.gate.weight"),
                    [2, w, 3, 3],
                    Init::FanInUniform { fan_in: w * 9 },
                ));
                specs.push(ParamSpec::new(format!("{p}.gate.bias"), [2], Init::Zeros));
            }
            specs.push(ParamSpec::new(
                format!("{p}.conv_b.weight"),
                [w, w, 3, 3],
                Init::FanInUniform { fan_in: w * 9 },
            ));
            specs.push(ParamSpec::new(format!("{p}.conv_b.bias"), [w], Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.norm_b.gamma"), [w], Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.norm_b.beta"), [w], Init::Zeros));
            c_in = w;
        }
        specs.push(ParamSpec::new(
            format!("{PREFIX}head.weight"),
            [c_in, self.feature_dim],
            Init::FanInUniform { fan_in: c_in },
        ));
        specs.push(ParamSpec::new(
            format!("{PREFIX}head.bias"),
            [self.feature_dim],
            Init::Zeros,
        ));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }
}

/// Fan-in scaled uniform weights, zero biases, unit norm gains.
pub fn init_backbone<T: Scalar>(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Params<T>> {
    cfg.validate()?;
    Ok(Params::init(&cfg.param_specs(), rng))
}

/// Gate shift of `x: [L, C, H, W]`: a 3x3 conv produces two gate planes,
/// squashed by tanh, one per channel half.
pub fn gate_shift<T: Scalar>(g: &Graph<T>, x: Var, gate_weight: Var, gate_bias: Var) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::Shape(format!("gate_shift needs [L>=1, C, H, W], got {shape:?}")));
    }
    if shape[1] % 2 != 0 {
        return Err(Error::Shape(format!(
            "gate_shift needs an even channel count, got {}",
            shape[1]
        )));
    }
    let gate = g.conv2d(x, gate_weight, gate_bias, Conv2dSpec { stride: 1, pad: 1 });
    let gate = g.tanh(gate);
    Ok(g.gate_shift(x, gate))
}

/// Graph-level forward: `frames: [L, C, H, W]` -> `[L, D]`.
pub fn forward<T: Scalar>(cfg: &BackboneConfig, b: &Binding<T>, frames: Var) -> Result<Var> {
    let g = b.graph();
    let shape = g.shape(frames);
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.height || shape[3] != cfg.width {
        return Err(Error::Shape(format!(
            "backbone expects [L, {}, {}, {}], got {shape:?}",
            cfg.in_channels, cfg.height, cfg.width
        )));
    }
    let mut x = frames;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let p = format!("{PREFIX}stage{i}");
        let v = |n: &str| b.var(&format!("{p}.{n}"));
        x = g.conv2d(x, v("conv_a.weight")?, v("conv_a.bias")?, Conv2dSpec { stride, pad: 1 });
        x = g.group_norm(x, v("norm_a.gamma")?, v("norm_a.beta")?, cfg.norm_groups, NORM_EPS);
        x = g.silu(x);
        if cfg.gate_shift[i] {
            x = gate_shift(g, x, v("gate.weight")?, v("gate.bias")?)?;
        }
        x = g.conv2d(
            x,
            v("conv_b.weight")?,
            v("conv_b.bias")?,
            Conv2dSpec { stride: 1, pad: 1 },
        );
        x = g.group_norm(x, v("norm_b.gamma")?, v("norm_b.beta")?, cfg.norm_groups, NORM_EPS);
        x = g.silu(x);
    }
    let pooled = g.global_avg_pool(x);
    Ok(g.linear(
        pooled,
        b.var(&format!("{PREFIX}head.weight"))?,
        b.var(&format!("{PREFIX}head.bias"))?,
    ))
}

/// Inference-only feature extraction.
pub fn extract_features<T: Scalar>(
    frames: &Tensor<T>,
    params: &Params<T>,
    cfg: &BackboneConfig,
) -> Result<FrameFeatures<T>> {
    if !frames.all_finite() {
        return Err(Error::Numeric("non-finite input frames".into()));
    }
    let g = Graph::new();
    let b = Binding::frozen(&g, params);
    let x = g.constant(frames.clone());
    let out = forward(cfg, &b, x)?;
    Ok(FrameFeatures {
        values: g.value(out).as_ref().clone(),
    })
}
