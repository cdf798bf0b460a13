//! Normalization-based attention: a channel gate driven by batch-norm scale
//! factors, followed by a spatial gate driven by pixel-norm scale factors.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, Ctx};
use crate::nn::{ops, ParamStore};

pub const NAM_EPS: f64 = 1e-5;

/// A single `C x H x W` feature map, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 || data.len() != c * h * w {
            return Err(Error::Shape(format!("{} values for a {c}x{h}x{w} map", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[ch * hw..(ch + 1) * hw]
    }
}

/// Batch-norm parameters and running statistics for one channel gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl BnParams {
    pub fn identity(c: usize) -> Self {
        BnParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            epsilon: NAM_EPS,
        }
    }

    fn check(&self, c: usize) -> Result<()> {
        let lens = [self.gamma.len(), self.beta.len(), self.running_mean.len(), self.running_var.len()];
        if lens.iter().any(|&l| l != c) {
            return Err(Error::Shape(format!("normalization parameters {lens:?} for {c} channels")));
        }
        if self.running_var.iter().any(|&v| v < 0.0) || self.epsilon <= 0.0 {
            return Err(Error::Config("running variance must be >= 0 and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Pixel-normalization parameters for the spatial gate; `lambda_scale` plays
/// the role of the batch-norm scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelNormParams {
    pub lambda_scale: Vec<f64>,
    pub beta_s: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl PixelNormParams {
    pub fn identity(c: usize) -> Self {
        let b = BnParams::identity(c);
        PixelNormParams {
            lambda_scale: b.gamma,
            beta_s: b.beta,
            running_mean: b.running_mean,
            running_var: b.running_var,
            epsilon: b.epsilon,
        }
    }

    fn as_bn(&self) -> BnParams {
        BnParams {
            gamma: self.lambda_scale.clone(),
            beta: self.beta_s.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            epsilon: self.epsilon,
        }
    }
}

/// `s_i / sum_j s_j`; rejects a zero sum. Negative entries are allowed.
pub fn scale_weights(scales: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = scales.iter().sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(Error::ZeroScaleSum);
    }
    Ok(scales.iter().map(|s| s / sum).collect())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gate values `sigmoid(W * BN(f))`, same layout as `f`.
pub fn gate(f: &FeatureMap, p: &BnParams) -> Result<Vec<f64>> {
    p.check(f.c)?;
    let w = scale_weights(&p.gamma)?;
    let hw = f.h * f.w;
    let mut out = Vec::with_capacity(f.data.len());
    for ch in 0..f.c {
        let inv = 1.0 / (p.running_var[ch] + p.epsilon).sqrt();
        for &v in f.plane(ch) {
            let bn = p.gamma[ch] * (v - p.running_mean[ch]) * inv + p.beta[ch];
            out.push(sigmoid(w[ch] * bn));
        }
    }
    debug_assert_eq!(out.len(), f.c * hw);
    Ok(out)
}

fn apply(f: &FeatureMap, g: &[f64]) -> FeatureMap {
    FeatureMap {
        data: f.data.iter().zip(g).map(|(a, b)| a * b).collect(),
        ..f.clone()
    }
}

pub fn channel_attention(f: &FeatureMap, p: &BnParams) -> Result<FeatureMap> {
    Ok(apply(f, &gate(f, p)?))
}

pub fn spatial_attention(f: &FeatureMap, p: &PixelNormParams) -> Result<FeatureMap> {
    Ok(apply(f, &gate(f, &p.as_bn())?))
}

pub fn nam(f: &FeatureMap, cp: &BnParams, sp: &PixelNormParams) -> Result<FeatureMap> {
    spatial_attention(&channel_attention(f, cp)?, sp)
}

/// One normalized gate inside the network.
#[derive(Debug, Clone)]
struct GateLayer {
    bn: BatchNorm2d,
}

impl GateLayer {
    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let scale = ctx.p(&self.bn.gamma, self.bn.group);
        let shift = ctx.p(&self.bn.beta, self.bn.group);
        let sum = scale.to_dtype(candle_core::DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        if sum == 0.0 {
            return Err(Error::ZeroScaleSum);
        }
        let normed = self.bn.forward_with(x, &scale, &shift, ctx)?;
        let w = scale.broadcast_div(&scale.sum_all()?)?.reshape((1, (), 1, 1))?;
        let g = ops::sigmoid(&normed.broadcast_mul(&w)?)?;
        Ok((x * g)?)
    }
}

/// The attention module as a network layer: channel gate then spatial gate.
#[derive(Debug, Clone)]
pub struct Nam {
    channel: GateLayer,
    spatial: GateLayer,
}

impl Nam {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        ps.push(name);
        let channel = GateLayer {
            bn: BatchNorm2d::new(ps, "channel", c)?,
        };
        let spatial = GateLayer {
            bn: BatchNorm2d::new(ps, "spatial", c)?,
        };
        ps.pop();
        Ok(Nam { channel, spatial })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.spatial.forward(&self.channel.forward(x, ctx)?, ctx)
    }
}
