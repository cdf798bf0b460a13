use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objectness loss settings: focal shape, balance factor, rank mining and
/// L2 smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShemConfig {
    pub focal_gamma: f64,
    /// Weight on positive labels; 1 disables it.
    pub focal_alpha: f64,
    pub xi: f64,
    pub top_k_percent: f64,
    /// Finest scale first.
    pub scale_weights: Vec<f64>,
    pub reg_lambda: f64,
}

impl Default for ShemConfig {
    fn default() -> Self {
        ShemConfig {
            focal_gamma: 1.5,
            focal_alpha: 1.0,
            xi: 1.5,
            top_k_percent: 70.0,
            scale_weights: vec![4.0, 1.0, 0.4, 0.1],
            reg_lambda: 5e-9,
        }
    }
}

impl ShemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!("focal_gamma {} must be >= 0", self.focal_gamma)));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(Error::Config(format!("focal_alpha {} outside (0, 1]", self.focal_alpha)));
        }
        check_xi(self.xi)?;
        check_top_k(self.top_k_percent)?;
        check_weights(&self.scale_weights)?;
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return Err(Error::Config(format!("reg_lambda {} must be >= 0", self.reg_lambda)));
        }
        Ok(())
    }

    /// The weights of the first `n` scales. A four-entry list serves a
    /// three-scale head by dropping the coarsest entry.
    pub fn weights_for(&self, n: usize) -> Result<&[f64]> {
        if self.scale_weights.len() < n {
            return Err(Error::Config(format!(
                "{} scale weights for {n} scales",
                self.scale_weights.len()
            )));
        }
        let w = &self.scale_weights[..n];
        check_weights(w)?;
        Ok(w)
    }
}

fn check_xi(xi: f64) -> Result<()> {
    if xi > 1.0 && xi.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("balance factor xi must exceed 1, got {xi}")))
    }
}

fn check_top_k(k: f64) -> Result<()> {
    if k > 0.0 && k <= 100.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("top_k_percent {k} outside (0, 100]")))
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("scale weights must be finite and >= 0: {w:?}")));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("scale weights sum to zero".into()));
    }
    Ok(())
}

/// Balanced focal loss: every entry scaled by `xi`.
pub fn bfl(losses: &[f64], xi: f64) -> Result<Vec<f64>> {
    check_xi(xi)?;
    Ok(losses.iter().map(|l| xi * l).collect())
}

/// `ceil(k_percent / 100 * n)`, at least one for non-empty input. Products
/// within 1e-9 of an integer count as that integer.
pub fn top_k_count(n: usize, k_percent: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let x = k_percent * n as f64 / 100.0;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).clamp(1, n)
}

fn rank_order(values: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest values, largest first; equal values keep
/// index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let order = rank_order(values);
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, &order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&order);
    idx
}

/// Rank-mined loss with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Lrm {
    pub value: f64,
    /// Mean of the kept values per scale (0 for an empty scale).
    pub per_scale: Vec<f64>,
    /// Derivative of `value` with respect to every input entry.
    pub grads: Vec<Vec<f64>>,
}

/// Loss-rank mining: per scale keep the top `top_k_percent` of the values,
/// average them, and combine the scale means with `scale_weights`.
pub fn lrm<S: AsRef<[f64]>>(per_scale: &[S], top_k_percent: f64, scale_weights: &[f64]) -> Result<f64> {
    Ok(lrm_with_grad(per_scale, top_k_percent, scale_weights)?.value)
}

pub fn lrm_with_grad<S: AsRef<[f64]>>(per_scale: &[S], top_k_percent: f64, scale_weights: &[f64]) -> Result<Lrm> {
    check_top_k(top_k_percent)?;
    if per_scale.len() != scale_weights.len() {
        return Err(Error::Config(format!(
            "{} loss scales but {} scale weights",
            per_scale.len(),
            scale_weights.len()
        )));
    }
    check_weights(scale_weights)?;
    let mut weights = scale_weights.to_vec();
    let mut means = Vec::with_capacity(per_scale.len());
    let mut kept = Vec::with_capacity(per_scale.len());
    for (s, values) in per_scale.iter().enumerate() {
        let values = values.as_ref();
        if values.is_empty() {
            log::warn!("scale {s} has no loss entries; dropping its weight");
            weights[s] = 0.0;
            means.push(0.0);
            kept.push(Vec::new());
            continue;
        }
        let idx = top_k_indices(values, top_k_count(values.len(), top_k_percent));
        let sum: f64 = idx.iter().map(|&i| values[i]).sum();
        means.push(sum / idx.len() as f64);
        kept.push(idx);
    }
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return Err(Error::Config("every weighted scale is empty".into()));
    }
    let value = weights.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>() / total_w;
    let grads = per_scale
        .iter()
        .zip(&kept)
        .zip(&weights)
        .map(|((values, idx), w)| {
            let mut g = vec![0.0; values.as_ref().len()];
            if !idx.is_empty() {
                let d = w / (total_w * idx.len() as f64);
                for &i in idx {
                    g[i] = d;
                }
            }
            g
        })
        .collect();
    Ok(Lrm {
        value,
        per_scale: means,
        grads,
    })
}

/// Sum of squares over a set of weight tensors.
pub fn squared_norm<W: AsRef<[f64]>>(weights: &[W]) -> f64 {
    weights.iter().flat_map(|w| w.as_ref().iter()).map(|v| v * v).sum()
}

/// Rank mining over the balanced focal losses plus `reg_lambda * |w|^2`.
pub fn shem<S: AsRef<[f64]>, W: AsRef<[f64]>>(per_scale: &[S], cfg: &ShemConfig, model_weights: &[W]) -> Result<f64> {
    let scaled = per_scale
        .iter()
        .map(|s| bfl(s.as_ref(), cfg.xi))
        .collect::<Result<Vec<_>>>()?;
    let w = cfg.weights_for(per_scale.len())?;
    Ok(lrm(&scaled, cfg.top_k_percent, w)? + cfg.reg_lambda * squared_norm(model_weights))
}

/// [`shem`] without the penalty, differentiated with respect to the
/// unscaled focal losses.
pub fn shem_with_grad<S: AsRef<[f64]>>(per_scale: &[S], cfg: &ShemConfig) -> Result<Lrm> {
    let scaled = per_scale
        .iter()
        .map(|s| bfl(s.as_ref(), cfg.xi))
        .collect::<Result<Vec<_>>>()?;
    let mut out = lrm_with_grad(&scaled, cfg.top_k_percent, cfg.weights_for(per_scale.len())?)?;
    for g in out.grads.iter_mut().flatten() {
        *g *= cfg.xi;
    }
    Ok(out)
}
