//! Detection losses: focal objectness and classification, rank-mined
//! objectness with L2 smoothing, and CIoU box regression.

mod assign;
mod ciou;
mod dual;
mod focal;
mod rank;

use serde::{Deserialize, Serialize};

pub use self::assign::{assign_targets, Positive, ANCHOR_RATIO};
pub use self::ciou::{box_loss_from_logits, ciou_loss, ciou_with_grad, ciou_xywh};
pub use self::focal::{focal_loss, focal_with_grad, PROB_CLAMP};
pub use self::rank::{
    bfl, lrm, lrm_with_grad, shem, shem_with_grad, squared_norm, top_k_count, top_k_indices, Lrm, ShemConfig,
};

use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::model::DetectionOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectnessMode {
    /// Balanced focal losses, rank-mined per scale, plus the L2 penalty.
    Shem,
    /// Scale-weighted mean of plain focal losses.
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub objectness: ObjectnessMode,
    pub shem: ShemConfig,
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    pub anchor_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            objectness: ObjectnessMode::Shem,
            shem: ShemConfig::default(),
            box_weight: 0.05,
            obj_weight: 1.0,
            cls_weight: 0.5,
            anchor_ratio: ANCHOR_RATIO,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.shem.validate()?;
        for (name, v) in [("box_weight", self.box_weight), ("obj_weight", self.obj_weight), ("cls_weight", self.cls_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be >= 0")));
            }
        }
        if !(self.anchor_ratio > 1.0) {
            return Err(Error::Config(format!("anchor_ratio {} must exceed 1", self.anchor_ratio)));
        }
        Ok(())
    }

    /// Coefficient of the squared weight norm in the total loss.
    pub fn reg_lambda(&self) -> f64 {
        match self.objectness {
            ObjectnessMode::Shem => self.shem.reg_lambda,
            ObjectnessMode::Focal => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub box_ciou: f64,
    pub objectness: f64,
    pub classification: f64,
    pub regularization: f64,
    pub total: f64,
    pub per_scale_objectness: Vec<f64>,
}

/// Loss values and the gradient of `total` with respect to every raw head
/// output, laid out like [`crate::model::ScaleGrid::data`].
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
    pub positives: usize,
}

/// Objectness term over per-element focal losses.
pub fn objectness_term<S: AsRef<[f64]>>(per_scale: &[S], mode: ObjectnessMode, cfg: &ShemConfig) -> Result<Lrm> {
    match mode {
        ObjectnessMode::Shem => shem_with_grad(per_scale, cfg),
        ObjectnessMode::Focal => lrm_with_grad(per_scale, 100.0, cfg.weights_for(per_scale.len())?),
    }
}

/// Box, objectness and classification losses for a batch. `weight_sq_norm`
/// is the squared norm of the regularized weights; its gradient
/// (`2 * reg_lambda * w`) is left to the caller.
pub fn total_loss(
    out: &DetectionOutput,
    targets: &[Vec<BoundingBox>],
    cfg: &LossConfig,
    weight_sq_norm: f64,
) -> Result<LossOutput> {
    let positives = assign_targets(out, targets, cfg.anchor_ratio)?;
    let gamma = cfg.shem.focal_gamma;
    let alpha = cfg.shem.focal_alpha;
    let mut grads: Vec<Vec<f64>> = out.scales.iter().map(|s| vec![0.0; s.data.len()]).collect();

    let mut obj_target: Vec<Vec<bool>> = out.scales.iter().map(|s| vec![false; s.data.len() / s.k]).collect();
    let mut box_sum = 0.0;
    let mut cls_sum = 0.0;
    let npos = positives.len();
    let nc = out.scales.first().map_or(1, |s| s.k - 5);
    for p in &positives {
        let s = &out.scales[p.scale];
        let base = s.index(p.batch, p.anchor, p.gy, p.gx);
        obj_target[p.scale][base / s.k] = true;
        let t = &s.data[base..base + s.k];
        let (l, g) = box_loss_from_logits([t[0], t[1], t[2], t[3]], p.anchor_wh, p.target);
        box_sum += l;
        let gs = &mut grads[p.scale][base..base + s.k];
        for i in 0..4 {
            gs[i] += cfg.box_weight * g[i] / npos as f64;
        }
        for c in 0..nc {
            let (l, g) = focal_with_grad(t[5 + c], c == p.class_id as usize, gamma, alpha);
            cls_sum += l;
            gs[5 + c] += cfg.cls_weight * g / (npos * nc) as f64;
        }
    }
    let (box_ciou, classification) = if npos > 0 {
        (box_sum / npos as f64, cls_sum / (npos * nc) as f64)
    } else {
        (0.0, 0.0)
    };

    let mut obj_losses = Vec::with_capacity(out.scales.len());
    let mut obj_dz = Vec::with_capacity(out.scales.len());
    for (s, tgt) in out.scales.iter().zip(&obj_target) {
        let (l, d): (Vec<f64>, Vec<f64>) = tgt
            .iter()
            .enumerate()
            .map(|(cell, &y)| focal_with_grad(s.data[cell * s.k + 4], y, gamma, alpha))
            .unzip();
        obj_losses.push(l);
        obj_dz.push(d);
    }
    let obj = objectness_term(&obj_losses, cfg.objectness, &cfg.shem)?;
    for (si, s) in out.scales.iter().enumerate() {
        for (cell, (&dl, &dz)) in obj.grads[si].iter().zip(&obj_dz[si]).enumerate() {
            if dl != 0.0 {
                grads[si][cell * s.k + 4] += cfg.obj_weight * dl * dz;
            }
        }
    }

    let regularization = cfg.reg_lambda() * weight_sq_norm;
    let total = cfg.box_weight * box_ciou + cfg.obj_weight * obj.value + cfg.cls_weight * classification + regularization;
    Ok(LossOutput {
        breakdown: LossBreakdown {
            box_ciou,
            objectness: obj.value,
            classification,
            regularization,
            total,
            per_scale_objectness: obj.per_scale,
        },
        grads,
        positives: npos,
    })
}
