use std::f64::consts::PI;

use super::dual::{Dual, Scalar};
use crate::data::BoundingBox;
use crate::error::{Error, Result};

const ASPECT_EPS: f64 = 1e-7;

/// Complete-IoU loss on `(cx, cy, w, h)` boxes in any common unit:
/// `1 - IoU + rho^2 / c^2 + alpha * v`, where `rho` is the center distance,
/// `c` the diagonal of the enclosing box and `v` the aspect mismatch.
pub(crate) fn ciou_generic<T: Scalar>(p: [T; 4], g: [f64; 4]) -> T {
    let c = T::cst;
    let half = c(0.5);
    let (px1, px2) = (p[0] - p[2] * half, p[0] + p[2] * half);
    let (py1, py2) = (p[1] - p[3] * half, p[1] + p[3] * half);
    let (gx1, gx2) = (c(g[0] - g[2] / 2.0), c(g[0] + g[2] / 2.0));
    let (gy1, gy2) = (c(g[1] - g[3] / 2.0), c(g[1] + g[3] / 2.0));

    let iw = (px2.min(gx2) - px1.max(gx1)).max(c(0.0));
    let ih = (py2.min(gy2) - py1.max(gy1)).max(c(0.0));
    let inter = iw * ih;
    let union = p[2] * p[3] + c(g[2] * g[3]) - inter;
    let iou = inter / union;

    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let diag = cw.sq() + ch.sq();
    let rho = (p[0] - c(g[0])).sq() + (p[1] - c(g[1])).sq();

    let v = c(4.0 / (PI * PI)) * (c((g[2] / g[3]).atan()) - (p[2] / p[3]).atan()).sq();
    let aspect = if v.val() > 0.0 { v * v / (v + (c(1.0) - iou) + c(ASPECT_EPS)) } else { c(0.0) };
    (c(1.0) - iou + rho / diag + aspect).max(c(0.0))
}

fn check(b: [f64; 4]) -> Result<()> {
    if b.iter().all(|v| v.is_finite()) && b[2] > 0.0 && b[3] > 0.0 {
        Ok(())
    } else {
        Err(Error::DegenerateBox(format!("{b:?}")))
    }
}

/// CIoU loss between two `(cx, cy, w, h)` boxes.
pub fn ciou_xywh(pred: [f64; 4], gt: [f64; 4]) -> Result<f64> {
    check(pred)?;
    check(gt)?;
    Ok(ciou_generic(pred, gt))
}

pub fn ciou_loss(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    ciou_xywh([pred.cx, pred.cy, pred.w, pred.h], [gt.cx, gt.cy, gt.w, gt.h])
}

/// CIoU loss and its gradient with respect to the predicted box.
pub fn ciou_with_grad(pred: [f64; 4], gt: [f64; 4]) -> Result<(f64, [f64; 4])> {
    check(pred)?;
    check(gt)?;
    let p: [Dual<4>; 4] = std::array::from_fn(|i| Dual::var(pred[i], i));
    let l = ciou_generic(p, gt);
    Ok((l.v, l.d))
}

/// Decodes raw box outputs at a cell (offsets relative to the cell corner,
/// sizes relative to `anchor`, all in grid units) and returns the CIoU loss
/// against `target` with its gradient with respect to the raw outputs.
pub fn box_loss_from_logits(t: [f64; 4], anchor: (f64, f64), target: [f64; 4]) -> (f64, [f64; 4]) {
    let z: [Dual<4>; 4] = std::array::from_fn(|i| Dual::var(t[i], i));
    let c = <Dual<4>>::cst;
    let two = c(2.0);
    let pred = [
        two * z[0].sigmoid() - c(0.5),
        two * z[1].sigmoid() - c(0.5),
        (two * z[2].sigmoid()).sq() * c(anchor.0),
        (two * z[3].sigmoid()).sq() * c(anchor.1),
    ];
    if pred[2].v <= 0.0 || pred[3].v <= 0.0 {
        return (ciou_generic([pred[0].v, pred[1].v, pred[2].v.max(1e-12), pred[3].v.max(1e-12)], target), [0.0; 4]);
    }
    let l = ciou_generic(pred, target);
    (l.v, l.d)
}
