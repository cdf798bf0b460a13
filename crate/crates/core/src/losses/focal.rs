use crate::model::sigmoid;

/// Lower and upper bound applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(q: f64) -> f64 {
    q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Focal loss of a predicted probability `q` against a binary label.
///
/// `p` is the probability assigned to the true class (`q` for positives,
/// `1 - q` for negatives) and the loss is `-(1 - p)^gamma * ln(p)`.
pub fn focal_loss(q: f64, y: bool, gamma: f64) -> f64 {
    let q = clamp_prob(q);
    let p = if y { q } else { 1.0 - q };
    -(1.0 - p).powf(gamma) * p.ln()
}

/// Focal loss of a logit together with its derivative with respect to that
/// logit. `alpha` weights positive labels only. The derivative is zero where
/// the probability clamp is active.
pub fn focal_with_grad(z: f64, y: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let s = sigmoid(z);
    let q = clamp_prob(s);
    let p = if y { q } else { 1.0 - q };
    let weight = if y { alpha } else { 1.0 };
    let loss = -(1.0 - p).powf(gamma) * p.ln();
    if q != s {
        return (weight * loss, 0.0);
    }
    let dl_dp = if gamma == 0.0 {
        -1.0 / p
    } else {
        gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - (1.0 - p).powf(gamma) / p
    };
    let dp_dz = if y { s * (1.0 - s) } else { -s * (1.0 - s) };
    (weight * loss, weight * dl_dp * dp_dz)
}
