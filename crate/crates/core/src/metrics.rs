//! Detection evaluation: IoU, greedy one-to-one matching, precision/recall,
//! all-points interpolated AP, mAP@.5 and mAP@.5:.95.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::error::{Error, IoContext, Result};
use crate::model::Detection;

/// IoU thresholds 0.50, 0.55, ..., 0.95, written as exact decimal quotients.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredFlag {
    pub confidence: f64,
    pub is_tp: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// One entry per detection, in confidence-descending order.
    pub flags: Vec<ScoredFlag>,
}

impl MatchResult {
    pub fn merge(&mut self, other: MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.flags.extend(other.flags);
    }
}

/// Confidence-descending order; equal confidences keep input order.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].confidence.total_cmp(&dets[i].confidence));
    order
}

/// Greedy matching: each detection, most confident first, claims the
/// highest-IoU unmatched ground truth of its class if that IoU reaches
/// `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[BoundingBox], iou_thresh: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let hit = match best {
            Some((g, v)) if v >= iou_thresh => {
                taken[g] = true;
                true
            }
            _ => false,
        };
        if hit {
            out.tp += 1;
        } else {
            out.fp += 1;
        }
        out.flags.push(ScoredFlag {
            confidence: d.confidence,
            is_tp: hit,
        });
    }
    out.fn_ = gts.len() - out.tp;
    out
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(precision, recall)`; 0/0 is reported as 0.
pub fn precision_recall(m: &MatchResult) -> (f64, f64) {
    (ratio(m.tp, m.tp + m.fp), ratio(m.tp, m.tp + m.fn_))
}

/// Raw PR points, one per distinct confidence level (ties enter together),
/// as `(recall, precision, confidence)`.
fn pr_points(flags: &[ScoredFlag], total_gt: usize) -> Vec<(f64, f64, f64)> {
    let mut sorted = flags.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let c = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == c {
            if sorted[i].is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((ratio(tp, total_gt), ratio(tp, tp + fp), c));
    }
    points
}

/// Monotone precision envelope over the raw PR points.
pub fn pr_curve(flags: &[ScoredFlag], total_gt: usize) -> Vec<(f64, f64)> {
    let points = pr_points(flags, total_gt);
    let mut env: Vec<(f64, f64)> = points.iter().map(|&(r, p, _)| (r, p)).collect();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k].1 = env[k].1.max(env[k + 1].1);
    }
    env
}

/// Area under the interpolated PR curve, integrated over every recall step.
///
/// With no ground truth the AP is 1 for an empty detection list and 0
/// otherwise.
pub fn average_precision(flags: &[ScoredFlag], total_gt: usize) -> f64 {
    if total_gt == 0 {
        if !flags.is_empty() {
            log::debug!("AP with zero ground truth and {} detections set to 0", flags.len());
        }
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in pr_curve(flags, total_gt) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatingPoint {
    /// Keep detections at or above the configured confidence cutoff.
    FixedCutoff,
    /// Use the confidence level that maximizes F1 on the IoU-0.5 curve.
    MaxF1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub conf_cutoff: f64,
    pub operating_point: OperatingPoint,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf_cutoff: 0.25,
            operating_point: OperatingPoint::FixedCutoff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    /// Confidence level the precision/recall pair was taken at.
    pub operating_confidence: f64,
    pub ap_per_threshold: Vec<ThresholdAp>,
    pub map50: f64,
    pub map5095: f64,
    /// `(recall, precision)` samples of the interpolated IoU-0.5 curve.
    pub pr_curve: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?)
            .ctx(|| format!("writing {}", path.display()))
    }

    pub fn write_pr_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.pr_curve {
            s.push_str(&format!("{r},{p}\n"));
        }
        fs::write(path, s).ctx(|| format!("writing {}", path.display()))
    }
}

/// Evaluates per-image detections against per-image ground truth. Both lists
/// must name the same images in the same order.
pub fn evaluate(
    dets: &[(String, Vec<Detection>)],
    gts: &[(String, Vec<BoundingBox>)],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if dets.len() != gts.len() {
        return Err(Error::IdMismatch(format!(
            "{} detection entries vs {} ground-truth entries",
            dets.len(),
            gts.len()
        )));
    }
    for ((di, _), (gi, _)) in dets.iter().zip(gts) {
        if di != gi {
            return Err(Error::IdMismatch(format!("{di} vs {gi}")));
        }
    }
    let total_gt: usize = gts.iter().map(|(_, g)| g.len()).sum();

    let mut ap_per_threshold = Vec::with_capacity(10);
    let mut at50 = MatchResult::default();
    for t in iou_thresholds() {
        let mut all = MatchResult::default();
        for ((_, d), (_, g)) in dets.iter().zip(gts) {
            all.merge(match_detections(d, g, t));
        }
        ap_per_threshold.push(ThresholdAp {
            iou: t,
            ap: average_precision(&all.flags, total_gt),
        });
        if t == 0.5 {
            at50 = all;
        }
    }
    let map50 = ap_per_threshold[0].ap;
    let map5095 = ap_per_threshold.iter().map(|a| a.ap).sum::<f64>() / 10.0;

    let (precision, recall, operating_confidence) = match cfg.operating_point {
        OperatingPoint::FixedCutoff => {
            let tp = at50
                .flags
                .iter()
                .filter(|f| f.is_tp && f.confidence >= cfg.conf_cutoff)
                .count();
            let kept = at50
                .flags
                .iter()
                .filter(|f| f.confidence >= cfg.conf_cutoff)
                .count();
            (ratio(tp, kept), ratio(tp, total_gt), cfg.conf_cutoff)
        }
        OperatingPoint::MaxF1 => pr_points(&at50.flags, total_gt)
            .into_iter()
            .map(|(r, p, c)| (p, r, c))
            .max_by(|a, b| f1(a.0, a.1).total_cmp(&f1(b.0, b.1)))
            .unwrap_or((0.0, 0.0, 1.0)),
    };

    Ok(MetricsReport {
        precision,
        recall,
        operating_confidence,
        ap_per_threshold,
        map50,
        map5095,
        pr_curve: pr_curve(&at50.flags, total_gt),
    })
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::crater(cx, cy, w, h).unwrap()
    }

    fn det(b: BoundingBox, c: f64) -> Detection {
        Detection {
            bbox: b,
            confidence: c,
            class_id: 0,
        }
    }

    fn flag(confidence: f64, is_tp: bool) -> ScoredFlag {
        ScoredFlag { confidence, is_tp }
    }

    #[test]
    fn iou_identical_disjoint_and_offset() {
        let a = bx(0.3, 0.3, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.8, 0.8, 0.1, 0.1)), 0.0);
        // two squares of side 0.25 offset by half a side: 0.5 / 1.5
        let b = bx(0.25, 0.5, 0.25, 0.25);
        let c = bx(0.375, 0.5, 0.25, 0.25);
        assert!((iou(&b, &c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_clean_match() {
        let gt = bx(0.5, 0.5, 0.2, 0.2);
        let d = det(bx(0.52, 0.5, 0.2, 0.2), 0.9);
        let m = match_detections(&[d], &[gt], 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
    }

    #[test]
    fn one_to_one_matching() {
        let gt = bx(0.5, 0.5, 0.2, 0.2);
        let dets = [det(gt, 0.9), det(bx(0.51, 0.5, 0.2, 0.2), 0.8)];
        let m = match_detections(&dets, &[gt], 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert!(m.flags[0].is_tp && !m.flags[1].is_tp);
    }

    #[test]
    fn all_missed() {
        let gts = [bx(0.2, 0.2, 0.1, 0.1), bx(0.5, 0.5, 0.1, 0.1), bx(0.8, 0.8, 0.1, 0.1)];
        let m = match_detections(&[], &gts, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 3));
    }

    #[test]
    fn precision_recall_cases() {
        let m = |tp, fp, fn_| MatchResult { tp, fp, fn_, flags: vec![] };
        assert_eq!(precision_recall(&m(8, 2, 2)), (0.8, 0.8));
        assert_eq!(precision_recall(&m(0, 0, 0)), (0.0, 0.0));
        assert_eq!(precision_recall(&m(5, 0, 0)), (1.0, 1.0));
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[flag(0.9, true)], 1), 1.0);
        let flags = [flag(0.9, true), flag(0.8, false), flag(0.7, true)];
        assert!((average_precision(&flags, 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[flag(0.9, false), flag(0.3, false)], 4), 0.0);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[flag(0.5, false)], 0), 0.0);
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![
            ("a".to_string(), vec![bx(0.3, 0.3, 0.2, 0.2), bx(0.7, 0.7, 0.1, 0.2)]),
            ("b".to_string(), vec![bx(0.5, 0.5, 0.4, 0.3)]),
        ];
        let dets: Vec<_> = gts
            .iter()
            .map(|(id, g)| (id.clone(), g.iter().map(|&b| det(b, 0.9)).collect()))
            .collect();
        let r = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.map5095, 1.0);
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
    }

    #[test]
    fn exact_iou_point_seven_gives_half() {
        // dyadic extents make the IoU exactly 0.21875 / 0.3125 = 0.7
        let gt = bx(0.5, 0.5, 0.625, 0.5);
        let d = bx(0.5, 0.5, 0.4375, 0.5);
        assert_eq!(iou(&gt, &d), 0.7);
        let gts = vec![("a".to_string(), vec![gt])];
        let dets = vec![("a".to_string(), vec![det(d, 0.9)])];
        let r = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
        for t in &r.ap_per_threshold {
            assert_eq!(t.ap, if t.iou <= 0.7 { 1.0 } else { 0.0 }, "at {}", t.iou);
        }
        assert_eq!(r.map5095, 0.5);
    }

    #[test]
    fn nothing_detected_scores_zero() {
        let gts = vec![("a".to_string(), vec![bx(0.5, 0.5, 0.2, 0.2)])];
        let dets = vec![("a".to_string(), vec![])];
        let r = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
        assert_eq!((r.precision, r.recall, r.map50, r.map5095), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let gts = vec![("a".to_string(), vec![])];
        let dets = vec![("b".to_string(), vec![])];
        assert!(matches!(
            evaluate(&dets, &gts, &EvalConfig::default()),
            Err(Error::IdMismatch(_))
        ));
    }

    #[test]
    fn max_f1_operating_point() {
        let gt = bx(0.5, 0.5, 0.2, 0.2);
        let gts = vec![("a".to_string(), vec![gt])];
        let dets = vec![("a".to_string(), vec![det(gt, 0.1), det(bx(0.1, 0.1, 0.1, 0.1), 0.9)])];
        let cfg = EvalConfig {
            operating_point: OperatingPoint::MaxF1,
            ..EvalConfig::default()
        };
        let r = evaluate(&dets, &gts, &cfg).unwrap();
        assert_eq!((r.precision, r.recall, r.operating_confidence), (0.5, 1.0, 0.1));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.05f64..0.95, 0.05f64..0.95, 0.02f64..0.5, 0.02f64..0.5)
            .prop_map(|(cx, cy, w, h)| bx(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn matching_conserves_counts(
            gts in prop::collection::vec(arb_box(), 0..10),
            dets in prop::collection::vec((arb_box(), 0.0f64..1.0), 0..10),
            t in 0.05f64..1.0,
        ) {
            let dets: Vec<_> = dets.into_iter().map(|(b, c)| det(b, c)).collect();
            let m = match_detections(&dets, &gts, t);
            prop_assert_eq!(m.tp + m.fp, dets.len());
            prop_assert_eq!(m.tp + m.fn_, gts.len());
        }

        #[test]
        fn map5095_never_exceeds_map50(
            gts in prop::collection::vec(arb_box(), 1..8),
            dets in prop::collection::vec((arb_box(), 0.0f64..1.0), 0..12),
        ) {
            let dets: Vec<_> = dets.into_iter().map(|(b, c)| det(b, c)).collect();
            let r = evaluate(&[("x".into(), dets)], &[("x".into(), gts)], &EvalConfig::default()).unwrap();
            prop_assert!(r.map5095 <= r.map50 + 1e-12);
        }

        #[test]
        fn ap_ignores_order_of_ties(
            flags in prop::collection::vec((0u8..4, any::<bool>()), 1..20),
            extra_gt in 0usize..5,
            rot in 0usize..20,
        ) {
            let flags: Vec<_> = flags.into_iter().map(|(c, t)| flag(c as f64 / 4.0, t)).collect();
            let total = flags.iter().filter(|f| f.is_tp).count() + extra_gt;
            let mut rotated = flags.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
            prop_assert_eq!(average_precision(&flags, total), average_precision(&rotated, total));
        }
    }
}
