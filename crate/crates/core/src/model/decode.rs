use super::detector::DetectionOutput;
use super::Detection;
use crate::data::BoundingBox;
use crate::metrics::iou;

pub const MAX_DETECTIONS: usize = 300;
pub const MAX_CANDIDATES: usize = 3000;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// A decoded, not yet suppressed box. `order` is the flat grid index
/// (scale, anchor, row, column) used to break confidence ties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub det: Detection,
    pub order: usize,
}

/// Pixel-space box `(cx, cy, w, h)` for raw outputs `(tx, ty, tw, th)` at a cell.
pub fn decode_cell(t: &[f64], x: usize, y: usize, stride: usize, anchor: (f64, f64)) -> (f64, f64, f64, f64) {
    let s = stride as f64;
    let cx = (2.0 * sigmoid(t[0]) - 0.5 + x as f64) * s;
    let cy = (2.0 * sigmoid(t[1]) - 0.5 + y as f64) * s;
    let w = (2.0 * sigmoid(t[2])).powi(2) * anchor.0;
    let h = (2.0 * sigmoid(t[3])).powi(2) * anchor.1;
    (cx, cy, w, h)
}

/// Decoded candidates of batch item `b` whose confidence reaches `conf_thresh`.
pub fn candidates(out: &DetectionOutput, b: usize, conf_thresh: f64) -> Vec<Candidate> {
    let size = out.input_size as f64;
    let mut cands = Vec::new();
    let mut order = 0;
    for s in &out.scales {
        for a in 0..s.na() {
            for y in 0..s.h {
                for x in 0..s.w {
                    let idx = order;
                    order += 1;
                    let t = s.cell(b, a, y, x);
                    let obj = sigmoid(t[4]);
                    if obj < conf_thresh {
                        continue;
                    }
                    let (class_id, cls) = t[5..]
                        .iter()
                        .map(|&v| sigmoid(v))
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
                    let confidence = obj * cls;
                    if confidence < conf_thresh {
                        continue;
                    }
                    let (cx, cy, w, h) = decode_cell(t, x, y, s.stride, s.anchors[a]);
                    let bbox = BoundingBox::from_corners(
                        class_id as u32,
                        (cx - w / 2.0) / size,
                        (cy - h / 2.0) / size,
                        (cx + w / 2.0) / size,
                        (cy + h / 2.0) / size,
                    );
                    if let Some(bbox) = bbox {
                        cands.push(Candidate {
                            det: Detection {
                                bbox,
                                confidence,
                                class_id: class_id as u32,
                            },
                            order: idx,
                        });
                    }
                }
            }
        }
    }
    cands
}

/// Greedy class-aware suppression: candidates are visited by descending
/// confidence (ties by `order`), and each kept box removes every later box of
/// its class with IoU at or above `nms_iou`.
pub fn nms(mut cands: Vec<Candidate>, nms_iou: f64, max_det: usize) -> Vec<Detection> {
    cands.sort_by(|a, b| {
        b.det
            .confidence
            .total_cmp(&a.det.confidence)
            .then(a.order.cmp(&b.order))
    });
    cands.truncate(MAX_CANDIDATES);
    let mut removed = vec![false; cands.len()];
    let mut keep = Vec::new();
    for i in 0..cands.len() {
        if removed[i] {
            continue;
        }
        keep.push(cands[i].det);
        if keep.len() == max_det {
            break;
        }
        for j in i + 1..cands.len() {
            if !removed[j]
                && cands[j].det.class_id == cands[i].det.class_id
                && iou(&cands[i].det.bbox, &cands[j].det.bbox) >= nms_iou
            {
                removed[j] = true;
            }
        }
    }
    keep
}

/// Per-image detections after confidence filtering and NMS. A threshold of 1
/// or more yields nothing.
pub fn decode_and_nms(out: &DetectionOutput, conf_thresh: f64, nms_iou: f64) -> Vec<Vec<Detection>> {
    (0..out.batch())
        .map(|b| {
            if conf_thresh >= 1.0 {
                Vec::new()
            } else {
                nms(candidates(out, b, conf_thresh), nms_iou, MAX_DETECTIONS)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScaleGrid;
    use proptest::prelude::*;

    fn cand(cx: f64, cy: f64, w: f64, conf: f64, order: usize) -> Candidate {
        Candidate {
            det: Detection {
                bbox: BoundingBox::crater(cx, cy, w, w).unwrap(),
                confidence: conf,
                class_id: 0,
            },
            order,
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn grid(cells: &[(usize, usize, f64)]) -> DetectionOutput {
        let (h, w, k) = (4, 4, 6);
        let mut data = vec![-20.0; h * w * k];
        for &(x, y, conf) in cells {
            let i = (y * w + x) * k;
            data[i..i + 4].copy_from_slice(&[0.0, 0.0, 0.0, 0.0]);
            data[i + 4] = logit(conf.sqrt());
            data[i + 5] = logit(conf.sqrt());
        }
        DetectionOutput {
            input_size: 32,
            scales: vec![ScaleGrid {
                stride: 8,
                anchors: vec![(8.0, 8.0)],
                batch: 1,
                h,
                w,
                k,
                data,
            }],
        }
    }

    #[test]
    fn decode_centers_on_cell() {
        let (cx, cy, w, h) = decode_cell(&[0.0; 4], 2, 1, 8, (10.0, 6.0));
        assert_eq!((cx, cy, w, h), (20.0, 12.0, 10.0, 6.0));
    }

    #[test]
    fn threshold_one_is_empty() {
        let out = grid(&[(1, 1, 0.999999)]);
        assert!(decode_and_nms(&out, 1.0, 0.5)[0].is_empty());
        assert_eq!(decode_and_nms(&out, 0.5, 0.5)[0].len(), 1);
    }

    #[test]
    fn duplicate_box_suppressed() {
        let kept = nms(vec![cand(0.5, 0.5, 0.2, 0.8, 1), cand(0.5, 0.5, 0.2, 0.9, 0)], 0.5, 300);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
    }

    #[test]
    fn iou_one_only_removes_exact_duplicates() {
        let cs = vec![cand(0.5, 0.5, 0.2, 0.9, 0), cand(0.5, 0.5, 0.2, 0.8, 1), cand(0.51, 0.5, 0.2, 0.7, 2)];
        assert_eq!(nms(cs, 1.0, 300).len(), 2);
    }

    #[test]
    fn grid_decode_keeps_separate_cells() {
        let out = grid(&[(0, 0, 0.9), (3, 3, 0.85)]);
        let dets = &decode_and_nms(&out, 0.25, 0.45)[0];
        assert_eq!(dets.len(), 2);
        assert!((dets[0].confidence - 0.9).abs() < 1e-9);
        assert!((dets[0].bbox.cx - 4.0 / 32.0).abs() < 1e-12);
    }

    /// Brute force: repeatedly take the best remaining candidate and drop
    /// everything overlapping it.
    fn oracle(cands: &[Candidate], t: f64) -> Vec<Detection> {
        let mut left: Vec<Candidate> = cands.to_vec();
        let mut out = Vec::new();
        while !left.is_empty() {
            let best = (0..left.len())
                .min_by(|&i, &j| {
                    left[j].det.confidence.total_cmp(&left[i].det.confidence).then(left[i].order.cmp(&left[j].order))
                })
                .unwrap();
            let b = left.remove(best);
            left.retain(|c| iou(&c.det.bbox, &b.det.bbox) < t);
            out.push(b.det);
        }
        out
    }

    proptest! {
        #[test]
        fn nms_matches_oracle_and_ignores_input_order(
            raw in prop::collection::vec((0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.2, 0u8..5), 0..25),
            t in 0.1f64..1.0,
            rot in 0usize..25,
        ) {
            let cands: Vec<Candidate> = raw
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, c))| cand(x, y, w, 0.5 + c as f64 / 10.0, i))
                .collect();
            let kept = nms(cands.clone(), t, 300);
            prop_assert_eq!(&kept, &oracle(&cands, t));
            let mut shuffled = cands.clone();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
            }
            prop_assert_eq!(kept, nms(shuffled, t, 300));
        }
    }
}
