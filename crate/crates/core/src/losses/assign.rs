use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::model::DetectionOutput;

/// Largest allowed side ratio between a box and an anchor in either
/// direction.
pub const ANCHOR_RATIO: f64 = 4.0;

/// A ground-truth box assigned to one anchor at one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub scale: usize,
    pub batch: usize,
    pub anchor: usize,
    pub gx: usize,
    pub gy: usize,
    /// `(cx, cy, w, h)` in grid units, center relative to the cell corner.
    pub target: [f64; 4],
    /// Anchor size in grid units.
    pub anchor_wh: (f64, f64),
    pub class_id: u32,
}

/// Ratio matching with neighbor expansion: a box goes to every anchor whose
/// width and height ratios stay within `ratio`, at its own cell and at the
/// two adjacent cells nearest to its center.
pub fn assign_targets(out: &DetectionOutput, targets: &[Vec<BoundingBox>], ratio: f64) -> Result<Vec<Positive>> {
    if targets.len() != out.batch() {
        return Err(Error::Shape(format!("{} target lists for a batch of {}", targets.len(), out.batch())));
    }
    let mut pos = Vec::new();
    for (si, s) in out.scales.iter().enumerate() {
        let (gw, gh) = (s.w as f64, s.h as f64);
        for (b, boxes) in targets.iter().enumerate() {
            for bx in boxes {
                let (cx, cy, w, h) = (bx.cx * gw, bx.cy * gh, bx.w * gw, bx.h * gh);
                let mut cells = vec![(cx.floor(), cy.floor())];
                let (fx, fy) = (cx.fract(), cy.fract());
                if fx < 0.5 && cx > 1.0 {
                    cells.push((cx.floor() - 1.0, cy.floor()));
                }
                if fy < 0.5 && cy > 1.0 {
                    cells.push((cx.floor(), cy.floor() - 1.0));
                }
                if (gw - cx).fract() < 0.5 && gw - cx > 1.0 {
                    cells.push((cx.floor() + 1.0, cy.floor()));
                }
                if (gh - cy).fract() < 0.5 && gh - cy > 1.0 {
                    cells.push((cx.floor(), cy.floor() + 1.0));
                }
                for (a, &(aw, ah)) in s.anchors.iter().enumerate() {
                    let (aw, ah) = (aw / s.stride as f64, ah / s.stride as f64);
                    let rw = w / aw;
                    let rh = h / ah;
                    if rw.max(1.0 / rw).max(rh.max(1.0 / rh)) >= ratio {
                        continue;
                    }
                    for &(x, y) in &cells {
                        let gx = (x.max(0.0) as usize).min(s.w - 1);
                        let gy = (y.max(0.0) as usize).min(s.h - 1);
                        pos.push(Positive {
                            scale: si,
                            batch: b,
                            anchor: a,
                            gx,
                            gy,
                            target: [cx - gx as f64, cy - gy as f64, w, h],
                            anchor_wh: (aw, ah),
                            class_id: bx.class_id,
                        });
                    }
                }
            }
        }
    }
    Ok(pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScaleGrid;

    fn out(w: usize, stride: usize) -> DetectionOutput {
        DetectionOutput {
            input_size: w * stride,
            scales: vec![ScaleGrid {
                stride,
                anchors: vec![(8.0, 8.0), (64.0, 64.0)],
                batch: 1,
                h: w,
                w,
                k: 6,
                data: vec![0.0; 2 * w * w * 6],
            }],
        }
    }

    #[test]
    fn lower_left_quadrant_adds_left_and_upper_neighbors() {
        // grid 10x10, stride 8; center at (3.25, 6.25) cells, size 1x1 cell
        let b = BoundingBox::crater(0.325, 0.625, 0.1, 0.1).unwrap();
        let p = assign_targets(&out(10, 8), &[vec![b]], ANCHOR_RATIO).unwrap();
        // only the 8px anchor matches (64px is 8x too large)
        assert!(p.iter().all(|q| q.anchor == 0));
        let cells: Vec<(usize, usize)> = p.iter().map(|q| (q.gx, q.gy)).collect();
        assert_eq!(cells, vec![(3, 6), (2, 6), (3, 5)]);
        let left = p[1];
        assert!((left.target[0] - 1.25).abs() < 1e-12);
        assert!((left.target[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn upper_right_quadrant_adds_right_and_lower_neighbors() {
        let b = BoundingBox::crater(0.375, 0.475, 0.1, 0.1).unwrap();
        let p = assign_targets(&out(10, 8), &[vec![b]], ANCHOR_RATIO).unwrap();
        let cells: Vec<(usize, usize)> = p.iter().map(|q| (q.gx, q.gy)).collect();
        assert_eq!(cells, vec![(3, 4), (4, 4), (3, 5)]);
    }

    #[test]
    fn edge_boxes_stay_in_grid() {
        let b = BoundingBox::crater(0.02, 0.99, 0.1, 0.08).unwrap();
        let p = assign_targets(&out(10, 8), &[vec![b]], ANCHOR_RATIO).unwrap();
        assert!(!p.is_empty());
        assert!(p.iter().all(|q| q.gx < 10 && q.gy < 10));
        for q in &p {
            assert!(q.target[0] > -0.5 && q.target[0] < 1.5);
            assert!(q.target[1] > -0.5 && q.target[1] < 1.5);
        }
    }

    #[test]
    fn ratio_filter() {
        // 4 cells wide = 32px: ratio 4 to the small anchor (rejected), 2 to the large one
        let b = BoundingBox::crater(0.5, 0.5, 0.4, 0.4).unwrap();
        let p = assign_targets(&out(10, 8), &[vec![b]], ANCHOR_RATIO).unwrap();
        assert!(p.iter().all(|q| q.anchor == 1));
        assert_eq!(p[0].anchor_wh, (8.0, 8.0));
    }

    #[test]
    fn batch_mismatch_is_an_error() {
        assert!(assign_targets(&out(4, 8), &[vec![], vec![]], ANCHOR_RATIO).is_err());
    }
}
