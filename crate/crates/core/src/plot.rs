//! Minimal raster plot of a precision-recall curve.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const WIDTH: u32 = 480;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 40;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..img.width() as i64).contains(&x) && (0..img.height() as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Curve of `(recall, precision)` points on unit axes with a light grid at
/// every 0.1.
pub fn render_pr_curve(points: &[(f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let to_px = |r: f64, p: f64| {
        (
            MARGIN as i64 + (r.clamp(0.0, 1.0) * w).round() as i64,
            (HEIGHT - MARGIN) as i64 - (p.clamp(0.0, 1.0) * h).round() as i64,
        )
    };
    for i in 1..=10 {
        let t = i as f64 / 10.0;
        let grid = Rgb([225, 225, 225]);
        line(&mut img, to_px(t, 0.0), to_px(t, 1.0), grid);
        line(&mut img, to_px(0.0, t), to_px(1.0, t), grid);
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), axis);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), axis);
    let curve = Rgb([200, 30, 30]);
    for pair in points.windows(2) {
        let (a, b) = (to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1));
        line(&mut img, a, b, curve);
    }
    if let [only] = points {
        let p = to_px(only.0, only.1);
        line(&mut img, p, p, curve);
    }
    img
}

pub fn write_pr_png(points: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    render_pr_curve(points).save(path.as_ref())?;
    Ok(())
}
