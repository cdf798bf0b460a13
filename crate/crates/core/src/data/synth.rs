//! Deterministic two-domain crater imagery.
//!
//! Each crater is a darkened bowl with a directional shadow gradient inside a
//! bright annular rim. The ground-truth box is the rim's outer square, so it
//! encloses the rendered crater tightly. Backgrounds combine smooth terrain,
//! per-pixel noise and, for weathered domains, low-frequency multiplicative
//! patches.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, LabeledImage, Pixels};
use crate::error::{Error, IoContext, Result};

/// Outer rim radius as a multiple of the bowl radius.
pub const RIM_FACTOR: f64 = 1.25;

/// Largest allowed IoU between two ground-truth boxes of one image.
pub const MAX_CRATER_OVERLAP: f64 = 0.5;

const PLACEMENT_ATTEMPTS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Simple,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: String,
    /// Inclusive range of craters per image.
    pub crater_count_range: (usize, usize),
    /// Inclusive range of bowl radii as a fraction of the image side.
    pub radius_range: (f64, f64),
    pub background_noise_level: f64,
    pub weathering_artifacts: bool,
    pub complexity: Complexity,
}

impl DomainProfile {
    /// Many small craters on a clean background.
    pub fn lunar_like() -> Self {
        DomainProfile {
            name: "lunar".into(),
            crater_count_range: (10, 24),
            radius_range: (0.012, 0.045),
            background_noise_level: 0.06,
            weathering_artifacts: false,
            complexity: Complexity::Simple,
        }
    }

    /// Fewer, larger craters under heavy noise and weathering.
    pub fn mars_like() -> Self {
        DomainProfile {
            name: "mars".into(),
            crater_count_range: (3, 8),
            radius_range: (0.025, 0.10),
            background_noise_level: 0.30,
            weathering_artifacts: true,
            complexity: Complexity::Complex,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (cmin, cmax) = self.crater_count_range;
        if cmin > cmax {
            return Err(Error::Config(format!(
                "crater_count_range [{cmin},{cmax}] is empty"
            )));
        }
        let (rmin, rmax) = self.radius_range;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return Err(Error::Config(format!(
                "radius_range [{rmin},{rmax}] must be a non-empty positive interval"
            )));
        }
        if !(0.0..=1.0).contains(&self.background_noise_level) {
            return Err(Error::Config(format!(
                "background_noise_level {} outside [0,1]",
                self.background_noise_level
            )));
        }
        Ok(())
    }
}

/// Sidecar written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDomain {
    pub profile: DomainProfile,
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
}

impl GeneratedDomain {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join("profile.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).ctx(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("profile.json");
        let text = fs::read_to_string(&path).ctx(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct Crater {
    x: f64,
    y: f64,
    radius: f64,
    contrast: f64,
}

pub fn generate_synthetic_domain(
    profile: &DomainProfile,
    n: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    profile.validate()?;
    if n == 0 {
        return Err(Error::Config("requested zero images".into()));
    }
    if image_size < 64 {
        return Err(Error::Config(format!("image_size {image_size} below 64")));
    }
    let size = image_size as f64;
    let outer_max = profile.radius_range.1 * RIM_FACTOR * size;
    if 2.0 * outer_max >= size {
        return Err(Error::Config(format!(
            "radius_range max {} does not fit a {image_size}px image",
            profile.radius_range.1
        )));
    }
    if profile.radius_range.0 * size < 1.0 {
        return Err(Error::Config(format!(
            "radius_range min {} is below one pixel",
            profile.radius_range.0
        )));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            render_image(profile, image_size, &mut rng, format!("{}_{i:05}", profile.name))
        })
        .collect()
}

fn render_image(
    profile: &DomainProfile,
    size: usize,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<LabeledImage> {
    let s = size as f64;
    let mut canvas = terrain(size, rng);

    let (cmin, cmax) = profile.crater_count_range;
    let wanted = rng.random_range(cmin..=cmax);
    let (ln_min, ln_max) = (profile.radius_range.0.ln(), profile.radius_range.1.ln());
    let mut craters: Vec<Crater> = Vec::with_capacity(wanted);
    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(wanted);
    'place: for _ in 0..wanted {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let frac = if ln_max > ln_min {
                rng.random_range(ln_min..=ln_max).exp()
            } else {
                profile.radius_range.0
            };
            let radius = frac * s;
            let outer = radius * RIM_FACTOR;
            let x = rng.random_range(outer..=s - outer);
            let y = rng.random_range(outer..=s - outer);
            let b = BoundingBox::crater(x / s, y / s, 2.0 * outer / s, 2.0 * outer / s)?;
            if boxes.iter().any(|o| o.iou(&b) > MAX_CRATER_OVERLAP) {
                continue;
            }
            craters.push(Crater {
                x,
                y,
                radius,
                contrast: rng.random_range(0.7..=1.0),
            });
            boxes.push(b);
            continue 'place;
        }
        break;
    }
    if boxes.len() < cmin {
        return Err(Error::Config(format!(
            "could only place {} of at least {cmin} craters without overlap; profile too dense",
            boxes.len()
        )));
    }

    let light = rng.random_range(0.0..2.0 * PI);
    let (lx, ly) = (light.cos(), light.sin());
    for c in &craters {
        stamp_crater(&mut canvas, size, c, lx, ly);
    }

    if profile.weathering_artifacts {
        weather(&mut canvas, size, rng);
    }

    let sigma = 0.25 * profile.background_noise_level;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is positive");
        for v in canvas.iter_mut() {
            *v += normal.sample(rng);
        }
    }

    let data = canvas
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    LabeledImage::new(Pixels::new(size, size, 1, data)?, boxes, id)
}

/// Mid-gray base with a few smooth undulations.
fn terrain(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(0.5..2.5) * 2.0 * PI / s;
            (angle.cos() * freq, angle.sin() * freq, rng.random_range(0.0..2.0 * PI), rng.random_range(0.01..0.04))
        })
        .collect();
    let base = rng.random_range(0.42..0.55);
    let mut canvas = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = base;
            for &(kx, ky, phase, amp) in &waves {
                v += amp * (kx * fx + ky * fy + phase).sin();
            }
            canvas[y * size + x] = v;
        }
    }
    canvas
}

fn stamp_crater(canvas: &mut [f64], size: usize, c: &Crater, lx: f64, ly: f64) {
    let outer = c.radius * RIM_FACTOR;
    let x0 = (c.x - outer).floor().max(0.0) as usize;
    let y0 = (c.y - outer).floor().max(0.0) as usize;
    let x1 = ((c.x + outer).ceil() as usize).min(size);
    let y1 = ((c.y + outer).ceil() as usize).min(size);
    for py in y0..y1 {
        for px in x0..x1 {
            let dx = px as f64 + 0.5 - c.x;
            let dy = py as f64 + 0.5 - c.y;
            let d = (dx * dx + dy * dy).sqrt();
            if d >= outer {
                continue;
            }
            let facing = if d > 0.0 { (dx * lx + dy * ly) / d } else { 0.0 };
            let delta = if d < c.radius {
                let u = d / c.radius;
                // bowl floor plus a shadow ramp across the interior
                -0.10 * (1.0 - u * u) - 0.16 + 0.16 * facing * u
            } else {
                let t = (d - c.radius) / (outer - c.radius);
                0.20 * (PI * t).sin() * (0.8 - 0.2 * facing)
            };
            canvas[py * size + px] += c.contrast * delta;
        }
    }
}

/// Multiplies the canvas by a handful of broad Gaussian patches.
fn weather(canvas: &mut [f64], size: usize, rng: &mut ChaCha8Rng) {
    let s = size as f64;
    let n = rng.random_range(4..=8);
    let patches: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(0.08..0.25) * s,
                rng.random_range(-0.45..0.35),
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let mut field = 1.0;
            for &(cx, cy, sigma, amp) in &patches {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                field += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
            canvas[y * size + x] *= field.max(0.2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_density_profile_yields_no_boxes() {
        let p = DomainProfile {
            crater_count_range: (0, 0),
            ..DomainProfile::lunar_like()
        };
        let imgs = generate_synthetic_domain(&p, 3, 128, 1).unwrap();
        assert!(imgs.iter().all(|i| i.boxes.is_empty()));
    }

    #[test]
    fn lunar_is_denser_than_mars() {
        let mean = |p: &DomainProfile| {
            let imgs = generate_synthetic_domain(p, 10, 128, 5).unwrap();
            imgs.iter().map(|i| i.boxes.len()).sum::<usize>() as f64 / imgs.len() as f64
        };
        assert!(mean(&DomainProfile::lunar_like()) > mean(&DomainProfile::mars_like()));
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let p = DomainProfile::mars_like();
        let a = generate_synthetic_domain(&p, 2, 96, 42).unwrap();
        let b = generate_synthetic_domain(&p, 2, 96, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_domain(&p, 2, 96, 43).unwrap();
        assert_ne!(a[0].pixels, c[0].pixels);
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let p = DomainProfile {
            radius_range: (0.1, 0.45),
            ..DomainProfile::mars_like()
        };
        assert!(generate_synthetic_domain(&p, 1, 128, 0).is_err());
    }

    #[test]
    fn rejects_small_canvas_and_zero_count() {
        let p = DomainProfile::lunar_like();
        assert!(generate_synthetic_domain(&p, 1, 32, 0).is_err());
        assert!(generate_synthetic_domain(&p, 0, 128, 0).is_err());
    }

    #[test]
    fn counts_within_range_and_boxes_valid() {
        for p in [DomainProfile::lunar_like(), DomainProfile::mars_like()] {
            for img in generate_synthetic_domain(&p, 8, 160, 11).unwrap() {
                let k = img.boxes.len();
                assert!(k >= p.crater_count_range.0 && k <= p.crater_count_range.1);
                for (i, a) in img.boxes.iter().enumerate() {
                    assert!(a.is_valid());
                    for b in &img.boxes[i + 1..] {
                        assert!(a.iou(b) <= MAX_CRATER_OVERLAP);
                    }
                }
            }
        }
    }

    #[test]
    fn rendered_crater_is_inside_its_box() {
        let p = DomainProfile {
            crater_count_range: (1, 1),
            background_noise_level: 0.0,
            weathering_artifacts: false,
            ..DomainProfile::mars_like()
        };
        let img = &generate_synthetic_domain(&p, 1, 128, 3).unwrap()[0];
        let b = img.boxes[0];
        let blank = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            rng.set_stream(0);
            terrain(128, &mut rng)
        };
        let (x1, y1, x2, y2) = b.corners();
        for y in 0..128 {
            for x in 0..128 {
                let (fx, fy) = ((x as f64 + 0.5) / 128.0, (y as f64 + 0.5) / 128.0);
                let base = (blank[y * 128 + x] * 255.0).round().clamp(0.0, 255.0) as u8;
                if fx < x1 || fx > x2 || fy < y1 || fy > y2 {
                    assert_eq!(img.pixels.get(x, y, 0), base, "crater leaked at {x},{y}");
                }
            }
        }
    }
}
