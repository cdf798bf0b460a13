//! Box-consistent geometric augmentation: a weak policy (flip, 2x2 stitch)
//! and a strong one (mosaic, random affine, flip).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{letterbox_resize, BoundingBox, Complexity, LabeledImage, Pixels, PAD_VALUE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineParams {
    pub max_rotate_deg: f64,
    pub scale_range: (f64, f64),
    /// Largest shift as a fraction of the image side.
    pub translate_frac: f64,
    pub shear_deg: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            max_rotate_deg: 0.0,
            scale_range: (1.0, 1.0),
            translate_frac: 0.0,
            shear_deg: 0.0,
        }
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        AffineParams {
            max_rotate_deg: 10.0,
            scale_range: (0.5, 1.5),
            translate_frac: 0.1,
            shear_deg: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub kind: AugKind,
    pub flip_prob: f64,
    pub affine: AffineParams,
    pub mosaic_prob: f64,
    pub stitch_prob: f64,
    /// Boxes whose normalized area falls below this are dropped.
    pub min_box_area_frac: f64,
}

pub const MIN_BOX_AREA_FRAC: f64 = 0.0004;

impl AugPolicy {
    pub fn weak() -> Self {
        AugPolicy {
            kind: AugKind::Weak,
            flip_prob: 0.5,
            affine: AffineParams::identity(),
            mosaic_prob: 0.0,
            stitch_prob: 0.25,
            min_box_area_frac: MIN_BOX_AREA_FRAC,
        }
    }

    pub fn strong() -> Self {
        AugPolicy {
            kind: AugKind::Strong,
            flip_prob: 0.5,
            affine: AffineParams::default(),
            mosaic_prob: 1.0,
            stitch_prob: 0.0,
            min_box_area_frac: MIN_BOX_AREA_FRAC,
        }
    }

    /// A policy of the given kind that changes nothing.
    pub fn identity(kind: AugKind) -> Self {
        AugPolicy {
            kind,
            flip_prob: 0.0,
            affine: AffineParams::identity(),
            mosaic_prob: 0.0,
            stitch_prob: 0.0,
            min_box_area_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("mosaic_prob", self.mosaic_prob),
            ("stitch_prob", self.stitch_prob),
            ("min_box_area_frac", self.min_box_area_frac),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        let a = &self.affine;
        if !(a.scale_range.0 > 0.0 && a.scale_range.0 <= a.scale_range.1) {
            return Err(Error::Config(format!("scale_range {:?} is not a positive interval", a.scale_range)));
        }
        if !(a.max_rotate_deg >= 0.0 && a.translate_frac >= 0.0 && a.shear_deg >= 0.0 && a.shear_deg < 90.0) {
            return Err(Error::Config(format!("invalid affine ranges {a:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, image: &LabeledImage, pool: &[LabeledImage], rng: &mut impl Rng) -> LabeledImage {
        match self.kind {
            AugKind::Weak => apply_weak(self, image, pool, rng),
            AugKind::Strong => apply_strong(self, image, pool, rng),
        }
    }
}

/// Complex sources get light augmentation, simple sources heavy.
pub fn select_policy(source: Complexity) -> AugPolicy {
    match source {
        Complexity::Complex => AugPolicy::weak(),
        Complexity::Simple => AugPolicy::strong(),
    }
}

fn chance(rng: &mut impl Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

fn filter_boxes(boxes: impl IntoIterator<Item = BoundingBox>, min_area: f64) -> Vec<BoundingBox> {
    boxes
        .into_iter()
        .filter_map(|b| {
            let (x1, y1, x2, y2) = b.corners();
            if x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0 {
                Some(b)
            } else {
                b.clipped()
            }
        })
        .filter(|b| b.area() >= min_area)
        .collect()
}

pub fn flip_horizontal(image: &LabeledImage) -> LabeledImage {
    LabeledImage {
        pixels: image.pixels.flip_horizontal(),
        boxes: image
            .boxes
            .iter()
            .map(|b| BoundingBox { cx: 1.0 - b.cx, ..*b })
            .collect(),
        source_id: image.source_id.clone(),
    }
}

fn pick_partners<'a>(image: &'a LabeledImage, pool: &'a [LabeledImage], rng: &mut impl Rng) -> [&'a LabeledImage; 3] {
    std::array::from_fn(|_| {
        if pool.is_empty() {
            image
        } else {
            &pool[rng.random_range(0..pool.len())]
        }
    })
}

/// Places four images on a `2s x 2s` canvas (`s` the larger side of the
/// first) around the point `(xc, yc)`: first top-left, then top-right,
/// bottom-left, bottom-right. Anything past the canvas edge is cropped.
pub fn composite(images: [&LabeledImage; 4], xc: usize, yc: usize, min_area: f64) -> LabeledImage {
    let s = images[0].width().max(images[0].height());
    let channels = images[0].pixels.channels();
    let side = 2 * s;
    let mut canvas = Pixels::filled(side, side, channels, PAD_VALUE).expect("positive size");
    let mut boxes = Vec::new();
    let (xc, yc) = (xc as isize, yc as isize);
    let s_i = s as isize;
    let origins = [(xc - s_i, yc - s_i), (xc, yc - s_i), (xc - s_i, yc), (xc, yc)];
    for (img, (x0, y0)) in images.iter().zip(origins) {
        let tile = if img.width() == s && img.height() == s {
            (*img).clone()
        } else {
            letterbox_resize(img, s)
        };
        let px = tile.pixels.with_channels(channels);
        canvas.blit(&px, x0, y0);
        let f = s as f64 / side as f64;
        let (ox, oy) = (x0 as f64 / side as f64, y0 as f64 / side as f64);
        boxes.extend(tile.boxes.iter().map(|b| BoundingBox {
            cx: ox + b.cx * f,
            cy: oy + b.cy * f,
            w: b.w * f,
            h: b.h * f,
            ..*b
        }));
    }
    let boxes = boxes
        .into_iter()
        .filter_map(|b| {
            let (x1, y1, x2, y2) = b.corners();
            BoundingBox::from_corners(b.class_id, x1, y1, x2, y2)
        })
        .filter(|b| b.area() >= min_area)
        .collect();
    LabeledImage {
        pixels: canvas,
        boxes,
        source_id: images[0].source_id.clone(),
    }
}

/// The image and three partners tiled 2x2 at their own scale.
pub fn stitch(images: [&LabeledImage; 4], min_area: f64) -> LabeledImage {
    let s = images[0].width().max(images[0].height());
    composite(images, s, s, min_area)
}

/// Row-major 2x3 forward transform in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    /// `self` after `o`.
    pub fn then(self, o: Affine) -> Affine {
        let [a, b, c, d, e, f] = o.0;
        let [p, q, r, s, t, u] = self.0;
        Affine([a * p + d * q, b * p + e * q, c * p + f * q + r, a * s + d * t, b * s + e * t, c * s + f * t + u])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, c, d, e, f] = self.0;
        (a * x + b * y + c, d * x + e * y + f)
    }

    pub fn inverse(&self) -> Option<Affine> {
        let [a, b, c, d, e, f] = self.0;
        let det = a * e - b * d;
        if det.abs() < 1e-12 {
            return None;
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Some(Affine([ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)]))
    }

    /// Draws a transform for a `w x h` image: rotation and scale about the
    /// center, shear, then translation.
    pub fn random(params: &AffineParams, w: usize, h: usize, rng: &mut impl Rng) -> Affine {
        let uniform = |rng: &mut _, lo: f64, hi: f64| if hi > lo { Rng::random_range(rng, lo..hi) } else { lo };
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let angle = uniform(rng, -params.max_rotate_deg, params.max_rotate_deg).to_radians();
        let scale = uniform(rng, params.scale_range.0, params.scale_range.1);
        let shx = uniform(rng, -params.shear_deg, params.shear_deg).to_radians().tan();
        let shy = uniform(rng, -params.shear_deg, params.shear_deg).to_radians().tan();
        let tx = uniform(rng, -params.translate_frac, params.translate_frac) * w as f64;
        let ty = uniform(rng, -params.translate_frac, params.translate_frac) * h as f64;
        let (sn, cs) = angle.sin_cos();
        let rs = Affine([scale * cs, -scale * sn, 0.0, scale * sn, scale * cs, 0.0]);
        let shear = Affine([1.0, shx, 0.0, shy, 1.0, 0.0]);
        Affine::translation(cx + tx, cy + ty)
            .then(shear)
            .then(rs)
            .then(Affine::translation(-cx, -cy))
    }
}

fn sample_bilinear(px: &Pixels, x: f64, y: f64, c: usize) -> f64 {
    let (w, h) = (px.width() as isize, px.height() as isize);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |xi: isize, yi: isize| {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            PAD_VALUE as f64
        } else {
            px.get(xi as usize, yi as usize, c) as f64
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps pixels and boxes with `m`, keeping the canvas size. Boxes become
/// the bounding rectangle of their transformed corners, clipped and
/// area-filtered.
pub fn warp_affine(image: &LabeledImage, m: Affine, min_area: f64) -> LabeledImage {
    if m == Affine::IDENTITY {
        return LabeledImage {
            boxes: filter_boxes(image.boxes.iter().copied(), min_area),
            ..image.clone()
        };
    }
    let (w, h) = (image.width(), image.height());
    let ch = image.pixels.channels();
    let inv = m.inverse().expect("affine with nonzero scale is invertible");
    let mut out = Pixels::filled(w, h, ch, PAD_VALUE).expect("positive size");
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            for c in 0..ch {
                let v = sample_bilinear(&image.pixels, sx - 0.5, sy - 0.5, c);
                out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let (fw, fh) = (w as f64, h as f64);
    let boxes = image.boxes.iter().filter_map(|b| {
        let (x1, y1, x2, y2) = b.corners();
        let pts = [(x1, y1), (x2, y1), (x1, y2), (x2, y2)].map(|(x, y)| m.apply(x * fw, y * fh));
        let xs = pts.map(|p| p.0 / fw);
        let ys = pts.map(|p| p.1 / fh);
        let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
        let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
        BoundingBox::from_corners(b.class_id, min(xs), min(ys), max(xs), max(ys))
    });
    LabeledImage {
        pixels: out,
        boxes: filter_boxes(boxes, min_area),
        source_id: image.source_id.clone(),
    }
}

/// Flip, then (with `stitch_prob`) a 2x2 stitch with three partners drawn
/// from `pool`.
pub fn apply_weak(policy: &AugPolicy, image: &LabeledImage, pool: &[LabeledImage], rng: &mut impl Rng) -> LabeledImage {
    let mut out = if chance(rng, policy.flip_prob) {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    if chance(rng, policy.stitch_prob) {
        let [a, b, c] = pick_partners(image, pool, rng);
        out = stitch([&out, a, b, c], policy.min_box_area_frac);
    }
    out.boxes = filter_boxes(out.boxes, policy.min_box_area_frac);
    out
}

/// Mosaic around a random center (with `mosaic_prob`), random affine, flip.
pub fn apply_strong(policy: &AugPolicy, image: &LabeledImage, pool: &[LabeledImage], rng: &mut impl Rng) -> LabeledImage {
    let mut out = image.clone();
    if chance(rng, policy.mosaic_prob) {
        let [a, b, c] = pick_partners(image, pool, rng);
        let s = image.width().max(image.height());
        let xc = rng.random_range(s / 2..=s + s / 2);
        let yc = rng.random_range(s / 2..=s + s / 2);
        out = composite([&out, a, b, c], xc, yc, policy.min_box_area_frac);
    }
    let m = Affine::random(&policy.affine, out.width(), out.height(), rng);
    out = warp_affine(&out, m, policy.min_box_area_frac);
    if chance(rng, policy.flip_prob) {
        out = flip_horizontal(&out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(id: &str, boxes: Vec<BoundingBox>) -> LabeledImage {
        let mut px = Pixels::filled(32, 32, 1, 0).unwrap();
        for (i, v) in px.data_mut().iter_mut().enumerate() {
            *v = (i * 7 % 251) as u8;
        }
        LabeledImage::new(px, boxes, id).unwrap()
    }

    fn one_box(cx: f64, cy: f64) -> LabeledImage {
        img("a", vec![BoundingBox::crater(cx, cy, 0.25, 0.125).unwrap()])
    }

    #[test]
    fn policy_selection_follows_complexity() {
        assert_eq!(select_policy(Complexity::Complex).kind, AugKind::Weak);
        assert_eq!(select_policy(Complexity::Simple).kind, AugKind::Strong);
        assert_eq!(select_policy(Complexity::Simple), select_policy(Complexity::Simple));
        assert!(AugPolicy::weak().validate().is_ok());
        assert!(AugPolicy::strong().validate().is_ok());
    }

    #[test]
    fn forced_flip_mirrors_box() {
        let p = AugPolicy {
            flip_prob: 1.0,
            ..AugPolicy::identity(AugKind::Weak)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = one_box(0.3, 0.4);
        let f = apply_weak(&p, &a, &[], &mut rng);
        assert!((f.boxes[0].cx - 0.7).abs() < 1e-15);
        assert_eq!((f.boxes[0].cy, f.boxes[0].w, f.boxes[0].h), (0.4, 0.25, 0.125));
        let back = apply_weak(&p, &f, &[], &mut rng);
        assert_eq!(back.pixels, a.pixels);
        assert!((back.boxes[0].cx - 0.3).abs() < 1e-15);
    }

    #[test]
    fn forced_stitch_halves_boxes() {
        let p = AugPolicy {
            stitch_prob: 1.0,
            ..AugPolicy::identity(AugKind::Weak)
        };
        let pool = vec![one_box(0.5, 0.5), one_box(0.2, 0.7), one_box(0.8, 0.3)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = apply_weak(&p, &one_box(0.25, 0.25), &pool, &mut rng);
        assert_eq!((s.width(), s.height()), (64, 64));
        assert!(s.boxes.len() <= 4);
        assert_eq!(s.boxes.len(), 4);
        for b in &s.boxes {
            assert!((b.w - 0.125).abs() < 1e-15 && (b.h - 0.0625).abs() < 1e-15);
        }
        assert!((s.boxes[0].cx - 0.125).abs() < 1e-15);
        // partner tiles keep their pixels
        assert_eq!(s.pixels.get(32, 0, 0), pool[0].pixels.get(0, 0, 0).max(0));
    }

    #[test]
    fn mosaic_at_midpoint_equals_stitch() {
        let imgs = [one_box(0.3, 0.3), one_box(0.6, 0.2), one_box(0.4, 0.7), one_box(0.5, 0.5)];
        let refs = [&imgs[0], &imgs[1], &imgs[2], &imgs[3]];
        assert_eq!(composite(refs, 32, 32, 0.0), stitch(refs, 0.0));
    }

    #[test]
    fn mosaic_crops_tiles() {
        let imgs = [one_box(0.1, 0.1), one_box(0.5, 0.5), one_box(0.5, 0.5), one_box(0.5, 0.5)];
        let refs = [&imgs[0], &imgs[1], &imgs[2], &imgs[3]];
        let m = composite(refs, 16, 16, 0.0);
        // first tile spans [-16, 16): its box at (3.2, 3.2) px is cut away
        assert_eq!(m.boxes.len(), 3);
        assert!(m.boxes.iter().all(|b| b.is_valid()));
    }

    #[test]
    fn identity_affine_is_exact() {
        let a = one_box(0.4, 0.6);
        let out = warp_affine(&a, Affine::IDENTITY, 0.0);
        assert_eq!(out, a);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Affine::random(&AffineParams::identity(), 32, 32, &mut rng);
        assert_eq!(m, Affine::IDENTITY);
        assert_eq!(apply_strong(&AugPolicy::identity(AugKind::Strong), &a, &[], &mut rng), a);
    }

    #[test]
    fn translation_shifts_centers() {
        let a = img(
            "t",
            vec![
                BoundingBox::crater(0.3, 0.5, 0.1, 0.1).unwrap(),
                BoundingBox::crater(0.6, 0.4, 0.1, 0.2).unwrap(),
            ],
        );
        let out = warp_affine(&a, Affine::translation(0.1 * 32.0, 0.0), 0.0);
        for (o, i) in out.boxes.iter().zip(&a.boxes) {
            assert!((o.cx - (i.cx + 0.1)).abs() < 1e-12);
            assert!((o.w - i.w).abs() < 1e-12);
        }
        // integer shifts move pixels exactly
        let shifted = warp_affine(&a, Affine::translation(3.0, 0.0), 0.0);
        assert_eq!(shifted.pixels.get(10, 5, 0), a.pixels.get(7, 5, 0));
        assert_eq!(shifted.pixels.get(1, 5, 0), PAD_VALUE);
    }

    #[test]
    fn inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Affine::random(&AffineParams::default(), 64, 48, &mut rng);
        let inv = m.inverse().unwrap();
        let (x, y) = inv.apply(m.apply(12.5, 30.25).0, m.apply(12.5, 30.25).1);
        assert!((x - 12.5).abs() < 1e-9 && (y - 30.25).abs() < 1e-9);
    }

    fn scene() -> impl Strategy<Value = Vec<BoundingBox>> {
        prop::collection::vec(
            (0.0f64..=1.0, 0.0f64..=1.0, 0.01f64..0.6, 0.01f64..0.6)
                .prop_map(|(x, y, w, h)| BoundingBox::crater(x, y, w, h).unwrap()),
            0..6,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn outputs_are_valid_and_never_invent_boxes(a in scene(), b in scene(), c in scene(), seed: u64, strong: bool) {
            let pool = vec![img("b", b.clone()), img("c", c.clone())];
            let total = a.len() + 3 * b.len().max(c.len());
            let base = img("a", a);
            let policy = if strong { AugPolicy::strong() } else { AugPolicy { stitch_prob: 0.7, ..AugPolicy::weak() } };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = policy.apply(&base, &pool, &mut rng);
            prop_assert!(out.boxes.len() <= total);
            for bx in &out.boxes {
                prop_assert!(bx.is_valid(), "{bx:?}");
                prop_assert!(bx.area() >= policy.min_box_area_frac);
            }
        }

        #[test]
        fn zero_probabilities_are_identity(a in scene(), seed: u64, strong: bool) {
            let kind = if strong { AugKind::Strong } else { AugKind::Weak };
            let base = img("a", a.into_iter().filter_map(|b| b.clipped()).collect());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(AugPolicy::identity(kind).apply(&base, &[], &mut rng), base);
        }
    }
}
