use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{default_anchors, Anchor};

const ITERATIONS: usize = 60;

fn dist2(a: Anchor, b: Anchor) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Lloyd's k-means over box sizes with k-means++ seeding, `3 * strides.len()`
/// clusters sorted by area and dealt out finest scale first. Falls back to
/// [`default_anchors`] when there are fewer distinct sizes than clusters.
pub fn kmeans_anchors(sizes: &[Anchor], strides: &[usize], seed: u64) -> Vec<Vec<Anchor>> {
    let k = 3 * strides.len();
    let mut distinct: Vec<Anchor> = sizes.to_vec();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if distinct.len() < k {
        log::warn!("{} distinct box sizes for {k} anchors, using defaults", distinct.len());
        return default_anchors(strides);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![sizes[rng.random_range(0..sizes.len())]];
    while centers.len() < k {
        let d: Vec<f64> = sizes
            .iter()
            .map(|&s| centers.iter().map(|&c| dist2(s, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let mut r = rng.random_range(0.0..total);
        let mut pick = sizes.len() - 1;
        for (i, di) in d.iter().enumerate() {
            if r < *di {
                pick = i;
                break;
            }
            r -= di;
        }
        centers.push(sizes[pick]);
    }

    for _ in 0..ITERATIONS {
        let mut sum = vec![(0.0, 0.0, 0usize); k];
        for &s in sizes {
            let j = (0..k)
                .min_by(|&a, &b| dist2(s, centers[a]).total_cmp(&dist2(s, centers[b])))
                .expect("k > 0");
            sum[j].0 += s.0;
            sum[j].1 += s.1;
            sum[j].2 += 1;
        }
        let mut moved = false;
        for (c, (sw, sh, n)) in centers.iter_mut().zip(sum) {
            if n > 0 {
                let next = (sw / n as f64, sh / n as f64);
                moved |= next != *c;
                *c = next;
            }
        }
        if !moved {
            break;
        }
    }

    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    centers.chunks(3).map(<[Anchor]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_separated_clusters() {
        let mut sizes = Vec::new();
        for &(w, h) in &[(4.0, 4.0), (8.0, 6.0), (12.0, 12.0), (20.0, 24.0), (40.0, 36.0), (64.0, 64.0)] {
            for d in [-0.5, 0.0, 0.5] {
                sizes.push((w + d, h - d));
            }
        }
        let a = kmeans_anchors(&sizes, &[8, 16], 3);
        assert_eq!(a.len(), 2);
        let flat: Vec<Anchor> = a.into_iter().flatten().collect();
        let want = [(4.0, 4.0), (8.0, 6.0), (12.0, 12.0), (20.0, 24.0), (40.0, 36.0), (64.0, 64.0)];
        for (got, want) in flat.iter().zip(want) {
            assert!(dist2(*got, want) < 1e-9, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn too_few_sizes_fall_back() {
        let a = kmeans_anchors(&[(5.0, 5.0)], &[8, 16, 32], 0);
        assert_eq!(a, default_anchors(&[8, 16, 32]));
    }
}
