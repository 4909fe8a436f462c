//! K-means palette extraction in CIELAB.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::color::{order_palette, quantize, scale_lab, srgb_to_lab, ColorCode, LabColor, RgbColor, MAX_PALETTE_LEN};

const MAX_ITERATIONS: usize = 50;
const MIN_SHIFT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no pixels to extract a palette from")]
    Empty,
    #[error("palette size {0} outside 1..=5")]
    BadK(usize),
}

fn sq_dist(a: &LabColor, b: &LabColor) -> f64 {
    (a.l - b.l).powi(2) + (a.a - b.a).powi(2) + (a.b - b.b).powi(2)
}

/// Clusters `pixels` into at most `k` colors and returns their codes,
/// lightness-ordered and deduplicated.
///
/// Initialization picks a seeded random pixel, then repeatedly the pixel
/// farthest from all chosen centroids. Lloyd iterations stop after 50 rounds
/// or once no centroid moves more than `1e-3`.
pub fn extract_palette(pixels: &[RgbColor], k: usize, seed: u64) -> Result<Vec<ColorCode>, ExtractError> {
    if pixels.is_empty() {
        return Err(ExtractError::Empty);
    }
    if k == 0 || k > MAX_PALETTE_LEN {
        return Err(ExtractError::BadK(k));
    }
    let mut distinct: Vec<RgbColor> = pixels.to_vec();
    distinct.sort_by_key(|c| (c.r, c.g, c.b));
    distinct.dedup();
    let k = k.min(distinct.len());

    let labs: Vec<LabColor> = pixels.iter().map(|&p| srgb_to_lab(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![labs[rng.random_range(0..labs.len())]];
    let mut nearest: Vec<f64> = labs.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let (far, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        let c = labs[far];
        for (n, p) in nearest.iter_mut().zip(&labs) {
            *n = n.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let mut assignment = vec![0usize; labs.len()];
    for _ in 0..MAX_ITERATIONS {
        for (a, p) in assignment.iter_mut().zip(&labs) {
            *a = (0..k)
                .min_by(|&i, &j| sq_dist(p, &centroids[i]).total_cmp(&sq_dist(p, &centroids[j])))
                .expect("k >= 1");
        }
        let mut sums = vec![(0.0, 0.0, 0.0, 0usize); k];
        for (&a, p) in assignment.iter().zip(&labs) {
            let s = &mut sums[a];
            s.0 += p.l;
            s.1 += p.a;
            s.2 += p.b;
            s.3 += 1;
        }
        let mut shift: f64 = 0.0;
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.3 == 0 {
                continue;
            }
            let n = s.3 as f64;
            let next = LabColor::new(s.0 / n, s.1 / n, s.2 / n);
            shift = shift.max(sq_dist(c, &next).sqrt());
            *c = next;
        }
        if shift < MIN_SHIFT {
            break;
        }
    }

    let mut codes: Vec<ColorCode> = centroids.iter().map(|&c| quantize(scale_lab(c))).collect();
    codes.sort();
    codes.dedup();
    Ok(order_palette(codes).expect("at most five centroids"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BLACK: RgbColor = RgbColor::new(0, 0, 0);
    const WHITE: RgbColor = RgbColor::new(255, 255, 255);

    #[test]
    fn identical_pixels_collapse() {
        assert_eq!(extract_palette(&[BLACK; 100], 5, 0).unwrap(), vec![ColorCode::BLACK]);
    }

    #[test]
    fn two_exact_clusters() {
        let mut pixels = vec![BLACK; 50];
        pixels.extend([WHITE; 50]);
        assert_eq!(extract_palette(&pixels, 2, 7).unwrap(), vec![ColorCode::BLACK, ColorCode::WHITE]);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pixels: Vec<RgbColor> =
            (0..500).map(|_| RgbColor::new(rng.random(), rng.random(), rng.random())).collect();
        assert_eq!(extract_palette(&pixels, 5, 3).unwrap(), extract_palette(&pixels, 5, 3).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(extract_palette(&[], 3, 0), Err(ExtractError::Empty));
        assert_eq!(extract_palette(&[BLACK], 0, 0), Err(ExtractError::BadK(0)));
        assert_eq!(extract_palette(&[BLACK], 6, 0), Err(ExtractError::BadK(6)));
    }
}
