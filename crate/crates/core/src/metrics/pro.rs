//! Per-region overlap: every connected ground-truth region counts equally,
//! regardless of its size.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_FPR_CAP: f64 = 0.3;

/// 8-connected components of `mask`. Background is 0, regions are `1..=count`
/// numbered in raster order of their first pixel.
pub fn label_regions(mask: ArrayView2<'_, bool>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            count += 1;
            labels[[y, x]] = count;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = count;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// PRO against global FPR over all distinct thresholds, from `(0, 0)` to `(1, 1)`.
pub fn pro_curve<T: Scalar>(
    maps: &[ArrayView2<'_, T>],
    masks: &[ArrayView2<'_, bool>],
) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() {
        return Err(Error::Config(format!(
            "{} score maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    // (score, weight): weight is 1/region_size for region pixels, None for negatives.
    let mut pixels: Vec<(f64, Option<f64>)> = Vec::new();
    let mut regions = 0usize;
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.dim() != mask.dim() {
            return Err(Error::dim(
                format!("map {i}"),
                format!("score map {:?} vs mask {:?}", map.dim(), mask.dim()),
            ));
        }
        let (labels, n) = label_regions(mask.view());
        let mut sizes = vec![0usize; n + 1];
        for &l in labels.iter() {
            sizes[l as usize] += 1;
        }
        for (&s, &l) in map.iter().zip(labels.iter()) {
            let s = s.as_f64();
            if !s.is_finite() {
                return Err(Error::NonFinite { row: i });
            }
            let weight = (l != 0).then(|| 1.0 / sizes[l as usize] as f64);
            pixels.push((s, weight));
        }
        regions += n;
    }
    if regions == 0 {
        return Err(Error::Undefined("AUPRO needs at least one ground-truth region".into()));
    }
    let negatives = pixels.iter().filter(|p| p.1.is_none()).count();
    if negatives == 0 {
        return Err(Error::Undefined("AUPRO needs at least one normal pixel".into()));
    }
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = vec![(0.0, 0.0)];
    let mut fp = 0usize;
    // Neumaier-compensated running sum of 1/region_size weights.
    let (mut overlap, mut carry) = (0.0f64, 0.0f64);
    for (i, &(s, weight)) in pixels.iter().enumerate() {
        match weight {
            Some(w) => {
                let t = overlap + w;
                carry += if overlap.abs() >= w {
                    (overlap - t) + w
                } else {
                    (w - t) + overlap
                };
                overlap = t;
            }
            None => fp += 1,
        }
        if pixels.get(i + 1).is_none_or(|next| next.0 != s) {
            curve.push((fp as f64 / negatives as f64, (overlap + carry) / regions as f64));
        }
    }
    Ok(curve)
}

/// Trapezoidal area up to `cap` (interpolating at the cap), divided by `cap`.
pub fn capped_area(curve: &[(f64, f64)], cap: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= cap {
            break;
        }
        if x1 <= cap {
            area += (x1 - x0) * (y0 + y1) * 0.5;
        } else {
            let y_cap = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
            area += (cap - x0) * (y0 + y_cap) * 0.5;
            break;
        }
    }
    area / cap
}

/// Normalized area under the PRO curve up to `fpr_cap`.
pub fn aupro<T: Scalar>(
    maps: &[ArrayView2<'_, T>],
    masks: &[ArrayView2<'_, bool>],
    fpr_cap: f64,
) -> Result<f64> {
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::Config(format!("FPR cap {fpr_cap} outside (0, 1]")));
    }
    Ok(capped_area(&pro_curve(maps, masks)?, fpr_cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(h: usize, w: usize, y: std::ops::Range<usize>, x: std::ops::Range<usize>) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(r, c)| y.contains(&r) && x.contains(&c))
    }

    #[test]
    fn diagonal_pixels_join_one_region() {
        let mut m = Array2::from_elem((4, 4), false);
        m[[0, 0]] = true;
        m[[1, 1]] = true;
        m[[3, 3]] = true;
        let (labels, n) = label_regions(m.view());
        assert_eq!(n, 2);
        assert_eq!(labels[[0, 0]], labels[[1, 1]]);
        assert_ne!(labels[[0, 0]], labels[[3, 3]]);
    }

    #[test]
    fn indicator_map_scores_one() {
        let m = rect(16, 16, 3..9, 4..12);
        let s = m.mapv(|v| if v { 1.0 } else { 0.0 });
        assert_eq!(aupro(&[s.view()], &[m.view()], 0.3).unwrap(), 1.0);
    }

    #[test]
    fn undetected_region_caps_pro_at_half() {
        // Region A is scored 1, region B scores 0 like the background.
        let mut m = rect(16, 16, 1..5, 1..5);
        m |= &rect(16, 16, 10..14, 10..14);
        let s = rect(16, 16, 1..5, 1..5).mapv(|v| if v { 1.0 } else { 0.0 });
        let curve = pro_curve(&[s.view()], &[m.view()]).unwrap();
        assert_eq!(curve[1], (0.0, 0.5));
        assert_eq!(curve[2], (1.0, 1.0));
        // Plateau at 0.5 until the cap: area = 0.5 + interpolated ramp.
        let a = capped_area(&curve, 0.3);
        let y_cap = 0.5 + 0.5 * 0.3;
        assert!((a - (0.5 + y_cap) * 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_scores_give_half_the_cap() {
        let m = rect(64, 64, 8..56, 8..40);
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Array2::from_shape_fn((64, 64), |_| rng.random::<f64>());
            total += aupro(&[s.view()], &[m.view()], 0.3).unwrap();
        }
        assert!((total / 10.0 - 0.15).abs() < 0.05, "{}", total / 10.0);
    }

    #[test]
    fn errors() {
        let empty = Array2::from_elem((4, 4), false);
        let s = Array2::<f64>::zeros((4, 4));
        assert!(matches!(
            aupro(&[s.view()], &[empty.view()], 0.3),
            Err(Error::Undefined(_))
        ));
        let full = Array2::from_elem((4, 4), true);
        assert!(aupro(&[s.view()], &[full.view()], 0.0).is_err());
    }
}
