//! Grid resampling shared by layer merging and score-map upsampling.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Corner-aligned source coordinate for output index `i` of `out` samples.
#[inline]
fn source_pos(i: usize, out: usize, src: usize) -> f64 {
    if out <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (out - 1) as f64
    }
}

/// Bilinear resize with corner alignment: the first and last output samples sit
/// exactly on the first and last source cells.
pub fn resize_bilinear<T: Scalar>(
    grid: ArrayView2<'_, T>,
    out_h: usize,
    out_w: usize,
) -> Result<Array2<T>> {
    let (h, w) = grid.dim();
    if h == 0 || w == 0 {
        return Err(Error::Empty("source grid has a zero dimension".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, T)> {
        (0..out)
            .map(|i| {
                let p = source_pos(i, out, src);
                let lo = (p.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, T::from_f64_lossy(p - lo as f64))
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    let one = T::one();
    Ok(Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = grid[[y0, x0]] * (one - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (one - fx) + grid[[y1, x1]] * fx;
        top * (one - fy) + bottom * fy
    }))
}

/// Separable Gaussian blur with reflect padding, kernel truncated at 4 sigma.
pub fn gaussian_blur<T: Scalar>(grid: ArrayView2<'_, T>, sigma: f64) -> Array2<T> {
    if sigma <= 0.0 {
        return grid.to_owned();
    }
    let radius = (4.0 * sigma).round() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let period = 2 * n;
        let mut m = i.rem_euclid(period);
        if m >= n {
            m = period - 1 - m;
        }
        m as usize
    };
    let (h, w) = grid.dim();
    let horizontal = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| grid[[y, reflect(x as isize + k as isize - radius, w)]].as_f64() * wt)
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        T::from_f64_lossy(
            kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| horizontal[[reflect(y as isize + k as isize - radius, h), x]] * wt)
                .sum::<f64>(),
        )
    })
}
