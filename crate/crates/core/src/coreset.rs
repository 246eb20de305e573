//! Greedy k-center coreset selection (farthest-point traversal).

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{squared_l2, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoresetConfig {
    /// Fraction of the pool kept, in `(0, 1]`.
    pub ratio: f64,
    /// Seeds the choice of the first center.
    pub seed: u64,
    /// Run the traversal on a Gaussian random projection of this many dimensions.
    /// Off by default; distances are then approximate during selection.
    #[serde(default)]
    pub projection_dim: Option<usize>,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        CoresetConfig {
            ratio: 0.10,
            seed: 0,
            projection_dim: None,
        }
    }
}

impl CoresetConfig {
    pub fn new(ratio: f64, seed: u64) -> Result<Self> {
        let cfg = CoresetConfig {
            ratio,
            seed,
            projection_dim: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!(
                "coreset ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        if self.projection_dim == Some(0) {
            return Err(Error::Config("projection_dim must be positive".into()));
        }
        Ok(())
    }

    /// `max(1, round(ratio * pool_size))`.
    pub fn budget(&self, pool_size: usize) -> usize {
        ((self.ratio * pool_size as f64).round() as usize).clamp(1, pool_size.max(1))
    }
}

/// Selected subset of a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Coreset<T> {
    /// Row indices into the pool, in selection order.
    pub indices: Vec<usize>,
    /// `indices.len() x d`, copied verbatim from the pool.
    pub vectors: Array2<T>,
    /// Largest distance from any pool point to its nearest selected point.
    pub covering_radius: T,
    pub pool_size: usize,
    /// Covering radius after each selection step.
    pub radius_trace: Vec<T>,
    pub distance_evals: u64,
}

impl<T: Scalar> Coreset<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Farthest-point traversal from a seeded random start until the budget is met.
///
/// Ties in the farthest distance go to the smallest pool index; already
/// selected rows are never picked twice, even among duplicates.
pub fn kcenter_greedy<T: Scalar>(pool: ArrayView2<'_, T>, config: &CoresetConfig) -> Result<Coreset<T>> {
    config.validate()?;
    let m = pool.nrows();
    if m == 0 {
        return Err(Error::Empty("coreset pool is empty".into()));
    }
    let budget = config.budget(m);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = rng.random_range(0..m);

    let projected = match config.projection_dim {
        Some(k) if k < pool.ncols() => Some(project(pool, k, &mut rng)),
        _ => None,
    };
    let work = projected
        .as_ref()
        .map(|p| p.view())
        .unwrap_or(pool)
        .as_standard_layout()
        .into_owned();
    let (indices, mut min_sq, trace) = traverse(work.view(), start, budget);
    let mut evals = (budget as u64) * (m as u64);

    if projected.is_some() {
        let pool = pool.as_standard_layout();
        min_sq = nearest_sq(pool.view(), &indices);
        evals += (budget as u64) * (m as u64);
    }
    let covering_radius = min_sq.iter().copied().fold(T::zero(), T::max).sqrt();
    Ok(Coreset {
        vectors: pool.select(Axis(0), &indices),
        indices,
        covering_radius,
        pool_size: m,
        radius_trace: trace,
        distance_evals: evals,
    })
}

fn traverse<T: Scalar>(pool: ArrayView2<'_, T>, start: usize, budget: usize) -> (Vec<usize>, Vec<T>, Vec<T>) {
    let m = pool.nrows();
    let mut min_sq = vec![T::infinity(); m];
    let mut selected = vec![false; m];
    let mut indices = Vec::with_capacity(budget);
    let mut trace = Vec::with_capacity(budget);
    let mut next = start;
    for _ in 0..budget {
        indices.push(next);
        selected[next] = true;
        let center = pool.row(next);
        let center = center.as_slice().expect("standard layout");
        min_sq
            .par_iter_mut()
            .zip(pool.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(best, row)| {
                let d = squared_l2(row.as_slice().expect("standard layout"), center);
                if d < *best {
                    *best = d;
                }
            });
        let radius = min_sq.iter().copied().fold(T::zero(), T::max);
        trace.push(radius.sqrt());
        let mut far: Option<(usize, T)> = None;
        for (i, &d) in min_sq.iter().enumerate() {
            if !selected[i] && far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        match far {
            Some((i, _)) => next = i,
            None => break,
        }
    }
    (indices, min_sq, trace)
}

fn nearest_sq<T: Scalar>(pool: ArrayView2<'_, T>, centers: &[usize]) -> Vec<T> {
    pool.axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| {
            let row = row.as_slice().expect("standard layout");
            centers
                .iter()
                .map(|&c| squared_l2(row, pool.row(c).as_slice().expect("standard layout")))
                .fold(T::infinity(), T::min)
        })
        .collect()
}

fn project<T: Scalar>(pool: ArrayView2<'_, T>, dim: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let scale = 1.0 / (dim as f64).sqrt();
    let matrix = Array2::from_shape_fn((pool.ncols(), dim), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z * scale)
    });
    pool.dot(&matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(ratio: f64, seed: u64) -> CoresetConfig {
        CoresetConfig::new(ratio, seed).unwrap()
    }

    #[test]
    fn budget_rounding() {
        let c = cfg(0.1, 0);
        assert_eq!(c.budget(4), 1);
        assert_eq!(c.budget(15), 2);
        assert_eq!(c.budget(25), 3);
        assert_eq!(c.budget(100), 10);
        assert_eq!(cfg(1.0, 0).budget(7), 7);
    }

    #[test]
    fn invalid_ratio() {
        assert!(CoresetConfig::new(0.0, 0).is_err());
        assert!(CoresetConfig::new(1.5, 0).is_err());
        assert!(CoresetConfig::new(f64::NAN, 0).is_err());
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let pool = array![[0.0f64], [1.0], [2.0], [10.0]];
        let c = kcenter_greedy(pool.view(), &cfg(1.0, 3)).unwrap();
        let mut idx = c.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert_eq!(c.covering_radius, 0.0);
        assert_eq!(c.distance_evals, 16);
    }

    #[test]
    fn identical_points_radius_zero() {
        let pool = Array2::from_elem((6, 3), 2.0f32);
        let c = kcenter_greedy(pool.view(), &cfg(0.1, 1)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.covering_radius, 0.0);
        let c = kcenter_greedy(pool.view(), &cfg(0.5, 1)).unwrap();
        let mut idx = c.indices.clone();
        idx.dedup();
        assert_eq!(idx.len(), 3, "duplicates never re-selected");
    }

    #[test]
    fn empty_pool() {
        let pool = Array2::<f32>::zeros((0, 2));
        assert!(matches!(
            kcenter_greedy(pool.view(), &cfg(0.5, 0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn same_seed_same_order() {
        let pool = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 13 + j * 7) % 17) as f64);
        let a = kcenter_greedy(pool.view(), &cfg(0.2, 11)).unwrap();
        let b = kcenter_greedy(pool.view(), &cfg(0.2, 11)).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn trace_is_non_increasing_and_vectors_verbatim() {
        let pool = Array2::from_shape_fn((80, 4), |(i, j)| ((i * 31 + j * 11) % 29) as f64 * 0.3);
        let c = kcenter_greedy(pool.view(), &cfg(0.25, 5)).unwrap();
        for w in c.radius_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(*c.radius_trace.last().unwrap(), c.covering_radius);
        for (row, &i) in c.vectors.outer_iter().zip(&c.indices) {
            assert_eq!(row, pool.row(i));
        }
    }

    #[test]
    fn projection_path_reports_exact_radius() {
        let pool = Array2::from_shape_fn((60, 8), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let mut c = cfg(0.2, 2);
        c.projection_dim = Some(3);
        let cs = kcenter_greedy(pool.view(), &c).unwrap();
        let exact = (0..60)
            .map(|i| {
                cs.indices
                    .iter()
                    .map(|&s| {
                        pool.row(i)
                            .iter()
                            .zip(pool.row(s).iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        assert!((cs.covering_radius - exact).abs() < 1e-12);
    }
}
