//! Anomaly scoring: route by semantic key, then nearest-neighbour distance of
//! every patch against the routed bank.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{blob, FeatureArchive, ImageRecord};
use crate::memory_bank::HierMemoryBank;
use crate::resample::{gaussian_blur, resize_bilinear};
use crate::scalar::{squared_l2, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Gaussian sigma (pixels) applied to the upsampled map. `None` disables it.
    pub smoothing_sigma: Option<f64>,
}

impl ScoreOptions {
    /// Smoothing as commonly used by patch-memory detectors (sigma = 4).
    pub fn smoothed() -> Self {
        ScoreOptions {
            smoothing_sigma: Some(4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult<T> {
    pub record_id: String,
    pub routed_cluster: usize,
    /// `grid_h x grid_w` nearest-neighbour distances.
    pub patch_scores: Array2<T>,
    /// `H x W` upsampled (and optionally smoothed) map.
    pub score_map: Array2<T>,
    /// Maximum patch score.
    pub image_score: T,
    pub distance_evals: u64,
}

/// Exhaustive nearest-neighbour distance of every query row against `bank`.
pub fn nearest_distances<T: Scalar>(queries: ArrayView2<'_, T>, bank: ArrayView2<'_, T>) -> Vec<T> {
    let bank = bank.as_standard_layout();
    let rows: Vec<&[T]> = bank
        .outer_iter()
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    queries
        .outer_iter()
        .map(|q| {
            let q = q.as_standard_layout();
            let q = q.as_slice().expect("standard layout");
            rows.iter()
                .map(|r| squared_l2(q, r))
                .fold(T::infinity(), T::min)
                .sqrt()
        })
        .collect()
}

/// Bilinear upsampling with corner alignment; a 1x1 grid broadcasts.
pub fn upsample_bilinear<T: Scalar>(
    grid: ArrayView2<'_, T>,
    target_h: usize,
    target_w: usize,
) -> Result<Array2<T>> {
    resize_bilinear(grid, target_h, target_w)
}

/// Scores one record against the bank it routes to.
pub fn score_record<T: Scalar>(
    record: &ImageRecord,
    bank: &HierMemoryBank<T>,
    options: &ScoreOptions,
) -> Result<AnomalyResult<T>> {
    let (gh, gw, d) = record.patches.dim();
    if d != bank.patch_dim {
        return Err(Error::dim(
            &record.id,
            format!("patch_dim {d} != bank patch_dim {}", bank.patch_dim),
        ));
    }
    let semantic: Vec<T> = record.semantic.iter().map(|&v| T::of_f32(v)).collect();
    let k = bank.route(&semantic).map_err(|_| {
        Error::dim(
            &record.id,
            format!(
                "semantic length {} != key length {}",
                semantic.len(),
                bank.model.semantic_dim()
            ),
        )
    })?;
    let coreset = &bank.banks[k];
    let queries = record.patch_rows().mapv(T::of_f32);
    let scores = nearest_distances(queries.view(), coreset.vectors.view());
    let patch_scores = Array2::from_shape_vec((gh, gw), scores).expect("grid cells");
    let image_score = patch_scores.iter().copied().fold(T::zero(), T::max);
    let (w, h) = record.image_size;
    let mut score_map = upsample_bilinear(patch_scores.view(), h, w)?;
    if let Some(sigma) = options.smoothing_sigma {
        score_map = gaussian_blur(score_map.view(), sigma);
    }
    Ok(AnomalyResult {
        record_id: record.id.clone(),
        routed_cluster: k,
        patch_scores,
        score_map,
        image_score,
        distance_evals: (gh * gw * coreset.len()) as u64,
    })
}

/// Distance-evaluation tallies for a scoring pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCounters {
    pub records: usize,
    /// Patch-to-bank distance evaluations.
    pub query_distance_evals: u64,
    /// Semantic-to-key distance evaluations.
    pub route_distance_evals: u64,
    /// Test records routed to each cluster.
    pub routed_per_cluster: Vec<usize>,
}

/// Scores every test record. Output follows archive order.
pub fn score_batch<T: Scalar>(
    archive: &FeatureArchive,
    bank: &HierMemoryBank<T>,
    options: &ScoreOptions,
) -> Result<(Vec<AnomalyResult<T>>, ScoreCounters)> {
    let test: Vec<&ImageRecord> = archive.test().collect();
    score_records(&test, bank, options)
}

/// Scores an explicit list of records.
pub fn score_records<T: Scalar>(
    records: &[&ImageRecord],
    bank: &HierMemoryBank<T>,
    options: &ScoreOptions,
) -> Result<(Vec<AnomalyResult<T>>, ScoreCounters)> {
    let results = records
        .par_iter()
        .map(|r| score_record(r, bank, options))
        .collect::<Result<Vec<_>>>()?;
    let mut counters = ScoreCounters {
        records: results.len(),
        routed_per_cluster: vec![0; bank.k()],
        ..Default::default()
    };
    for r in &results {
        counters.query_distance_evals += r.distance_evals;
        counters.route_distance_evals += bank.k() as u64;
        counters.routed_per_cluster[r.routed_cluster] += 1;
    }
    Ok((results, counters))
}

/// `scores.jsonl`: one `{id, routed_cluster, image_score}` object per line.
pub fn write_scores_jsonl<T: Scalar>(results: &[AnomalyResult<T>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in results {
        let line = serde_json::json!({
            "id": r.record_id,
            "routed_cluster": r.routed_cluster,
            "image_score": r.image_score.as_f64(),
        });
        writeln!(out, "{line}").expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes each score map as `<dir>/<id>.map` (HCFS, rank 2, `H x W`).
pub fn write_score_maps<T: Scalar>(results: &[AnomalyResult<T>], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in results {
        let data: Vec<f32> = r.score_map.iter().map(|v| v.as_f32()).collect();
        let (h, w) = r.score_map.dim();
        blob::write(&dir.join(format!("{}.map", r.record_id)), &[h, w], &data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{ClusterModel, Partition};
    use crate::coreset::{Coreset, CoresetConfig};
    use crate::feature_store::{GtLabel, PatchGrid, Split};
    use crate::memory_bank::{BankConfig, BankMode};
    use ndarray::{array, Array1, Array3};

    fn bank_from_rows(rows: Array2<f64>, key: Vec<f64>) -> HierMemoryBank<f64> {
        let d = rows.ncols();
        let n = rows.nrows();
        let keys = Array2::from_shape_vec((1, key.len()), key).unwrap();
        let mut model = ClusterModel::from_partition(
            keys.view(),
            &Partition {
                assignment: vec![0],
                n_clusters: 1,
            },
        );
        model.keys = keys;
        HierMemoryBank {
            mode: BankMode::Monolithic,
            model,
            banks: vec![Coreset {
                indices: (0..n).collect(),
                vectors: rows,
                covering_radius: 0.0,
                pool_size: n,
                radius_trace: vec![],
                distance_evals: 0,
            }],
            pool_sizes: vec![n],
            config: BankConfig {
                coreset: CoresetConfig::default(),
                ..Default::default()
            },
            patch_grid: PatchGrid::identity(1, 1),
            patch_dim: d,
            train_ids: vec![],
        }
    }

    fn record(patches: Array3<f32>, semantic: Vec<f32>, size: (usize, usize)) -> ImageRecord {
        ImageRecord {
            id: "q".into(),
            split: Split::Test,
            class_label: None,
            gt_label: GtLabel::Normal,
            gt_mask: None,
            semantic: Array1::from(semantic),
            patches,
            image_size: size,
        }
    }

    #[test]
    fn three_four_five() {
        let bank = bank_from_rows(array![[3.0, 4.0]], vec![0.0]);
        let r = record(Array3::zeros((1, 1, 2)), vec![0.0], (4, 3));
        let res = score_record(&r, &bank, &ScoreOptions::default()).unwrap();
        assert_eq!(res.patch_scores[[0, 0]], 5.0);
        assert_eq!(res.image_score, 5.0);
        assert_eq!(res.score_map.dim(), (3, 4));
        assert!(res.score_map.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn patch_dim_mismatch() {
        let bank = bank_from_rows(array![[3.0, 4.0]], vec![0.0]);
        let r = record(Array3::zeros((1, 1, 3)), vec![0.0], (1, 1));
        assert!(matches!(
            score_record(&r, &bank, &ScoreOptions::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn image_score_is_max_patch_score() {
        let bank = bank_from_rows(array![[0.0], [10.0]], vec![0.0]);
        let patches =
            Array3::from_shape_vec((3, 3, 1), vec![1.0, 2.0, 3.0, 4.0, 7.0, 6.0, 9.5, 8.0, 0.5])
                .unwrap();
        let r = record(patches, vec![0.0], (7, 5));
        let res = score_record(&r, &bank, &ScoreOptions::default()).unwrap();
        assert_eq!(res.image_score, 4.0);
        let map_max = res.score_map.iter().copied().fold(0.0, f64::max);
        assert!(map_max <= res.image_score);
        assert!(res.patch_scores.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn superset_bank_never_raises_scores() {
        let rows = Array2::from_shape_fn((20, 3), |(i, j)| ((i * 7 + j * 5) % 13) as f64);
        let queries = Array2::from_shape_fn((15, 3), |(i, j)| ((i * 3 + j * 11) % 17) as f64 * 0.8);
        let small = nearest_distances(queries.view(), rows.slice(ndarray::s![..8, ..]));
        let big = nearest_distances(queries.view(), rows.view());
        for (b, s) in big.iter().zip(&small) {
            assert!(b <= s);
        }
    }

    #[test]
    fn smoothing_only_touches_the_map() {
        let bank = bank_from_rows(array![[0.0]], vec![0.0]);
        let mut patches = Array3::zeros((4, 4, 1));
        patches[[1, 2, 0]] = 3.0;
        let r = record(patches, vec![0.0], (16, 16));
        let plain = score_record(&r, &bank, &ScoreOptions::default()).unwrap();
        let smooth = score_record(&r, &bank, &ScoreOptions::smoothed()).unwrap();
        assert_eq!(plain.patch_scores, smooth.patch_scores);
        assert_eq!(plain.image_score, smooth.image_score);
        assert_ne!(plain.score_map, smooth.score_map);
    }
}
