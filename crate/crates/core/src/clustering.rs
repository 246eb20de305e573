//! Pseudo-class discovery on semantic embeddings.
//!
//! FINCH builds a nested partition hierarchy from first-neighbour links; the
//! level with the best silhouette becomes the cluster model, whose keys are
//! the member means. New embeddings are routed to the nearest key.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{first_non_finite, squared_l2, Scalar};

/// Flat clustering of `n` points into `n_clusters` ids, labelled in order of
/// first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub n_clusters: usize,
}

impl Partition {
    /// Relabels arbitrary ids so that cluster ids follow first appearance.
    pub fn canonical(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let assignment = raw
            .iter()
            .map(|&r| {
                let next = map.len();
                *map.entry(r).or_insert(next)
            })
            .collect();
        Partition {
            assignment,
            n_clusters: map.len(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Undirected first-neighbour link with its Euclidean length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link<T> {
    pub a: usize,
    pub b: usize,
    pub distance: T,
}

/// First-neighbour graph: `i ~ j` iff `j` is `i`'s first neighbour, `i` is
/// `j`'s, or both share the same first neighbour.
#[derive(Debug, Clone)]
pub struct FirstNeighborGraph<T> {
    /// `None` only for a single isolated point.
    pub first_neighbor: Vec<Option<usize>>,
    /// Deduplicated links, `a < b`, sorted.
    pub links: Vec<Link<T>>,
    pub distance_evals: u64,
}

impl<T: Scalar> FirstNeighborGraph<T> {
    pub fn len(&self) -> usize {
        self.first_neighbor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_neighbor.is_empty()
    }

    pub fn is_linked(&self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let (fi, fj) = (self.first_neighbor[i], self.first_neighbor[j]);
        fi == Some(j) || fj == Some(i) || (fi.is_some() && fi == fj)
    }

    pub fn max_link(&self) -> Option<T> {
        self.links
            .iter()
            .map(|l| l.distance)
            .fold(None, |m, d| Some(m.map_or(d, |m: T| m.max(d))))
    }

    /// Connected components, ignoring links longer than `max_link` when given.
    pub fn components(&self, max_link: Option<T>) -> Partition {
        let n = self.len();
        let mut uf = UnionFind::<usize>::new(n);
        for l in &self.links {
            if max_link.is_none_or(|cap| l.distance <= cap) {
                uf.union(l.a, l.b);
            }
        }
        let roots: Vec<usize> = (0..n).map(|i| uf.find_mut(i)).collect();
        Partition::canonical(&roots)
    }
}

fn check_points<T: Scalar>(points: ArrayView2<'_, T>) -> Result<()> {
    if points.nrows() == 0 {
        return Err(Error::Empty("no points".into()));
    }
    if let Some(row) = first_non_finite(points) {
        return Err(Error::NonFinite { row });
    }
    Ok(())
}

/// Exact first-neighbour graph; equidistant neighbours resolve to the smallest index.
pub fn first_neighbor_graph<T: Scalar>(points: ArrayView2<'_, T>) -> Result<FirstNeighborGraph<T>> {
    check_points(points)?;
    let n = points.nrows();
    let owned = points.as_standard_layout();
    let view = owned.view();
    let rows: Vec<&[T]> = points_rows(&view);
    let first: Vec<Option<(usize, T)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best: Option<(usize, T)> = None;
            for (j, row) in rows.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = squared_l2(rows[i], row);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best
        })
        .collect();
    let mut evals = (n as u64) * (n as u64).saturating_sub(1);

    let mut pairs: Vec<(usize, usize, T)> = Vec::new();
    let mut by_target: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, f) in first.iter().enumerate() {
        if let Some((j, d2)) = *f {
            pairs.push((i.min(j), i.max(j), d2.sqrt()));
            by_target[j].push(i);
        }
    }
    for group in &by_target {
        for (x, &a) in group.iter().enumerate() {
            for &b in &group[x + 1..] {
                evals += 1;
                pairs.push((a.min(b), a.max(b), squared_l2(rows[a], rows[b]).sqrt()));
            }
        }
    }
    pairs.sort_by(|p, q| (p.0, p.1).cmp(&(q.0, q.1)));
    pairs.dedup_by(|p, q| p.0 == q.0 && p.1 == q.1);
    Ok(FirstNeighborGraph {
        first_neighbor: first.iter().map(|f| f.map(|(j, _)| j)).collect(),
        links: pairs
            .into_iter()
            .map(|(a, b, distance)| Link { a, b, distance })
            .collect(),
        distance_evals: evals,
    })
}

fn points_rows<'a, T: Scalar>(points: &'a ArrayView2<'_, T>) -> Vec<&'a [T]> {
    points
        .outer_iter()
        .map(|r| r.to_slice().expect("row-major points"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinchConfig {
    /// Cut links longer than the longest level-0 link when recursing.
    pub early_exit: bool,
}

impl Default for FinchConfig {
    fn default() -> Self {
        FinchConfig { early_exit: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelOrder {
    FineToCoarse,
}

/// Nested partitions; `levels[0]` is the finest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinchHierarchy {
    pub order: LevelOrder,
    pub levels: Vec<Partition>,
    pub link_cap: Option<f64>,
    pub distance_evals: u64,
}

/// Arithmetic means of the points in each cluster, accumulated in `f64`.
pub fn cluster_means<T: Scalar>(
    points: ArrayView2<'_, T>,
    assignment: &[usize],
    k: usize,
) -> (Array2<T>, Vec<usize>) {
    let d = points.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut sizes = vec![0usize; k];
    for (row, &c) in points.outer_iter().zip(assignment) {
        sizes[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(row.iter()) {
            *s += v.as_f64();
        }
    }
    let means = Array2::from_shape_fn((k, d), |(c, j)| {
        T::from_f64_lossy(sums[[c, j]] / sizes[c].max(1) as f64)
    });
    (means, sizes)
}

/// Parameter-free hierarchical clustering by recursive first-neighbour linking.
pub fn finch<T: Scalar>(points: ArrayView2<'_, T>, config: FinchConfig) -> Result<FinchHierarchy> {
    let points = points.as_standard_layout();
    let points = points.view();
    let g0 = first_neighbor_graph(points)?;
    let mut evals = g0.distance_evals;
    let cap = if config.early_exit && points.nrows() > 2 {
        g0.max_link()
    } else {
        None
    };
    let mut levels = vec![g0.components(None)];
    loop {
        let current = levels.last().expect("level 0 present");
        let k = current.n_clusters;
        if k == 1 {
            break;
        }
        let (means, _) = cluster_means(points, &current.assignment, k);
        let g = first_neighbor_graph(means.view())?;
        evals += g.distance_evals;
        let merged = g.components(cap);
        if merged.n_clusters == k {
            break;
        }
        let raw: Vec<usize> = current
            .assignment
            .iter()
            .map(|&c| merged.assignment[c])
            .collect();
        levels.push(Partition::canonical(&raw));
    }
    Ok(FinchHierarchy {
        order: LevelOrder::FineToCoarse,
        levels,
        link_cap: cap.map(|c| c.as_f64()),
        distance_evals: evals,
    })
}

/// Mean silhouette coefficient with Euclidean distance.
///
/// Singleton clusters use `a_i = 0`; a point with `max(a_i, b_i) = 0` scores 0.
pub fn silhouette<T: Scalar>(points: ArrayView2<'_, T>, assignment: &[usize]) -> Result<f64> {
    let n = points.nrows();
    if assignment.len() != n {
        return Err(Error::dim(
            "<silhouette>",
            format!("{} labels for {n} points", assignment.len()),
        ));
    }
    if n < 2 {
        return Err(Error::Undefined("silhouette needs at least two points".into()));
    }
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let sizes = {
        let mut s = vec![0usize; k];
        assignment.iter().for_each(|&c| s[c] += 1);
        s
    };
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Undefined("cluster ids must be contiguous".into()));
    }
    if k < 2 {
        return Err(Error::Undefined("silhouette needs at least two clusters".into()));
    }
    let points = points.as_standard_layout();
    let view = points.view();
    let rows = points_rows(&view);
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sums = vec![0.0f64; k];
            for (j, row) in rows.iter().enumerate() {
                if j != i {
                    sums[assignment[j]] += dist_f64(rows[i], row);
                }
            }
            let own = assignment[i];
            let a = if sizes[own] > 1 {
                sums[own] / (sizes[own] - 1) as f64
            } else {
                0.0
            };
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    Ok(total / n as f64)
}

fn dist_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Chosen clustering with routing keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel<T> {
    pub chosen_level: usize,
    pub k: usize,
    /// `k x semantic_dim`, row `c` is the mean of cluster `c`.
    pub keys: Array2<T>,
    pub sizes: Vec<usize>,
    /// Build-time cluster of every training point.
    pub assignment: Vec<usize>,
    pub silhouette_by_level: Vec<Option<f64>>,
    pub level_clusters: Vec<usize>,
    /// Class names when the clusters come from ground-truth labels.
    pub labels: Option<Vec<String>>,
    pub distance_evals: u64,
}

impl<T: Scalar> ClusterModel<T> {
    /// Model whose clusters are the given partition (keys = member means).
    pub fn from_partition(points: ArrayView2<'_, T>, partition: &Partition) -> Self {
        let (keys, sizes) = cluster_means(points, &partition.assignment, partition.n_clusters);
        ClusterModel {
            chosen_level: 0,
            k: partition.n_clusters,
            keys,
            sizes,
            assignment: partition.assignment.clone(),
            silhouette_by_level: Vec::new(),
            level_clusters: vec![partition.n_clusters],
            labels: None,
            distance_evals: 0,
        }
    }

    pub fn semantic_dim(&self) -> usize {
        self.keys.ncols()
    }

    /// Index of the nearest key; ties go to the smallest index.
    pub fn assign(&self, e: &[T]) -> Result<usize> {
        assign(e, self)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let levels: Vec<_> = self
            .level_clusters
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                serde_json::json!({
                    "level": i,
                    "clusters": c,
                    "silhouette": self.silhouette_by_level.get(i).copied().flatten(),
                })
            })
            .collect();
        let keys: Vec<Vec<f32>> = self
            .keys
            .outer_iter()
            .map(|r| r.iter().map(|v| v.as_f32()).collect())
            .collect();
        serde_json::json!({
            "k": self.k,
            "chosen_level": self.chosen_level,
            "semantic_dim": self.semantic_dim(),
            "keys": keys,
            "sizes": self.sizes,
            "assignment": self.assignment,
            "levels": levels,
            "labels": self.labels,
            "distance_evals": self.distance_evals,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_json()).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Picks the hierarchy level with the highest silhouette (ties toward fewer
/// clusters); falls back to one cluster when no level has two or more.
pub fn select_level<T: Scalar>(
    hierarchy: &FinchHierarchy,
    points: ArrayView2<'_, T>,
) -> Result<ClusterModel<T>> {
    if hierarchy.levels.is_empty() {
        return Err(Error::Empty("hierarchy has no levels".into()));
    }
    let n = points.nrows();
    let mut scores = Vec::with_capacity(hierarchy.levels.len());
    let mut evals = hierarchy.distance_evals;
    for level in &hierarchy.levels {
        if level.assignment.len() != n {
            return Err(Error::dim(
                "<hierarchy>",
                format!("level covers {} points, expected {n}", level.assignment.len()),
            ));
        }
        if level.n_clusters >= 2 && n >= 2 {
            evals += (n as u64) * (n as u64 - 1);
            scores.push(Some(silhouette(points, &level.assignment)?));
        } else {
            scores.push(None);
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            let better = match best {
                None => true,
                Some((b, bs)) => {
                    s > bs
                        || (s == bs
                            && hierarchy.levels[i].n_clusters < hierarchy.levels[b].n_clusters)
                }
            };
            if better {
                best = Some((i, s));
            }
        }
    }
    let (chosen, partition) = match best {
        Some((i, _)) => (i, hierarchy.levels[i].clone()),
        None => (
            0,
            Partition {
                assignment: vec![0; n],
                n_clusters: 1,
            },
        ),
    };
    let mut model = ClusterModel::from_partition(points, &partition);
    model.chosen_level = chosen;
    model.silhouette_by_level = scores;
    model.level_clusters = hierarchy.levels.iter().map(|l| l.n_clusters).collect();
    model.distance_evals = evals;
    Ok(model)
}

/// FINCH followed by silhouette level selection.
pub fn cluster_semantic<T: Scalar>(
    points: ArrayView2<'_, T>,
    config: FinchConfig,
) -> Result<ClusterModel<T>> {
    let hierarchy = finch(points, config)?;
    select_level(&hierarchy, points)
}

/// `argmin_k ||e - c_k||`, smallest index on ties.
pub fn assign<T: Scalar>(e: &[T], model: &ClusterModel<T>) -> Result<usize> {
    if e.len() != model.semantic_dim() {
        return Err(Error::dim(
            "<query>",
            format!(
                "semantic length {} != key length {}",
                e.len(),
                model.semantic_dim()
            ),
        ));
    }
    let mut best = (0usize, T::infinity());
    for (k, key) in model.keys.outer_iter().enumerate() {
        let d = key
            .iter()
            .zip(e)
            .fold(T::zero(), |acc, (&c, &x)| acc + (x - c) * (x - c));
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let pa = Partition::canonical(a);
    let pb = Partition::canonical(b);
    let mut table = vec![vec![0u64; pb.n_clusters]; pa.n_clusters];
    for (&x, &y) in pa.assignment.iter().zip(&pb.assignment) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sa: f64 = pa.sizes().iter().map(|&v| c2(v as u64)).sum();
    let sb: f64 = pb.sizes().iter().map(|&v| c2(v as u64)).sum();
    let total = c2(n as u64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = (sa + sb) / 2.0;
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}
