//! Hierarchical memory bank: one coreset of normal patch features per
//! semantic cluster, plus the cluster keys used to route queries.
//!
//! A saved bank is a directory:
//!
//! ```text
//! bank.json            header, configs, embedded cluster model
//! keys.hcfs            K x semantic_dim routing keys
//! banks/bank_NNN.hcfs  coreset rows of cluster NNN
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_semantic, ClusterModel, FinchConfig, Partition};
use crate::coreset::{kcenter_greedy, Coreset, CoresetConfig};
use crate::error::{Error, Result};
use crate::feature_store::{blob, FeatureArchive, ImageRecord, PatchGrid};
use crate::scalar::Scalar;

pub const BANK_HEADER: &str = "bank.json";
const MAGIC: &str = "HCMB";
const VERSION: u32 = 1;

/// How training images are grouped into banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankMode {
    /// FINCH pseudo-classes.
    Pseudo,
    /// Ground-truth class labels.
    Labeled,
    /// Everything in a single bank.
    Monolithic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BankConfig {
    pub coreset: CoresetConfig,
    #[serde(default)]
    pub finch: FinchConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierMemoryBank<T> {
    pub mode: BankMode,
    pub model: ClusterModel<T>,
    /// `banks[k]` is the coreset of cluster `k`'s patch pool.
    pub banks: Vec<Coreset<T>>,
    /// `P_k`: patch rows pooled into cluster `k` before compression.
    pub pool_sizes: Vec<usize>,
    pub config: BankConfig,
    pub patch_grid: PatchGrid,
    pub patch_dim: usize,
    /// Training record ids in build order; `model.assignment` indexes this.
    pub train_ids: Vec<String>,
}

/// Per-cluster seed; depends only on the base seed and the cluster's position.
fn cluster_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn labeled_partition(train: &[&ImageRecord]) -> Result<(Partition, Vec<String>)> {
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut assignment = Vec::with_capacity(train.len());
    for r in train {
        let label = r
            .class_label
            .as_deref()
            .ok_or_else(|| Error::invariant(&r.id, "labeled bank requires a class label"))?;
        let next = index.len();
        let k = *index.entry(label).or_insert_with(|| {
            names.push(label.to_string());
            next
        });
        assignment.push(k);
    }
    Ok((
        Partition {
            assignment,
            n_clusters: names.len(),
        },
        names,
    ))
}

/// Builds the bank from the archive's training split.
pub fn build<T: Scalar>(
    archive: &FeatureArchive,
    config: &BankConfig,
    mode: BankMode,
) -> Result<HierMemoryBank<T>> {
    config.coreset.validate()?;
    let train: Vec<&ImageRecord> = archive.train().collect();
    if train.is_empty() {
        return Err(Error::Empty("archive has no train records".into()));
    }
    let semantic = archive
        .semantic_matrix(train.iter().copied())
        .mapv(T::of_f32);

    let model = match mode {
        BankMode::Pseudo => cluster_semantic(semantic.view(), config.finch)?,
        BankMode::Labeled => {
            let (partition, names) = labeled_partition(&train)?;
            let mut m = ClusterModel::from_partition(semantic.view(), &partition);
            m.labels = Some(names);
            m
        }
        BankMode::Monolithic => ClusterModel::from_partition(
            semantic.view(),
            &Partition {
                assignment: vec![0; train.len()],
                n_clusters: 1,
            },
        ),
    };

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); model.k];
    for (i, &k) in model.assignment.iter().enumerate() {
        members[k].push(i);
    }
    let banks = members
        .par_iter()
        .enumerate()
        .map(|(k, rows)| {
            if rows.is_empty() {
                return Err(Error::Empty(format!("cluster {k} has no training images")));
            }
            let pool = pool_patches(rows.iter().map(|&i| train[i]));
            let cfg = CoresetConfig {
                seed: cluster_seed(config.coreset.seed, k),
                ..config.coreset
            };
            kcenter_greedy(pool.view(), &cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(HierMemoryBank {
        mode,
        pool_sizes: banks.iter().map(|b| b.pool_size).collect(),
        banks,
        model,
        config: *config,
        patch_grid: archive.patch_grid,
        patch_dim: archive.patch_dim,
        train_ids: train.iter().map(|r| r.id.clone()).collect(),
    })
}

fn pool_patches<'a, T: Scalar>(records: impl Iterator<Item = &'a ImageRecord>) -> Array2<T> {
    let parts: Vec<Array2<T>> = records
        .map(|r| r.patch_rows().mapv(T::of_f32))
        .collect();
    let views: Vec<ArrayView2<'_, T>> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("equal patch dims")
}

impl<T: Scalar> HierMemoryBank<T> {
    pub fn k(&self) -> usize {
        self.banks.len()
    }

    /// Nearest cluster key for a semantic vector.
    pub fn route(&self, e: &[T]) -> Result<usize> {
        self.model.assign(e)
    }

    pub fn bank_sizes(&self) -> Vec<usize> {
        self.banks.iter().map(|b| b.len()).collect()
    }

    /// Distance evaluations spent in coreset selection.
    pub fn build_distance_evals(&self) -> u64 {
        self.banks.iter().map(|b| b.distance_evals).sum()
    }

    /// Distance evaluations spent clustering the semantic vectors.
    pub fn clustering_distance_evals(&self) -> u64 {
        self.model.distance_evals
    }
}

/// Routes a semantic vector to its cluster.
pub fn route<T: Scalar>(e: &[T], bank: &HierMemoryBank<T>) -> Result<usize> {
    bank.route(e)
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    mode: BankMode,
    config: BankConfig,
    patch_grid: PatchGrid,
    patch_dim: usize,
    semantic_dim: usize,
    train_ids: Vec<String>,
    keys_file: String,
    banks: Vec<BankEntry>,
    cluster_model: StoredModel,
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    file: String,
    indices: Vec<usize>,
    pool_size: usize,
    covering_radius: f32,
    covering_radius_bits: u32,
    radius_trace_bits: Vec<u32>,
    distance_evals: u64,
}

#[derive(Serialize, Deserialize)]
struct StoredModel {
    k: usize,
    chosen_level: usize,
    sizes: Vec<usize>,
    assignment: Vec<usize>,
    silhouette_by_level: Vec<Option<f64>>,
    level_clusters: Vec<usize>,
    labels: Option<Vec<String>>,
    distance_evals: u64,
    /// Human-readable copy; `keys.hcfs` is authoritative.
    keys: Vec<Vec<f32>>,
}

fn matrix_blob(m: &Array2<f32>) -> (Vec<usize>, Vec<f32>) {
    let std = m.as_standard_layout();
    (vec![m.nrows(), m.ncols()], std.as_slice().expect("standard").to_vec())
}

/// Writes the bank directory.
pub fn save(bank: &HierMemoryBank<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if dir.as_os_str().is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty path"),
        ));
    }
    let banks_dir = dir.join("banks");
    fs::create_dir_all(&banks_dir).map_err(|e| Error::io(&banks_dir, e))?;
    let (dims, data) = matrix_blob(&bank.model.keys);
    blob::write(&dir.join("keys.hcfs"), &dims, &data)?;
    let mut entries = Vec::with_capacity(bank.k());
    for (k, cs) in bank.banks.iter().enumerate() {
        let file = format!("banks/bank_{k:03}.hcfs");
        let (dims, data) = matrix_blob(&cs.vectors);
        blob::write(&dir.join(&file), &dims, &data)?;
        entries.push(BankEntry {
            file,
            indices: cs.indices.clone(),
            pool_size: cs.pool_size,
            covering_radius: cs.covering_radius,
            covering_radius_bits: cs.covering_radius.to_bits(),
            radius_trace_bits: cs.radius_trace.iter().map(|v| v.to_bits()).collect(),
            distance_evals: cs.distance_evals,
        });
    }
    let m = &bank.model;
    let header = Header {
        magic: MAGIC.into(),
        version: VERSION,
        mode: bank.mode,
        config: bank.config,
        patch_grid: bank.patch_grid,
        patch_dim: bank.patch_dim,
        semantic_dim: m.semantic_dim(),
        train_ids: bank.train_ids.clone(),
        keys_file: "keys.hcfs".into(),
        banks: entries,
        cluster_model: StoredModel {
            k: m.k,
            chosen_level: m.chosen_level,
            sizes: m.sizes.clone(),
            assignment: m.assignment.clone(),
            silhouette_by_level: m.silhouette_by_level.clone(),
            level_clusters: m.level_clusters.clone(),
            labels: m.labels.clone(),
            distance_evals: m.distance_evals,
            keys: m.keys.outer_iter().map(|r| r.to_vec()).collect(),
        },
    };
    let path = dir.join(BANK_HEADER);
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a bank directory written by [`save`].
pub fn load(dir: impl AsRef<Path>) -> Result<HierMemoryBank<f32>> {
    let dir = dir.as_ref();
    let path = dir.join(BANK_HEADER);
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let magic = value.get("magic").and_then(|v| v.as_str()).unwrap_or("");
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if magic != MAGIC || version != VERSION as u64 {
        return Err(Error::Version {
            path,
            detail: format!("bank header `{magic}` v{version} (expected {MAGIC} v{VERSION})"),
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;

    let read_matrix = |rel: &str, rows: usize, cols: usize| -> Result<Array2<f32>> {
        let (dims, data) = blob::read(&dir.join(rel), rel)?;
        if dims != [rows, cols] {
            return Err(Error::dim(
                rel,
                format!("blob dims {dims:?} != [{rows}, {cols}]"),
            ));
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("checked length"))
    };

    let sm = header.cluster_model;
    if header.banks.len() != sm.k || sm.sizes.len() != sm.k {
        return Err(Error::Truncated {
            record: "<bank>".into(),
            detail: format!("{} bank entries for k = {}", header.banks.len(), sm.k),
        });
    }
    let keys = read_matrix(&header.keys_file, sm.k, header.semantic_dim)?;
    let mut banks = Vec::with_capacity(sm.k);
    for e in &header.banks {
        let vectors = read_matrix(&e.file, e.indices.len(), header.patch_dim)?;
        banks.push(Coreset {
            indices: e.indices.clone(),
            vectors,
            covering_radius: f32::from_bits(e.covering_radius_bits),
            pool_size: e.pool_size,
            radius_trace: e.radius_trace_bits.iter().map(|&b| f32::from_bits(b)).collect(),
            distance_evals: e.distance_evals,
        });
    }
    if banks.iter().any(|b| b.is_empty()) {
        return Err(Error::invariant("<bank>", "empty coreset"));
    }
    Ok(HierMemoryBank {
        mode: header.mode,
        model: ClusterModel {
            chosen_level: sm.chosen_level,
            k: sm.k,
            keys,
            sizes: sm.sizes,
            assignment: sm.assignment,
            silhouette_by_level: sm.silhouette_by_level,
            level_clusters: sm.level_clusters,
            labels: sm.labels,
            distance_evals: sm.distance_evals,
        },
        pool_sizes: banks.iter().map(|b| b.pool_size).collect(),
        banks,
        config: header.config,
        patch_grid: header.patch_grid,
        patch_dim: header.patch_dim,
        train_ids: header.train_ids,
    })
}
