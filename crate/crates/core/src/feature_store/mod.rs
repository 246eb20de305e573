//! Feature archives: per-image semantic embeddings and patch-feature grids.
//!
//! On disk an archive is a directory holding `manifest.json` plus two HCFS
//! blobs per record (`blobs/<id>.sem`, `blobs/<id>.pat`). Ground-truth masks
//! travel run-length encoded inside the manifest.

pub mod blob;
pub mod rle;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{synth_generate, SynthClass, SynthSpec};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB_DIR: &str = "blobs";
const FORMAT: &str = "hcfs-archive";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtLabel {
    Normal,
    Abnormal,
}

/// Geometry of the patch grid shared by every record of an archive.
///
/// `feature_w`/`feature_h` are the dimensions of the source feature map the
/// window slid over; the grid follows `(W_f + 2p - w) / stride + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub grid_w: usize,
    pub grid_h: usize,
    pub feature_w: usize,
    pub feature_h: usize,
    pub window_w: usize,
    pub window_h: usize,
    pub padding: usize,
    pub stride: usize,
}

impl PatchGrid {
    /// Grid produced by sliding a `window` over a `feature_w x feature_h` map.
    pub fn from_feature_map(
        feature_w: usize,
        feature_h: usize,
        window: (usize, usize),
        padding: usize,
        stride: usize,
    ) -> Result<Self> {
        let grid_w = output_len(feature_w, window.0, padding, stride)?;
        let grid_h = output_len(feature_h, window.1, padding, stride)?;
        Ok(PatchGrid {
            grid_w,
            grid_h,
            feature_w,
            feature_h,
            window_w: window.0,
            window_h: window.1,
            padding,
            stride,
        })
    }

    /// Grid that is the feature map itself (1x1 window, no padding).
    pub fn identity(grid_w: usize, grid_h: usize) -> Self {
        PatchGrid {
            grid_w,
            grid_h,
            feature_w: grid_w,
            feature_h: grid_h,
            window_w: 1,
            window_h: 1,
            padding: 0,
            stride: 1,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn validate(&self) -> Result<()> {
        let expect = PatchGrid::from_feature_map(
            self.feature_w,
            self.feature_h,
            (self.window_w, self.window_h),
            self.padding,
            self.stride,
        )
        .map_err(|e| Error::invariant("<patch_grid>", e.to_string()))?;
        if expect.grid_w != self.grid_w || expect.grid_h != self.grid_h || self.cells() == 0 {
            return Err(Error::invariant(
                "<patch_grid>",
                format!(
                    "grid {}x{} inconsistent with feature map {}x{}, window {}x{}, padding {}, stride {}",
                    self.grid_w,
                    self.grid_h,
                    self.feature_w,
                    self.feature_h,
                    self.window_w,
                    self.window_h,
                    self.padding,
                    self.stride
                ),
            ));
        }
        Ok(())
    }
}

/// Output length of a sliding window: `(len + 2p - w) / stride + 1`.
pub fn output_len(len: usize, window: usize, padding: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 || len == 0 {
        return Err(Error::Config(
            "window, stride and feature size must be positive".into(),
        ));
    }
    let span = len + 2 * padding;
    if span < window {
        return Err(Error::Config(format!(
            "window {window} larger than padded extent {span}"
        )));
    }
    Ok((span - window) / stride + 1)
}

/// Total patch count `N * (W + 2p - w + 1) * (H + 2p - h + 1)` for stride 1.
pub fn patch_count(
    images: usize,
    size: (usize, usize),
    window: (usize, usize),
    padding: usize,
) -> usize {
    images * (size.0 + 2 * padding + 1 - window.0) * (size.1 + 2 * padding + 1 - window.1)
}

/// One image: semantic embedding, patch grid and evaluation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    pub class_label: Option<String>,
    pub gt_label: GtLabel,
    /// `height x width` pixel mask, `true` = anomalous.
    pub gt_mask: Option<Array2<bool>>,
    pub semantic: Array1<f32>,
    /// `grid_h x grid_w x patch_dim`.
    pub patches: Array3<f32>,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl ImageRecord {
    /// Ground-truth mask, substituting an all-normal mask when none is stored.
    pub fn mask_or_empty(&self) -> Array2<bool> {
        match &self.gt_mask {
            Some(m) => m.clone(),
            None => Array2::from_elem((self.image_size.1, self.image_size.0), false),
        }
    }

    pub fn patch_rows(&self) -> ndarray::ArrayView2<'_, f32> {
        let (h, w, d) = self.patches.dim();
        self.patches
            .view()
            .into_shape_with_order((h * w, d))
            .expect("patch tensor is contiguous")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub records: Vec<ImageRecord>,
    pub semantic_dim: usize,
    pub patch_dim: usize,
    pub patch_grid: PatchGrid,
}

impl FeatureArchive {
    pub fn new(semantic_dim: usize, patch_dim: usize, patch_grid: PatchGrid) -> Self {
        FeatureArchive {
            records: Vec::new(),
            semantic_dim,
            patch_dim,
            patch_grid,
        }
    }

    pub fn train(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    /// Stacks the semantic vectors of `records` into an `n x semantic_dim` matrix.
    pub fn semantic_matrix<'a>(
        &self,
        records: impl IntoIterator<Item = &'a ImageRecord>,
    ) -> Array2<f32> {
        let rows: Vec<f32> = records
            .into_iter()
            .flat_map(|r| r.semantic.iter().copied())
            .collect();
        let n = rows.len() / self.semantic_dim.max(1);
        Array2::from_shape_vec((n, self.semantic_dim), rows).expect("validated dims")
    }

    /// Copy with every class label removed.
    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.class_label = None;
        }
        out
    }

    /// Checks every archive and record invariant.
    pub fn validate(&self) -> Result<()> {
        if self.semantic_dim == 0 || self.patch_dim == 0 {
            return Err(Error::invariant(
                "<archive>",
                "semantic_dim and patch_dim must be positive",
            ));
        }
        self.patch_grid.validate()?;
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            self.validate_record(r)?;
        }
        Ok(())
    }

    fn validate_record(&self, r: &ImageRecord) -> Result<()> {
        if r.semantic.len() != self.semantic_dim {
            return Err(Error::dim(
                &r.id,
                format!(
                    "semantic length {} != semantic_dim {}",
                    r.semantic.len(),
                    self.semantic_dim
                ),
            ));
        }
        let want = (self.patch_grid.grid_h, self.patch_grid.grid_w, self.patch_dim);
        if r.patches.dim() != want {
            return Err(Error::dim(
                &r.id,
                format!("patch tensor {:?} != expected {:?}", r.patches.dim(), want),
            ));
        }
        if r.semantic.iter().chain(r.patches.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invariant(&r.id, "non-finite feature value"));
        }
        if r.image_size.0 == 0 || r.image_size.1 == 0 {
            return Err(Error::invariant(&r.id, "image size must be positive"));
        }
        if r.split == Split::Train && r.gt_label == GtLabel::Abnormal {
            return Err(Error::invariant(&r.id, "train record labelled abnormal"));
        }
        match (&r.gt_mask, r.gt_label) {
            (None, GtLabel::Abnormal) => {
                return Err(Error::invariant(&r.id, "abnormal record without gt_mask"));
            }
            (Some(m), label) => {
                if m.dim() != (r.image_size.1, r.image_size.0) {
                    return Err(Error::dim(
                        &r.id,
                        format!(
                            "gt_mask {}x{} != image size {}x{}",
                            m.ncols(),
                            m.nrows(),
                            r.image_size.0,
                            r.image_size.1
                        ),
                    ));
                }
                if label == GtLabel::Normal && m.iter().any(|&v| v) {
                    return Err(Error::invariant(&r.id, "normal record with non-empty mask"));
                }
            }
            (None, GtLabel::Normal) => {}
        }
        if !is_safe_id(&r.id) {
            return Err(Error::invariant(
                &r.id,
                "id must be non-empty and use only [A-Za-z0-9._-] (not starting with '.')",
            ));
        }
        Ok(())
    }
}

fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    semantic_dim: usize,
    patch_dim: usize,
    patch_grid: PatchGrid,
    records: Vec<ManifestRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    split: Split,
    class_label: Option<String>,
    gt_label: GtLabel,
    mask_rle: Option<Vec<u32>>,
    image_size: [usize; 2],
    semantic_blob: String,
    patch_blob: String,
}

/// Writes `archive` under `dir`. Invariants are checked before anything touches disk.
pub fn write_archive(archive: &FeatureArchive, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    archive.validate()?;
    if dir.as_os_str().is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty path"),
        ));
    }
    let blob_dir = dir.join(BLOB_DIR);
    fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;

    let mut records = Vec::with_capacity(archive.records.len());
    for r in &archive.records {
        let sem = format!("{BLOB_DIR}/{}.sem", r.id);
        let pat = format!("{BLOB_DIR}/{}.pat", r.id);
        let semantic = r.semantic.as_standard_layout();
        blob::write(
            &dir.join(&sem),
            &[archive.semantic_dim],
            semantic.as_slice().expect("standard layout"),
        )?;
        let patches = r.patches.as_standard_layout();
        let (h, w, d) = patches.dim();
        blob::write(
            &dir.join(&pat),
            &[h, w, d],
            patches.as_slice().expect("standard layout"),
        )?;
        records.push(ManifestRecord {
            id: r.id.clone(),
            split: r.split,
            class_label: r.class_label.clone(),
            gt_label: r.gt_label,
            mask_rle: r.gt_mask.as_ref().map(rle::encode),
            image_size: [r.image_size.0, r.image_size.1],
            semantic_blob: sem,
            patch_blob: pat,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        semantic_dim: archive.semantic_dim,
        patch_dim: archive.patch_dim,
        patch_grid: archive.patch_grid,
        records,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads and fully validates an archive directory.
pub fn read_archive(dir: impl AsRef<Path>) -> Result<FeatureArchive> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::Version {
            path,
            detail: format!("{} v{}", manifest.format, manifest.version),
        });
    }
    let mut archive = FeatureArchive::new(
        manifest.semantic_dim,
        manifest.patch_dim,
        manifest.patch_grid,
    );
    let mut seen = HashSet::new();
    for m in manifest.records {
        if !seen.insert(m.id.clone()) {
            return Err(Error::DuplicateId(m.id));
        }
        let (sem_dims, sem) = blob::read(&resolve(dir, &m.semantic_blob, &m.id)?, &m.id)?;
        if sem_dims != [archive.semantic_dim] {
            return Err(Error::dim(
                &m.id,
                format!(
                    "semantic blob dims {:?} != [{}]",
                    sem_dims, archive.semantic_dim
                ),
            ));
        }
        let (pat_dims, pat) = blob::read(&resolve(dir, &m.patch_blob, &m.id)?, &m.id)?;
        let want = [
            archive.patch_grid.grid_h,
            archive.patch_grid.grid_w,
            archive.patch_dim,
        ];
        if pat_dims != want {
            return Err(Error::dim(
                &m.id,
                format!("patch blob dims {:?} != {:?}", pat_dims, want),
            ));
        }
        let [w, h] = m.image_size;
        let gt_mask = match &m.mask_rle {
            Some(runs) => Some(rle::decode(runs, w, h).ok_or_else(|| {
                Error::dim(&m.id, format!("mask runs do not cover {w}x{h} pixels"))
            })?),
            None => None,
        };
        archive.records.push(ImageRecord {
            id: m.id,
            split: m.split,
            class_label: m.class_label,
            gt_label: m.gt_label,
            gt_mask,
            semantic: Array1::from(sem),
            patches: Array3::from_shape_vec((want[0], want[1], want[2]), pat)
                .expect("length checked by blob decoder"),
            image_size: (w, h),
        });
    }
    archive.validate()?;
    Ok(archive)
}

fn resolve(dir: &Path, rel: &str, record: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::invariant(record, format!("blob path `{rel}` escapes archive")));
    }
    Ok(dir.join(p))
}
