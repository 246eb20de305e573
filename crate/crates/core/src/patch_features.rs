//! Locally aware patch features from intermediate backbone layers.
//!
//! Each layer map is mean-pooled over a sliding window, coarser layers are
//! resampled onto the finest grid, and channels are concatenated in layer order.

use ndarray::{concatenate, s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::output_len;
use crate::resample::resize_bilinear;
use crate::scalar::Scalar;

/// One layer's feature map, `H_f x W_f x C_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMap<T> {
    pub layer_id: usize,
    pub tensor: Array3<T>,
}

impl<T: Scalar> LayerMap<T> {
    pub fn new(layer_id: usize, tensor: Array3<T>) -> Result<Self> {
        let (h, w, c) = tensor.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!(
                "layer {layer_id}: dimensions must be positive, got {h}x{w}x{c}"
            )));
        }
        Ok(LayerMap { layer_id, tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.dim().0
    }

    pub fn width(&self) -> usize {
        self.tensor.dim().1
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub w: usize,
    pub h: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for Window {
    /// 3x3 neighbourhood, stride 1, padding 1: output grid equals input grid.
    fn default() -> Self {
        Window {
            w: 3,
            h: 3,
            stride: 1,
            padding: 1,
        }
    }
}

impl Window {
    pub fn validate(&self) -> Result<()> {
        if self.w % 2 == 0 || self.h % 2 == 0 {
            return Err(Error::Config(format!(
                "window {}x{} must have odd sides",
                self.w, self.h
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.padding >= self.w.min(self.h) {
            return Err(Error::Config(
                "padding must be smaller than the window".into(),
            ));
        }
        Ok(())
    }
}

/// Mean-pools every window position. Zero padding is count-normalized, so each
/// output cell averages only the in-bounds cells it covers.
pub fn aggregate_window<T: Scalar>(map: &LayerMap<T>, window: Window) -> Result<LayerMap<T>> {
    window.validate()?;
    let (h, w, c) = map.tensor.dim();
    let out_h = output_len(h, window.h, window.padding, window.stride)?;
    let out_w = output_len(w, window.w, window.padding, window.stride)?;
    let src = &map.tensor;
    let mut out = Array3::<T>::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let y_start = (oy * window.stride) as isize - window.padding as isize;
        let ys = y_start.max(0) as usize..((y_start + window.h as isize).min(h as isize)) as usize;
        for ox in 0..out_w {
            let x_start = (ox * window.stride) as isize - window.padding as isize;
            let xs =
                x_start.max(0) as usize..((x_start + window.w as isize).min(w as isize)) as usize;
            let count = T::from_usize(ys.len() * xs.len()).expect("small count");
            let mut cell = out.slice_mut(s![oy, ox, ..]);
            for y in ys.clone() {
                for x in xs.clone() {
                    cell.zip_mut_with(&src.slice(s![y, x, ..]), |a, &b| *a = *a + b);
                }
            }
            cell.mapv_inplace(|v| v / count);
        }
    }
    Ok(LayerMap {
        layer_id: map.layer_id,
        tensor: out,
    })
}

/// Merged patch features, `grid_h x grid_w x patch_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor<T> {
    pub tensor: Array3<T>,
    /// Aggregation window applied before merging, if any.
    pub window: Option<Window>,
    /// `(layer_id, channels)` in concatenation order.
    pub layers: Vec<(usize, usize)>,
}

impl<T: Scalar> PatchTensor<T> {
    pub fn patch_dim(&self) -> usize {
        self.tensor.dim().2
    }
}

fn resize_map<T: Scalar>(t: ArrayView3<'_, T>, out_h: usize, out_w: usize) -> Result<Array3<T>> {
    let (h, w, c) = t.dim();
    if (h, w) == (out_h, out_w) {
        return Ok(t.to_owned());
    }
    let mut out = Array3::<T>::zeros((out_h, out_w, c));
    for ch in 0..c {
        let resized = resize_bilinear(t.slice(s![.., .., ch]), out_h, out_w)?;
        out.slice_mut(s![.., .., ch]).assign(&resized);
    }
    Ok(out)
}

/// Resamples every map onto the highest-resolution grid (first such map on ties)
/// and concatenates channels in the given layer order.
pub fn merge_layers<T: Scalar>(maps: &[LayerMap<T>]) -> Result<PatchTensor<T>> {
    let reference = maps
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            (a.height() * a.width())
                .cmp(&(b.height() * b.width()))
                .then(ib.cmp(ia))
        })
        .map(|(_, m)| m)
        .ok_or_else(|| Error::Empty("no layer maps to merge".into()))?;
    let (out_h, out_w) = (reference.height(), reference.width());
    let resized = maps
        .iter()
        .map(|m| resize_map(m.tensor.view(), out_h, out_w))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = resized.iter().map(|a| a.view()).collect();
    let tensor = concatenate(Axis(2), &views).expect("grids share spatial dims");
    Ok(PatchTensor {
        tensor,
        window: None,
        layers: maps.iter().map(|m| (m.layer_id, m.channels())).collect(),
    })
}

/// Aggregates each layer with `window`, then merges.
pub fn local_patches<T: Scalar>(maps: &[LayerMap<T>], window: Window) -> Result<PatchTensor<T>> {
    let aggregated = maps
        .iter()
        .map(|m| aggregate_window(m, window))
        .collect::<Result<Vec<_>>>()?;
    let mut merged = merge_layers(&aggregated)?;
    merged.window = Some(window);
    Ok(merged)
}
