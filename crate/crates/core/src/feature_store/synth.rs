use ndarray::{Array1, Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureArchive, GtLabel, ImageRecord, PatchGrid, Split};
use crate::error::{Error, Result};

/// Per-class generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of every patch-feature component.
    pub patch_sigma: f64,
    /// Overrides the archive-wide anomaly offset for this class.
    pub anomaly_offset: Option<f64>,
}

/// Parameters for a synthetic feature archive.
///
/// Semantic vectors of class `c` are drawn around `margin * semantic_sigma / sqrt(2) * e_c`,
/// so class means are pairwise `margin * semantic_sigma` apart. Patch features
/// are drawn around a per-class random mean. Abnormal test records get an
/// additive offset of norm `anomaly_offset` (random direction) on every patch
/// inside a random axis-aligned rectangle of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<SynthClass>,
    pub semantic_dim: usize,
    pub patch_dim: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub semantic_sigma: f64,
    /// Distance between class means in units of `semantic_sigma`.
    pub margin: f64,
    /// Spread of the per-class patch means.
    pub patch_mean_scale: f64,
    /// Fraction of test records that are abnormal.
    pub anomaly_rate: f64,
    pub anomaly_offset: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::balanced(2)
    }
}

impl SynthSpec {
    /// `n` equally sized classes with the default geometry.
    pub fn balanced(n: usize) -> Self {
        let classes = (0..n)
            .map(|c| SynthClass {
                name: format!("class{c}"),
                train: 40,
                test: 20,
                patch_sigma: 0.5,
                anomaly_offset: None,
            })
            .collect();
        SynthSpec {
            classes,
            semantic_dim: 16.max(n),
            patch_dim: 8,
            grid_w: 8,
            grid_h: 8,
            image_w: 64,
            image_h: 64,
            semantic_sigma: 1.0,
            margin: 10.0,
            patch_mean_scale: 3.0,
            anomaly_rate: 0.5,
            anomaly_offset: 5.0,
        }
    }

    pub fn with_counts(mut self, train: usize, test: usize) -> Self {
        for c in &mut self.classes {
            c.train = train;
            c.test = test;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes.is_empty() {
            return bad("at least one class required");
        }
        if self.semantic_dim == 0
            || self.patch_dim == 0
            || self.grid_w == 0
            || self.grid_h == 0
            || self.image_w == 0
            || self.image_h == 0
        {
            return bad("dimensions must be positive");
        }
        if self.semantic_dim < self.classes.len() {
            return bad("semantic_dim must be at least the number of classes");
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad("anomaly rate must lie in [0, 1]");
        }
        let non_negative = [
            self.semantic_sigma,
            self.margin,
            self.patch_mean_scale,
            self.anomaly_offset,
        ];
        if non_negative.iter().any(|v| !v.is_finite() || *v < 0.0)
            || self
                .classes
                .iter()
                .any(|c| !c.patch_sigma.is_finite() || c.patch_sigma < 0.0)
        {
            return bad("scales must be finite and non-negative");
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Grid cell index a pixel maps to under corner-aligned sampling.
fn nearest_cell(pixel: usize, pixels: usize, cells: usize) -> usize {
    if pixels <= 1 || cells <= 1 {
        return 0;
    }
    let pos = pixel as f64 * (cells - 1) as f64 / (pixels - 1) as f64;
    (pos.round() as usize).min(cells - 1)
}

/// Generates a deterministic synthetic archive.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<FeatureArchive> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sep = spec.margin * spec.semantic_sigma / std::f64::consts::SQRT_2;
    let patch_means: Vec<Vec<f64>> = spec
        .classes
        .iter()
        .map(|_| normal_vec(&mut rng, spec.patch_dim, spec.patch_mean_scale))
        .collect();

    let grid = PatchGrid::identity(spec.grid_w, spec.grid_h);
    let mut archive = FeatureArchive::new(spec.semantic_dim, spec.patch_dim, grid);

    let draw = |rng: &mut ChaCha8Rng, class: usize| {
        let mut sem = normal_vec(rng, spec.semantic_dim, spec.semantic_sigma);
        sem[class] += sep;
        let sigma = spec.classes[class].patch_sigma;
        let mut patches = Array3::<f64>::zeros((spec.grid_h, spec.grid_w, spec.patch_dim));
        for mut cell in patches.rows_mut() {
            for (k, v) in cell.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *v = patch_means[class][k] + sigma * z;
            }
        }
        (sem, patches)
    };

    for (c, class) in spec.classes.iter().enumerate() {
        for i in 0..class.train {
            let (sem, patches) = draw(&mut rng, c);
            archive.records.push(ImageRecord {
                id: format!("{}_train_{i:04}", class.name),
                split: Split::Train,
                class_label: Some(class.name.clone()),
                gt_label: GtLabel::Normal,
                gt_mask: None,
                semantic: Array1::from(sem).mapv(|v| v as f32),
                patches: patches.mapv(|v| v as f32),
                image_size: (spec.image_w, spec.image_h),
            });
        }
    }

    let test_classes: Vec<usize> = spec
        .classes
        .iter()
        .enumerate()
        .flat_map(|(c, class)| std::iter::repeat_n(c, class.test))
        .collect();
    let n_test = test_classes.len();
    let n_abnormal = (spec.anomaly_rate * n_test as f64).round() as usize;
    let mut abnormal = vec![false; n_test];
    for i in sample(&mut rng, n_test, n_abnormal.min(n_test)).into_iter() {
        abnormal[i] = true;
    }

    let mut per_class_counter = vec![0usize; spec.classes.len()];
    for (t, &c) in test_classes.iter().enumerate() {
        let class = &spec.classes[c];
        let (sem, mut patches) = draw(&mut rng, c);
        let mut mask = Array2::from_elem((spec.image_h, spec.image_w), false);
        if abnormal[t] {
            let rw = rng.random_range(1..=(spec.grid_w / 2).max(1));
            let rh = rng.random_range(1..=(spec.grid_h / 2).max(1));
            let x0 = rng.random_range(0..=spec.grid_w - rw);
            let y0 = rng.random_range(0..=spec.grid_h - rh);
            let mut dir = normal_vec(&mut rng, spec.patch_dim, 1.0);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let offset = class.anomaly_offset.unwrap_or(spec.anomaly_offset);
            dir.iter_mut().for_each(|v| *v *= offset / norm);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    for (k, d) in dir.iter().enumerate() {
                        patches[[y, x, k]] += d;
                    }
                }
            }
            for ((py, px), m) in mask.indexed_iter_mut() {
                let cx = nearest_cell(px, spec.image_w, spec.grid_w);
                let cy = nearest_cell(py, spec.image_h, spec.grid_h);
                *m = (x0..x0 + rw).contains(&cx) && (y0..y0 + rh).contains(&cy);
            }
        }
        let i = per_class_counter[c];
        per_class_counter[c] += 1;
        archive.records.push(ImageRecord {
            id: format!("{}_test_{i:04}", class.name),
            split: Split::Test,
            class_label: Some(class.name.clone()),
            gt_label: if abnormal[t] {
                GtLabel::Abnormal
            } else {
                GtLabel::Normal
            },
            gt_mask: Some(mask),
            semantic: Array1::from(sem).mapv(|v| v as f32),
            patches: patches.mapv(|v| v as f32),
            image_size: (spec.image_w, spec.image_h),
        });
    }
    archive.validate()?;
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::l2;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::balanced(2);
        assert_eq!(
            synth_generate(&spec, 3).unwrap(),
            synth_generate(&spec, 3).unwrap()
        );
        assert_ne!(
            synth_generate(&spec, 3).unwrap(),
            synth_generate(&spec, 4).unwrap()
        );
    }

    #[test]
    fn zero_rate_gives_clean_test_split() {
        let mut spec = SynthSpec::balanced(2);
        spec.anomaly_rate = 0.0;
        let a = synth_generate(&spec, 1).unwrap();
        for r in a.test() {
            assert_eq!(r.gt_label, GtLabel::Normal);
            assert!(r.gt_mask.as_ref().unwrap().iter().all(|&m| !m));
        }
    }

    #[test]
    fn abnormal_count_is_rounded_rate() {
        // (rate, tests per class, expected abnormal over both classes)
        for (rate, tests, expect) in [(0.5, 7, 7), (0.3, 10, 6), (1.0, 5, 10), (0.25, 5, 3)] {
            let mut spec = SynthSpec::balanced(2).with_counts(2, tests);
            spec.anomaly_rate = rate;
            let a = synth_generate(&spec, 9).unwrap();
            let abnormal = a.test().filter(|r| r.gt_label == GtLabel::Abnormal).count();
            assert_eq!(abnormal, expect, "rate {rate}");
        }
    }

    #[test]
    fn masks_are_pixel_rectangles() {
        let spec = SynthSpec::balanced(1);
        let a = synth_generate(&spec, 5).unwrap();
        let mut seen = 0;
        for r in a.test().filter(|r| r.gt_label == GtLabel::Abnormal) {
            let m = r.gt_mask.as_ref().unwrap();
            let hot: Vec<(usize, usize)> = m
                .indexed_iter()
                .filter(|(_, &v)| v)
                .map(|(p, _)| p)
                .collect();
            assert!(!hot.is_empty());
            let y0 = hot.iter().map(|p| p.0).min().unwrap();
            let y1 = hot.iter().map(|p| p.0).max().unwrap();
            let x0 = hot.iter().map(|p| p.1).min().unwrap();
            let x1 = hot.iter().map(|p| p.1).max().unwrap();
            assert_eq!(hot.len(), (y1 - y0 + 1) * (x1 - x0 + 1));
            seen += 1;
        }
        assert!(seen > 0);
    }

    #[test]
    fn nearest_neighbour_shares_class() {
        let spec = SynthSpec::balanced(3);
        let a = synth_generate(&spec, 7).unwrap();
        let recs: Vec<_> = a.records.iter().collect();
        for (i, x) in recs.iter().enumerate() {
            let nearest = recs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, y)| {
                    let d = l2(
                        x.semantic.as_slice().unwrap(),
                        y.semantic.as_slice().unwrap(),
                    );
                    (d, &y.class_label)
                })
                .min_by(|p, q| p.0.total_cmp(&q.0))
                .unwrap();
            assert_eq!(nearest.1, &x.class_label, "record {}", x.id);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SynthSpec::balanced(2);
        s.anomaly_rate = 1.5;
        assert!(synth_generate(&s, 0).is_err());
        let mut s = SynthSpec::balanced(2);
        s.patch_dim = 0;
        assert!(synth_generate(&s, 0).is_err());
        let mut s = SynthSpec::balanced(2);
        s.classes.clear();
        assert!(synth_generate(&s, 0).is_err());
    }
}
