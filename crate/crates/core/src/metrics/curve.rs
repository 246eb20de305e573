//! Threshold-sweep metrics over a flat set of scores and binary labels.
//!
//! Every threshold classifies a sample as abnormal when `score >= threshold`.
//! The sweep visits each distinct score once, from highest to lowest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cumulative counts after admitting every sample with `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    /// Distinct thresholds in descending order.
    pub points: Vec<SweepPoint>,
    pub positives: u64,
    pub negatives: u64,
}

impl Sweep {
    pub fn new<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::Empty("no scores".into()));
        }
        let mut pairs: Vec<(f64, bool)> = scores
            .iter()
            .zip(labels)
            .map(|(s, &l)| (s.as_f64(), l))
            .collect();
        if let Some(row) = pairs.iter().position(|(s, _)| !s.is_finite()) {
            return Err(Error::NonFinite { row });
        }
        pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        let mut points: Vec<SweepPoint> = Vec::new();
        let (mut tp, mut fp) = (0u64, 0u64);
        for (i, &(s, l)) in pairs.iter().enumerate() {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_group = pairs.get(i + 1).is_none_or(|next| next.0 != s);
            if last_of_group {
                points.push(SweepPoint { threshold: s, tp, fp });
            }
        }
        Ok(Sweep {
            points,
            positives: tp,
            negatives: fp,
        })
    }

    fn require_positive(&self, what: &str) -> Result<()> {
        if self.positives == 0 {
            return Err(Error::Undefined(format!("{what} needs at least one abnormal sample")));
        }
        Ok(())
    }

    fn require_both(&self, what: &str) -> Result<()> {
        self.require_positive(what)?;
        if self.negatives == 0 {
            return Err(Error::Undefined(format!("{what} needs at least one normal sample")));
        }
        Ok(())
    }

    /// Mann-Whitney U statistic normalized to `[0, 1]`, ties counted one half.
    pub fn auroc(&self) -> Result<f64> {
        self.require_both("AUROC")?;
        let (p, n) = (self.positives as f64, self.negatives as f64);
        let mut wins = 0.0;
        let (mut tp_prev, mut fp_prev) = (0u64, 0u64);
        for pt in &self.points {
            let dp = (pt.tp - tp_prev) as f64;
            let dn = (pt.fp - fp_prev) as f64;
            wins += dp * (n - pt.fp as f64) + 0.5 * dp * dn;
            tp_prev = pt.tp;
            fp_prev = pt.fp;
        }
        Ok(wins / (p * n))
    }

    /// ROC points `(fpr, tpr)` starting at the origin.
    pub fn roc_curve(&self) -> Result<Vec<(f64, f64)>> {
        self.require_both("ROC curve")?;
        let (p, n) = (self.positives as f64, self.negatives as f64);
        let mut curve = vec![(0.0, 0.0)];
        curve.extend(
            self.points
                .iter()
                .map(|pt| (pt.fp as f64 / n, pt.tp as f64 / p)),
        );
        Ok(curve)
    }

    /// `sum_n (R_n - R_{n-1}) * P_n` over distinct thresholds.
    pub fn average_precision(&self) -> Result<f64> {
        self.require_positive("average precision")?;
        let p = self.positives as f64;
        let mut ap = 0.0;
        let mut tp_prev = 0u64;
        for pt in &self.points {
            if pt.tp > tp_prev {
                let precision = pt.tp as f64 / (pt.tp + pt.fp) as f64;
                ap += (pt.tp - tp_prev) as f64 / p * precision;
            }
            tp_prev = pt.tp;
        }
        Ok(ap)
    }

    fn best_by(&self, what: &str, f: impl Fn(u64, u64, u64) -> f64) -> Result<Optimum> {
        self.require_positive(what)?;
        let mut best = Optimum {
            value: f64::NEG_INFINITY,
            threshold: f64::NAN,
        };
        // Descending sweep with `>=` leaves the smallest maximizing threshold.
        for pt in &self.points {
            let v = f(pt.tp, pt.fp, self.positives - pt.tp);
            if v >= best.value {
                best = Optimum {
                    value: v,
                    threshold: pt.threshold,
                };
            }
        }
        Ok(best)
    }

    pub fn f1_max(&self) -> Result<Optimum> {
        self.best_by("F1", f1)
    }

    pub fn iou_max(&self) -> Result<Optimum> {
        self.best_by("IoU", iou)
    }

    fn counts_at(&self, threshold: f64) -> (u64, u64) {
        // Points are descending; take the last one still >= threshold.
        let idx = self.points.partition_point(|pt| pt.threshold >= threshold);
        match idx {
            0 => (0, 0),
            i => (self.points[i - 1].tp, self.points[i - 1].fp),
        }
    }

    pub fn f1_at(&self, threshold: f64) -> Result<f64> {
        self.require_positive("F1")?;
        let (tp, fp) = self.counts_at(threshold);
        Ok(f1(tp, fp, self.positives - tp))
    }

    pub fn iou_at(&self, threshold: f64) -> Result<f64> {
        self.require_positive("IoU")?;
        let (tp, fp) = self.counts_at(threshold);
        Ok(iou(tp, fp, self.positives - tp))
    }
}

/// Best metric value and the smallest threshold achieving it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub value: f64,
    pub threshold: f64,
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

fn iou(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        tp as f64 / denom as f64
    }
}

/// Trapezoidal area under a polyline given as `(x, y)` points.
pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum()
}

pub fn auroc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    Sweep::new(scores, labels)?.auroc()
}

pub fn average_precision<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    Sweep::new(scores, labels)?.average_precision()
}

/// Maximum F1 and the smallest threshold reaching it.
pub fn f1_max<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<Optimum> {
    Sweep::new(scores, labels)?.f1_max()
}

pub fn iou_max<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<Optimum> {
    Sweep::new(scores, labels)?.iou_max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auroc(s: &[f64], l: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (a, &la) in s.iter().zip(l) {
            for (b, &lb) in s.iter().zip(l) {
                if la && !lb {
                    pairs += 1.0;
                    if a > b {
                        wins += 1.0;
                    } else if a == b {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn counts(s: &[f64], l: &[bool], t: f64) -> (f64, f64, f64) {
        let mut c = (0.0, 0.0, 0.0);
        for (&v, &y) in s.iter().zip(l) {
            match (v >= t, y) {
                (true, true) => c.0 += 1.0,
                (true, false) => c.1 += 1.0,
                (false, true) => c.2 += 1.0,
                _ => {}
            }
        }
        c
    }

    fn brute_f1(s: &[f64], l: &[bool]) -> (f64, f64) {
        let mut ts = s.to_vec();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let mut best = (-1.0, 0.0);
        for &t in &ts {
            let (tp, fp, fn_) = counts(s, l, t);
            let f = 2.0 * tp / (2.0 * tp + fp + fn_);
            if f > best.0 {
                best = (f, t);
            }
        }
        best
    }

    #[test]
    fn auroc_examples() {
        let l = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.8, 0.2, 0.9], &l).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5f32; 4], &l).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_label_is_error() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]).unwrap(), 0.5);
        assert!(average_precision(&[0.9, 0.1], &[false, false]).is_err());
    }

    #[test]
    fn f1_examples() {
        let o = f1_max(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!((o.value, o.threshold), (1.0, 0.8));
        let o = f1_max(&[0.4, 0.2, 0.7], &[true, true, true]).unwrap();
        assert_eq!((o.value, o.threshold), (1.0, 0.2));
        // Lone positive below every negative: the only non-zero F1 admits all.
        let s = [0.9, 0.8, 0.7, 0.1];
        let l = [false, false, false, true];
        let o = f1_max(&s, &l).unwrap();
        assert_eq!((o.value, o.threshold), brute_f1(&s, &l));
        assert_eq!(o.value, 2.0 / 5.0);
    }

    #[test]
    fn iou_of_exact_prediction() {
        let o = iou_max(&[1.0, 0.0, 1.0, 0.0], &[true, false, true, false]).unwrap();
        assert_eq!(o.value, 1.0);
    }

    #[test]
    fn half_overlap_iou_is_one_third() {
        // gt covers cells 0..4, prediction (score 1) covers 2..6.
        let l: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let s: Vec<f64> = (0..8).map(|i| if (2..6).contains(&i) { 1.0 } else { 0.0 }).collect();
        let sw = Sweep::new(&s, &l).unwrap();
        assert_eq!(sw.iou_at(1.0).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn at_threshold_matches_counting() {
        let s = [0.3, 0.1, 0.7, 0.7, 0.5, 0.2];
        let l = [true, false, true, false, false, true];
        let sw = Sweep::new(&s, &l).unwrap();
        for t in [-1.0, 0.1, 0.15, 0.5, 0.7, 0.71, 2.0] {
            let (tp, fp, fn_) = counts(&s, &l, t);
            assert_eq!(sw.f1_at(t).unwrap(), 2.0 * tp / (2.0 * tp + fp + fn_));
        }
    }

    #[test]
    fn mismatched_and_non_finite_inputs() {
        assert!(auroc(&[0.1], &[true, false]).is_err());
        assert!(matches!(
            auroc(&[0.1, f64::NAN], &[true, false]),
            Err(Error::NonFinite { row: 1 })
        ));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec((0u32..12).prop_map(|v| v as f64 * 0.25), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_and_trapezoid((s, mut l) in instance()) {
            l[0] = true;
            l[1] = false;
            let sw = Sweep::new(&s, &l).unwrap();
            let mw = sw.auroc().unwrap();
            prop_assert!((mw - pairwise_auroc(&s, &l)).abs() < 1e-12);
            prop_assert!((mw - trapezoid(&sw.roc_curve().unwrap())).abs() < 1e-12);
        }

        #[test]
        fn f1_threshold_beats_quantiles((s, mut l) in instance()) {
            l[0] = true;
            let o = f1_max(&s, &l).unwrap();
            prop_assert_eq!((o.value, o.threshold), brute_f1(&s, &l));
            let (lo, hi) = (-0.5, 3.5);
            for q in 0..1000 {
                let t = lo + (hi - lo) * q as f64 / 999.0;
                let (tp, fp, fn_) = counts(&s, &l, t);
                prop_assert!(o.value >= 2.0 * tp / (2.0 * tp + fp + fn_));
            }
        }

        #[test]
        fn rank_invariance((s, mut l) in instance()) {
            l[0] = true;
            l[1] = false;
            let lin: Vec<f64> = s.iter().map(|x| 2.0 * x + 1.0).collect();
            let cube: Vec<f64> = s.iter().map(|x| x * x * x).collect();
            let base = Sweep::new(&s, &l).unwrap();
            for t in [lin, cube] {
                let o = Sweep::new(&t, &l).unwrap();
                prop_assert_eq!(base.auroc().unwrap(), o.auroc().unwrap());
                prop_assert_eq!(base.average_precision().unwrap(), o.average_precision().unwrap());
                prop_assert_eq!(base.f1_max().unwrap().value, o.f1_max().unwrap().value);
                prop_assert_eq!(base.iou_max().unwrap().value, o.iou_max().unwrap().value);
            }
        }
    }
}
