use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curve::Sweep;
use super::pro::{aupro, DEFAULT_FPR_CAP};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureArchive, GtLabel, ImageRecord};
use crate::scalar::Scalar;
use crate::scoring::AnomalyResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One threshold per class label.
    PerClass,
    /// One threshold shared by every test record.
    Global,
    /// One threshold per routed cluster.
    PerCluster,
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_class" | "per-class" => Ok(Grouping::PerClass),
            "global" => Ok(Grouping::Global),
            "per_cluster" | "per-cluster" => Ok(Grouping::PerCluster),
            other => Err(Error::Config(format!("unknown grouping {other:?}"))),
        }
    }
}

/// Metrics of one group at one level. `None` marks a metric that is undefined
/// for the group (for example AUROC without any abnormal sample).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
    pub f1_max: Option<f64>,
    /// Threshold at which `f1_max` was taken.
    pub threshold: Option<f64>,
    /// Pixel level only.
    pub aupro: Option<f64>,
    /// Pixel level only.
    pub iou_max: Option<f64>,
    pub iou_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub name: String,
    pub records: usize,
    pub abnormal: usize,
    pub image: LevelMetrics,
    pub pixel: LevelMetrics,
}

/// Macro means over groups; `mad` averages the level's metric means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub mauroc: Option<f64>,
    pub map: Option<f64>,
    pub mf1_max: Option<f64>,
    pub maupro: Option<f64>,
    pub miou_max: Option<f64>,
    pub mad: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedThresholds {
    pub image_f1: f64,
    pub pixel_f1: f64,
    pub pixel_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub grouping: Grouping,
    pub fpr_cap: f64,
    pub groups: Vec<GroupRow>,
    pub image: LevelSummary,
    pub pixel: LevelSummary,
    /// Pooled thresholds applied to every row under `Grouping::Global`.
    pub shared_thresholds: Option<SharedThresholds>,
}

impl MetricReport {
    pub fn group(&self, name: &str) -> Option<&GroupRow> {
        self.groups.iter().find(|g| g.name == name)
    }
}

struct Pooled {
    image_scores: Vec<f64>,
    image_labels: Vec<bool>,
    pixel_scores: Vec<f64>,
    pixel_labels: Vec<bool>,
}

fn pool<T: Scalar>(members: &[(&AnomalyResult<T>, &ImageRecord, Array2<bool>)]) -> Pooled {
    let mut p = Pooled {
        image_scores: Vec::with_capacity(members.len()),
        image_labels: Vec::with_capacity(members.len()),
        pixel_scores: Vec::new(),
        pixel_labels: Vec::new(),
    };
    for (res, rec, mask) in members {
        p.image_scores.push(res.image_score.as_f64());
        p.image_labels.push(rec.gt_label == GtLabel::Abnormal);
        p.pixel_scores.extend(res.score_map.iter().map(|v| v.as_f64()));
        p.pixel_labels.extend(mask.iter().copied());
    }
    p
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn level_metrics(
    scores: &[f64],
    labels: &[bool],
    shared: Option<(f64, Option<f64>)>,
) -> Result<LevelMetrics> {
    let sweep = Sweep::new(scores, labels)?;
    let mut m = LevelMetrics {
        auroc: defined(sweep.auroc())?,
        ap: defined(sweep.average_precision())?,
        ..Default::default()
    };
    if sweep.positives > 0 {
        match shared {
            Some((f1_t, iou_t)) => {
                m.f1_max = Some(sweep.f1_at(f1_t)?);
                m.threshold = Some(f1_t);
                if let Some(t) = iou_t {
                    m.iou_max = Some(sweep.iou_at(t)?);
                    m.iou_threshold = Some(t);
                }
            }
            None => {
                let f1 = sweep.f1_max()?;
                m.f1_max = Some(f1.value);
                m.threshold = Some(f1.threshold);
            }
        }
    }
    Ok(m)
}

fn group_row<T: Scalar>(
    name: String,
    members: &[(&AnomalyResult<T>, &ImageRecord, Array2<bool>)],
    fpr_cap: f64,
    shared: Option<SharedThresholds>,
) -> Result<GroupRow> {
    let p = pool(members);
    let image = level_metrics(
        &p.image_scores,
        &p.image_labels,
        shared.map(|s| (s.image_f1, None)),
    )?;
    let mut pixel = level_metrics(
        &p.pixel_scores,
        &p.pixel_labels,
        shared.map(|s| (s.pixel_f1, Some(s.pixel_iou))),
    )?;
    if shared.is_none() && pixel.f1_max.is_some() {
        let iou = Sweep::new(&p.pixel_scores, &p.pixel_labels)?.iou_max()?;
        pixel.iou_max = Some(iou.value);
        pixel.iou_threshold = Some(iou.threshold);
    }
    let maps: Vec<ArrayView2<'_, T>> = members.iter().map(|m| m.0.score_map.view()).collect();
    let masks: Vec<ArrayView2<'_, bool>> = members.iter().map(|m| m.2.view()).collect();
    pixel.aupro = defined(aupro(&maps, &masks, fpr_cap))?;
    Ok(GroupRow {
        name,
        records: members.len(),
        abnormal: p.image_labels.iter().filter(|&&l| l).count(),
        image,
        pixel,
    })
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(groups: &[GroupRow], pixel: bool) -> LevelSummary {
    let level = |g: &GroupRow| if pixel { g.pixel.clone() } else { g.image.clone() };
    let rows: Vec<LevelMetrics> = groups.iter().map(level).collect();
    let mut s = LevelSummary {
        mauroc: mean(rows.iter().map(|r| r.auroc)),
        map: mean(rows.iter().map(|r| r.ap)),
        mf1_max: mean(rows.iter().map(|r| r.f1_max)),
        ..Default::default()
    };
    let mut parts = vec![s.mauroc, s.map, s.mf1_max];
    if pixel {
        s.maupro = mean(rows.iter().map(|r| r.aupro));
        s.miou_max = mean(rows.iter().map(|r| r.iou_max));
        parts.extend([s.maupro, s.miou_max]);
    }
    s.mad = if parts.iter().all(Option::is_some) {
        mean(parts.into_iter())
    } else {
        None
    };
    s
}

/// Evaluates scored test records under the given grouping.
///
/// Pixels are pooled across the images of a group. Under `Global`, the F1 and
/// IoU thresholds are the pooled optima over all test records; if class labels
/// exist, rows are reported per class at those shared thresholds, otherwise as a
/// single pooled row.
pub fn evaluate<T: Scalar>(
    results: &[AnomalyResult<T>],
    archive: &FeatureArchive,
    grouping: Grouping,
) -> Result<MetricReport> {
    evaluate_with_cap(results, archive, grouping, DEFAULT_FPR_CAP)
}

pub fn evaluate_with_cap<T: Scalar>(
    results: &[AnomalyResult<T>],
    archive: &FeatureArchive,
    grouping: Grouping,
    fpr_cap: f64,
) -> Result<MetricReport> {
    let by_id: HashMap<&str, &AnomalyResult<T>> =
        results.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let test: Vec<&ImageRecord> = archive.test().collect();
    if test.is_empty() {
        return Err(Error::Empty("archive has no test records".into()));
    }
    if by_id.len() != test.len() {
        return Err(Error::Config(format!(
            "{} results for {} test records",
            by_id.len(),
            test.len()
        )));
    }
    let mut members = Vec::with_capacity(test.len());
    for rec in &test {
        let res = by_id.get(rec.id.as_str()).ok_or_else(|| {
            Error::Config(format!("no score for test record {}", rec.id))
        })?;
        if res.score_map.dim() != (rec.image_size.1, rec.image_size.0) {
            return Err(Error::dim(&rec.id, "score map does not match image size"));
        }
        members.push((*res, *rec, rec.mask_or_empty()));
    }

    let class_of = |rec: &ImageRecord| rec.class_label.clone();
    let labelled = test.iter().all(|r| r.class_label.is_some());
    let key: Box<dyn Fn(&(&AnomalyResult<T>, &ImageRecord, Array2<bool>)) -> String> =
        match grouping {
            Grouping::PerClass => {
                if !labelled {
                    return Err(Error::LabelRequirement {
                        scenario: "per_class grouping".into(),
                        detail: "every test record needs a class label".into(),
                    });
                }
                Box::new(move |m| class_of(m.1).expect("checked"))
            }
            Grouping::PerCluster => Box::new(|m| format!("cluster{}", m.0.routed_cluster)),
            Grouping::Global if labelled => Box::new(move |m| class_of(m.1).expect("checked")),
            Grouping::Global => Box::new(|_| "all".to_string()),
        };

    let shared = if grouping == Grouping::Global {
        let p = pool(&members);
        let image = Sweep::new(&p.image_scores, &p.image_labels)?.f1_max()?;
        let pixel = Sweep::new(&p.pixel_scores, &p.pixel_labels)?;
        Some(SharedThresholds {
            image_f1: image.threshold,
            pixel_f1: pixel.f1_max()?.threshold,
            pixel_iou: pixel.iou_max()?.threshold,
        })
    } else {
        None
    };

    let mut names: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<_>> = HashMap::new();
    for m in members {
        let k = key(&m);
        if !groups.contains_key(&k) {
            names.push(k.clone());
        }
        groups.entry(k).or_default().push(m);
    }
    if grouping == Grouping::PerCluster {
        names.sort_by_key(|n| n["cluster".len()..].parse::<usize>().unwrap_or(usize::MAX));
    }
    let rows = names
        .par_iter()
        .map(|n| group_row(n.clone(), &groups[n], fpr_cap, shared))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        grouping,
        fpr_cap,
        image: summarize(&rows, false),
        pixel: summarize(&rows, true),
        groups: rows,
        shared_thresholds: shared,
    })
}

/// `report.csv`: `group,level,metric,value`, one line per defined metric,
/// followed by the macro rows under group `mean`.
pub fn report_csv(report: &MetricReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv {
        path: "report.csv".into(),
        source: e,
    };
    w.write_record(["group", "level", "metric", "value"]).map_err(csv_err)?;
    for g in &report.groups {
        for (level, m) in [("image", &g.image), ("pixel", &g.pixel)] {
            let fields = [
                ("auroc", m.auroc),
                ("ap", m.ap),
                ("f1_max", m.f1_max),
                ("threshold", m.threshold),
                ("aupro", m.aupro),
                ("iou_max", m.iou_max),
            ];
            for (name, v) in fields {
                if let Some(v) = v {
                    w.write_record([g.name.as_str(), level, name, &v.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
    }
    for (level, s) in [("image", &report.image), ("pixel", &report.pixel)] {
        let fields = [
            ("mauroc", s.mauroc),
            ("map", s.map),
            ("mf1_max", s.mf1_max),
            ("maupro", s.maupro),
            ("miou_max", s.miou_max),
            ("mad", s.mad),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                w.write_record(["mean", level, name, &v.to_string()]).map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn write_report_csv(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report_csv(report)?).map_err(|e| Error::io(path, e))
}
