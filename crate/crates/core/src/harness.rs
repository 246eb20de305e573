//! Scenario runs (known/unknown training and evaluation), the hierarchical vs
//! single-bank comparison, F1 Diff Ratios and distance-count cost accounting.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureArchive;
use crate::memory_bank::{self, BankConfig, BankMode, HierMemoryBank};
use crate::metrics::{evaluate_with_cap, Grouping, MetricReport, DEFAULT_FPR_CAP};
use crate::scalar::Scalar;
use crate::scoring::{score_batch, ScoreCounters, ScoreOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knowledge {
    Known,
    Unknown,
}

/// Whether class labels are used for training (bank grouping) and evaluation
/// (threshold grouping).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub training: Knowledge,
    pub evaluation: Knowledge,
}

impl Scenario {
    pub const KK: Scenario = Scenario::new(Knowledge::Known, Knowledge::Known);
    pub const UK: Scenario = Scenario::new(Knowledge::Unknown, Knowledge::Known);
    pub const KU: Scenario = Scenario::new(Knowledge::Known, Knowledge::Unknown);
    pub const UU: Scenario = Scenario::new(Knowledge::Unknown, Knowledge::Unknown);

    pub const fn new(training: Knowledge, evaluation: Knowledge) -> Self {
        Scenario {
            training,
            evaluation,
        }
    }

    pub fn all() -> [Scenario; 4] {
        [Scenario::KK, Scenario::UK, Scenario::KU, Scenario::UU]
    }

    /// Two-letter code, training first: `kk`, `uk`, `ku`, `uu`.
    pub fn code(&self) -> &'static str {
        match (self.training, self.evaluation) {
            (Knowledge::Known, Knowledge::Known) => "kk",
            (Knowledge::Unknown, Knowledge::Known) => "uk",
            (Knowledge::Known, Knowledge::Unknown) => "ku",
            (Knowledge::Unknown, Knowledge::Unknown) => "uu",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::all()
            .into_iter()
            .find(|sc| sc.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?} (expected kk, uk, ku or uu)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    /// One bank per semantic cluster (or class, for known training).
    Hierarchical,
    /// Every training patch pooled into a single bank.
    Monolithic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub bank: BankConfig,
    pub score: ScoreOptions,
    pub pipeline: Pipeline,
    pub fpr_cap: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            bank: BankConfig::default(),
            score: ScoreOptions::default(),
            pipeline: Pipeline::Hierarchical,
            fpr_cap: DEFAULT_FPR_CAP,
        }
    }
}

impl HarnessConfig {
    pub fn bank_mode(&self, scenario: Scenario) -> BankMode {
        match (self.pipeline, scenario.training) {
            (Pipeline::Monolithic, _) => BankMode::Monolithic,
            (Pipeline::Hierarchical, Knowledge::Known) => BankMode::Labeled,
            (Pipeline::Hierarchical, Knowledge::Unknown) => BankMode::Pseudo,
        }
    }

    pub fn grouping(&self, scenario: Scenario) -> Grouping {
        match (scenario.evaluation, self.pipeline) {
            (Knowledge::Known, _) => Grouping::PerClass,
            (Knowledge::Unknown, Pipeline::Hierarchical) => Grouping::PerCluster,
            (Knowledge::Unknown, Pipeline::Monolithic) => Grouping::Global,
        }
    }
}

/// Distance-evaluation tallies of one run.
///
/// The build model counts `P_k^2` pairwise evaluations per cluster pool; the
/// measured greedy traversal spends `budget_k * P_k`, which equals `P_k^2` at
/// coreset ratio 1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub k: usize,
    /// `P_k`: training patches pooled per cluster.
    pub pool_sizes: Vec<usize>,
    pub bank_sizes: Vec<usize>,
    /// `P = sum P_k`.
    pub total_patches: u64,
    pub sum_pool_squared: u64,
    /// `P^2`, the single-bank model cost on the same patches.
    pub monolithic_model: u64,
    pub build_distance_evals: u64,
    pub clustering_distance_evals: u64,
    pub query_distance_evals: u64,
    pub route_distance_evals: u64,
    pub test_records: usize,
    pub patches_per_record: usize,
}

impl CostCounters {
    pub fn from_run<T: Scalar>(bank: &HierMemoryBank<T>, scores: &ScoreCounters) -> Self {
        let pool_sizes = bank.pool_sizes.clone();
        let total: u64 = pool_sizes.iter().map(|&p| p as u64).sum();
        CostCounters {
            k: bank.k(),
            bank_sizes: bank.bank_sizes(),
            total_patches: total,
            sum_pool_squared: pool_sizes.iter().map(|&p| (p as u64).pow(2)).sum(),
            monolithic_model: total * total,
            pool_sizes,
            build_distance_evals: bank.build_distance_evals(),
            clustering_distance_evals: bank.clustering_distance_evals(),
            query_distance_evals: scores.query_distance_evals,
            route_distance_evals: scores.route_distance_evals,
            test_records: scores.records,
            patches_per_record: bank.patch_grid.cells(),
        }
    }

    /// `sum P_k^2 / P^2`.
    pub fn model_ratio(&self) -> f64 {
        self.sum_pool_squared as f64 / self.monolithic_model as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub pipeline: Pipeline,
    pub bank_mode: BankMode,
    pub grouping: Grouping,
    pub k: usize,
    pub config: HarnessConfig,
    pub metrics: MetricReport,
    pub costs: CostCounters,
}

impl EvalReport {
    pub fn image_mf1(&self) -> Option<f64> {
        self.metrics.image.mf1_max
    }

    pub fn pixel_mf1(&self) -> Option<f64> {
        self.metrics.pixel.mf1_max
    }
}

fn require_labels(
    archive: &FeatureArchive,
    scenario: Scenario,
    cfg: &HarnessConfig,
    training: bool,
) -> Result<()> {
    let missing = |train: bool| {
        archive
            .records
            .iter()
            .filter(|r| (r.split == crate::feature_store::Split::Train) == train)
            .find(|r| r.class_label.is_none())
            .map(|r| r.id.clone())
    };
    let needs_train = training && cfg.bank_mode(scenario) == BankMode::Labeled;
    if needs_train {
        if let Some(id) = missing(true) {
            return Err(Error::LabelRequirement {
                scenario: scenario.code().into(),
                detail: format!("known training needs class labels; train record `{id}` has none"),
            });
        }
    }
    if scenario.evaluation == Knowledge::Known {
        if let Some(id) = missing(false) {
            return Err(Error::LabelRequirement {
                scenario: scenario.code().into(),
                detail: format!("known evaluation needs class labels; test record `{id}` has none"),
            });
        }
    }
    Ok(())
}

/// Builds the bank a scenario trains.
pub fn build_bank(archive: &FeatureArchive, scenario: Scenario, cfg: &HarnessConfig) -> Result<HierMemoryBank<f32>> {
    require_labels(archive, scenario, cfg, true)?;
    memory_bank::build(archive, &cfg.bank, cfg.bank_mode(scenario))
}

/// Scores and evaluates a prebuilt bank under a scenario's evaluation mode.
pub fn run_with_bank(
    archive: &FeatureArchive,
    bank: &HierMemoryBank<f32>,
    scenario: Scenario,
    cfg: &HarnessConfig,
) -> Result<EvalReport> {
    require_labels(archive, scenario, cfg, false)?;
    let (results, counters) = score_batch(archive, bank, &cfg.score)?;
    let grouping = cfg.grouping(scenario);
    let metrics = evaluate_with_cap(&results, archive, grouping, cfg.fpr_cap)?;
    Ok(EvalReport {
        scenario,
        pipeline: cfg.pipeline,
        bank_mode: bank.mode,
        grouping,
        k: bank.k(),
        config: *cfg,
        metrics,
        costs: CostCounters::from_run(bank, &counters),
    })
}

pub fn run_scenario(archive: &FeatureArchive, scenario: Scenario, cfg: &HarnessConfig) -> Result<EvalReport> {
    let bank = build_bank(archive, scenario, cfg)?;
    run_with_bank(archive, &bank, scenario, cfg)
}

/// Ratio of unknown-evaluation to known-evaluation mF1-max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffRatioReport {
    pub image_known_f1: f64,
    pub image_unknown_f1: f64,
    pub image_ratio: f64,
    pub pixel_known_f1: f64,
    pub pixel_unknown_f1: f64,
    pub pixel_ratio: f64,
}

pub fn diff_ratio(known: &EvalReport, unknown: &EvalReport) -> Result<DiffRatioReport> {
    let pair = |k: Option<f64>, u: Option<f64>, level: &str| -> Result<(f64, f64, f64)> {
        let (k, u) = match (k, u) {
            (Some(k), Some(u)) => (k, u),
            _ => return Err(Error::Undefined(format!("{level} mF1-max missing"))),
        };
        if k <= 0.0 {
            return Err(Error::Undefined(format!("{level} known mF1-max is zero")));
        }
        Ok((k, u, u / k))
    };
    let (ik, iu, ir) = pair(known.image_mf1(), unknown.image_mf1(), "image")?;
    let (pk, pu, pr) = pair(known.pixel_mf1(), unknown.pixel_mf1(), "pixel")?;
    Ok(DiffRatioReport {
        image_known_f1: ik,
        image_unknown_f1: iu,
        image_ratio: ir,
        pixel_known_f1: pk,
        pixel_unknown_f1: pu,
        pixel_ratio: pr,
    })
}

/// Unknown-training robustness study: one bank, evaluated with class
/// thresholds (U->K) and without (U->U).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub known: EvalReport,
    pub unknown: EvalReport,
    pub diff_ratio: DiffRatioReport,
}

pub fn robustness(archive: &FeatureArchive, cfg: &HarnessConfig) -> Result<Robustness> {
    let bank = build_bank(archive, Scenario::UK, cfg)?;
    let known = run_with_bank(archive, &bank, Scenario::UK, cfg)?;
    let unknown = run_with_bank(archive, &bank, Scenario::UU, cfg)?;
    let diff_ratio = diff_ratio(&known, &unknown)?;
    Ok(Robustness {
        known,
        unknown,
        diff_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Pseudo-class banks, per-cluster thresholds.
    pub hierarchical: EvalReport,
    /// One pooled bank, one global threshold.
    pub monolithic: EvalReport,
}

/// Runs both pipelines on the same archive with unknown training and evaluation.
pub fn compare_monolithic(archive: &FeatureArchive, cfg: &HarnessConfig) -> Result<Comparison> {
    let hier = HarnessConfig {
        pipeline: Pipeline::Hierarchical,
        ..*cfg
    };
    let mono = HarnessConfig {
        pipeline: Pipeline::Monolithic,
        ..*cfg
    };
    Ok(Comparison {
        hierarchical: run_scenario(archive, Scenario::UU, &hier)?,
        monolithic: run_scenario(archive, Scenario::UU, &mono)?,
    })
}

/// One `bench.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "P")]
    pub p: u64,
    #[serde(rename = "sum_Pk2")]
    pub sum_pk2: u64,
    pub build_evals: u64,
    pub query_evals: u64,
    #[serde(rename = "image_mF1_known")]
    pub image_mf1_known: f64,
    #[serde(rename = "image_mF1_unknown")]
    pub image_mf1_unknown: f64,
    pub diff_ratio: f64,
}

impl BenchRow {
    pub fn from_robustness(label: impl Into<String>, r: &Robustness) -> Self {
        let c = &r.unknown.costs;
        BenchRow {
            scenario: label.into(),
            k: c.k,
            p: c.total_patches,
            sum_pk2: c.sum_pool_squared,
            build_evals: c.build_distance_evals,
            query_evals: c.query_distance_evals,
            image_mf1_known: r.diff_ratio.image_known_f1,
            image_mf1_unknown: r.diff_ratio.image_unknown_f1,
            diff_ratio: r.diff_ratio.image_ratio,
        }
    }
}

/// Robustness rows for both pipelines.
pub fn bench(archive: &FeatureArchive, cfg: &HarnessConfig) -> Result<Vec<BenchRow>> {
    [Pipeline::Hierarchical, Pipeline::Monolithic]
        .into_iter()
        .map(|pipeline| {
            let c = HarnessConfig { pipeline, ..*cfg };
            let r = robustness(archive, &c)?;
            let label = match pipeline {
                Pipeline::Hierarchical => "hierarchical:uk/uu",
                Pipeline::Monolithic => "monolithic:uk/uu",
            };
            Ok(BenchRow::from_robustness(label, &r))
        })
        .collect()
}

pub fn write_bench_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `id,cluster,class,s0..s{d-1}` for every archive record, with the
/// cluster each semantic vector routes to.
pub fn export_embeddings<T: Scalar>(
    archive: &FeatureArchive,
    bank: &HierMemoryBank<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id".to_string(), "cluster".into(), "class".into()];
    header.extend((0..archive.semantic_dim).map(|i| format!("s{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in &archive.records {
        let e: Vec<T> = r.semantic.iter().map(|&v| T::of_f32(v)).collect();
        let k = bank.route(&e).map_err(|_| {
            Error::dim(&r.id, "semantic vector does not match the bank keys")
        })?;
        let mut row = vec![
            r.id.clone(),
            k.to_string(),
            r.class_label.clone().unwrap_or_default(),
        ];
        row.extend(r.semantic.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back `(id, cluster)` pairs from an embeddings CSV.
pub fn read_embedding_clusters(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let cluster = rec
            .get(1)
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::invariant(rec.get(0).unwrap_or("?"), "bad cluster column"))?;
        out.push((rec.get(0).unwrap_or_default().to_string(), cluster));
    }
    Ok(out)
}

/// Writes any report as pretty JSON.
pub fn write_json<S: Serialize>(value: &S, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coreset::CoresetConfig;
    use crate::feature_store::{synth_generate, SynthSpec};

    fn archive(classes: usize, seed: u64) -> FeatureArchive {
        let mut spec = SynthSpec::balanced(classes).with_counts(16, 8);
        spec.grid_w = 4;
        spec.grid_h = 4;
        spec.image_w = 16;
        spec.image_h = 16;
        synth_generate(&spec, seed).unwrap()
    }

    fn cfg(ratio: f64) -> HarnessConfig {
        HarnessConfig {
            bank: BankConfig {
                coreset: CoresetConfig::new(ratio, 3).unwrap(),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn scenario_codes_round_trip() {
        for s in Scenario::all() {
            assert_eq!(s.code().parse::<Scenario>().unwrap(), s);
        }
        assert!("xx".parse::<Scenario>().is_err());
        assert_eq!(Scenario::all().len(), 4);
    }

    #[test]
    fn every_scenario_runs_and_uu_runs_unlabeled() {
        let a = archive(2, 1);
        for s in Scenario::all() {
            let r = run_scenario(&a, s, &cfg(0.25)).unwrap();
            assert_eq!(r.k, 2, "{s}");
        }
        let stripped = a.without_labels();
        assert!(run_scenario(&stripped, Scenario::UU, &cfg(0.25)).is_ok());
        for s in [Scenario::KK, Scenario::UK, Scenario::KU] {
            let err = run_scenario(&stripped, s, &cfg(0.25)).unwrap_err();
            match err {
                Error::LabelRequirement { scenario, .. } => assert_eq!(scenario, s.code()),
                other => panic!("{other}"),
            }
        }
    }

    #[test]
    fn uu_equals_uk_when_clusters_match_classes() {
        let r = robustness(&archive(2, 4), &cfg(0.25)).unwrap();
        assert_eq!(r.known.image_mf1(), r.unknown.image_mf1());
        assert_eq!(r.known.pixel_mf1(), r.unknown.pixel_mf1());
        assert_eq!(r.diff_ratio.image_ratio, 1.0);
    }

    #[test]
    fn identical_reports_ratio_one() {
        let r = run_scenario(&archive(2, 2), Scenario::UK, &cfg(0.25)).unwrap();
        let d = diff_ratio(&r, &r).unwrap();
        assert_eq!((d.image_ratio, d.pixel_ratio), (1.0, 1.0));
    }

    #[test]
    fn single_cluster_costs_match_monolithic() {
        let a = archive(1, 5);
        let hier = run_scenario(&a, Scenario::KK, &cfg(0.5)).unwrap();
        let mono = HarnessConfig {
            pipeline: Pipeline::Monolithic,
            ..cfg(0.5)
        };
        let mono = run_scenario(&a, Scenario::KK, &mono).unwrap();
        let (h, m) = (&hier.costs, &mono.costs);
        assert_eq!(h.k, 1);
        assert_eq!(h.build_distance_evals, m.build_distance_evals);
        assert_eq!(h.query_distance_evals, m.query_distance_evals);
        assert_eq!(hier.metrics, mono.metrics);
    }

    #[test]
    fn two_equal_clusters_halve_build_cost() {
        let a = archive(2, 6);
        let c = compare_monolithic(&a, &cfg(1.0)).unwrap();
        let (h, m) = (&c.hierarchical.costs, &c.monolithic.costs);
        assert_eq!(h.pool_sizes, vec![256, 256]);
        assert_eq!(h.build_distance_evals, 2 * 256 * 256);
        assert_eq!(m.build_distance_evals, 512 * 512);
        assert_eq!(h.sum_pool_squared * 2, h.monolithic_model);
        assert!(h.query_distance_evals < m.query_distance_evals);
    }

    #[test]
    fn embeddings_round_trip() {
        let a = archive(2, 7);
        let bank = build_bank(&a, Scenario::UU, &cfg(0.25)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        export_embeddings(&a, &bank, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("id,cluster,class,s0,"));
        assert_eq!(header.split(',').count(), 3 + a.semantic_dim);
        let back = read_embedding_clusters(&path).unwrap();
        assert_eq!(back.len(), a.records.len());
        for (r, (id, k)) in a.records.iter().zip(&back) {
            let e: Vec<f32> = r.semantic.to_vec();
            assert_eq!(&r.id, id);
            assert_eq!(bank.route(&e).unwrap(), *k);
        }
    }

    #[test]
    fn bench_csv_columns() {
        let a = archive(2, 8);
        let rows = bench(&a, &cfg(0.25)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        write_bench_csv(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "scenario,K,P,sum_Pk2,build_evals,query_evals,image_mF1_known,image_mF1_unknown,diff_ratio"
        );
        assert_eq!(text.lines().count(), 3);
    }
}
