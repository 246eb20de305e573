use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use hiercore::clustering::{cluster_semantic, FinchConfig};
use hiercore::coreset::CoresetConfig;
use hiercore::feature_store::{read_archive, synth_generate, write_archive, SynthSpec};
use hiercore::harness::{self, HarnessConfig, Pipeline, Scenario};
use hiercore::memory_bank::{self, BankConfig, BankMode};
use hiercore::metrics::{evaluate_with_cap, write_report_csv, Grouping};
use hiercore::scoring::{score_batch, write_score_maps, write_scores_jsonl, ScoreOptions};
use hiercore::{Error, ErrorKind};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Default output directory when `-o` is omitted.
const OUT_ENV: &str = "HIERCORE_OUT";

#[derive(Parser, Debug)]
#[command(name = "hiercore", version, about = "Hierarchical memory-bank anomaly detection")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file with defaults for any flag; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature archive.
    Synth(SynthArgs),
    /// Cluster the training embeddings and write cluster_model.json.
    Cluster(ClusterArgs),
    /// Build a memory bank.
    Build(BuildArgs),
    /// Score the test split and write scores.jsonl.
    Score(ScoreArgs),
    /// Evaluate a scenario and write report.json and report.csv.
    Eval(EvalArgs),
    /// Compare hierarchical and single-bank pipelines and write bench.csv.
    Bench(BenchArgs),
    /// Write semantic embeddings with cluster assignments to CSV.
    Export(ExportArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training images per class.
    #[arg(long)]
    train: Option<usize>,
    /// Test images per class.
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    anomaly_offset: Option<f64>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ClusterArgs {
    #[arg(short, long)]
    archive: Option<PathBuf>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct BankFlags {
    /// Fraction of patches kept per bank, in (0, 1].
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct BuildArgs {
    #[arg(short, long)]
    archive: Option<PathBuf>,
    /// pseudo, labeled or monolithic.
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    bank: BankFlags,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ScoreArgs {
    #[arg(short, long)]
    archive: Option<PathBuf>,
    #[arg(short, long)]
    bank: Option<PathBuf>,
    /// Gaussian smoothing (sigma 4) of the score maps.
    #[arg(long)]
    smooth: bool,
    /// Also write every score map as an HCFS blob.
    #[arg(long)]
    maps: bool,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct EvalArgs {
    #[arg(short, long)]
    archive: Option<PathBuf>,
    /// Prebuilt bank; built on the fly from the scenario when omitted.
    #[arg(short, long)]
    bank: Option<PathBuf>,
    /// kk, uk, ku or uu (training then evaluation).
    #[arg(long)]
    scenario: Option<String>,
    /// Overrides the scenario's grouping: per_class, global or per_cluster.
    #[arg(long)]
    grouping: Option<String>,
    #[arg(long)]
    smooth: bool,
    #[command(flatten)]
    bank_flags: BankFlags,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct BenchArgs {
    #[arg(short, long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    smooth: bool,
    #[command(flatten)]
    bank: BankFlags,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ExportArgs {
    #[arg(short, long)]
    archive: Option<PathBuf>,
    #[arg(short, long)]
    bank: Option<PathBuf>,
    /// Output CSV file (default: <out dir>/embeddings.csv).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Values a config file may provide.
#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    archive: Option<PathBuf>,
    bank: Option<PathBuf>,
    out: Option<PathBuf>,
    ratio: Option<f64>,
    seed: Option<u64>,
    scenario: Option<String>,
    grouping: Option<String>,
    mode: Option<String>,
    smoothing: Option<bool>,
    threads: Option<usize>,
    classes: Option<usize>,
    train: Option<usize>,
    test: Option<usize>,
    anomaly_offset: Option<f64>,
}

/// Fully resolved settings, echoed into report provenance.
#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    command: &'static str,
    archive: Option<PathBuf>,
    bank: Option<PathBuf>,
    out: PathBuf,
    ratio: f64,
    seed: u64,
    scenario: Option<String>,
    grouping: Option<Grouping>,
    smoothing: bool,
    threads: Option<usize>,
}

struct Ctx {
    file: FileConfig,
    threads: Option<usize>,
}

impl Ctx {
    fn out_dir(&self, flag: Option<PathBuf>) -> Result<PathBuf, Error> {
        flag.or_else(|| self.file.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("no output directory: pass -o or set {OUT_ENV}")))
    }

    fn input(&self, flag: Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf, Error> {
        flag.or_else(|| file.clone())
            .ok_or_else(|| Error::Config(format!("missing --{what}")))
    }

    fn ratio(&self, f: &BankFlags) -> f64 {
        f.ratio.or(self.file.ratio).unwrap_or(CoresetConfig::default().ratio)
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.file.seed).unwrap_or(0)
    }

    fn smoothing(&self, flag: bool) -> bool {
        flag || self.file.smoothing.unwrap_or(false)
    }

    fn bank_config(&self, f: &BankFlags) -> Result<BankConfig, Error> {
        Ok(BankConfig {
            coreset: CoresetConfig::new(self.ratio(f), self.seed(f.seed))?,
            finch: FinchConfig::default(),
        })
    }
}

fn score_options(smooth: bool) -> ScoreOptions {
    if smooth {
        ScoreOptions::smoothed()
    } else {
        ScoreOptions::default()
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn parse_mode(s: &str) -> Result<BankMode, Error> {
    match s {
        "pseudo" => Ok(BankMode::Pseudo),
        "labeled" | "labelled" => Ok(BankMode::Labeled),
        "monolithic" => Ok(BankMode::Monolithic),
        other => Err(Error::Config(format!("unknown bank mode {other:?}"))),
    }
}

/// Report file: the timestamp lives only in `generated_unix_secs`.
fn write_report(path: &Path, run: &RunConfig, flags: &impl Serialize, body: serde_json::Value) -> Result<(), Error> {
    let generated = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let doc = json!({
        "provenance": {
            "tool": "hiercore",
            "version": env!("CARGO_PKG_VERSION"),
            "run": run,
            "flags": flags,
            "pixel_pooling": "pixels pooled across the images of each group",
            "fpr_cap": hiercore::metrics::DEFAULT_FPR_CAP,
        },
        "generated_unix_secs": generated,
        "report": body,
    });
    harness::write_json(&doc, path)
}

fn run(cli: Cli) -> Result<(), Error> {
    let file: FileConfig = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: p.clone(),
                source: e,
            })?
        }
        None => FileConfig::default(),
    };
    let threads = cli.threads.or(file.threads);
    let ctx = Ctx { file, threads };
    match ctx.threads {
        Some(0) => return Err(Error::Config("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| dispatch(&ctx, cli.command)),
        None => dispatch(&ctx, cli.command),
    }
}

fn dispatch(ctx: &Ctx, command: Command) -> Result<(), Error> {
    let f = &ctx.file;
    match command {
        Command::Synth(a) => {
            let out = ctx.out_dir(a.out.clone())?;
            let classes = a.classes.or(f.classes).unwrap_or(2);
            if classes == 0 {
                return Err(Error::Config("--classes must be positive".into()));
            }
            let spec = SynthSpec::balanced(classes);
            let (tr, te) = (spec.classes[0].train, spec.classes[0].test);
            let mut spec = spec.with_counts(a.train.or(f.train).unwrap_or(tr), a.test.or(f.test).unwrap_or(te));
            if let Some(off) = a.anomaly_offset.or(f.anomaly_offset) {
                spec.anomaly_offset = off;
            }
            let archive = synth_generate(&spec, ctx.seed(a.seed))?;
            write_archive(&archive, &out)?;
            log::info!("wrote {} records to {}", archive.records.len(), out.display());
        }
        Command::Cluster(a) => {
            let archive = read_archive(ctx.input(a.archive, &f.archive, "archive")?)?;
            let out = ctx.out_dir(a.out)?;
            create_dir(&out)?;
            let sem = archive.semantic_matrix(archive.train());
            let model = cluster_semantic(sem.view(), FinchConfig::default())?;
            model.write_json(out.join("cluster_model.json"))?;
            log::info!("K = {} (level {})", model.k, model.chosen_level);
        }
        Command::Build(a) => {
            let archive = read_archive(ctx.input(a.archive, &f.archive, "archive")?)?;
            let out = ctx.out_dir(a.out)?;
            let mode = parse_mode(a.mode.as_deref().or(f.mode.as_deref()).unwrap_or("pseudo"))?;
            let bank = memory_bank::build::<f32>(&archive, &ctx.bank_config(&a.bank)?, mode)?;
            memory_bank::save(&bank, &out)?;
            log::info!("K = {}, bank sizes {:?}", bank.k(), bank.bank_sizes());
        }
        Command::Score(a) => {
            let archive = read_archive(ctx.input(a.archive, &f.archive, "archive")?)?;
            let bank = memory_bank::load(ctx.input(a.bank, &f.bank, "bank")?)?;
            let out = ctx.out_dir(a.out)?;
            create_dir(&out)?;
            let (results, counters) = score_batch(&archive, &bank, &score_options(ctx.smoothing(a.smooth)))?;
            write_scores_jsonl(&results, out.join("scores.jsonl"))?;
            if a.maps {
                write_score_maps(&results, out.join("maps"))?;
            }
            log::info!("scored {} records, {} distance evaluations", counters.records, counters.query_distance_evals);
        }
        Command::Eval(a) => {
            let archive_path = ctx.input(a.archive.clone(), &f.archive, "archive")?;
            let archive = read_archive(&archive_path)?;
            let out = ctx.out_dir(a.out.clone())?;
            let scenario: Scenario = a
                .scenario
                .clone()
                .or(f.scenario.clone())
                .unwrap_or_else(|| "uu".into())
                .parse()?;
            let smoothing = ctx.smoothing(a.smooth);
            let bank_cfg = ctx.bank_config(&a.bank_flags)?;
            let bank_path = a.bank.clone().or(f.bank.clone());
            let mut cfg = HarnessConfig {
                bank: bank_cfg,
                score: score_options(smoothing),
                ..Default::default()
            };
            let bank = match &bank_path {
                Some(p) => {
                    let b = memory_bank::load(p)?;
                    if b.mode == BankMode::Monolithic {
                        cfg.pipeline = Pipeline::Monolithic;
                    }
                    b
                }
                None => harness::build_bank(&archive, scenario, &cfg)?,
            };
            let grouping_flag = a.grouping.clone().or(f.grouping.clone());
            let mut report = harness::run_with_bank(&archive, &bank, scenario, &cfg)?;
            if let Some(g) = &grouping_flag {
                let g: Grouping = g.parse()?;
                let (results, _) = score_batch(&archive, &bank, &cfg.score)?;
                report.metrics = evaluate_with_cap(&results, &archive, g, cfg.fpr_cap)?;
                report.grouping = g;
            }
            create_dir(&out)?;
            let run = RunConfig {
                command: "eval",
                archive: Some(archive_path),
                bank: bank_path,
                out: out.clone(),
                ratio: bank.config.coreset.ratio,
                seed: bank.config.coreset.seed,
                scenario: Some(scenario.code().into()),
                grouping: Some(report.grouping),
                smoothing,
                threads: ctx.threads,
            };
            let body = serde_json::to_value(&report).expect("serializable");
            let body = json!({
                "mAD": {"image": report.metrics.image.mad, "pixel": report.metrics.pixel.mad},
                "eval": body,
            });
            write_report(&out.join("report.json"), &run, &a, body)?;
            write_report_csv(&report.metrics, out.join("report.csv"))?;
            log::info!(
                "scenario {scenario}: image mAD {:?}, pixel mAD {:?}",
                report.metrics.image.mad,
                report.metrics.pixel.mad
            );
        }
        Command::Bench(a) => {
            let archive_path = ctx.input(a.archive.clone(), &f.archive, "archive")?;
            let archive = read_archive(&archive_path)?;
            let out = ctx.out_dir(a.out.clone())?;
            let smoothing = ctx.smoothing(a.smooth);
            let cfg = HarnessConfig {
                bank: ctx.bank_config(&a.bank)?,
                score: score_options(smoothing),
                ..Default::default()
            };
            let rows = harness::bench(&archive, &cfg)?;
            create_dir(&out)?;
            harness::write_bench_csv(&rows, out.join("bench.csv"))?;
            let run = RunConfig {
                command: "bench",
                archive: Some(archive_path),
                bank: None,
                out: out.clone(),
                ratio: cfg.bank.coreset.ratio,
                seed: cfg.bank.coreset.seed,
                scenario: None,
                grouping: None,
                smoothing,
                threads: ctx.threads,
            };
            write_report(&out.join("bench.json"), &run, &a, serde_json::to_value(&rows).expect("serializable"))?;
        }
        Command::Export(a) => {
            let archive = read_archive(ctx.input(a.archive, &f.archive, "archive")?)?;
            let bank = memory_bank::load(ctx.input(a.bank, &f.bank, "bank")?)?;
            let path = match a.out {
                Some(p) => p,
                None => {
                    let dir = ctx.out_dir(None)?;
                    create_dir(&dir)?;
                    dir.join("embeddings.csv")
                }
            };
            harness::export_embeddings(&archive, &bank, &path)?;
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Validation => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(e.kind());
            let kind = match e.kind() {
                ErrorKind::Usage => "usage",
                ErrorKind::Validation => "validation",
                ErrorKind::Io => "io",
            };
            eprintln!("{}", json!({"error": {"kind": kind, "code": code, "message": e.to_string()}}));
            ExitCode::from(code)
        }
    }
}
