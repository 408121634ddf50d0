//! `attn-hijack` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Failures print one JSON line `{"error": kind, "message":
//! ...}` on stderr.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use attn_hijack::analysis::{
    cka_profile, dev_base, distance_profile, functionality_drop, hijack_sweep, per_layer_counts, population_stats,
    probe_sets, AnalysisConfig, HijackReport,
};
use attn_hijack::detector::{
    candidate_pool, detect_supervised, detect_unsupervised, detector_clean_sets, scan_zoo, train_discriminator,
    Discriminator, DiscriminatorHyper,
};
use attn_hijack::io_util::write_atomic;
use attn_hijack::report::ZooReport;
use attn_hijack::transformer::Input;
use attn_hijack::zoo::{build_zoo, reevaluate, Zoo, ZooEntry};
use attn_hijack::Error;

use config::{Overrides, RunConfig};

/// Output-directory override, below `--out` and above the config file.
const OUT_ENV: &str = "ATTN_HIJACK_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "attn-hijack",
    version,
    about = "Attention-hijacking analysis and Trojan detection"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build or re-evaluate a model zoo.
    #[command(subcommand)]
    Zoo(ZooCmd),
    /// Per-model analyses over a zoo.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Trojan detection.
    #[command(subcommand)]
    Detect(DetectCmd),
    /// Every zoo-level analysis as CSV files plus summary.json.
    Report(ZooArg),
}

#[derive(Subcommand, Debug)]
enum ZooCmd {
    /// Train a zoo into the output directory.
    Build,
    /// Reload every model and recompute its metrics.
    Eval(ZooArg),
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Hijacking heads per model and population statistics.
    Hijack(ZooArg),
    /// Average attention distance under clean, poisoned and spurious inputs.
    Distance(ZooArg),
    /// Layer CKA between clean and poisoned inputs, before and after
    /// deactivating hijacking heads.
    Cka(ZooArg),
    /// Accuracy and ASR change after deactivating hijacking heads.
    Drop(ZooArg),
}

#[derive(Subcommand, Debug)]
enum DetectCmd {
    /// Hijacking-existence rule.
    Unsup(ModelArg),
    /// Discriminator-based detection.
    #[command(subcommand)]
    Sup(SupCmd),
}

#[derive(Subcommand, Debug)]
enum SupCmd {
    /// Train a discriminator on a labelled zoo.
    Train(ZooArg),
    /// Score models with a trained discriminator.
    Run(SupRunArg),
}

#[derive(Args, Debug)]
struct ZooArg {
    /// Zoo directory containing manifest.json.
    #[arg(long)]
    zoo: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArg {
    #[command(flatten)]
    zoo: ZooArg,
    /// Only this entry id.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args, Debug)]
struct SupRunArg {
    #[command(flatten)]
    target: ModelArg,
    #[arg(long)]
    discriminator: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::RateOutOfRange(_) | Error::Format { .. } => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn emit_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", e.to_string().lines().next().unwrap_or("usage error"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            emit_error("validation", &m);
            ExitCode::from(3)
        }
        Err(Failure::Runtime(m)) => {
            emit_error("runtime", &m);
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = file.merge(cli.seed, cli.jobs, &cli.overrides);
    cfg.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let out_for = |default: PathBuf| -> PathBuf {
        cli.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| cfg.out.clone())
            .unwrap_or(default)
    };
    match cli.command {
        Command::Zoo(ZooCmd::Build) => {
            let root = out_for(PathBuf::from("zoo"));
            let zoo = build_zoo(&cfg.zoo_config(), &root, cfg.jobs)?;
            println!("{}", root.join(attn_hijack::zoo::MANIFEST_FILE).display());
            let failed = zoo.manifest.entries.iter().filter(|e| !e.healthy).count();
            eprintln!(
                "{} models, {failed} below the health floors",
                zoo.manifest.entries.len()
            );
        }
        Command::Zoo(ZooCmd::Eval(a)) => {
            let zoo = open(&a.zoo)?;
            let metrics = reevaluate(&zoo)?;
            let rows: Vec<_> = zoo
                .manifest
                .entries
                .iter()
                .zip(&metrics)
                .map(|(e, m)| serde_json::json!({ "id": e.id, "label": e.label, "recorded": e.metrics, "recomputed": m }))
                .collect();
            write_json(&out_for(a.zoo.join("results")).join("zoo_eval.json"), &rows)?;
        }
        Command::Analyze(cmd) => analyze(cmd, &cfg, out_for)?,
        Command::Detect(DetectCmd::Unsup(a)) => {
            let zoo = open(&a.zoo.zoo)?;
            let dcfg = cfg.detector_config(zoo.manifest.task());
            let sets = detector_clean_sets(zoo.manifest.task(), dcfg.per_class, dcfg.seed)?;
            let pool = candidate_pool(zoo.manifest.task(), dcfg.pool_seed);
            let mut out = vec![];
            for e in select(&zoo, a.model.as_deref())? {
                let v = detect_unsupervised(&zoo.load_model(e)?, &sets, &pool, &dcfg)?;
                out.push(serde_json::json!({ "id": e.id, "verdict": v }));
            }
            write_json(&out_for(a.zoo.zoo.join("results")).join("detect_unsup.json"), &out)?;
        }
        Command::Detect(DetectCmd::Sup(SupCmd::Train(a))) => {
            let zoo = open(&a.zoo)?;
            let dcfg = cfg.detector_config(zoo.manifest.task());
            let scans = scan_zoo(&zoo, &dcfg, &[dcfg.hijack])?;
            let refs: Vec<_> = scans.iter().collect();
            let hyper = DiscriminatorHyper {
                seed: dcfg.seed,
                ..DiscriminatorHyper::default()
            };
            let d = train_discriminator(&refs, 0, &hyper)?;
            let path = out_for(a.zoo.join("results")).join("discriminator.json");
            d.save(&path)?;
            println!("{}", path.display());
        }
        Command::Detect(DetectCmd::Sup(SupCmd::Run(a))) => {
            let zoo = open(&a.target.zoo.zoo)?;
            let disc = Discriminator::load(&a.discriminator)?;
            let dcfg = cfg.detector_config(zoo.manifest.task());
            let sets = detector_clean_sets(zoo.manifest.task(), dcfg.per_class, dcfg.seed)?;
            let pool = candidate_pool(zoo.manifest.task(), dcfg.pool_seed);
            let mut out = vec![];
            for e in select(&zoo, a.target.model.as_deref())? {
                let v = detect_supervised(&zoo.load_model(e)?, &sets, &pool, &disc, &dcfg)?;
                out.push(serde_json::json!({ "id": e.id, "verdict": v }));
            }
            write_json(&out_for(a.target.zoo.zoo.join("results")).join("detect_sup.json"), &out)?;
        }
        Command::Report(a) => {
            let zoo = open(&a.zoo)?;
            let report = ZooReport::compute(&zoo, &cfg.analysis_config(), &cfg.detector_config(zoo.manifest.task()))?;
            let dir = out_for(a.zoo.join("results"));
            report.write(&dir)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn open(root: &Path) -> CliResult<Zoo> {
    Zoo::open(root).map_err(|e| match e {
        Error::Io(io) => Failure::Validation(format!("cannot open zoo {}: {io}", root.display())),
        other => other.into(),
    })
}

fn select<'a>(zoo: &'a Zoo, id: Option<&str>) -> CliResult<Vec<&'a ZooEntry>> {
    let all: Vec<&ZooEntry> = zoo.manifest.healthy().collect();
    match id {
        None => Ok(all),
        Some(id) => match zoo.manifest.entries.iter().find(|e| e.id == id) {
            Some(e) => Ok(vec![e]),
            None => Err(Failure::Validation(format!("no entry {id} in the manifest"))),
        },
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

fn inputs(samples: &[attn_hijack::datasets::Sample]) -> Vec<Input> {
    samples.iter().map(|s| s.input.clone()).collect()
}

fn analyze(cmd: AnalyzeCmd, cfg: &config::Resolved, out_for: impl Fn(PathBuf) -> PathBuf) -> CliResult<()> {
    let (zoo_dir, name) = match &cmd {
        AnalyzeCmd::Hijack(a) => (&a.zoo, "hijack"),
        AnalyzeCmd::Distance(a) => (&a.zoo, "distance"),
        AnalyzeCmd::Cka(a) => (&a.zoo, "cka"),
        AnalyzeCmd::Drop(a) => (&a.zoo, "drop"),
    };
    let zoo = open(zoo_dir)?;
    let acfg: AnalysisConfig = cfg.analysis_config();
    acfg.params.validate(acfg.dev_size)?;
    let task = zoo.manifest.task();
    let base = dev_base(task, acfg.dev_size, acfg.seed);
    let mut per_model = vec![];
    let mut reports: Vec<(attn_hijack::zoo::ModelLabel, HijackReport)> = vec![];
    for e in zoo.manifest.healthy() {
        let model = zoo.load_model(e)?;
        let sets = probe_sets(task, e, &base, acfg.dev_size, acfg.seed)?;
        let report = hijack_sweep(&model, &sets.dev(), &[acfg.params])?.remove(0);
        let heads = report.flagged();
        let value = match cmd {
            AnalyzeCmd::Hijack(_) => serde_json::to_value(&report),
            AnalyzeCmd::Distance(_) => serde_json::to_value(distance_profile(
                &model,
                &inputs(&sets.poisoned.clean),
                &inputs(&sets.poisoned.perturbed),
                &inputs(&sets.spurious.perturbed),
            )?),
            AnalyzeCmd::Cka(_) => serde_json::to_value(cka_profile(
                &model,
                &inputs(&sets.poisoned.clean),
                &inputs(&sets.poisoned.perturbed),
                &heads,
            )?),
            AnalyzeCmd::Drop(_) => {
                let eval = zoo.eval_sets(e)?;
                serde_json::to_value(functionality_drop(&model, &zoo.eval_base(), &eval.perturbed, &heads)?)
            }
        }
        .map_err(Error::from)?;
        per_model.push(serde_json::json!({ "id": e.id, "label": e.label, name: value }));
        reports.push((e.label, report));
    }
    let mut doc = serde_json::json!({ "models": per_model });
    if matches!(cmd, AnalyzeCmd::Hijack(_)) {
        let pairs: Vec<_> = reports.iter().map(|(l, r)| (*l, r)).collect();
        let by_label = |label| {
            let rs: Vec<&HijackReport> = reports.iter().filter(|(l, _)| *l == label).map(|(_, r)| r).collect();
            if rs.is_empty() {
                Ok(vec![])
            } else {
                per_layer_counts(&rs)
            }
        };
        doc["population"] = serde_json::to_value(population_stats(&pairs)?).map_err(Error::from)?;
        doc["per_layer_trojan"] =
            serde_json::to_value(by_label(attn_hijack::zoo::ModelLabel::Trojan)?).map_err(Error::from)?;
        doc["per_layer_clean"] =
            serde_json::to_value(by_label(attn_hijack::zoo::ModelLabel::Clean)?).map_err(Error::from)?;
    }
    write_json(&out_for(zoo_dir.join("results")).join(format!("{name}.json")), &doc)
}
