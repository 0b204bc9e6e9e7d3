//! `miner`: estimators, training runs, identifiability sweeps and verification.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use miner_core::autodiff::Matrix;
use miner_core::config::{apply_overrides, parse_run_config, parse_sweep};
use miner_core::densities::{KernelKind, KernelSpec, Similarity, Support};
use miner_core::estimators::{
    contrastive_loss, entropy_joe, entropy_plugin_disc, entropy_plugin_kde, er_bound, infonce, reconstruction_cont,
    reconstruction_disc_from, NegativeMode, ProjectionBatch,
};
use miner_core::methods::{normalized_entropy, softmax_posterior};
use miner_core::training::{
    run_identifiability_experiment, train, MetricsLog, RunConfig, RunSummary, TrainState,
};
use miner_core::{verify, Error};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "miner", version, about = "ER bound estimators and multi-view SSL testbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every estimator on a pair of projection batches.
    Estimate(EstimateArgs),
    /// Train one configuration and write its metrics and summary.
    Train(RunArgs),
    /// Train, then score held-out encoder outputs against the true latents.
    IdentExp(RunArgs),
    /// Run every row of a fixture file as an identifiability experiment.
    Sweep(SweepArgs),
    /// Run the oracle and property checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// Base seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    outdir: PathBuf,
    /// Config override `key.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config's `steps`.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; defaults are used when omitted.
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    /// Fixture file with `[defaults]` and `[[run]]` tables.
    fixtures: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Worker count; defaults to the number of logical cores.
    #[arg(long, env = "MINER_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct EstimateArgs {
    /// First view: CSV, one projection per row, no header.
    z1: PathBuf,
    /// Second view, paired row by row with the first.
    z2: PathBuf,
    /// Cosine temperature.
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// KDE kernel: gaussian, laplace, gen_norm or vmf.
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    #[arg(long, default_value_t = 1.0)]
    bandwidth: f64,
    /// Shape of the gen_norm kernel.
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Concentration of the vmf kernel.
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    /// Support of the projections: sphere, box or unbounded.
    #[arg(long, default_value = "unbounded")]
    geometry: String,
}

#[derive(Args)]
struct VerifyArgs {
    /// Print the registered checks without running them.
    #[arg(long)]
    list: bool,
    /// Include the slow training checks.
    #[arg(long)]
    slow: bool,
    /// Only run checks whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
}

enum Failure {
    Config(String),
    Runtime { message: String, crash: Option<PathBuf> },
}

impl Failure {
    fn runtime(message: impl Into<String>) -> Self {
        Failure::Runtime { message: message.into(), crash: None }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(a) => estimate(&a),
        Command::Train(a) => run_one(&a, false),
        Command::IdentExp(a) => run_one(&a, true),
        Command::Sweep(a) => sweep(&a),
        Command::Verify(a) => run_verify(&a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime { message, crash }) => {
            eprintln!("error: {message}");
            if let Some(p) = crash {
                eprintln!("crash record: {}", p.display());
            }
            ExitCode::from(1)
        }
    }
}

// ---------------------------------------------------------------- estimate

fn read_batch(path: &Path) -> Result<Matrix, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::Config(format!("{} line {}: {e}", path.display(), n + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Failure::Config(format!("{}: no rows", path.display())));
    }
    Matrix::from_rows(&rows).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn parse_geometry(s: &str) -> Result<Support, Failure> {
    match s {
        "sphere" => Ok(Support::Sphere),
        "box" => Ok(Support::Box),
        "unbounded" => Ok(Support::Unbounded),
        _ => Err(Failure::Config(format!("unknown geometry {s:?} (sphere, box, unbounded)"))),
    }
}

fn parse_kernel(a: &EstimateArgs, dim: usize) -> Result<KernelSpec, Failure> {
    let kind = match a.kernel.as_str() {
        "gaussian" => KernelKind::Gaussian,
        "laplace" => KernelKind::Laplace,
        "gen_norm" => KernelKind::GenNorm { beta: a.beta },
        "vmf" => KernelKind::Vmf { kappa: a.kappa },
        k => return Err(Failure::Config(format!("unknown kernel {k:?} (gaussian, laplace, gen_norm, vmf)"))),
    };
    KernelSpec::new(kind, a.bandwidth, dim).map_err(|e| Failure::Config(e.to_string()))
}

fn estimate(a: &EstimateArgs) -> Result<ExitCode, Failure> {
    let geometry = parse_geometry(&a.geometry)?;
    let (m1, m2) = (read_batch(&a.z1)?, read_batch(&a.z2)?);
    if m1.shape() != m2.shape() {
        return Err(Failure::Config(format!("batch shapes differ: {:?} vs {:?}", m1.shape(), m2.shape())));
    }
    let kernel = parse_kernel(a, m1.cols())?;
    let cosine = Similarity::cosine(a.tau).map_err(|e| Failure::Config(e.to_string()))?;
    let z1 = ProjectionBatch::new(m1.clone(), geometry).map_err(|e| Failure::Config(e.to_string()))?;
    let z2 = ProjectionBatch::new(m2.clone(), geometry).map_err(|e| Failure::Config(e.to_string()))?;
    let log_kernel = Similarity::LogKernel(kernel);

    let mut values: BTreeMap<&str, Value> = BTreeMap::new();
    let mut errors: BTreeMap<&str, String> = BTreeMap::new();
    let mut put = |name: &'static str, r: miner_core::Result<f64>| match r {
        Ok(v) => {
            values.insert(name, json!(v + 0.0));
        }
        Err(e) => {
            values.insert(name, Value::Null);
            errors.insert(name, e.to_string());
        }
    };

    let h_joe = entropy_joe(&z2, &kernel);
    let rec_kernel = reconstruction_cont(&z1, &z2, &log_kernel);
    put("entropy_joe", h_joe.clone());
    put("entropy_plugin_kde", entropy_plugin_kde(&z2, &kernel, false));
    put("entropy_plugin_kde_normalized", entropy_plugin_kde(&z2, &kernel, true));
    put("reconstruction_cont", reconstruction_cont(&z1, &z2, &cosine));
    put("reconstruction_kernel", rec_kernel.clone());
    put("er_joe", h_joe.and_then(|h| rec_kernel.and_then(|r| er_bound(h, r, 1.0).map(|v| v.total))));
    put("infonce", infonce(&z1, &z2, &cosine));
    for (name, mode) in [
        ("contrastive_cmc", NegativeMode::Cmc),
        ("contrastive_simclr", NegativeMode::Simclr),
        ("contrastive_self_inclusive", NegativeMode::SelfInclusive),
        ("contrastive_self_excluding", NegativeMode::SelfExcluding),
    ] {
        put(name, contrastive_loss(&z1, &z2, &cosine, &mode));
    }
    // Discrete surrogates: W_i = softmax(z_i / tau) over the projection coordinates.
    let p1 = softmax_posterior(&m1.scale(1.0 / a.tau));
    let p2 = softmax_posterior(&m2.scale(1.0 / a.tau));
    match (p1, p2) {
        (Ok(p1), Ok(p2)) => {
            put("entropy_plugin_disc", entropy_plugin_disc(&p2, 1));
            put("normalized_entropy", normalized_entropy(&p2));
            put("reconstruction_disc", reconstruction_disc_from(&p1, &p2.argmax()));
        }
        (Err(e), _) | (_, Err(e)) => put("entropy_plugin_disc", Err(e)),
    }

    let out = json!({
        "k": m1.rows(),
        "dim": m1.cols(),
        "tau": a.tau,
        "kernel": kernel,
        "estimates": values,
        "errors": errors,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json values serialize"));
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------- train / ident-exp

fn load_config(path: Option<&Path>, common: &Common) -> Result<RunConfig, Failure> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            parse_run_config(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    finish_config(base, common)
}

fn finish_config(cfg: RunConfig, common: &Common) -> Result<RunConfig, Failure> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(n) = common.steps {
        overrides.push(format!("steps={n}"));
    }
    apply_overrides(&cfg, &overrides).map_err(Failure::from)
}

#[derive(Serialize)]
struct CrashRecord<'a> {
    run_id: &'a str,
    error: String,
    step: Option<usize>,
    config: &'a RunConfig,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Trains `cfg` into `<outdir>/<run-id>/`, returning the summary.
fn execute(cfg: &RunConfig, outdir: &Path, score: bool) -> Result<RunSummary, Failure> {
    let dir = outdir.join(&cfg.run_id);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let started = Instant::now();
    let init_hash = TrainState::init(cfg)?.hash();
    let mut log = MetricsLog::default();
    let outcome = if score {
        run_identifiability_experiment(cfg, cfg.eval_pairs).map(|r| {
            log = r.log;
            (r.state, Some(r.scores))
        })
    } else {
        train(cfg, &mut log, &mut |_| {}).map(|s| (s, None))
    };
    let csv_path = dir.join("metrics.csv");
    fs::write(&csv_path, log.to_csv()).map_err(|e| io_err(&csv_path, e))?;
    match outcome {
        Ok((state, scores)) => {
            let summary = RunSummary::new(cfg, init_hash, &state, &log, scores, started.elapsed().as_secs_f64() * 1e3);
            write_json(&dir.join("summary.json"), &summary)?;
            Ok(summary)
        }
        Err(Error::Config(msg)) => Err(Failure::Config(msg)),
        Err(e) => {
            let step = match &e {
                Error::Diverged { step, .. } => Some(*step),
                _ => None,
            };
            let path = dir.join("crash.json");
            let record = CrashRecord { run_id: &cfg.run_id, error: e.to_string(), step, config: cfg };
            write_json(&path, &record)?;
            Err(Failure::Runtime { message: e.to_string(), crash: Some(path) })
        }
    }
}

fn run_one(a: &RunArgs, score: bool) -> Result<ExitCode, Failure> {
    let cfg = load_config(a.config.as_deref(), &a.common)?;
    let summary = execute(&cfg, &a.common.outdir, score)?;
    let mut line = format!("{}: {} steps, final hash {}", summary.run_id, summary.steps, summary.final_hash);
    if let Some(s) = &summary.scores {
        line += &format!(", R2 {:.2}, MCC {:.2}", s.r2, s.mcc);
    }
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------- sweep

#[derive(Serialize)]
struct SweepEntry {
    run_id: String,
    ok: bool,
    r2: Option<f64>,
    mcc: Option<f64>,
    final_hash: Option<String>,
    error: Option<String>,
}

fn worker_count(flag: Option<usize>) -> usize {
    flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

fn sweep(a: &SweepArgs) -> Result<ExitCode, Failure> {
    let text =
        fs::read_to_string(&a.fixtures).map_err(|e| Failure::Config(format!("{}: {e}", a.fixtures.display())))?;
    let runs = parse_sweep(&text).map_err(|e| Failure::Config(format!("{}: {e}", a.fixtures.display())))?;
    let runs = runs.into_iter().map(|c| finish_config(c, &a.common)).collect::<Result<Vec<_>, _>>()?;
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = runs.iter().find(|c| !ids.insert(c.run_id.as_str())) {
        return Err(Failure::Config(format!("duplicate run_id {:?}", dup.run_id)));
    }
    fs::create_dir_all(&a.common.outdir).map_err(|e| io_err(&a.common.outdir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(a.threads))
        .build()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    // `collect` keeps fixture order whatever the completion order.
    let results: Vec<Result<RunSummary, Failure>> =
        pool.install(|| runs.par_iter().map(|cfg| execute(cfg, &a.common.outdir, true)).collect());

    let mut entries = Vec::new();
    for (cfg, r) in runs.iter().zip(results) {
        let entry = match r {
            Ok(s) => SweepEntry {
                run_id: cfg.run_id.clone(),
                ok: true,
                r2: s.scores.as_ref().map(|x| x.r2),
                mcc: s.scores.as_ref().map(|x| x.mcc),
                final_hash: Some(s.final_hash),
                error: None,
            },
            Err(Failure::Config(m)) | Err(Failure::Runtime { message: m, .. }) => SweepEntry {
                run_id: cfg.run_id.clone(),
                ok: false,
                r2: None,
                mcc: None,
                final_hash: None,
                error: Some(m),
            },
        };
        println!(
            "{:<36} {}",
            entry.run_id,
            match (&entry.error, entry.r2, entry.mcc) {
                (Some(e), _, _) => format!("FAILED {e}"),
                (None, Some(r2), Some(mcc)) => format!("R2 {r2:6.2}  MCC {mcc:6.2}"),
                _ => "ok".into(),
            }
        );
        entries.push(entry);
    }
    let failed = entries.iter().filter(|e| !e.ok).count();
    write_json(
        &a.common.outdir.join("sweep.json"),
        &json!({ "fixtures": a.fixtures.display().to_string(), "seed": a.common.seed, "runs": entries }),
    )?;
    if failed > 0 {
        return Err(Failure::runtime(format!("{failed} of {} runs failed", entries.len())));
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------- verify

fn run_verify(a: &VerifyArgs) -> Result<ExitCode, Failure> {
    let checks: Vec<_> = verify::registry()
        .into_iter()
        .filter(|c| a.filter.as_deref().is_none_or(|f| c.name.contains(f)))
        .collect();
    if a.list {
        for c in &checks {
            println!("{:<40} {:<11} {}{}", c.name, c.module, c.description, if c.slow { " (slow)" } else { "" });
        }
        return Ok(ExitCode::SUCCESS);
    }
    let mut failed = 0;
    let mut ran = 0;
    for c in checks.iter().filter(|c| a.slow || !c.slow) {
        let o = c.execute();
        ran += 1;
        if !o.passed {
            failed += 1;
        }
        println!("{:<4} {:<40} {:>7.2}s  {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.seconds, o.detail);
    }
    println!("{} passed, {failed} failed", ran - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
