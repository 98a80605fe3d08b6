//! Command-line front end. Every subcommand reads a JSON config (`--config`)
//! and accepts flag overrides; outputs go to `--out` (a directory) or stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentlag::covariance::{exact_lag_covariances_with, ZeroLagClosure};
use latentlag::granger::{granger_fit, granger_predict, latentlag_predict, GrangerEstimate};
use latentlag::harness::{ingest_csv, predictions_csv, roc_from_sweep, run_synthetic, ExperimentConfig, SystemSpec};
use latentlag::identify::{detect_theta_max, identify, rank_profile, DEFAULT_REL_TOL};
use latentlag::learn::{cross_validate, fit, LearnConfig, LearnEstimate};
use latentlag::model::{sign_pattern_of, SignPattern};
use latentlag::{sample_lag_covariances, simulate, LagCovSeq, SimConfig};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "latentlag", version, about = "Latent-lag linear dynamical systems toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a trajectory and write `trajectory.csv`.
    Simulate(Common),
    /// Sample lagged covariances of a CSV trajectory.
    Cov(Common),
    /// Exact lagged covariances of a system.
    ExactCov(Common),
    /// Detect the delay bound from the block-Toeplitz rank profile.
    Detect(Common),
    /// Recover the identifiable parameter combinations.
    Identify(Common),
    /// Fit the sign-sparsity learner; cross-validates when grids are given.
    Learn(Common),
    /// Fit the Granger-Lasso baseline.
    Granger(Common),
    /// ROC curve of a fitted estimate against a known system.
    Roc(Common),
    /// Multi-step predictions from a fitted estimate.
    Predict(Common),
    /// Synthetic benchmark (config is an experiment definition).
    Bench(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    theta_max: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Standardize ingested data columns.
    #[arg(long)]
    normalize: bool,
}

/// Union of the fields used by the subcommands; each reads what it needs.
#[derive(Deserialize, Debug, Default)]
#[serde(default, deny_unknown_fields)]
struct Config {
    system: Option<SystemSpec>,
    t: Option<usize>,
    seed: Option<u64>,
    burn_in: Option<usize>,
    record_latent: bool,
    record_delays: bool,
    /// CSV trajectory.
    data: Option<PathBuf>,
    /// Covariance JSON written by `cov` or `exact-cov`.
    covariances: Option<PathBuf>,
    normalize: bool,
    max_lag: Option<usize>,
    closure: Option<ZeroLagClosure>,
    k_max: Option<usize>,
    rel_tol: Option<f64>,
    learn: Option<LearnConfig>,
    theta_max: Option<usize>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    theta_grid: Vec<usize>,
    lambda_grid: Vec<(f64, f64)>,
    lags: Option<usize>,
    lambda: Option<f64>,
    /// Estimate JSON written by `learn` or `granger`.
    estimate: Option<PathBuf>,
    /// `latentlag` or `granger`.
    method: Option<String>,
    horizon: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] latentlag::Error),
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn required<T>(v: Option<T>, name: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("config field `{name}` is required")))
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(latentlag::Error::InvalidArgument(format!("{}: {e}", path.display()))))
}

struct Ctx {
    common: Common,
    cfg: Config,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.common.seed.or(self.cfg.seed).unwrap_or(0)
    }

    fn normalize(&self) -> bool {
        self.common.normalize || self.cfg.normalize
    }

    fn theta_max(&self) -> Option<usize> {
        self.common.theta_max.or(self.cfg.theta_max)
    }

    /// Writes `name` under `--out`, or prints it when no directory is given.
    fn emit(&self, name: &str, content: &str) -> CliResult<()> {
        match &self.common.out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(latentlag::Error::from)?;
                fs::write(dir.join(name), content).map_err(latentlag::Error::from)?;
            }
            None => print!("{content}"),
        }
        Ok(())
    }

    fn trajectory(&self) -> CliResult<latentlag::Trajectory> {
        let path = required(self.cfg.data.as_ref(), "data")?;
        Ok(ingest_csv(path, self.normalize())?)
    }

    /// Covariances from `covariances`, else exact ones of `system`, else
    /// sample ones of `data`.
    fn covariances(&self, max_lag: usize) -> CliResult<LagCovSeq> {
        if let Some(path) = &self.cfg.covariances {
            let covs = LagCovSeq::from_json(&read(path)?)?;
            return Ok(covs.truncated(max_lag.min(covs.max_lag))?);
        }
        if let Some(spec) = &self.cfg.system {
            let prm = spec.build(self.seed())?;
            let closure = self.cfg.closure.unwrap_or_default();
            return Ok(exact_lag_covariances_with(&prm, max_lag, closure)?);
        }
        if self.cfg.data.is_some() {
            return Ok(sample_lag_covariances(&self.trajectory()?, max_lag)?);
        }
        Err(usage("one of `covariances`, `system` or `data` is required"))
    }
}

fn run_simulate(ctx: &Ctx) -> CliResult<()> {
    let spec = required(ctx.cfg.system.as_ref(), "system")?;
    let prm = spec.build(ctx.seed())?;
    let sim = SimConfig {
        t: required(ctx.cfg.t, "t")?,
        burn_in: ctx.cfg.burn_in,
        seed: ctx.seed(),
        record_latent: ctx.cfg.record_latent,
        record_delays: ctx.cfg.record_delays,
    };
    let traj = simulate(&prm, &sim)?;
    match &ctx.common.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(latentlag::Error::from)?;
            traj.save(&dir.join("trajectory.csv"))?;
            fs::write(dir.join("system.json"), prm.to_json()?).map_err(latentlag::Error::from)?;
        }
        None => traj.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_cov(ctx: &Ctx) -> CliResult<()> {
    let max_lag = required(ctx.cfg.max_lag, "max_lag")?;
    let covs = sample_lag_covariances(&ctx.trajectory()?, max_lag)?;
    ctx.emit("covariances.json", &(covs.to_json()? + "\n"))
}

fn run_exact_cov(ctx: &Ctx) -> CliResult<()> {
    let spec = required(ctx.cfg.system.as_ref(), "system")?;
    let prm = spec.build(ctx.seed())?;
    let max_lag = required(ctx.cfg.max_lag, "max_lag")?;
    let covs = exact_lag_covariances_with(&prm, max_lag, ctx.cfg.closure.unwrap_or_default())?;
    ctx.emit("covariances.json", &(covs.to_json()? + "\n"))
}

fn k_max(ctx: &Ctx) -> CliResult<usize> {
    required(ctx.cfg.k_max.or(ctx.theta_max().map(|t| t + 1)), "k_max")
}

fn run_detect(ctx: &Ctx) -> CliResult<()> {
    let k_max = k_max(ctx)?;
    let covs = ctx.covariances(2 * k_max + 1)?;
    let rel_tol = ctx.cfg.rel_tol.unwrap_or(DEFAULT_REL_TOL);
    let profile = rank_profile(&covs, k_max, rel_tol)?;
    let detected = detect_theta_max(&covs, k_max, rel_tol)?;
    let mut out = format!("detected_k={detected}\n");
    for r in &profile {
        out.push_str(&format!("k={} rank={}/{} ratio={:e}\n", r.k, r.rank, r.full, r.ratio));
    }
    ctx.emit("detect.txt", &out)
}

fn run_identify(ctx: &Ctx) -> CliResult<()> {
    let k_max = k_max(ctx)?;
    let covs = ctx.covariances(2 * k_max + 1)?;
    let combos = identify(&covs, k_max, ctx.cfg.rel_tol.unwrap_or(DEFAULT_REL_TOL))?;
    ctx.emit(
        "identified.json",
        &(serde_json::to_string_pretty(&combos).map_err(latentlag::Error::from)? + "\n"),
    )
}

fn run_learn(ctx: &Ctx) -> CliResult<()> {
    let traj = ctx.trajectory()?;
    let mut base = ctx.cfg.learn.clone().unwrap_or_default();
    if let Some(t) = ctx.theta_max() {
        base.theta_max = t;
    }
    if let Some(l) = ctx.common.lambda1.or(ctx.cfg.lambda1) {
        base.lambda1 = l;
    }
    if let Some(l) = ctx.common.lambda2.or(ctx.cfg.lambda2) {
        base.lambda2 = l;
    }
    if !ctx.cfg.theta_grid.is_empty() || !ctx.cfg.lambda_grid.is_empty() {
        let thetas = if ctx.cfg.theta_grid.is_empty() {
            vec![base.theta_max]
        } else {
            ctx.cfg.theta_grid.clone()
        };
        let lambdas = if ctx.cfg.lambda_grid.is_empty() {
            vec![(base.lambda1, base.lambda2)]
        } else {
            ctx.cfg.lambda_grid.clone()
        };
        let cv = cross_validate(&traj, &thetas, &lambdas, &base)?;
        base.theta_max = cv.best_theta;
        (base.lambda1, base.lambda2) = cv.best_lambdas;
        ctx.emit("cv_table.csv", &cv.table_csv())?;
    }
    let covs = sample_lag_covariances(&traj, 2 * base.theta_max + 2)?;
    let est = fit(&covs, &base)?;
    if !est.converged {
        eprintln!(
            "warning: solver stopped after {} iterations without meeting the tolerance (objective {:e})",
            est.iterations, est.objective
        );
    }
    ctx.emit("learn_estimate.json", &(est.to_json()? + "\n"))?;
    ctx.emit("sign_pattern.csv", &est.sign.to_csv())
}

fn run_granger(ctx: &Ctx) -> CliResult<()> {
    let traj = ctx.trajectory()?;
    let lags = required(ctx.cfg.lags.or(ctx.theta_max().map(|t| t + 2)), "lags")?;
    let lambda = required(ctx.common.lambda1.or(ctx.cfg.lambda), "lambda")?;
    let est = granger_fit(&traj, lags, &vec![lambda; lags])?;
    ctx.emit("granger_estimate.json", &(est.to_json()? + "\n"))?;
    let thr = latentlag::learn::SignThreshold::default().resolve(&est.dependency);
    ctx.emit("sign_pattern.csv", &sign_pattern_of(&est.dependency, thr).to_csv())
}

enum Fitted {
    Learn(LearnEstimate),
    Granger(GrangerEstimate),
}

fn load_estimate(ctx: &Ctx) -> CliResult<Fitted> {
    let text = read(required(ctx.cfg.estimate.as_ref(), "estimate")?)?;
    let method = ctx.cfg.method.as_deref().unwrap_or("latentlag");
    let parse = |e: serde_json::Error| CliError::Runtime(e.into());
    match method {
        "latentlag" => Ok(Fitted::Learn(serde_json::from_str(&text).map_err(parse)?)),
        "granger" => Ok(Fitted::Granger(serde_json::from_str(&text).map_err(parse)?)),
        other => Err(usage(format!(
            "unknown method `{other}` (expected latentlag or granger)"
        ))),
    }
}

fn run_roc(ctx: &Ctx) -> CliResult<()> {
    let spec = required(ctx.cfg.system.as_ref(), "system")?;
    let truth: SignPattern = sign_pattern_of(&spec.build(ctx.seed())?.a, 0.0);
    let scores = match load_estimate(ctx)? {
        Fitted::Learn(e) => e.k1,
        Fitted::Granger(e) => e.dependency,
    };
    let roc = roc_from_sweep(&scores, &truth)?;
    if roc.degenerate {
        eprintln!("warning: the true pattern has no off-diagonal support; tpr is undefined");
    }
    eprintln!("auc={}", roc.auc);
    ctx.emit("roc.csv", &roc.to_csv())
}

fn run_predict(ctx: &Ctx) -> CliResult<()> {
    let traj = ctx.trajectory()?;
    let horizon = required(ctx.cfg.horizon, "horizon")?;
    let pred = match load_estimate(ctx)? {
        Fitted::Learn(e) => latentlag_predict(&e, &traj.x, horizon)?,
        Fitted::Granger(e) => granger_predict(&e, &traj.x, horizon)?,
    };
    ctx.emit("predictions.csv", &predictions_csv(traj.len(), &pred))
}

fn run_bench(ctx: &Ctx) -> CliResult<()> {
    let text = read(&ctx.common.config)?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("experiment config: {e}")))?;
    if let Some(seed) = ctx.common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &ctx.common.out {
        cfg.outputs = Some(dir.clone());
    }
    if let Some(t) = ctx.common.theta_max {
        cfg.theta_grid = vec![t];
    }
    if let (Some(l1), Some(l2)) = (ctx.common.lambda1, ctx.common.lambda2) {
        cfg.lambda_grid = vec![(l1, l2)];
    }
    let summary = run_synthetic(&cfg)?;
    if cfg.outputs.is_none() {
        println!(
            "{}",
            serde_json::to_string_pretty(&summary).map_err(latentlag::Error::from)?
        );
    }
    for (method, auc) in &summary.mean_seed_auc {
        eprintln!("{method}: mean AUC {auc:.4}");
    }
    if summary.failed_seeds > 0 {
        eprintln!("{} seed(s) failed", summary.failed_seeds);
    }
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    let is_bench = matches!(command, Command::Bench(_));
    let (common, run): (Common, fn(&Ctx) -> CliResult<()>) = match command {
        Command::Simulate(c) => (c, run_simulate),
        Command::Cov(c) => (c, run_cov),
        Command::ExactCov(c) => (c, run_exact_cov),
        Command::Detect(c) => (c, run_detect),
        Command::Identify(c) => (c, run_identify),
        Command::Learn(c) => (c, run_learn),
        Command::Granger(c) => (c, run_granger),
        Command::Roc(c) => (c, run_roc),
        Command::Predict(c) => (c, run_predict),
        Command::Bench(c) => (c, run_bench),
    };
    let cfg = if is_bench {
        Config::default()
    } else {
        let text = read(&common.config)?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", common.config.display())))?
    };
    run(&Ctx { common, cfg })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
