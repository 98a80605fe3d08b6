//! Experiment orchestration: CSV ingestion, ROC curves from threshold sweeps
//! and the synthetic sign-recovery benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::sample_lag_covariances;
use crate::error::{Error, Result};
use crate::granger::{granger_fit, granger_predict, latentlag_predict, normalized_mse, GrangerEstimate};
use crate::learn::{cross_validate, fit, LearnConfig, LearnEstimate, SignThreshold};
use crate::model::{
    random_sparse_system_with, sign_pattern_of, support_metrics, RandomSystemOptions, SignPattern, Structure,
    SystemParams,
};
use crate::simulate::{simulate, SimConfig, Trajectory};

/// Reads a `t,x1,...,xp` CSV. With `normalize`, every column is shifted and
/// scaled to sample mean 0 and variance 1.
pub fn ingest_csv(path: &Path, normalize: bool) -> Result<Trajectory> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(e, 1))?;
    let header = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    if header.is_empty() || header.get(0).map(str::trim) != Some("t") {
        return Err(Error::Csv {
            line: 1,
            message: "header must start with column t".into(),
        });
    }
    let p = header.len() - 1;
    if p == 0 {
        return Err(Error::Csv {
            line: 1,
            message: "no data columns".into(),
        });
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| csv_error(e, line))?;
        if rec.len() != p + 1 {
            return Err(Error::Csv {
                line,
                message: format!("expected {} fields, found {}", p + 1, rec.len()),
            });
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Csv {
                line,
                message: format!("cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line,
                    message: format!("non-finite value {field:?}"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Csv {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let x = DMatrix::from_row_slice(rows, p, &values);
    let traj = Trajectory::from_observations(x);
    Ok(if normalize { standardize(&traj) } else { traj })
}

fn csv_error(e: csv::Error, line: usize) -> Error {
    let line = e.position().map_or(line, |pos| pos.line() as usize);
    Error::Csv {
        line,
        message: e.to_string(),
    }
}

/// Per-column standardization to mean 0 and (population) variance 1.
/// Constant columns are only centred.
pub fn standardize(traj: &Trajectory) -> Trajectory {
    let n = traj.len() as f64;
    let mut x = traj.x.clone();
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
    Trajectory::from_observations(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs sorted by fpr, from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    /// Set when the truth has no off-diagonal support, so tpr is undefined.
    pub degenerate: bool,
}

impl RocCurve {
    fn from_points(mut points: Vec<(f64, f64)>, degenerate: bool) -> Self {
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let auc = trapezoid(&points);
        RocCurve {
            points,
            auc,
            degenerate,
        }
    }

    /// Largest tpr reached at false-positive rate at most `fpr`, interpolating
    /// linearly between sweep points.
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        let mut best = 0.0f64;
        for w in self.points.windows(2) {
            let ((f0, t0), (f1, t1)) = (w[0], w[1]);
            if f0 <= fpr {
                best = best.max(t0);
            }
            if f1 <= fpr {
                best = best.max(t1);
            } else if f0 <= fpr && f1 > f0 {
                best = best.max(t0 + (t1 - t0) * (fpr - f0) / (f1 - f0));
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            s.push_str(&format!("{f},{t}\n"));
        }
        s
    }
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum()
}

/// ROC traced by thresholding `|scores|` at every distinct value.
///
/// The estimate at a threshold keeps the sign of each retained score, and a
/// true positive needs the correct sign, as in [`support_metrics`]. Diagonal
/// entries are ignored. The endpoints `(0,0)` and `(1,1)` are always present.
pub fn roc_from_sweep(scores: &DMatrix<f64>, truth: &SignPattern) -> Result<RocCurve> {
    if scores.shape() != (truth.rows, truth.cols) {
        return Err(Error::DimensionMismatch(format!(
            "scores are {:?}, truth is {}x{}",
            scores.shape(),
            truth.rows,
            truth.cols
        )));
    }
    let mut entries = Vec::new();
    let (mut positives, mut negatives) = (0usize, 0usize);
    for i in 0..truth.rows {
        for j in 0..truth.cols {
            if i == j {
                continue;
            }
            let t = truth.get(i, j);
            if t != 0 {
                positives += 1;
            } else {
                negatives += 1;
            }
            let s = scores[(i, j)];
            if s != 0.0 {
                entries.push((s.abs(), s.signum() as i8, t));
            }
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < entries.len() {
        let level = entries[k].0;
        while k < entries.len() && entries[k].0 == level {
            let (_, s, t) = entries[k];
            if t == 0 {
                fp += 1;
            } else if s == t {
                tp += 1;
            }
            k += 1;
        }
        points.push((rate(fp, negatives), rate(tp, positives)));
    }
    points.push((1.0, 1.0));
    Ok(RocCurve::from_points(points, positives == 0))
}

/// Vertical average of ROC curves on an evenly spaced fpr grid.
pub fn mean_roc(curves: &[RocCurve], grid_points: usize) -> RocCurve {
    let n = grid_points.max(2);
    let points = (0..n)
        .map(|k| {
            let f = k as f64 / (n - 1) as f64;
            let t = if curves.is_empty() {
                0.0
            } else {
                curves.iter().map(|c| c.tpr_at(f)).sum::<f64>() / curves.len() as f64
            };
            (f, t)
        })
        .collect();
    RocCurve::from_points(points, curves.iter().any(|c| c.degenerate))
}

/// Where the system of an experiment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemSpec {
    /// The same parameters for every seed.
    Inline(SystemParams),
    /// A fresh random system per seed.
    Random {
        p: usize,
        nonzeros_per_row: usize,
        theta_max: usize,
        structure: Structure,
        #[serde(default)]
        options: RandomSystemOptions,
    },
}

impl SystemSpec {
    pub fn theta_max(&self) -> usize {
        match self {
            SystemSpec::Inline(prm) => prm.theta_max,
            SystemSpec::Random { theta_max, .. } => *theta_max,
        }
    }

    pub fn build(&self, seed: u64) -> Result<SystemParams> {
        match self {
            SystemSpec::Inline(prm) => Ok(prm.clone()),
            SystemSpec::Random {
                p,
                nonzeros_per_row,
                theta_max,
                structure,
                options,
            } => random_sparse_system_with(*p, *nonzeros_per_row, *theta_max, *structure, seed, options),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub t: usize,
    pub seeds: Vec<u64>,
    /// Candidate delay depths for the learner; empty uses the true `θ_max`,
    /// several trigger cross-validation.
    #[serde(default)]
    pub theta_grid: Vec<usize>,
    /// Candidate `(λ1, λ2)`; empty uses `λ1 = ‖K1‖₁`, `λ2 = max(‖K2‖₁, 1e-3)`
    /// of the true system, several trigger cross-validation.
    #[serde(default)]
    pub lambda_grid: Vec<(f64, f64)>,
    /// Lag order of the Granger baseline; `None` uses `θ_max + 2`.
    #[serde(default)]
    pub granger_lags: Option<usize>,
    /// Shared Granger penalty candidates, chosen by one-step validation error
    /// on the last fifth of the trajectory.
    #[serde(default = "default_granger_lambdas")]
    pub granger_lambdas: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub predict_horizon: usize,
    /// Solver settings; `theta_max`, `lambda1` and `lambda2` are overridden
    /// per seed.
    #[serde(default = "default_learn_config")]
    pub learn: LearnConfig,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
}

fn default_granger_lambdas() -> Vec<f64> {
    vec![1e-4, 1e-3, 3e-3, 1e-2, 3e-2]
}

fn default_horizon() -> usize {
    5
}

/// Learner settings with `B1 ≥ I`.
///
/// The objective vanishes along `(B1, K1 − αI, K2, q + αe_0)/(1 + α)` on exact
/// covariances, so on sampled data it keeps decreasing towards `B1 → 0`,
/// `K1 → −I`, where the off-diagonal signal is lost in noise. The lower bound
/// on `B1` is what fixes the point on that ray; a unit floor matches systems
/// whose `B` has diagonal entries at most 1.
pub fn default_learn_config() -> LearnConfig {
    LearnConfig {
        b1_min: 1.0,
        ..LearnConfig::default()
    }
}

impl ExperimentConfig {
    pub fn new(system: SystemSpec, t: usize, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            system,
            t,
            seeds,
            theta_grid: Vec::new(),
            lambda_grid: Vec::new(),
            granger_lags: None,
            granger_lambdas: default_granger_lambdas(),
            predict_horizon: default_horizon(),
            learn: default_learn_config(),
            outputs: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        let theta = self
            .theta_grid
            .iter()
            .copied()
            .chain([self.system.theta_max()])
            .max()
            .unwrap_or(0);
        if self.t < 10 * (theta + 1) {
            return Err(Error::InvalidArgument(format!(
                "T = {} is below 10·(θ_max+1) = {}",
                self.t,
                10 * (theta + 1)
            )));
        }
        if self.granger_lambdas.is_empty() {
            return Err(Error::InvalidArgument("granger_lambdas must be non-empty".into()));
        }
        if self.predict_horizon == 0 {
            return Err(Error::InvalidArgument("predict_horizon must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

/// Metrics of one estimator on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub auc: f64,
    pub tpr_at_fpr_0_1: f64,
    /// F1 of the off-diagonal sign pattern at the default threshold
    /// (10% of the largest off-diagonal magnitude).
    pub f1: f64,
    /// Normalized MSE of `predict_horizon`-step predictions on held-out data.
    pub nmse: Option<f64>,
    pub roc: RocCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// `None` on success, the error message otherwise.
    pub error: Option<String>,
    pub theta_used: Option<usize>,
    pub lambdas: Option<(f64, f64)>,
    pub learn_converged: Option<bool>,
    pub granger_lambda: Option<f64>,
    pub methods: BTreeMap<String, MethodResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub per_seed: Vec<SeedResult>,
    pub failed_seeds: usize,
    /// Vertically averaged ROC per method.
    pub mean_roc: BTreeMap<String, Vec<(f64, f64)>>,
    /// AUC of the vertically averaged curve.
    pub auc: BTreeMap<String, f64>,
    /// Mean of the per-seed AUCs.
    pub mean_seed_auc: BTreeMap<String, f64>,
    pub mean_tpr_at_fpr_0_1: BTreeMap<String, f64>,
}

pub const METHOD_LEARN: &str = "latentlag";
pub const METHOD_GRANGER: &str = "granger_lasso";
const MEAN_ROC_GRID: usize = 101;
/// Prediction evaluation uses at most this many held-out origins.
const MAX_PREDICTION_ORIGINS: usize = 2000;

/// Penalty radii matching the true system: `λ1 = ‖K1‖₁` and
/// `λ2 = max(‖K2‖₁, 1e-3)` with `K1 = B⁻¹(A+D)`, `K2 = B⁻¹AD`.
pub fn oracle_lambdas(prm: &SystemParams) -> Result<(f64, f64)> {
    let binv = prm
        .b
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularMatrix("B is not invertible".into()))?;
    let k1 = &binv * (&prm.a + &prm.d);
    let k2 = &binv * &prm.a * &prm.d;
    let l1 = |m: &DMatrix<f64>| m.iter().map(|v| v.abs()).sum::<f64>();
    Ok((l1(&k1), l1(&k2).max(1e-3)))
}

/// Predictions `horizon` steps ahead from up to [`MAX_PREDICTION_ORIGINS`]
/// evenly spaced origins, scored by [`normalized_mse`].
pub fn rolling_nmse<F>(data: &DMatrix<f64>, window: usize, horizon: usize, predict: F) -> Result<f64>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let t = data.nrows();
    if t < window + horizon {
        return Err(Error::InvalidArgument(format!(
            "{t} rows cannot hold a window of {window} plus horizon {horizon}"
        )));
    }
    let origins = t - window - horizon + 1;
    let stride = origins.div_ceil(MAX_PREDICTION_ORIGINS).max(1);
    let picks: Vec<usize> = (0..origins).step_by(stride).collect();
    let mut pred = DMatrix::zeros(picks.len(), data.ncols());
    let mut actual = DMatrix::zeros(picks.len(), data.ncols());
    for (row, &s) in picks.iter().enumerate() {
        let hist = data.rows(s, window).into_owned();
        let out = predict(&hist)?;
        pred.row_mut(row).copy_from(&out.row(horizon - 1));
        actual.row_mut(row).copy_from(&data.row(s + window + horizon - 1));
    }
    normalized_mse(&pred, &actual)
}

/// Off-diagonal F1 of `scores` thresholded at 10% of its largest off-diagonal entry.
fn default_f1(scores: &DMatrix<f64>, truth: &SignPattern) -> Result<f64> {
    let thr = SignThreshold::default().resolve(scores);
    Ok(support_metrics(&sign_pattern_of(scores, thr), truth, true)?.f1)
}

fn method_result(scores: &DMatrix<f64>, truth: &SignPattern, nmse: Option<f64>) -> Result<MethodResult> {
    let roc = roc_from_sweep(scores, truth)?;
    Ok(MethodResult {
        auc: roc.auc,
        tpr_at_fpr_0_1: roc.tpr_at(0.1),
        f1: default_f1(scores, truth)?,
        nmse,
        roc,
    })
}

/// Fits the learner on `traj` as configured, returning the estimate and the
/// `(θ, λ1, λ2)` it used.
fn fit_learner(
    cfg: &ExperimentConfig,
    prm: &SystemParams,
    traj: &Trajectory,
) -> Result<(LearnEstimate, usize, (f64, f64))> {
    let thetas = if cfg.theta_grid.is_empty() {
        vec![prm.theta_max]
    } else {
        cfg.theta_grid.clone()
    };
    let lambdas = if cfg.lambda_grid.is_empty() {
        vec![oracle_lambdas(prm)?]
    } else {
        cfg.lambda_grid.clone()
    };
    let (theta, lam) = if thetas.len() == 1 && lambdas.len() == 1 {
        (thetas[0], lambdas[0])
    } else {
        let cv = cross_validate(traj, &thetas, &lambdas, &cfg.learn)?;
        (cv.best_theta, cv.best_lambdas)
    };
    let covs = sample_lag_covariances(traj, 2 * theta + 2)?;
    let lcfg = LearnConfig {
        theta_max: theta,
        lambda1: lam.0,
        lambda2: lam.1,
        ..cfg.learn.clone()
    };
    Ok((fit(&covs, &lcfg)?, theta, lam))
}

/// Granger fit with the shared penalty chosen by one-step validation error.
fn fit_granger(cfg: &ExperimentConfig, l: usize, traj: &Trajectory) -> Result<(GrangerEstimate, f64)> {
    let lambda = if cfg.granger_lambdas.len() == 1 {
        cfg.granger_lambdas[0]
    } else {
        let split = traj.len() * 4 / 5;
        let train = traj.segment(0, split);
        // the validation block starts L steps early so its first origin has a full window
        let start = split.saturating_sub(l);
        let valid = traj.x.rows(start, traj.len() - start).into_owned();
        let mut best = (f64::INFINITY, cfg.granger_lambdas[0]);
        for &lam in &cfg.granger_lambdas {
            let est = granger_fit(&train, l, &vec![lam; l])?;
            let err = rolling_nmse(&valid, l, 1, |h| granger_predict(&est, h, 1))?;
            if err < best.0 {
                best = (err, lam);
            }
        }
        best.1
    };
    Ok((granger_fit(traj, l, &vec![lambda; l])?, lambda))
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let prm = cfg.system.build(seed)?;
    let traj = simulate(&prm, &SimConfig::new(cfg.t, seed))?;
    let truth = sign_pattern_of(&prm.a, 0.0);

    let held_out_len = (cfg.t / 5).clamp(50, 10_000);
    let held_out = simulate(&prm, &SimConfig::new(held_out_len, seed ^ 0x005e_ed0f_f5e7))?;

    let (est, theta, lam) = fit_learner(cfg, &prm, &traj)?;
    let window = theta + 2;
    let learn_nmse = rolling_nmse(&held_out.x, window, cfg.predict_horizon, |h| {
        latentlag_predict(&est, h, cfg.predict_horizon)
    })
    .ok();

    let l = cfg.granger_lags.unwrap_or(prm.theta_max + 2).max(1);
    let (gest, glam) = fit_granger(cfg, l, &traj)?;
    let granger_nmse = rolling_nmse(&held_out.x, l, cfg.predict_horizon, |h| {
        granger_predict(&gest, h, cfg.predict_horizon)
    })
    .ok();

    let mut methods = BTreeMap::new();
    methods.insert(METHOD_LEARN.to_string(), method_result(&est.k1, &truth, learn_nmse)?);
    methods.insert(
        METHOD_GRANGER.to_string(),
        method_result(&gest.dependency, &truth, granger_nmse)?,
    );
    Ok(SeedResult {
        seed,
        error: None,
        theta_used: Some(theta),
        lambdas: Some(lam),
        learn_converged: Some(est.converged),
        granger_lambda: Some(glam),
        methods,
    })
}

/// Runs every seed in parallel, aggregates in seed order and, if
/// `cfg.outputs` is set, writes the CSV and JSON artifacts there.
///
/// A failing seed is recorded with its error and excluded from the means.
pub fn run_synthetic(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.check()?;
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let per_seed: Vec<SeedResult> = seeds
        .par_iter()
        .map(|&seed| {
            run_seed(cfg, seed).unwrap_or_else(|e| SeedResult {
                seed,
                error: Some(e.to_string()),
                theta_used: None,
                lambdas: None,
                learn_converged: None,
                granger_lambda: None,
                methods: BTreeMap::new(),
            })
        })
        .collect();

    let mut mean_curves = BTreeMap::new();
    let mut auc = BTreeMap::new();
    let mut mean_seed_auc = BTreeMap::new();
    let mut mean_tpr = BTreeMap::new();
    for method in [METHOD_LEARN, METHOD_GRANGER] {
        let results: Vec<&MethodResult> = per_seed.iter().filter_map(|s| s.methods.get(method)).collect();
        if results.is_empty() {
            continue;
        }
        let n = results.len() as f64;
        let curves: Vec<RocCurve> = results.iter().map(|r| r.roc.clone()).collect();
        let mean = mean_roc(&curves, MEAN_ROC_GRID);
        auc.insert(method.to_string(), mean.auc);
        mean_curves.insert(method.to_string(), mean.points);
        mean_seed_auc.insert(method.to_string(), results.iter().map(|r| r.auc).sum::<f64>() / n);
        mean_tpr.insert(
            method.to_string(),
            results.iter().map(|r| r.tpr_at_fpr_0_1).sum::<f64>() / n,
        );
    }
    let summary = ExperimentSummary {
        config_hash: cfg.hash()?,
        failed_seeds: per_seed.iter().filter(|s| s.error.is_some()).count(),
        per_seed,
        mean_roc: mean_curves,
        auc,
        mean_seed_auc,
        mean_tpr_at_fpr_0_1: mean_tpr,
    };
    if let Some(dir) = &cfg.outputs {
        write_artifacts(dir, &summary)?;
    }
    Ok(summary)
}

/// `summary.json`, `per_seed.csv`, `roc_<method>.csv` and one ROC file per
/// seed and method under `seeds/`.
pub fn write_artifacts(dir: &Path, summary: &ExperimentSummary) -> Result<()> {
    let seeds_dir = dir.join("seeds");
    fs::create_dir_all(&seeds_dir)?;
    let mut table = String::from("seed,method,auc,tpr_at_fpr_0_1,f1,nmse,error\n");
    for s in &summary.per_seed {
        if let Some(err) = &s.error {
            table.push_str(&format!("{},,,,,,{:?}\n", s.seed, err));
            continue;
        }
        for (method, r) in &s.methods {
            let nmse = r.nmse.map_or(String::new(), |v| v.to_string());
            table.push_str(&format!(
                "{},{method},{},{},{},{nmse},\n",
                s.seed, r.auc, r.tpr_at_fpr_0_1, r.f1
            ));
            fs::write(
                seeds_dir.join(format!("seed_{}_roc_{method}.csv", s.seed)),
                r.roc.to_csv(),
            )?;
        }
    }
    fs::write(dir.join("per_seed.csv"), table)?;
    for (method, points) in &summary.mean_roc {
        let curve = RocCurve::from_points(points.clone(), false);
        fs::write(dir.join(format!("roc_{method}.csv")), curve.to_csv())?;
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

/// CSV with columns `t,horizon,x1,...,xp`; `t` is the 1-based index of the
/// last observed step and row `h` of `pred` is the prediction for `t + h + 1`.
pub fn predictions_csv(t: usize, pred: &DMatrix<f64>) -> String {
    let mut s = String::from("t,horizon");
    for i in 1..=pred.ncols() {
        s.push_str(&format!(",x{i}"));
    }
    s.push('\n');
    for h in 0..pred.nrows() {
        s.push_str(&format!("{t},{}", h + 1));
        for v in pred.row(h).iter() {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn pattern(rows: &[Vec<i8>]) -> SignPattern {
        SignPattern::from_rows(rows).unwrap()
    }

    #[test]
    fn oracle_scores_give_unit_auc() {
        let truth = pattern(&[vec![0, 1, 0], vec![0, 0, -1], vec![1, 0, 0]]);
        let scores = DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 0.0, 0.0, 9.0, -1.0, 1.0, 0.0, 0.0]);
        let roc = roc_from_sweep(&scores, &truth).unwrap();
        assert_eq!(roc.points, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(roc.auc, 1.0);
        assert!(!roc.degenerate);
    }

    #[test]
    fn wrong_signs_are_not_true_positives() {
        let truth = pattern(&[vec![0, 1], vec![-1, 0]]);
        let scores = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let roc = roc_from_sweep(&scores, &truth).unwrap();
        assert_eq!(roc.tpr_at(0.0), 0.0);
    }

    #[test]
    fn roc_is_monotone_and_auc_is_trapezoidal() {
        let truth = pattern(&[vec![0, 1, 0, 0], vec![0, 0, 1, 0], vec![0, 0, 0, -1], vec![1, 0, 0, 0]]);
        let scores = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let roc = roc_from_sweep(&scores, &truth).unwrap();
        for w in roc.points.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        assert!((roc.auc - trapezoid(&roc.points)).abs() < 1e-12);
    }

    #[test]
    fn empty_truth_is_flagged() {
        let truth = SignPattern::zeros(3, 3);
        let roc = roc_from_sweep(&DMatrix::from_element(3, 3, 1.0), &truth).unwrap();
        assert!(roc.degenerate);
        assert!(roc.points.iter().all(|&(_, t)| t == 0.0 || t == 1.0));
    }

    #[test]
    fn vertical_average_of_identical_curves() {
        let truth = pattern(&[vec![0, 1], vec![0, 0]]);
        let roc = roc_from_sweep(&DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 0.0]), &truth).unwrap();
        let mean = mean_roc(&[roc.clone(), roc.clone()], 11);
        assert!((mean.auc - roc.auc).abs() < 1e-12);
    }

    #[test]
    fn ingest_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "t,x1,x2\n1,0.5,1\n2,NaN,3").unwrap();
        match ingest_csv(&path, false) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "t,x1,x2\n1,0.5,1\n2,3\n").unwrap();
        assert!(matches!(ingest_csv(&path, false), Err(Error::Csv { line: 3, .. })));
        fs::write(&path, "t,x1\n1,abc\n").unwrap();
        assert!(matches!(ingest_csv(&path, false), Err(Error::Csv { line: 2, .. })));
    }

    #[test]
    fn standardized_moments() {
        let x = DMatrix::from_fn(100, 2, |i, j| (i as f64).sin() * 3.0 + j as f64 * 5.0);
        let s = standardize(&Trajectory::from_observations(x));
        for c in s.x.column_iter() {
            assert!(c.mean().abs() < 1e-12);
            assert!((c.norm_squared() / 100.0 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn config_checks_and_hash() {
        let spec = SystemSpec::Random {
            p: 3,
            nonzeros_per_row: 1,
            theta_max: 1,
            structure: Structure::ASparseBdDiagonal,
            options: RandomSystemOptions::default(),
        };
        let cfg = ExperimentConfig::new(spec.clone(), 1000, vec![1]);
        assert!(cfg.check().is_ok());
        assert_eq!(cfg.hash().unwrap(), cfg.clone().hash().unwrap());
        assert!(ExperimentConfig::new(spec.clone(), 1000, vec![]).check().is_err());
        assert!(ExperimentConfig::new(spec, 19, vec![1]).check().is_err());
    }

    #[test]
    fn predictions_csv_layout() {
        let pred = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.5]);
        assert_eq!(predictions_csv(7, &pred), "t,horizon,x1,x2\n7,1,1,2\n7,2,3,4.5\n");
    }
}
