//! Granger-Lasso baseline and the linear predictors used for benchmarking.
//!
//! Each output coordinate `r` solves
//! `min_β (1/2n) Σ_t (x_t(r) − Σ_i A_i(r,:) x_{t-i})² + Σ_i λ_i ‖A_i(r,:)‖₁`
//! by cyclic coordinate descent on the Gram matrix of the lagged regressors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::LearnEstimate;
use crate::simulate::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrangerConfig {
    pub max_sweeps: usize,
    /// Largest tolerated violation of the lasso optimality conditions.
    pub kkt_tol: f64,
}

impl Default for GrangerConfig {
    fn default() -> Self {
        GrangerConfig {
            max_sweeps: 10_000,
            kkt_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrangerEstimate {
    /// `A_1, ..., A_L`.
    #[serde(with = "crate::serde_matrix::vec")]
    pub lag_matrices: Vec<DMatrix<f64>>,
    /// `A_G = Σ_i A_i`.
    #[serde(with = "crate::serde_matrix")]
    pub dependency: DMatrix<f64>,
    #[serde(rename = "L")]
    pub l: usize,
    pub lambdas: Vec<f64>,
    /// Largest KKT residual over all output rows.
    pub kkt_residual: f64,
    /// Largest sweep count over all output rows.
    pub sweeps: usize,
}

impl GrangerEstimate {
    pub fn zeros(p: usize, l: usize) -> Self {
        GrangerEstimate {
            lag_matrices: vec![DMatrix::zeros(p, p); l],
            dependency: DMatrix::zeros(p, p),
            l,
            lambdas: vec![0.0; l],
            kkt_residual: 0.0,
            sweeps: 0,
        }
    }

    pub fn p(&self) -> usize {
        self.dependency.nrows()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Result of one lasso problem `min ½βᵀCβ − cᵀβ + Σ_k w_k|β_k|`.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub beta: DVector<f64>,
    pub sweeps: usize,
    pub kkt_residual: f64,
    /// Objective (without the constant term) after every sweep, starting at `β = 0`.
    pub history: Vec<f64>,
}

fn lasso_objective(gram: &DMatrix<f64>, c: &DVector<f64>, w: &[f64], beta: &DVector<f64>) -> f64 {
    let l1: f64 = beta.iter().zip(w).map(|(b, wk)| wk * b.abs()).sum();
    0.5 * beta.dot(&(gram * beta)) - c.dot(beta) + l1
}

/// Largest violation of the lasso optimality conditions at `beta`.
pub fn lasso_kkt_residual(gram: &DMatrix<f64>, c: &DVector<f64>, w: &[f64], beta: &DVector<f64>) -> f64 {
    let grad = gram * beta - c;
    let mut worst = 0.0f64;
    for k in 0..beta.len() {
        let v = if beta[k] != 0.0 {
            (grad[k] + w[k] * beta[k].signum()).abs()
        } else {
            (grad[k].abs() - w[k]).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `min ½βᵀCβ − cᵀβ + Σ_k w_k|β_k|` with `C` PSD.
pub fn lasso_cd(gram: &DMatrix<f64>, c: &DVector<f64>, w: &[f64], cfg: &GrangerConfig) -> Result<LassoSolution> {
    let n = c.len();
    if gram.shape() != (n, n) || w.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "gram {}x{}, rhs {n}, weights {}",
            gram.nrows(),
            gram.ncols(),
            w.len()
        )));
    }
    let mut beta = DVector::zeros(n);
    // g = Cβ, kept in sync with every coordinate update
    let mut g = DVector::zeros(n);
    let mut history = vec![0.0];
    for sweep in 1..=cfg.max_sweeps {
        for k in 0..n {
            let ckk = gram[(k, k)];
            if ckk <= 0.0 {
                continue;
            }
            let partial = c[k] - (g[k] - ckk * beta[k]);
            let new = soft_threshold(partial, w[k]) / ckk;
            let delta = new - beta[k];
            if delta != 0.0 {
                g.axpy(delta, &gram.column(k), 1.0);
                beta[k] = new;
            }
        }
        history.push(lasso_objective(gram, c, w, &beta));
        let kkt = lasso_kkt_residual(gram, c, w, &beta);
        if kkt <= cfg.kkt_tol {
            return Ok(LassoSolution {
                beta,
                sweeps: sweep,
                kkt_residual: kkt,
                history,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: cfg.max_sweeps,
        objective: *history.last().unwrap_or(&0.0),
    })
}

/// Regressor rows `[x_{t-1}, ..., x_{t-L}]` and targets `x_t` for `t = L..T-1`.
fn lagged_design(x: &DMatrix<f64>, l: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (t, p) = x.shape();
    let n = t - l;
    let mut design = DMatrix::zeros(n, p * l);
    for i in 1..=l {
        design.view_mut((0, (i - 1) * p), (n, p)).copy_from(&x.rows(l - i, n));
    }
    (design, x.rows(l, n).into_owned())
}

pub fn granger_fit(traj: &Trajectory, l: usize, lambdas: &[f64]) -> Result<GrangerEstimate> {
    granger_fit_with(traj, l, lambdas, &GrangerConfig::default())
}

/// Lasso VAR(L) with per-lag penalties `λ_i`; output rows are solved in parallel.
pub fn granger_fit_with(traj: &Trajectory, l: usize, lambdas: &[f64], cfg: &GrangerConfig) -> Result<GrangerEstimate> {
    if l == 0 {
        return Err(Error::InvalidArgument("L must be positive".into()));
    }
    if lambdas.len() != l {
        return Err(Error::DimensionMismatch(format!(
            "{} lambdas for L = {l}",
            lambdas.len()
        )));
    }
    if lambdas.iter().any(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::InvalidArgument("lambdas must be nonnegative".into()));
    }
    if traj.len() <= l {
        return Err(Error::InvalidArgument(format!(
            "trajectory of length {} is too short for L = {l}",
            traj.len()
        )));
    }
    let p = traj.p;
    let (design, targets) = lagged_design(&traj.x, l);
    let n = design.nrows() as f64;
    let gram = design.tr_mul(&design) / n;
    let rhs = design.tr_mul(&targets) / n;
    let weights: Vec<f64> = lambdas.iter().flat_map(|&v| std::iter::repeat_n(v, p)).collect();

    let rows: Vec<LassoSolution> = (0..p)
        .into_par_iter()
        .map(|r| lasso_cd(&gram, &rhs.column(r).into_owned(), &weights, cfg))
        .collect::<Result<_>>()?;

    let mut lag_matrices = vec![DMatrix::zeros(p, p); l];
    for (r, sol) in rows.iter().enumerate() {
        for (i, a) in lag_matrices.iter_mut().enumerate() {
            for j in 0..p {
                a[(r, j)] = sol.beta[i * p + j];
            }
        }
    }
    let dependency = lag_matrices.iter().fold(DMatrix::zeros(p, p), |acc, a| acc + a);
    Ok(GrangerEstimate {
        lag_matrices,
        dependency,
        l,
        lambdas: lambdas.to_vec(),
        kkt_residual: rows.iter().map(|s| s.kkt_residual).fold(0.0, f64::max),
        sweeps: rows.iter().map(|s| s.sweeps).max().unwrap_or(0),
    })
}

fn check_window(history: &DMatrix<f64>, p: usize, needed: usize) -> Result<()> {
    if history.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "history has {} columns, model has {p}",
            history.ncols()
        )));
    }
    if history.nrows() < needed {
        return Err(Error::InvalidArgument(format!(
            "history window of {} rows is shorter than the required {needed}",
            history.nrows()
        )));
    }
    Ok(())
}

/// Iterates a one-step linear predictor `horizon` times, feeding predictions
/// back. `history` holds one observation per row, most recent last; the
/// result holds the predictions for `t+1..=t+horizon`, one per row.
fn roll_forward<F>(history: &DMatrix<f64>, depth: usize, horizon: usize, step: F) -> DMatrix<f64>
where
    F: Fn(&[DVector<f64>]) -> DVector<f64>,
{
    let p = history.ncols();
    // window[k] = x_{t-k}
    let mut window: Vec<DVector<f64>> = (0..depth)
        .map(|k| history.row(history.nrows() - 1 - k).transpose())
        .collect();
    let mut out = DMatrix::zeros(horizon, p);
    for h in 0..horizon {
        let next = step(&window);
        out.row_mut(h).copy_from(&next.transpose());
        window.pop();
        window.insert(0, next);
    }
    out
}

/// `x̂_{t+1} = Σ_i A_i x_{t+1-i}`, applied recursively.
pub fn granger_predict(est: &GrangerEstimate, history: &DMatrix<f64>, horizon: usize) -> Result<DMatrix<f64>> {
    check_window(history, est.p(), est.l)?;
    Ok(roll_forward(history, est.l, horizon, |w| {
        est.lag_matrices
            .iter()
            .zip(w)
            .fold(DVector::zeros(est.p()), |acc, (a, x)| acc + a * x)
    }))
}

/// Heuristic predictor with the shape of the lag-covariance recursion:
/// `x̂_{t+1} = B1⁻¹(K1 x_t − K2 x_{t-1} + Σ_θ q_θ x_{t-θ})`.
///
/// `B1⁻¹` is taken entrywise on the diagonal, with non-positive entries
/// mapped to zero, so an all-zero estimate predicts zero.
pub fn latentlag_predict(est: &LearnEstimate, history: &DMatrix<f64>, horizon: usize) -> Result<DMatrix<f64>> {
    let p = est.k1.nrows();
    let theta = est.theta_max();
    check_window(history, p, theta + 2)?;
    let binv = DVector::from_fn(p, |i, _| {
        let b = est.b1[(i, i)];
        if b > 0.0 {
            1.0 / b
        } else {
            0.0
        }
    });
    Ok(roll_forward(history, (theta + 1).max(2), horizon, |w| {
        let mut v = &est.k1 * &w[0] - &est.k2 * &w[1];
        for (j, &qj) in est.q_hat.iter().enumerate() {
            v += &w[j] * qj;
        }
        v.component_mul(&binv)
    }))
}

/// `‖pred − actual‖² / ‖actual‖²` over the whole evaluation window.
pub fn normalized_mse(pred: &DMatrix<f64>, actual: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != actual.shape() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {:?}, actual is {:?}",
            pred.shape(),
            actual.shape()
        )));
    }
    let den = actual.norm_squared();
    if den == 0.0 {
        return Err(Error::InvalidArgument("actual values are all zero".into()));
    }
    Ok((pred - actual).norm_squared() / den)
}
