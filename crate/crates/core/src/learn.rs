//! Constrained convex estimation of `(B1, K1, K2, q)` from lagged covariances
//! and extraction of the sign-sparsity pattern of `A`.
//!
//! The lag recursion multiplied through by `B⁻¹` reads
//! `B⁻¹Σ_{i+1} − B⁻¹(A+D)Σ_i + B⁻¹ADΣ_{i-1} − Σ_θ q_θ Σ_{i-θ} = 0`, which is
//! linear in `B1 = B⁻¹`, `K1 = B⁻¹(A+D)`, `K2 = B⁻¹AD` and `q`. When `B` and
//! `D` are diagonal, the off-diagonal support of `K1` is that of `A`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{sample_lag_covariances, LagCovSeq};
use crate::error::{Error, Result};
use crate::model::{sign_pattern_of, SignPattern};
use crate::simulate::Trajectory;

/// How the sign pattern of `K1` is thresholded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignThreshold {
    Absolute(f64),
    /// Fraction of the largest off-diagonal `|K1|` entry.
    Relative(f64),
}

impl Default for SignThreshold {
    fn default() -> Self {
        SignThreshold::Relative(0.1)
    }
}

impl SignThreshold {
    pub fn resolve(&self, k1: &DMatrix<f64>) -> f64 {
        match *self {
            SignThreshold::Absolute(t) => t,
            SignThreshold::Relative(frac) => frac * max_off_diagonal(k1),
        }
    }
}

fn max_off_diagonal(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j {
                best = best.max(m[(i, j)].abs());
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub theta_max: usize,
    /// Radius of the entrywise L1 ball for `K1`.
    pub lambda1: f64,
    /// Radius of the entrywise L1 ball for `K2`.
    pub lambda2: f64,
    pub max_iters: usize,
    /// Relative objective decrease over [`STALL_WINDOW`] accepted iterations
    /// below which the solver stops.
    pub tol: f64,
    pub b1_min: f64,
    pub sign_threshold: SignThreshold,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            theta_max: 0,
            lambda1: 10.0,
            lambda2: 10.0,
            max_iters: 20_000,
            tol: 1e-12,
            b1_min: 1e-6,
            sign_threshold: SignThreshold::default(),
        }
    }
}

impl LearnConfig {
    pub fn new(theta_max: usize, lambda1: f64, lambda2: f64) -> Self {
        LearnConfig {
            theta_max,
            lambda1,
            lambda2,
            ..LearnConfig::default()
        }
    }

    fn check(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lambda1", self.lambda1)?;
        positive("lambda2", self.lambda2)?;
        positive("tol", self.tol)?;
        positive("b1_min", self.b1_min)?;
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Number of accepted iterations over which the relative decrease is measured.
pub const STALL_WINDOW: usize = 10;

/// Per-iteration decay of the step-size estimate before backtracking.
const LIP_SHRINK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnEstimate {
    #[serde(rename = "B1", with = "crate::serde_matrix")]
    pub b1: DMatrix<f64>,
    #[serde(rename = "K1", with = "crate::serde_matrix")]
    pub k1: DMatrix<f64>,
    #[serde(rename = "K2", with = "crate::serde_matrix")]
    pub k2: DMatrix<f64>,
    pub q_hat: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub sign: SignPattern,
    /// Pattern of `K2` under the same threshold rule, for comparison only.
    pub sign_k2: SignPattern,
    /// Objective at every accepted iterate.
    #[serde(skip)]
    pub history: Vec<f64>,
}

impl LearnEstimate {
    /// The starting point of [`fit`]: `B1 = I`, `K1 = K2 = 0`, uniform `q`.
    pub fn initial(p: usize, theta_max: usize) -> Self {
        let k = DMatrix::zeros(p, p);
        LearnEstimate {
            b1: DMatrix::identity(p, p),
            k1: k.clone(),
            k2: k,
            q_hat: vec![1.0 / (theta_max + 1) as f64; theta_max + 1],
            objective: f64::NAN,
            iterations: 0,
            converged: false,
            sign: SignPattern::zeros(p, p),
            sign_k2: SignPattern::zeros(p, p),
            history: Vec::new(),
        }
    }

    pub fn theta_max(&self) -> usize {
        self.q_hat.len() - 1
    }

    /// Recomputes both sign patterns under `rule`.
    pub fn with_threshold(mut self, rule: SignThreshold) -> Self {
        self.sign = sign_pattern_of(&self.k1, rule.resolve(&self.k1));
        self.sign_k2 = sign_pattern_of(&self.k2, rule.resolve(&self.k2));
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn lag_range(theta_max: usize) -> std::ops::RangeInclusive<usize> {
    theta_max.max(1)..=2 * theta_max + 1
}

/// Sum over `i ∈ [max(θ,1), 2θ+1]` of the squared Frobenius residual
/// `‖B1Σ_{i+1} − K1Σ_i + K2Σ_{i-1} − Σ_θ q_θ Σ_{i-θ}‖²`.
pub fn objective(covs: &LagCovSeq, est: &LearnEstimate, theta_max: usize) -> Result<f64> {
    covs.require(2 * theta_max + 2)?;
    if est.q_hat.len() != theta_max + 1 {
        return Err(Error::DimensionMismatch(format!(
            "q has {} entries, theta_max = {theta_max}",
            est.q_hat.len()
        )));
    }
    let mut total = 0.0;
    for i in lag_range(theta_max) {
        let i = i as isize;
        let mut r = &est.b1 * covs.get(i + 1)? - &est.k1 * covs.get(i)? + &est.k2 * covs.get(i - 1)?;
        for (j, &qj) in est.q_hat.iter().enumerate() {
            r -= covs.get(i - j as isize)? * qj;
        }
        total += r.norm_squared();
    }
    Ok(total)
}

/// Euclidean projection onto `{m : Σ|m_ij| ≤ radius}`.
pub fn project_l1_ball(v: &DMatrix<f64>, radius: f64) -> DMatrix<f64> {
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm <= radius {
        return v.clone();
    }
    let tau = threshold_for_sum(v.iter().map(|x| x.abs()).collect(), radius);
    v.map(|x| x.signum() * (x.abs() - tau).max(0.0))
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let tau = threshold_for_sum(v.to_vec(), 1.0);
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// `τ` with `Σ max(u_i − τ, 0) = target`, by sorting.
fn threshold_for_sum(mut u: Vec<f64>, target: f64) -> f64 {
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - target) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    tau
}

/// Zeroes the off-diagonal and clamps the diagonal to at least `floor`.
pub fn project_diag_pos(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = m.nrows().min(m.ncols());
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..n {
        out[(i, i)] = m[(i, i)].max(floor);
    }
    out
}

/// The objective in `W = [B1, K1, K2]` and `q`.
///
/// With `Y_i = [Σ_{i+1}; −Σ_i; Σ_{i-1}]` the residual is `R_i = W Y_i − Σ_j q_j Σ_{i-j}`.
/// Values and gradients are formed from the residuals themselves, which keeps
/// them accurate when the objective is close to zero.
struct Problem {
    p: usize,
    y: Vec<DMatrix<f64>>,
    /// `lagged[n][j] = Σ_{i-j}` for the `n`-th lag `i`.
    lagged: Vec<Vec<DMatrix<f64>>>,
    /// `Σ_i ‖Σ_{i+1}‖²`, the objective's natural scale.
    scale: f64,
}

impl Problem {
    fn new(covs: &LagCovSeq, theta_max: usize) -> Result<Self> {
        covs.require(2 * theta_max + 2)?;
        let p = covs.p;
        let mut y = Vec::new();
        let mut lagged = Vec::new();
        let mut scale = 0.0;
        for i in lag_range(theta_max) {
            let i = i as isize;
            let mut yi = DMatrix::zeros(3 * p, p);
            yi.view_mut((0, 0), (p, p)).copy_from(&covs.get(i + 1)?);
            yi.view_mut((p, 0), (p, p)).copy_from(&(-covs.get(i)?));
            yi.view_mut((2 * p, 0), (p, p)).copy_from(&covs.get(i - 1)?);
            y.push(yi);
            lagged.push(
                (0..=theta_max)
                    .map(|j| covs.get(i - j as isize))
                    .collect::<Result<Vec<_>>>()?,
            );
            scale += covs.get(i + 1)?.norm_squared();
        }
        Ok(Problem { p, y, lagged, scale })
    }

    fn residuals(&self, x: &Point) -> Vec<DMatrix<f64>> {
        self.y
            .iter()
            .zip(&self.lagged)
            .map(|(yi, li)| {
                let mut r = &x.w * yi;
                for (qj, sj) in x.q.iter().zip(li) {
                    r -= sj * *qj;
                }
                r
            })
            .collect()
    }

    /// Objective value; applied to a step `d` it gives the exact curvature term
    /// `f(x + d) − f(x) − ⟨∇f(x), d⟩`.
    fn value(&self, x: &Point) -> f64 {
        self.residuals(x).iter().map(|r| r.norm_squared()).sum()
    }

    fn value_and_gradient(&self, x: &Point) -> (f64, Point) {
        let res = self.residuals(x);
        let mut gw = DMatrix::zeros(self.p, 3 * self.p);
        let mut gq = DVector::zeros(x.q.len());
        let mut f = 0.0;
        for ((r, yi), li) in res.iter().zip(&self.y).zip(&self.lagged) {
            f += r.norm_squared();
            gw += r * yi.transpose() * 2.0;
            for (j, sj) in li.iter().enumerate() {
                gq[j] -= 2.0 * r.dot(sj);
            }
        }
        (f, Point { w: gw, q: gq })
    }

    /// Upper bound on the largest Hessian eigenvalue, from the Gram blocks.
    fn lipschitz_bound(&self) -> f64 {
        let n = self.y.len();
        let nq = self.lagged[0].len();
        let g = self.y.iter().fold(DMatrix::zeros(3 * self.p, 3 * self.p), |acc, yi| {
            acc + yi * yi.transpose()
        });
        let mut q = DMatrix::zeros(nq, nq);
        let mut cross = 0.0;
        for k in 0..n {
            for a in 0..nq {
                for b in 0..nq {
                    q[(a, b)] += self.lagged[k][a].dot(&self.lagged[k][b]);
                }
                cross += (&self.y[k] * self.lagged[k][a].transpose()).norm_squared();
            }
        }
        let lam = |m: DMatrix<f64>| {
            nalgebra::SymmetricEigen::new(m)
                .eigenvalues
                .iter()
                .fold(0.0f64, |a, &b| a.max(b))
        };
        2.0 * (lam(g) + lam(q) + cross.sqrt())
    }
}

#[derive(Clone)]
struct Point {
    w: DMatrix<f64>,
    q: DVector<f64>,
}

impl Point {
    fn axpy(&self, a: f64, d: &Point) -> Point {
        Point {
            w: &self.w + &d.w * a,
            q: &self.q + &d.q * a,
        }
    }

    fn sub(&self, o: &Point) -> Point {
        Point {
            w: &self.w - &o.w,
            q: &self.q - &o.q,
        }
    }

    fn dot(&self, o: &Point) -> f64 {
        self.w.dot(&o.w) + self.q.dot(&o.q)
    }
}

fn project(x: &Point, p: usize, cfg: &LearnConfig) -> Point {
    let mut w = DMatrix::zeros(p, 3 * p);
    w.columns_mut(0, p)
        .copy_from(&project_diag_pos(&x.w.columns(0, p).into_owned(), cfg.b1_min));
    w.columns_mut(p, p)
        .copy_from(&project_l1_ball(&x.w.columns(p, p).into_owned(), cfg.lambda1));
    w.columns_mut(2 * p, p)
        .copy_from(&project_l1_ball(&x.w.columns(2 * p, p).into_owned(), cfg.lambda2));
    let q = DVector::from_vec(project_simplex(x.q.as_slice()));
    Point { w, q }
}

/// Projected accelerated gradient descent on the squared objective.
///
/// Each step projects `B1` onto positive diagonals, `K1` and `K2` onto their
/// L1 balls and `q` onto the simplex. Momentum restarts whenever a step would
/// raise the objective, so accepted iterates are monotone. Running out of
/// iterations is reported through `converged = false`, not an error.
pub fn fit(covs: &LagCovSeq, cfg: &LearnConfig) -> Result<LearnEstimate> {
    cfg.check()?;
    let theta = cfg.theta_max;
    let prob = Problem::new(covs, theta)?;
    let p = prob.p;
    let init = LearnEstimate::initial(p, theta);
    let mut w0 = DMatrix::zeros(p, 3 * p);
    w0.columns_mut(0, p).copy_from(&init.b1);
    let mut x = project(
        &Point {
            w: w0,
            q: DVector::from_vec(init.q_hat.clone()),
        },
        p,
        cfg,
    );
    let mut fx = prob.value(&x);
    let scale = prob.scale.max(f64::MIN_POSITIVE);
    let mut lip = prob.lipschitz_bound().max(1e-300);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut history = vec![fx];
    let mut converged = false;
    let mut iterations = 0;
    let mut restarted = false;

    while iterations < cfg.max_iters {
        iterations += 1;
        let (_, grad) = prob.value_and_gradient(&y);
        let mut z;
        lip *= LIP_SHRINK;
        loop {
            z = project(&y.axpy(-1.0 / lip, &grad), p, cfg);
            // the objective is quadratic, so the sufficient-decrease test
            // reduces to a bound on the curvature along the step
            let d = z.sub(&y);
            if prob.value(&d) <= 0.5 * lip * d.dot(&d) || !lip.is_finite() {
                break;
            }
            lip *= 2.0;
        }
        let fz = prob.value(&z);
        if fz > fx {
            if restarted {
                // a plain projected-gradient step from x failed to descend:
                // x is stationary up to rounding
                converged = true;
                break;
            }
            // restart momentum from the last accepted point
            t = 1.0;
            y = x.clone();
            restarted = true;
            continue;
        }
        restarted = false;
        let step = z.sub(&x);
        if y.sub(&z).dot(&step) > 0.0 {
            // momentum points uphill
            t = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = z.axpy((t - 1.0) / t_next, &step);
        x = z;
        fx = fz;
        t = t_next;
        history.push(fx);

        if fx <= 1e-28 * scale {
            converged = true;
            break;
        }
        let n = history.len();
        if n > STALL_WINDOW {
            let before = history[n - 1 - STALL_WINDOW];
            if before - fx <= cfg.tol * before {
                converged = true;
                break;
            }
        }
    }

    let mut est = LearnEstimate {
        b1: x.w.columns(0, p).into_owned(),
        k1: x.w.columns(p, p).into_owned(),
        k2: x.w.columns(2 * p, p).into_owned(),
        q_hat: x.q.iter().copied().collect(),
        objective: 0.0,
        iterations,
        converged,
        sign: SignPattern::zeros(p, p),
        sign_k2: SignPattern::zeros(p, p),
        history,
    };
    est.objective = objective(covs, &est, theta)?;
    Ok(est.with_threshold(cfg.sign_threshold))
}

/// One row of the cross-validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub theta: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub fold: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_theta: usize,
    pub best_lambdas: (f64, f64),
    pub best_score: f64,
    pub table: Vec<CvRow>,
}

impl CvResult {
    /// CSV with columns `theta,lambda1,lambda2,fold,score`.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("theta,lambda1,lambda2,fold,score\n");
        for r in &self.table {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.theta, r.lambda1, r.lambda2, r.fold, r.score
            ));
        }
        s
    }
}

/// Number of contiguous folds used by [`cross_validate`].
pub const CV_FOLDS: usize = 5;

/// Lag covariances pooled over several disjoint segments of one trajectory.
pub fn pooled_lag_covariances(segments: &[Trajectory], max_lag: usize) -> Result<LagCovSeq> {
    let total: usize = segments.iter().map(Trajectory::len).sum();
    let mut acc: Option<Vec<DMatrix<f64>>> = None;
    for seg in segments.iter().filter(|s| s.len() > max_lag) {
        let c = sample_lag_covariances(seg, max_lag)?;
        let w = seg.len() as f64 / total as f64;
        match acc.as_mut() {
            None => acc = Some(c.sigmas.into_iter().map(|s| s * w).collect()),
            Some(a) => {
                for (ai, si) in a.iter_mut().zip(c.sigmas) {
                    *ai += si * w;
                }
            }
        }
    }
    LagCovSeq::new(acc.ok_or_else(|| Error::InvalidArgument("no segment is long enough".into()))?)
}

/// Scale-free validation score: the objective divided by
/// `Σ_i ‖Σ_{i+1}‖²` over the same lag range, so different `θ` compare fairly.
pub fn normalized_score(covs: &LagCovSeq, est: &LearnEstimate) -> Result<f64> {
    let theta = est.theta_max();
    let num = objective(covs, est, theta)?;
    let mut den = 0.0;
    for i in lag_range(theta) {
        den += covs.sigmas[i + 1].norm_squared();
    }
    Ok(if den > 0.0 { num / den } else { num })
}

/// Grid search over `θ` and `(λ1, λ2)` with contiguous-block folds.
///
/// Each fold is held out in turn; the model is fit on covariances pooled over
/// the remaining blocks and scored by [`normalized_score`] on the held-out
/// block's covariances. Ties go to the earliest grid point.
pub fn cross_validate(
    traj: &Trajectory,
    theta_grid: &[usize],
    lambda_grid: &[(f64, f64)],
    base: &LearnConfig,
) -> Result<CvResult> {
    if theta_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("CV grids must be non-empty".into()));
    }
    let t = traj.len();
    let max_theta = *theta_grid.iter().max().unwrap_or(&0);
    let fold_len = t / CV_FOLDS;
    let need = 10 * (2 * max_theta + 3);
    if fold_len < need {
        return Err(Error::InvalidArgument(format!(
            "trajectory of length {t} is too short for {CV_FOLDS} folds of at least {need} samples"
        )));
    }
    let bounds: Vec<(usize, usize)> = (0..CV_FOLDS)
        .map(|f| {
            let start = f * fold_len;
            let end = if f + 1 == CV_FOLDS { t } else { start + fold_len };
            (start, end)
        })
        .collect();

    let mut jobs = Vec::new();
    for &theta in theta_grid {
        for &(l1, l2) in lambda_grid {
            for fold in 0..CV_FOLDS {
                jobs.push((theta, l1, l2, fold));
            }
        }
    }
    let table: Vec<CvRow> = jobs
        .par_iter()
        .map(|&(theta, l1, l2, fold)| -> Result<CvRow> {
            let max_lag = 2 * theta + 2;
            let (s, e) = bounds[fold];
            let train: Vec<Trajectory> = [(0, s), (e, t)]
                .iter()
                .filter(|(a, b)| b > a)
                .map(|&(a, b)| traj.segment(a, b - a))
                .collect();
            let train_covs = pooled_lag_covariances(&train, max_lag)?;
            let valid_covs = sample_lag_covariances(&traj.segment(s, e - s), max_lag)?;
            let cfg = LearnConfig {
                theta_max: theta,
                lambda1: l1,
                lambda2: l2,
                ..base.clone()
            };
            let est = fit(&train_covs, &cfg)?;
            Ok(CvRow {
                theta,
                lambda1: l1,
                lambda2: l2,
                fold,
                score: normalized_score(&valid_covs, &est)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, f64, f64, f64)> = None;
    for chunk in table.chunks(CV_FOLDS) {
        let mean = chunk.iter().map(|r| r.score).sum::<f64>() / CV_FOLDS as f64;
        if best.is_none_or(|b| mean < b.3) {
            best = Some((chunk[0].theta, chunk[0].lambda1, chunk[0].lambda2, mean));
        }
    }
    let (best_theta, l1, l2, best_score) = best.expect("grids are non-empty");
    Ok(CvResult {
        best_theta,
        best_lambdas: (l1, l2),
        best_score,
        table,
    })
}
