//! Model parameters, validity checks, random instance generation and
//! sign-pattern utilities.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Default bound on the spectral radius of the zero-delay companion matrix.
pub const STABILITY_BOUND: f64 = 0.95;

const PMF_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Ground-truth parameters of the random-delay latent system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub p: usize,
    pub theta_max: usize,
    #[serde(rename = "A", with = "crate::serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "crate::serde_matrix")]
    pub b: DMatrix<f64>,
    #[serde(rename = "D", with = "crate::serde_matrix")]
    pub d: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub sigma_v: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub sigma_w: DMatrix<f64>,
    /// Delay pmf, `q[θ] = Pr(Θ = θ)` for `θ ∈ [0, theta_max]`.
    pub q: Vec<f64>,
}

impl SystemParams {
    /// Identity noise covariances; `q` determines `theta_max`.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>, q: Vec<f64>) -> Self {
        let p = a.nrows();
        SystemParams {
            p,
            theta_max: q.len().saturating_sub(1),
            a,
            b,
            d,
            sigma_v: DMatrix::identity(p, p),
            sigma_w: DMatrix::identity(p, p),
            q,
        }
    }

    pub fn with_noise(mut self, sigma_v: DMatrix<f64>, sigma_w: DMatrix<f64>) -> Self {
        self.sigma_v = sigma_v;
        self.sigma_w = sigma_w;
        self
    }

    /// Zero-delay companion matrix `[[A, B], [A, B + D]]`.
    pub fn companion(&self) -> DMatrix<f64> {
        let p = self.p;
        let mut h = DMatrix::zeros(2 * p, 2 * p);
        h.view_mut((0, 0), (p, p)).copy_from(&self.a);
        h.view_mut((0, p), (p, p)).copy_from(&self.b);
        h.view_mut((p, 0), (p, p)).copy_from(&self.a);
        h.view_mut((p, p), (p, p)).copy_from(&(&self.b + &self.d));
        h
    }

    /// `A + q_0 B + D`, the first identifiable combination.
    pub fn l1_combo(&self) -> DMatrix<f64> {
        &self.a + &self.b * self.q[0] + &self.d
    }

    /// `q_1 B - A D`, the second identifiable combination.
    pub fn l2_combo(&self) -> DMatrix<f64> {
        let q1 = self.q.get(1).copied().unwrap_or(0.0);
        &self.b * q1 - &self.a * &self.d
    }

    pub fn check(&self) -> Result<()> {
        let report = validate_params(self);
        if report.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidParams(report.violations))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Outcome of [`validate_params`]; violations are data, not failures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_params(params: &SystemParams) -> ValidationReport {
    validate_params_with_bound(params, STABILITY_BOUND)
}

pub fn validate_params_with_bound(params: &SystemParams, stability_bound: f64) -> ValidationReport {
    let mut v = Vec::new();
    let p = params.p;
    if p == 0 {
        v.push("dimension p must be positive".to_string());
        return ValidationReport { violations: v };
    }
    let mats = [
        ("A", &params.a),
        ("B", &params.b),
        ("D", &params.d),
        ("sigma_v", &params.sigma_v),
        ("sigma_w", &params.sigma_w),
    ];
    let mut shapes_ok = true;
    for (name, m) in mats {
        if m.shape() != (p, p) {
            v.push(format!("{name} is {}x{}, expected {p}x{p}", m.nrows(), m.ncols()));
            shapes_ok = false;
        } else if m.iter().any(|x| !x.is_finite()) {
            v.push(format!("{name} has non-finite entries"));
            shapes_ok = false;
        }
    }
    for (name, m) in [("sigma_v", &params.sigma_v), ("sigma_w", &params.sigma_w)] {
        if m.shape() != (p, p) || m.iter().any(|x| !x.is_finite()) {
            continue;
        }
        let scale = m.abs().max().max(1.0);
        if (m - m.transpose()).abs().max() > SYMMETRY_TOL * scale {
            v.push(format!("{name} is not symmetric"));
        } else if linalg::min_sym_eigenvalue(m) < -SYMMETRY_TOL * scale {
            v.push(format!("{name} is not positive semidefinite"));
        }
    }
    if params.q.len() != params.theta_max + 1 {
        v.push(format!(
            "pmf has {} entries, expected theta_max + 1 = {}",
            params.q.len(),
            params.theta_max + 1
        ));
    }
    if params.q.iter().any(|&x| !x.is_finite() || x < 0.0) {
        v.push("pmf has negative or non-finite entries".to_string());
    }
    let total: f64 = params.q.iter().sum();
    if (total - 1.0).abs() > PMF_TOL {
        v.push(format!("pmf sums to {total}"));
    }
    if shapes_ok {
        match linalg::spectral_radius(&params.companion()) {
            Ok(rho) if rho > stability_bound => v.push(format!(
                "unstable: companion spectral radius {rho:.6} exceeds {stability_bound}"
            )),
            Ok(_) => {}
            Err(e) => v.push(format!("spectral radius failed: {e}")),
        }
    }
    ValidationReport { violations: v }
}

pub use crate::linalg::spectral_radius;

const MS_ITER_CAP: usize = 20_000;
const MS_SHIFT: f64 = 1.0;

/// Mean-square growth rate of the random-delay recursion.
///
/// The state `s_t = [z_t, .., z_{t-L+1}, x_t]` with `L = max(θ_max, 1)` is
/// Markov with a random transition `F_Θ`. Returns `sqrt(ρ(P ↦ E[F P Fᵀ]))`,
/// which is below 1 exactly when second moments stay bounded. With no delays
/// it equals the companion spectral radius.
pub fn mean_square_radius(params: &SystemParams) -> Result<f64> {
    let p = params.p;
    let lat = params.theta_max.max(1);
    let n = (lat + 1) * p;
    let xo = lat * p;
    let q = &params.q;

    // mean transition
    let mut f = DMatrix::<f64>::zeros(n, n);
    f.view_mut((0, 0), (p, p)).copy_from(&params.a);
    f.view_mut((0, xo), (p, p)).copy_from(&params.b);
    for k in 1..lat {
        for i in 0..p {
            f[(k * p + i, (k - 1) * p + i)] = 1.0;
        }
    }
    for r in 0..p {
        for c in 0..p {
            f[(xo + r, xo + c)] = params.d[(r, c)] + q[0] * params.b[(r, c)];
            f[(xo + r, c)] = q[0] * params.a[(r, c)];
        }
        for (j, &qj) in q.iter().enumerate().skip(1) {
            f[(xo + r, (j - 1) * p + r)] += qj;
        }
    }

    // δ_{r,0}: the row read when coordinate r takes no delay
    let delta0: Vec<nalgebra::DVector<f64>> = (0..p)
        .map(|r| {
            let mut v = nalgebra::DVector::zeros(n);
            for c in 0..p {
                v[c] = params.a[(r, c)];
                v[xo + c] = params.b[(r, c)];
            }
            v
        })
        .collect();
    let ft = f.transpose();
    let apply = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = &f * m * &ft;
        if params.theta_max == 0 {
            return out;
        }
        // own-delay variance: Σ_j q_j δ_j m δ_jᵀ − δ̄ m δ̄ᵀ on the (x_r, x_r) entry
        for r in 0..p {
            let d0 = &delta0[r];
            let md0 = m * d0;
            let mut second = q[0] * d0.dot(&md0);
            let mut mean = d0 * q[0];
            for (j, &qj) in q.iter().enumerate().skip(1) {
                let k = (j - 1) * p + r;
                second += qj * m[(k, k)];
                mean[k] += qj;
            }
            let first = mean.dot(&(m * &mean));
            out[(xo + r, xo + r)] += second - first;
        }
        out
    };

    // The operator preserves the PSD cone, so its spectral radius is itself an
    // eigenvalue; the shift makes it strictly dominant over rotating modes.
    let mut m = DMatrix::<f64>::identity(n, n) / n as f64;
    let mut last = f64::NAN;
    let mut growth = 0.0;
    for _ in 0..MS_ITER_CAP {
        let next = apply(&m) + &m * MS_SHIFT;
        growth = next.trace();
        if !growth.is_finite() {
            return Err(Error::InvalidArgument("mean-square iteration overflowed".into()));
        }
        m = next / growth;
        if (growth - last).abs() <= 1e-14 * growth {
            break;
        }
        last = growth;
    }
    Ok((growth - MS_SHIFT).max(0.0).sqrt())
}

/// Structure family for [`random_sparse_system`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Sparse `A` with random signs, diagonal positive `B`, diagonal nonnegative `D`.
    ASparseBdDiagonal,
    /// Sparse `A` plus dense `B` and `D`; all entries continuous (generic).
    General,
}

/// Knobs for [`random_sparse_system_with`]. Defaults follow the synthetic
/// benchmark: `D = 0`, identity noise, exponential-normalized delay pmf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSystemOptions {
    pub stability_bound: f64,
    /// Nonzero magnitudes of `A` are uniform on this range before rescaling.
    pub a_magnitude: (f64, f64),
    /// Diagonal of `B` is uniform on this range before rescaling.
    pub b_diagonal: (f64, f64),
    /// Upper end of the uniform range for `diag(D)`; 0 gives `D = 0`.
    pub d_diagonal_max: f64,
    /// Use the uniform pmf on `[0, theta_max]` instead of a random one.
    pub uniform_q: bool,
    /// Draw random SPD noise covariances instead of identities.
    pub random_noise: bool,
    /// Dirichlet concentration of the random pmf; 1 is uniform on the simplex.
    pub q_concentration: f64,
}

impl Default for RandomSystemOptions {
    fn default() -> Self {
        RandomSystemOptions {
            stability_bound: STABILITY_BOUND,
            a_magnitude: (0.5, 1.0),
            b_diagonal: (0.5, 1.0),
            d_diagonal_max: 0.0,
            uniform_q: false,
            random_noise: false,
            q_concentration: 1.0,
        }
    }
}

/// Random stable instance; deterministic in `seed`.
pub fn random_sparse_system(
    p: usize,
    nonzeros_per_row: usize,
    theta_max: usize,
    structure: Structure,
    seed: u64,
) -> Result<SystemParams> {
    random_sparse_system_with(
        p,
        nonzeros_per_row,
        theta_max,
        structure,
        seed,
        &RandomSystemOptions::default(),
    )
}

pub fn random_sparse_system_with(
    p: usize,
    nonzeros_per_row: usize,
    theta_max: usize,
    structure: Structure,
    seed: u64,
    opts: &RandomSystemOptions,
) -> Result<SystemParams> {
    if p == 0 || nonzeros_per_row == 0 {
        return Err(Error::InvalidArgument("p and nonzeros_per_row must be positive".into()));
    }
    if nonzeros_per_row > p {
        return Err(Error::InvalidArgument(format!(
            "nonzeros_per_row = {nonzeros_per_row} exceeds p = {p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = nonzeros_per_row as f64 / p as f64;
    let (alo, ahi) = opts.a_magnitude;
    let a = DMatrix::from_fn(p, p, |_, _| {
        if rng.random::<f64>() < density {
            let mag = rng.random_range(alo..=ahi);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        } else {
            0.0
        }
    });
    let (b, d) = match structure {
        Structure::ASparseBdDiagonal => {
            let (blo, bhi) = opts.b_diagonal;
            let b = DMatrix::from_fn(p, p, |i, j| if i == j { rng.random_range(blo..=bhi) } else { 0.0 });
            let d = DMatrix::from_fn(p, p, |i, j| {
                if i == j && opts.d_diagonal_max > 0.0 {
                    rng.random_range(0.0..=opts.d_diagonal_max)
                } else {
                    0.0
                }
            });
            (b, d)
        }
        Structure::General => {
            let b = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..=1.0));
            let d = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..=1.0));
            (b, d)
        }
    };
    let q = if opts.uniform_q {
        vec![1.0 / (theta_max + 1) as f64; theta_max + 1]
    } else {
        let gamma = Gamma::new(opts.q_concentration, 1.0)
            .map_err(|e| Error::InvalidArgument(format!("q_concentration: {e}")))?;
        let raw: Vec<f64> = (0..=theta_max).map(|_| gamma.sample(&mut rng)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x: f64| x / s).collect()
    };
    let (sigma_v, sigma_w) = if opts.random_noise {
        (random_spd(p, &mut rng), random_spd(p, &mut rng))
    } else {
        (DMatrix::identity(p, p), DMatrix::identity(p, p))
    };

    let mut params = SystemParams {
        p,
        theta_max,
        a,
        b,
        d,
        sigma_v,
        sigma_w,
        q,
    };
    let bound = opts.stability_bound;
    let mut rho = linalg::spectral_radius(&params.companion())?;
    if rho > bound {
        let mut scale = bound / rho;
        loop {
            params.a *= scale;
            params.b *= scale;
            params.d *= scale;
            rho = linalg::spectral_radius(&params.companion())?;
            if rho <= bound {
                break;
            }
            scale = 0.999;
        }
    }
    // Companion stability does not bound second moments once delays are
    // random; keep shrinking until the mean-square radius is in range too.
    while mean_square_radius(&params)? > bound {
        params.a *= 0.98;
        params.b *= 0.98;
        params.d *= 0.98;
    }
    Ok(params)
}

fn random_spd(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..=1.0));
    let mut s = &g * g.transpose() / p as f64 + DMatrix::identity(p, p) * 0.5;
    s = (&s + s.transpose()) * 0.5;
    s
}

/// A {-1, 0, +1} grid, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignPattern {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<i8>,
}

impl SignPattern {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SignPattern {
            rows,
            cols,
            entries: vec![0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<i8>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch("ragged sign pattern".into()));
        }
        if rows.iter().flatten().any(|v| !(-1..=1).contains(v)) {
            return Err(Error::InvalidArgument(
                "sign pattern entries must be -1, 0 or +1".into(),
            ));
        }
        Ok(SignPattern {
            rows: r,
            cols: c,
            entries: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.cols + j]
    }

    pub fn nonzeros(&self) -> usize {
        self.entries.iter().filter(|&&v| v != 0).count()
    }

    /// CSV rendering, one matrix row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|j| self.get(i, j).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// `sign(m_ij)` where `|m_ij| > threshold`, else 0.
pub fn sign_pattern_of(m: &DMatrix<f64>, threshold: f64) -> SignPattern {
    let (rows, cols) = m.shape();
    let mut entries = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = m[(i, j)];
            entries.push(if v.abs() > threshold { v.signum() as i8 } else { 0 });
        }
    }
    SignPattern { rows, cols, entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportMetrics {
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
}

/// Raw confusion counts behind [`SupportMetrics`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SupportCounts {
    /// Estimated sign equals a nonzero true sign.
    pub true_positive: usize,
    pub truth_nonzero: usize,
    /// Estimated nonzero where truth is zero.
    pub false_positive: usize,
    pub truth_zero: usize,
    pub estimated_nonzero: usize,
}

impl SupportCounts {
    pub fn metrics(&self) -> SupportMetrics {
        let tpr = if self.truth_nonzero == 0 {
            1.0
        } else {
            self.true_positive as f64 / self.truth_nonzero as f64
        };
        let fpr = if self.truth_zero == 0 {
            0.0
        } else {
            self.false_positive as f64 / self.truth_zero as f64
        };
        let denom = self.estimated_nonzero + self.truth_nonzero;
        let f1 = if denom == 0 {
            1.0
        } else {
            2.0 * self.true_positive as f64 / denom as f64
        };
        SupportMetrics { tpr, fpr, f1 }
    }
}

pub fn support_counts(estimated: &SignPattern, truth: &SignPattern, offdiag_only: bool) -> Result<SupportCounts> {
    if estimated.rows != truth.rows || estimated.cols != truth.cols {
        return Err(Error::DimensionMismatch(format!(
            "estimated pattern is {}x{}, truth is {}x{}",
            estimated.rows, estimated.cols, truth.rows, truth.cols
        )));
    }
    let mut c = SupportCounts::default();
    for i in 0..truth.rows {
        for j in 0..truth.cols {
            if offdiag_only && i == j {
                continue;
            }
            let (e, t) = (estimated.get(i, j), truth.get(i, j));
            if e != 0 {
                c.estimated_nonzero += 1;
            }
            if t != 0 {
                c.truth_nonzero += 1;
                if e == t {
                    c.true_positive += 1;
                }
            } else {
                c.truth_zero += 1;
                if e != 0 {
                    c.false_positive += 1;
                }
            }
        }
    }
    Ok(c)
}

/// TPR, FPR and F1 of a recovered sign pattern.
///
/// A true positive needs the right sign, not just the right support. An empty
/// truth support gives `tpr = 1`; an empty true-zero set gives `fpr = 0`.
pub fn support_metrics(estimated: &SignPattern, truth: &SignPattern, offdiag_only: bool) -> Result<SupportMetrics> {
    Ok(support_counts(estimated, truth, offdiag_only)?.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_system(p: usize) -> SystemParams {
        SystemParams::new(
            DMatrix::zeros(p, p),
            DMatrix::zeros(p, p),
            DMatrix::zeros(p, p),
            vec![1.0],
        )
    }

    #[test]
    fn zero_dynamics_validate() {
        assert!(validate_params(&zero_system(2)).is_ok());
    }

    #[test]
    fn pmf_sum_violation_is_named() {
        let mut p = zero_system(2);
        p.q = vec![0.5, 0.6];
        p.theta_max = 1;
        let r = validate_params(&p);
        assert!(r.violations.iter().any(|v| v.contains("pmf sums to 1.1")), "{r:?}");
    }

    #[test]
    fn unstable_a_is_flagged() {
        let mut p = zero_system(2);
        p.a = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.3]);
        // power iteration oracle on the companion matrix
        let mut x = nalgebra::DVector::from_element(4, 1.0);
        let h = p.companion();
        let mut rate = 0.0;
        for _ in 0..200 {
            let y = &h * &x;
            rate = y.norm() / x.norm();
            x = y.normalize();
        }
        assert!((rate - 1.2).abs() < 1e-9);
        let r = validate_params(&p);
        assert!(r.violations.iter().any(|v| v.starts_with("unstable")), "{r:?}");
    }

    #[test]
    fn non_psd_noise_flagged() {
        let mut p = zero_system(2);
        p.sigma_v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!validate_params(&p).is_ok());
    }

    #[test]
    fn spectral_radius_examples() {
        assert!((spectral_radius(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-12);
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.25]);
        assert!((spectral_radius(&m).unwrap() - 0.5).abs() < 1e-12);
        let half = DMatrix::identity(2, 2) * 0.5;
        let sys = SystemParams::new(half.clone(), DMatrix::zeros(2, 2), half, vec![1.0]);
        // block lower-triangular companion: eigenvalues of A and of B + D
        let h = sys.companion();
        let eig = h.clone().complex_eigenvalues();
        let oracle = eig.iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!((spectral_radius(&h).unwrap() - oracle).abs() < 1e-9);
        // the double eigenvalue is defective, so Schur only resolves it to ~sqrt(eps)
        assert!((oracle - 0.5).abs() < 1e-6);
    }

    #[test]
    fn mean_square_radius_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.2]);
        let b = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, 0.3]);
        let d = DMatrix::from_row_slice(2, 2, &[0.1, 0.05, 0.0, -0.1]);
        let sys = SystemParams::new(a, b, d, vec![1.0]);
        let ms = mean_square_radius(&sys).unwrap();
        assert!((ms - spectral_radius(&sys.companion()).unwrap()).abs() < 1e-8);

        // x_t = b·x_{t-1-Θ_t} + w_t: m_t = E[x_t²] obeys
        // m_t = (b²/3)(m_{t-1} + m_{t-2} + m_{t-3}), so r = ms² solves
        // r³ = (b²/3)(r² + r + 1)
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let fb = SystemParams::new(s(0.0), s(0.5), s(0.0), vec![1.0 / 3.0; 3]);
        let r = mean_square_radius(&fb).unwrap().powi(2);
        assert!((r.powi(3) - 0.25 / 3.0 * (r * r + r + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn spectral_radius_rejects_non_square() {
        assert!(matches!(
            spectral_radius(&DMatrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn random_system_default_scale() {
        let s = random_sparse_system(20, 5, 5, Structure::ASparseBdDiagonal, 1).unwrap();
        assert!(validate_params(&s).is_ok());
        let nnz = s.a.iter().filter(|v| **v != 0.0).count();
        assert!((60..=140).contains(&nnz), "nnz = {nnz}");
        assert_eq!(s.q.len(), 6);
        for i in 0..20 {
            for j in 0..20 {
                if i != j {
                    assert_eq!(s.b[(i, j)], 0.0);
                    assert_eq!(s.d[(i, j)], 0.0);
                }
            }
            assert!(s.b[(i, i)] > 0.0);
        }
    }

    #[test]
    fn random_system_scalar() {
        let s = random_sparse_system(1, 1, 0, Structure::ASparseBdDiagonal, 7).unwrap();
        assert_eq!(s.p, 1);
        assert_eq!(s.q, vec![1.0]);
        assert!(s.a[(0, 0)].abs() <= STABILITY_BOUND);
        assert!(validate_params(&s).is_ok());
    }

    #[test]
    fn random_system_deterministic() {
        let a = random_sparse_system(6, 2, 3, Structure::General, 42).unwrap();
        let b = random_sparse_system(6, 2, 3, Structure::General, 42).unwrap();
        assert_eq!(a, b);
        let c = random_sparse_system(6, 2, 3, Structure::General, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn nonzeros_per_row_bounded() {
        assert!(random_sparse_system(3, 4, 0, Structure::General, 0).is_err());
    }

    #[test]
    fn json_layout_is_row_major() {
        let mut s = zero_system(2);
        s.a = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let j: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(j["A"][0][1], 0.2);
        assert_eq!(j["A"][1][0], 0.3);
        for key in ["p", "theta_max", "A", "B", "D", "sigma_v", "sigma_w", "q"] {
            assert!(j.get(key).is_some(), "missing {key}");
        }
        assert_eq!(SystemParams::from_json(&s.to_json().unwrap()).unwrap(), s);
    }

    #[test]
    fn sign_pattern_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, -0.2, 0.0, 0.4]);
        let s = sign_pattern_of(&m, 0.05);
        assert_eq!(s, SignPattern::from_rows(&[vec![1, -1], vec![0, 1]]).unwrap());
        assert_eq!(sign_pattern_of(&m, f64::INFINITY).nonzeros(), 0);
        let small = DMatrix::from_element(1, 1, 0.04);
        assert_eq!(sign_pattern_of(&small, 0.05).get(0, 0), 0);
    }

    #[test]
    fn support_metrics_examples() {
        let truth = sign_pattern_of(
            &DMatrix::from_row_slice(3, 3, &[0.0, 1.0, -1.0, 0.0, 0.0, 1.0, 1.0, -1.0, 0.0]),
            0.0,
        );
        let m = support_metrics(&truth, &truth, false).unwrap();
        assert_eq!((m.tpr, m.fpr, m.f1), (1.0, 0.0, 1.0));

        let m = support_metrics(&SignPattern::zeros(3, 3), &truth, false).unwrap();
        assert_eq!((m.tpr, m.fpr), (0.0, 0.0));

        let truth = SignPattern::from_rows(&[vec![0, 1], vec![0, 0]]).unwrap();
        let est = SignPattern::from_rows(&[vec![0, 1], vec![-1, 0]]).unwrap();
        let m = support_metrics(&est, &truth, true).unwrap();
        assert_eq!((m.tpr, m.fpr), (1.0, 1.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_sign_is_not_a_true_positive() {
        let truth = SignPattern::from_rows(&[vec![0, 1], vec![0, 0]]).unwrap();
        let est = SignPattern::from_rows(&[vec![0, -1], vec![0, 0]]).unwrap();
        let m = support_metrics(&est, &truth, true).unwrap();
        assert_eq!((m.tpr, m.fpr), (0.0, 0.0));
    }

    #[test]
    fn support_metrics_dimension_mismatch() {
        assert!(support_metrics(&SignPattern::zeros(2, 2), &SignPattern::zeros(3, 3), true).is_err());
    }
}
