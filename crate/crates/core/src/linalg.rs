//! Dense linear-algebra helpers shared by the estimation modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Stacks the columns of `m` into a single vector.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    // nalgebra storage is column-major, so the raw slice already is vec(m).
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`] for a matrix with `nrows` rows.
pub fn unvec(v: &[f64], nrows: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(nrows, v.len() / nrows, v)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
        }
    }
    out
}

pub(crate) fn ensure_square(m: &DMatrix<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

const DENSE_EIGEN_LIMIT: usize = 128;
const POWER_ITER_CAP: usize = 10_000;

/// Largest eigenvalue magnitude of a square matrix.
///
/// Small matrices go through a real Schur decomposition; larger ones (or a
/// Schur failure) fall back to a growth-rate power iteration, which also
/// handles complex dominant pairs because it never looks at the direction.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    let n = ensure_square(m)?;
    if n == 0 {
        return Err(Error::EmptyMatrix);
    }
    if m.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    if n <= DENSE_EIGEN_LIMIT {
        if let Some(schur) = nalgebra::Schur::try_new(m.clone(), f64::EPSILON, 100_000) {
            let eig = schur.complex_eigenvalues();
            return Ok(eig.iter().map(|c| c.norm()).fold(0.0, f64::max));
        }
    }
    Ok(power_growth_rate(m))
}

/// Estimates `lim ||M^k x||^{1/k}` for a generic start vector.
pub(crate) fn power_growth_rate(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919 % 101) as f64 / 101.0));
    x /= x.norm();
    let mut log_growth = Vec::with_capacity(POWER_ITER_CAP);
    let mut last = f64::NAN;
    for k in 1..=POWER_ITER_CAP {
        let y = m * &x;
        let nrm = y.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        log_growth.push(nrm.ln());
        x = y / nrm;
        if k % 100 == 0 {
            let half = k / 2;
            let est = (log_growth[half..].iter().sum::<f64>() / (k - half) as f64).exp();
            if (est - last).abs() <= 1e-12 * est.max(1e-300) {
                return est;
            }
            last = est;
        }
    }
    let half = log_growth.len() / 2;
    (log_growth[half..].iter().sum::<f64>() / (log_growth.len() - half) as f64).exp()
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Square-root factor `L` with `L Lᵀ = m` for a symmetric PSD matrix.
///
/// Uses Cholesky when it succeeds, otherwise an eigendecomposition with
/// negative eigenvalues clipped to zero (exactly singular covariances such as
/// `Σ_V = 0` are legitimate model inputs).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut f = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Solution of `a x = b` together with a one-norm condition estimate of `a`.
pub struct CheckedSolve {
    pub x: DMatrix<f64>,
    pub condition: f64,
}

/// LU solve of `a x = b` guarded by a Hager one-norm condition estimate.
///
/// Fails with [`Error::SingularSystem`] when the estimate exceeds `max_condition`.
pub fn solve_checked(a: &DMatrix<f64>, b: &DMatrix<f64>, max_condition: f64) -> Result<CheckedSolve> {
    let n = ensure_square(a)?;
    if b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side has {} rows, system has {}",
            b.nrows(),
            n
        )));
    }
    let lu = a.clone().lu();
    let lu_t = a.transpose().lu();
    let inv_norm = match hager_inverse_one_norm(n, |v| lu.solve(v), |v| lu_t.solve(v)) {
        Some(v) => v,
        None => {
            return Err(Error::SingularSystem {
                condition: f64::INFINITY,
            })
        }
    };
    let condition = one_norm(a) * inv_norm;
    if !condition.is_finite() || condition > max_condition {
        return Err(Error::SingularSystem { condition });
    }
    let x = lu.solve(b).ok_or(Error::SingularSystem {
        condition: f64::INFINITY,
    })?;
    Ok(CheckedSolve { x, condition })
}

pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Hager's estimator of `||A^{-1}||_1` given solvers for `A` and `Aᵀ`.
fn hager_inverse_one_norm<S, T>(n: usize, solve: S, solve_t: T) -> Option<f64>
where
    S: Fn(&DVector<f64>) -> Option<DVector<f64>>,
    T: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0;
    for _ in 0..5 {
        let y = solve(&x)?;
        est = y.iter().map(|v| v.abs()).sum::<f64>();
        if !est.is_finite() {
            return None;
        }
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = solve_t(&xi)?;
        let (j, zmax) = z
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.abs()))
            .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
        if zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(n);
        x[j] = 1.0;
    }
    Some(est)
}

/// Solves `x m = r` for `x` (right division) via the transposed system.
pub fn right_divide(r: &DMatrix<f64>, m: &DMatrix<f64>, max_condition: f64) -> Result<DMatrix<f64>> {
    if r.ncols() != m.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "cannot right-divide {}x{} by {}x{}",
            r.nrows(),
            r.ncols(),
            m.nrows(),
            m.ncols()
        )));
    }
    let sol = solve_checked(&m.transpose(), &r.transpose(), max_condition)?;
    Ok(sol.x.transpose())
}

/// Inverse with a condition guard.
pub fn inverse_checked(m: &DMatrix<f64>, max_condition: f64) -> Result<DMatrix<f64>> {
    let n = ensure_square(m)?;
    Ok(solve_checked(m, &DMatrix::identity(n, n), max_condition)?.x)
}
