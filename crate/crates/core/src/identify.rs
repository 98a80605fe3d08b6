//! Block-Toeplitz rank tests for the maximum delay and closed-form recovery of
//! the identifiable parameter combinations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::LagCovSeq;
use crate::error::{Error, Result};
use crate::linalg;

/// Default relative singular-value tolerance for exact covariances.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

/// Relative off-diagonal mass of `G1` above which `B` is reported as non-diagonal.
const OFF_DIAGONAL_WARN: f64 = 1e-6;
/// Spread of a delay-ratio block's diagonal above which a warning is raised.
const RATIO_SPREAD_WARN: f64 = 1e-4;

/// `M^(k)`: block `(r, c)` is `Σ_{X_{k+1-r+c}}` for `r, c ∈ [0, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockToeplitz {
    pub k: usize,
    pub p: usize,
    pub m: DMatrix<f64>,
}

pub fn build_toeplitz(covs: &LagCovSeq, k: usize) -> Result<BlockToeplitz> {
    covs.require(2 * k + 1)?;
    let p = covs.p;
    let n = (k + 1) * p;
    let mut m = DMatrix::zeros(n, n);
    for r in 0..=k {
        for c in 0..=k {
            m.view_mut((r * p, c * p), (p, p))
                .copy_from(&covs.sigmas[k + 1 - r + c]);
        }
    }
    Ok(BlockToeplitz { k, p, m })
}

/// Number of singular values above `rel_tol · σ_max`, and `σ_min / σ_max`.
pub fn numeric_rank(m: &DMatrix<f64>, rel_tol: f64) -> Result<(usize, f64)> {
    if m.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rel_tol = {rel_tol} must lie in (0, 1)"
        )));
    }
    let s = linalg::singular_values(m);
    let smax = s[0];
    if smax == 0.0 {
        return Ok((0, 0.0));
    }
    let rank = s.iter().filter(|&&v| v > rel_tol * smax).count();
    Ok((rank, s[s.len() - 1] / smax))
}

/// `M^(k)` whitened into canonical correlations, `L⁻¹ M^(k) L⁻ᵀ`.
///
/// Rows of `M^(k)` index the future stack `[x_{t+k+1} .. x_{t+1}]` and columns
/// the past stack `[x_t .. x_{t-k}]`; both have covariance `T_k = L Lᵀ` with
/// block `(r, c) = Σ_{X_{c-r}}`. Whitening preserves rank and puts the singular
/// values in `[0, 1]`, so the relative tolerance no longer has to absorb the
/// scale spread between short and long lags. Falls back to the raw matrix when
/// `T_k` is not positive definite.
pub fn whitened_toeplitz(covs: &LagCovSeq, k: usize) -> Result<DMatrix<f64>> {
    let bt = build_toeplitz(covs, k)?;
    let p = covs.p;
    let n = (k + 1) * p;
    let mut t = DMatrix::zeros(n, n);
    for r in 0..=k {
        for c in 0..=k {
            t.view_mut((r * p, c * p), (p, p))
                .copy_from(&covs.get(c as isize - r as isize)?);
        }
    }
    let t = (&t + t.transpose()) * 0.5;
    let Some(chol) = t.cholesky() else {
        return Ok(bt.m);
    };
    let left = chol
        .l()
        .solve_lower_triangular(&bt.m)
        .ok_or_else(|| Error::SingularMatrix("lag-0 block Toeplitz factor".into()))?;
    let both = chol
        .l()
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::SingularMatrix("lag-0 block Toeplitz factor".into()))?;
    Ok(both.transpose())
}

/// Rank diagnostics of `M^(k)` for one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub k: usize,
    pub rank: usize,
    pub full: usize,
    pub ratio: f64,
}

/// Ranks of the whitened `M^(1) .. M^(k_max)`.
pub fn rank_profile(covs: &LagCovSeq, k_max: usize, rel_tol: f64) -> Result<Vec<RankReport>> {
    covs.require(2 * k_max + 1)?;
    (1..=k_max)
        .map(|k| {
            let (rank, ratio) = numeric_rank(&whitened_toeplitz(covs, k)?, rel_tol)?;
            Ok(RankReport {
                k,
                rank,
                full: (k + 1) * covs.p,
                ratio,
            })
        })
        .collect()
}

/// Largest `k ≤ k_max` whose `M^(k)` is numerically full rank.
///
/// A result of 1 means `θ_max ∈ {0, 1}`, which the covariances cannot
/// distinguish; a result `k ≥ 2` means `θ_max = k`.
pub fn detect_theta_max(covs: &LagCovSeq, k_max: usize, rel_tol: f64) -> Result<usize> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be positive".into()));
    }
    rank_profile(covs, k_max, rel_tol)?
        .iter()
        .rev()
        .find(|r| r.rank == r.full)
        .map(|r| r.k)
        .ok_or(Error::NoFullRank { k_max })
}

/// Identifiable combinations recovered from lagged covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedCombos {
    /// `A + q_0 B + D`
    #[serde(rename = "A_plus_q0B_plus_D", with = "crate::serde_matrix")]
    pub l1: DMatrix<f64>,
    /// `q_1 B − A D`
    #[serde(rename = "q1B_minus_AD", with = "crate::serde_matrix")]
    pub l2: DMatrix<f64>,
    /// `q_{θ_max} B`, only when `θ_max ≥ 2`.
    #[serde(rename = "qmaxB", with = "crate::serde_matrix::option")]
    pub b_up_to_scale: Option<DMatrix<f64>>,
    /// `q_θ / q_{θ_max}` for `θ ∈ [2, θ_max − 1]`.
    pub q_ratios: Option<Vec<f64>>,
    pub detected_k: usize,
    /// Delay bounds consistent with the covariances (`[0, 1]` when ambiguous).
    pub theta_max_candidates: Vec<usize>,
    pub warnings: Vec<String>,
}

fn full_rank_toeplitz(covs: &LagCovSeq, k: usize) -> Result<BlockToeplitz> {
    let bt = build_toeplitz(covs, k)?;
    let (rank, ratio) = numeric_rank(&whitened_toeplitz(covs, k)?, DEFAULT_REL_TOL)?;
    if rank < bt.m.nrows() {
        return Err(Error::SingularMatrix(format!(
            "M^({k}) has numeric rank {rank} < {} (canonical σ_min/σ_max = {ratio:e})",
            bt.m.nrows()
        )));
    }
    Ok(bt)
}

fn invert(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (rank, ratio) = numeric_rank(m, DEFAULT_REL_TOL)?;
    if rank < m.nrows() {
        return Err(Error::SingularMatrix(format!(
            "{what} is ill-conditioned (σ_min/σ_max = {ratio:e})"
        )));
    }
    linalg::inverse_checked(m, f64::INFINITY)
}

/// Coefficient blocks `G` solving `[Σ_0 .. Σ_k] = G · M^(k)`.
fn toeplitz_coefficients(covs: &LagCovSeq, k: usize) -> Result<Vec<DMatrix<f64>>> {
    let bt = full_rank_toeplitz(covs, k)?;
    let p = covs.p;
    let mut lhs = DMatrix::zeros(p, (k + 1) * p);
    for j in 0..=k {
        lhs.view_mut((0, j * p), (p, p)).copy_from(&covs.sigmas[j]);
    }
    let g = linalg::right_divide(&lhs, &bt.m, f64::INFINITY)?;
    Ok((0..=k).map(|r| g.columns(r * p, p).into_owned()).collect())
}

/// Recovery when `M^(1)` is the largest full-rank Toeplitz matrix.
///
/// Solves `[Σ_0 Σ_1] = [N1 N2] M^(1)`; then `q_1 B − A D = N1⁻¹` and
/// `A + q_0 B + D = −N1⁻¹ N2`.
pub fn recover_combos_theta01(covs: &LagCovSeq) -> Result<IdentifiedCombos> {
    let g = toeplitz_coefficients(covs, 1)?;
    let l2 = invert(&g[0], "N1")?;
    let l1 = -(&l2 * &g[1]);
    Ok(IdentifiedCombos {
        l1,
        l2,
        b_up_to_scale: None,
        q_ratios: None,
        detected_k: 1,
        theta_max_candidates: vec![0, 1],
        warnings: Vec::new(),
    })
}

/// Recovery for `θ_max ≥ 2` from `[Σ_0 .. Σ_θ] = [G_1 .. G_{θ+1}] M^(θ)`.
///
/// `G_1 = (q_θ B)⁻¹`, `G_2 = −G_1 (A + q_0 B + D)`, `G_3 = −G_1 (q_1 B − A D)`,
/// and the remaining blocks are `−(q_j / q_θ) I` for `j = 2 .. θ−1`.
pub fn recover_combos_general(covs: &LagCovSeq, theta_max: usize) -> Result<IdentifiedCombos> {
    if theta_max < 2 {
        return Err(Error::InvalidArgument(format!(
            "theta_max = {theta_max}; use recover_combos_theta01 below 2"
        )));
    }
    let g = toeplitz_coefficients(covs, theta_max)?;
    let mut warnings = Vec::new();
    let g1 = &g[0];
    let off_mass = off_diagonal_norm(g1);
    if off_mass > OFF_DIAGONAL_WARN * g1.norm() {
        warnings.push(format!(
            "G1 has relative off-diagonal mass {:e}; B is not diagonal or the model is misspecified",
            off_mass / g1.norm()
        ));
    }
    let b_scaled = invert(g1, "G1")?;
    let l1 = -(&b_scaled * &g[1]);
    let l2 = -(&b_scaled * &g[2]);
    let mut ratios = Vec::with_capacity(theta_max.saturating_sub(2));
    for (j, block) in g.iter().enumerate().skip(3) {
        let diag: Vec<f64> = block.diagonal().iter().map(|v| -v).collect();
        let mean = diag.iter().sum::<f64>() / diag.len() as f64;
        let spread = diag.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        if spread > RATIO_SPREAD_WARN * mean.abs().max(1.0) {
            warnings.push(format!(
                "q ratio for delay {} varies across coordinates by {spread:e}",
                j - 1
            ));
        }
        ratios.push(mean);
    }
    Ok(IdentifiedCombos {
        l1,
        l2,
        b_up_to_scale: Some(b_scaled),
        q_ratios: Some(ratios),
        detected_k: theta_max,
        theta_max_candidates: vec![theta_max],
        warnings,
    })
}

/// Detects `θ_max` and dispatches to the matching recovery.
pub fn identify(covs: &LagCovSeq, k_max: usize, rel_tol: f64) -> Result<IdentifiedCombos> {
    let k = detect_theta_max(covs, k_max, rel_tol)?;
    if k == 1 {
        recover_combos_theta01(covs)
    } else {
        recover_combos_general(covs, k)
    }
}

fn off_diagonal_norm(m: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{exact_lag_covariances, exact_lag_covariances_with, ZeroLagClosure};
    use crate::model::SystemParams;

    fn scalar_delay_system() -> SystemParams {
        let h = DMatrix::identity(2, 2) * 0.5;
        SystemParams::new(h.clone(), DMatrix::zeros(2, 2), h, vec![1.0])
    }

    fn delayed_feedback(b: f64) -> SystemParams {
        SystemParams::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2) * b,
            DMatrix::zeros(2, 2),
            vec![1.0 / 3.0; 3],
        )
        .with_noise(DMatrix::zeros(2, 2), DMatrix::identity(2, 2))
    }

    #[test]
    fn toeplitz_layout() {
        let sig: Vec<DMatrix<f64>> = (0..6).map(|i| DMatrix::from_element(1, 1, i as f64)).collect();
        let covs = LagCovSeq::new(sig).unwrap();
        assert_eq!(build_toeplitz(&covs, 0).unwrap().m[(0, 0)], 1.0);
        let m = build_toeplitz(&covs, 2).unwrap().m;
        assert_eq!(m[(0, 0)], 3.0);
        assert_eq!(m[(2, 0)], 1.0);
        assert_eq!(m[(0, 2)], 5.0);
        assert!(matches!(build_toeplitz(&covs, 3), Err(Error::InsufficientLags { .. })));
    }

    #[test]
    fn scalar_delay_system_toeplitz_determinant() {
        let covs = exact_lag_covariances(&scalar_delay_system(), 3).unwrap();
        let bt = build_toeplitz(&covs, 1).unwrap();
        // coordinate 0 of each block
        let s = |r: usize, c: usize| bt.m[(2 * r, 2 * c)];
        let det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
        let want = (53.0f64 / 27.0).powi(2) - (82.0 / 27.0) * (65.0 / 54.0);
        assert!((det - want).abs() < 1e-10);
        assert!(det.abs() > 0.19);
    }

    #[test]
    fn numeric_rank_examples() {
        assert_eq!(numeric_rank(&DMatrix::identity(4, 4), 1e-8).unwrap().0, 4);
        let u = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(numeric_rank(&(&u * u.transpose()), 1e-8).unwrap().0, 1);
        assert!(numeric_rank(&DMatrix::zeros(0, 0), 1e-8).is_err());
    }

    #[test]
    fn whitening_preserves_rank() {
        let covs = exact_lag_covariances(&scalar_delay_system(), 7).unwrap();
        for k in 1..=3 {
            let raw = numeric_rank(&build_toeplitz(&covs, k).unwrap().m, 1e-8).unwrap().0;
            let w = whitened_toeplitz(&covs, k).unwrap();
            assert_eq!(numeric_rank(&w, 1e-8).unwrap().0, raw);
            assert!(linalg::singular_values(&w)[0] <= 1.0 + 1e-10);
        }
    }

    #[test]
    fn delayed_feedback_toeplitz_full_rank() {
        let covs = exact_lag_covariances_with(&delayed_feedback(0.5), 7, ZeroLagClosure::Decoupled).unwrap();
        let bt = build_toeplitz(&covs, 2).unwrap();
        // per coordinate: [[12,6,5],[12,12,6],[12,12,12]] / 42
        let want = [[12.0, 6.0, 5.0], [12.0, 12.0, 6.0], [12.0, 12.0, 12.0]];
        for (r, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((bt.m[(2 * r, 2 * c)] - v / 42.0).abs() < 1e-12);
            }
        }
        assert_eq!(numeric_rank(&bt.m, 1e-8).unwrap().0, 6);
    }

    #[test]
    fn detect_on_scalar_delay_system() {
        let covs = exact_lag_covariances(&scalar_delay_system(), 9).unwrap();
        assert_eq!(detect_theta_max(&covs, 4, 1e-8).unwrap(), 1);
    }

    #[test]
    fn detect_on_delayed_feedback() {
        for closure in [ZeroLagClosure::Coupled, ZeroLagClosure::Decoupled] {
            let covs = exact_lag_covariances_with(&delayed_feedback(0.5), 9, closure).unwrap();
            assert_eq!(detect_theta_max(&covs, 4, 1e-8).unwrap(), 2);
        }
    }

    #[test]
    fn scalar_theta0_recovery() {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let prm = SystemParams::new(s(0.3), s(0.2), s(0.1), vec![1.0]);
        let covs = exact_lag_covariances(&prm, 3).unwrap();
        let ic = recover_combos_theta01(&covs).unwrap();
        assert!((ic.l1[(0, 0)] - 0.6).abs() < 1e-10);
        assert!((ic.l2[(0, 0)] + 0.03).abs() < 1e-10);
        assert_eq!(ic.theta_max_candidates, vec![0, 1]);
    }

    #[test]
    fn white_noise_is_singular() {
        let z = DMatrix::zeros(2, 2);
        let prm = SystemParams::new(z.clone(), z.clone(), z, vec![1.0]);
        let covs = exact_lag_covariances(&prm, 3).unwrap();
        assert!(matches!(recover_combos_theta01(&covs), Err(Error::SingularMatrix(_))));
    }

    #[test]
    fn theta1_recovery_nondiagonal() {
        let a = DMatrix::from_row_slice(3, 3, &[0.3, 0.0, -0.2, 0.1, 0.2, 0.0, 0.0, -0.3, 0.1]);
        let b = DMatrix::from_row_slice(3, 3, &[0.4, 0.1, 0.0, -0.1, 0.3, 0.05, 0.0, 0.2, 0.5]);
        let d = DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.05, 0.0, -0.1, 0.0, 0.1, 0.0, 0.2]);
        let prm = SystemParams::new(a, b, d, vec![0.6, 0.4]);
        let covs = exact_lag_covariances(&prm, 5).unwrap();
        let ic = recover_combos_theta01(&covs).unwrap();
        assert!((&ic.l1 - prm.l1_combo()).abs().max() < 1e-8);
        assert!((&ic.l2 - prm.l2_combo()).abs().max() < 1e-8);
    }

    #[test]
    fn delayed_feedback_general_recovery() {
        let prm = delayed_feedback(0.5);
        let covs = exact_lag_covariances(&prm, 7).unwrap();
        let ic = recover_combos_general(&covs, 2).unwrap();
        let sixth = DMatrix::identity(2, 2) / 6.0;
        assert!((&ic.l1 - &sixth).abs().max() < 1e-10);
        assert!((&ic.l2 - &sixth).abs().max() < 1e-10);
        assert!((ic.b_up_to_scale.unwrap() - &sixth).abs().max() < 1e-10);
        assert!(ic.q_ratios.unwrap().is_empty());
        assert!(ic.warnings.is_empty());
    }

    #[test]
    fn uniform_q_ratios() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.2]);
        let b = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.4]);
        let prm = SystemParams::new(a, b, DMatrix::zeros(2, 2), vec![0.2; 5]);
        let covs = exact_lag_covariances(&prm, 11).unwrap();
        let ic = recover_combos_general(&covs, 4).unwrap();
        for r in ic.q_ratios.unwrap() {
            assert!((r - 1.0).abs() < 1e-8);
        }
    }
}
