//! Lagged covariances: sample estimates and the exact stationary solution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, kron};
use crate::model::{mean_square_radius, validate_params_with_bound, SystemParams};
use crate::simulate::Trajectory;

/// Condition-number ceiling for the exact moment system.
pub const MAX_CONDITION: f64 = 1e12;

/// `Σ_{X_0} .. Σ_{X_max_lag}` with `Σ_{X_i} = E[x_t x_{t-i}ᵀ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagCovSeq {
    pub p: usize,
    pub max_lag: usize,
    #[serde(with = "crate::serde_matrix::vec")]
    pub sigmas: Vec<DMatrix<f64>>,
}

impl LagCovSeq {
    pub fn new(sigmas: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = sigmas.first().ok_or(Error::EmptyMatrix)?;
        let p = first.nrows();
        if sigmas.iter().any(|s| s.shape() != (p, p)) {
            return Err(Error::DimensionMismatch("lag covariances must all be p x p".into()));
        }
        if sigmas.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("non-finite covariance entry".into()));
        }
        Ok(LagCovSeq {
            p,
            max_lag: sigmas.len() - 1,
            sigmas,
        })
    }

    /// `Σ_{X_lag}`, realizing negative lags as transposes.
    pub fn get(&self, lag: isize) -> Result<DMatrix<f64>> {
        let k = lag.unsigned_abs();
        let s = self.sigmas.get(k).ok_or(Error::InsufficientLags {
            needed: k,
            available: self.max_lag,
        })?;
        Ok(if lag < 0 { s.transpose() } else { s.clone() })
    }

    pub fn require(&self, needed: usize) -> Result<()> {
        if self.max_lag < needed {
            return Err(Error::InsufficientLags {
                needed,
                available: self.max_lag,
            });
        }
        Ok(())
    }

    /// Keeps lags `0..=max_lag`.
    pub fn truncated(&self, max_lag: usize) -> Result<Self> {
        self.require(max_lag)?;
        LagCovSeq::new(self.sigmas[..=max_lag].to_vec())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: LagCovSeq = serde_json::from_str(s)?;
        let seq = LagCovSeq::new(raw.sigmas)?;
        if seq.p != raw.p || seq.max_lag != raw.max_lag {
            return Err(Error::DimensionMismatch("p / max_lag disagree with sigmas".into()));
        }
        Ok(seq)
    }
}

/// `Σ̂_{X_i} = (1/T) Σ_{t=i+1}^{T} x_t x_{t-i}ᵀ`; the lag-0 term is symmetrized.
pub fn sample_lag_covariances(traj: &Trajectory, max_lag: usize) -> Result<LagCovSeq> {
    let t = traj.len();
    if max_lag >= t {
        return Err(Error::InvalidArgument(format!(
            "max_lag = {max_lag} must be below T = {t}"
        )));
    }
    let x = &traj.x;
    let inv_t = 1.0 / t as f64;
    let sigmas = (0..=max_lag)
        .map(|i| {
            let n = t - i;
            let head = x.rows(i, n);
            let tail = x.rows(0, n);
            let s = head.transpose() * tail * inv_t;
            if i == 0 {
                (&s + s.transpose()) * 0.5
            } else {
                s
            }
        })
        .collect();
    LagCovSeq::new(sigmas)
}

/// `vec(s1 · r · s2)`, the action of `(s2ᵀ ⊗ s1)` on `vec(r)`.
pub fn vec_kron_apply(s1: &DMatrix<f64>, r: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = linalg::ensure_square(s1)?;
    if r.shape() != (p, p) || s2.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "vec_kron_apply needs three {p}x{p} matrices"
        )));
    }
    Ok(linalg::vec(&(s1 * r * s2)))
}

/// `Σ_{VX_{-i}} = E[v_t x_{t+i}ᵀ]` for `i = 0..=depth`.
///
/// Runs the joint recursion with `Σ_{VZ_{-m}} = E[v_t z_{t+m}ᵀ]`:
/// `Σ_{VZ_0} = Σ_V`, `Σ_{VZ_{-m}} = Σ_{VZ_{1-m}} Aᵀ + Σ_{VX_{1-m}} Bᵀ`, and
/// `Σ_{VX_{-m}} = Σ_θ q_θ Σ_{VZ_{θ-m}} + Σ_{VX_{1-m}} Dᵀ`, where terms with
/// positive index vanish because `v_t` is independent of the past.
pub fn noise_cross_covariances(params: &SystemParams, depth: usize) -> Vec<DMatrix<f64>> {
    let p = params.p;
    let zero = DMatrix::<f64>::zeros(p, p);
    let (at, bt, dt) = (params.a.transpose(), params.b.transpose(), params.d.transpose());
    // vz[m] = Σ_{VZ_{-m}}, vx[m] = Σ_{VX_{-m}}
    let mut vz: Vec<DMatrix<f64>> = Vec::with_capacity(depth + 1);
    let mut vx: Vec<DMatrix<f64>> = Vec::with_capacity(depth + 1);
    for m in 0..=depth {
        let z = if m == 0 {
            params.sigma_v.clone()
        } else {
            &vz[m - 1] * &at + &vx[m - 1] * &bt
        };
        vz.push(z);
        let mut x = if m == 0 { zero.clone() } else { &vx[m - 1] * &dt };
        for (theta, &q) in params.q.iter().enumerate().take(m + 1) {
            if q != 0.0 {
                x += &vz[m - theta] * q;
            }
        }
        vx.push(x);
    }
    vx
}

/// How the lag-0 equation treats a coordinate's correlation with its own delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroLagClosure {
    /// Exact stationary moments of the simulated process. A coordinate's
    /// observation and its own delayed latent read share the same delay draw,
    /// so the diagonal of `Σ_{X_0}` picks up `Σ_Z` directly.
    #[default]
    Coupled,
    /// Treats every entry of `Σ_{X_0}` like an off-diagonal one, i.e. as if
    /// `x_t(r)` were independent of `Θ_t(r)`. Agrees with `Coupled` when
    /// `θ_max = 0` and otherwise understates the diagonal.
    Decoupled,
}

/// Exact stationary covariances with the default [`ZeroLagClosure::Coupled`].
pub fn exact_lag_covariances(params: &SystemParams, max_lag: usize) -> Result<LagCovSeq> {
    exact_lag_covariances_with(params, max_lag, ZeroLagClosure::Coupled)
}

/// Solves the stationary moment equations as one dense linear system, then
/// extends to higher lags with
/// `Σ_{X_{i+1}} = (A+D)Σ_{X_i} − ADΣ_{X_{i-1}} + B Σ_θ q_θ Σ_{X_{i-θ}}`.
pub fn exact_lag_covariances_with(params: &SystemParams, max_lag: usize, closure: ZeroLagClosure) -> Result<LagCovSeq> {
    let report = validate_params_with_bound(params, 1.0 - 1e-12);
    if !report.is_ok() {
        return Err(Error::InvalidParams(report.violations));
    }
    let ms = mean_square_radius(params)?;
    if ms >= 1.0 {
        return Err(Error::InvalidParams(vec![format!(
            "no stationary second moments: mean-square radius {ms:.6} is not below 1"
        )]));
    }
    let mut sigmas = MomentSystem::new(params, closure).solve()?.x;
    let theta = params.theta_max;
    let ad = &params.a * &params.d;
    let apd = &params.a + &params.d;
    while sigmas.len() <= max_lag {
        let i = sigmas.len() - 1;
        let lag = |k: isize| -> DMatrix<f64> {
            if k >= 0 {
                sigmas[k as usize].clone()
            } else {
                sigmas[(-k) as usize].transpose()
            }
        };
        let mut delayed = DMatrix::zeros(params.p, params.p);
        for th in 0..=theta {
            if params.q[th] != 0.0 {
                delayed += lag(i as isize - th as isize) * params.q[th];
            }
        }
        let next = &apd * &sigmas[i] - &ad * &lag(i as isize - 1) + &params.b * delayed;
        sigmas.push(next);
    }
    sigmas.truncate(max_lag + 1);
    LagCovSeq::new(sigmas)
}

/// Unknown blocks of the stationary moment system.
#[derive(Debug, Clone, Copy)]
enum Unknown {
    /// `Σ_{X_i}`, `i ∈ [0, max(θ,1)]`
    X(usize),
    /// `Σ_{Z_i} = E[z_t z_{t-i}ᵀ]`, `i ∈ [0, θ]`
    Z(usize),
    /// `Σ_{ZX_i} = E[z_t x_{t-i}ᵀ]`, `i ∈ [-θ, max(θ,1)]`
    Zx(isize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rows {
    All,
    Diagonal,
    OffDiagonal,
}

struct MomentSystem<'a> {
    params: &'a SystemParams,
    closure: ZeroLagClosure,
    theta: usize,
    top: usize,
    p: usize,
    lhs: DMatrix<f64>,
    rhs: DMatrix<f64>,
    eq: usize,
}

impl<'a> MomentSystem<'a> {
    fn new(params: &'a SystemParams, closure: ZeroLagClosure) -> Self {
        let theta = params.theta_max;
        let top = theta.max(1);
        let p = params.p;
        let blocks = (top + 1) + (theta + 1) + (theta + top + 1);
        let n = blocks * p * p;
        MomentSystem {
            params,
            closure,
            theta,
            top,
            p,
            lhs: DMatrix::zeros(n, n),
            rhs: DMatrix::zeros(n, 1),
            eq: 0,
        }
    }

    fn block_count(&self) -> usize {
        self.lhs.nrows() / (self.p * self.p)
    }

    fn index(&self, u: Unknown) -> usize {
        let (x_len, z_len) = (self.top + 1, self.theta + 1);
        match u {
            Unknown::X(i) => i,
            Unknown::Z(i) => x_len + i,
            Unknown::Zx(i) => x_len + z_len + (i + self.theta as isize) as usize,
        }
    }

    fn row_selected(&self, rows: Rows, local: usize) -> bool {
        let (r, c) = (local % self.p, local / self.p);
        match rows {
            Rows::All => true,
            Rows::Diagonal => r == c,
            Rows::OffDiagonal => r != c,
        }
    }

    /// Adds `s1 · U · s2` (or `s1 · Uᵀ · s2`) to the current equation block.
    fn term(&mut self, rows: Rows, s1: &DMatrix<f64>, u: Unknown, transposed: bool, s2: &DMatrix<f64>) {
        let p = self.p;
        let pp = p * p;
        let coeff = kron(&s2.transpose(), s1);
        let row0 = self.eq * pp;
        let col0 = self.index(u) * pp;
        for local_row in 0..pp {
            if !self.row_selected(rows, local_row) {
                continue;
            }
            for local_col in 0..pp {
                let c = coeff[(local_row, local_col)];
                if c == 0.0 {
                    continue;
                }
                // vec(Uᵀ) permutes vec(U): entry (k,l) of Uᵀ is entry (l,k) of U
                let target = if transposed {
                    let (k, l) = (local_col % p, local_col / p);
                    l + k * p
                } else {
                    local_col
                };
                self.lhs[(row0 + local_row, col0 + target)] += c;
            }
        }
    }

    fn constant(&mut self, rows: Rows, m: &DMatrix<f64>) {
        let pp = self.p * self.p;
        let v = linalg::vec(m);
        for local in 0..pp {
            if self.row_selected(rows, local) {
                self.rhs[(self.eq * pp + local, 0)] += v[local];
            }
        }
    }

    fn next_equation(&mut self) {
        self.eq += 1;
    }

    fn assemble(&mut self) {
        let prm = self.params;
        let p = self.p;
        let id = DMatrix::<f64>::identity(p, p);
        let neg_id = -&id;
        let (a, b, d) = (&prm.a, &prm.b, &prm.d);
        let at = a.transpose();
        let bt = b.transpose();
        let dt = d.transpose();
        let neg_a = -a;
        let neg_b = -b;
        let neg_d = -d;
        let (theta, top) = (self.theta, self.top);
        let q = prm.q.clone();
        use Rows::All;
        use Unknown::{Zx, X, Z};

        // Σ_Z = AΣ_ZAᵀ + AΣ_ZX Bᵀ + BΣ_ZXᵀAᵀ + BΣ_X Bᵀ + Σ_V
        self.term(All, &id, Z(0), false, &id);
        self.term(All, &neg_a, Z(0), false, &at);
        self.term(All, &neg_a, Zx(0), false, &bt);
        self.term(All, &neg_b, Zx(0), true, &at);
        self.term(All, &neg_b, X(0), false, &bt);
        self.constant(All, &prm.sigma_v);
        self.next_equation();

        // Σ_{Z_i} = AΣ_{Z_{i-1}} + BΣ_{ZX_{1-i}}ᵀ
        for i in 1..=theta {
            self.term(All, &id, Z(i), false, &id);
            self.term(All, &neg_a, Z(i - 1), false, &id);
            self.term(All, &neg_b, Zx(1 - i as isize), true, &id);
            self.next_equation();
        }

        // Σ_{ZX_i} = AΣ_{ZX_{i-1}} + BΣ_{X_{i-1}}
        for i in 1..=top {
            self.term(All, &id, Zx(i as isize), false, &id);
            self.term(All, &neg_a, Zx(i as isize - 1), false, &id);
            self.term(All, &neg_b, X(i - 1), false, &id);
            self.next_equation();
        }

        // Σ_{ZX_{-j}} = Σ_θ q_θ Σ_{Z_{θ-j}} + Σ_{ZX_{1-j}} Dᵀ for j ∈ [0, θ],
        // expanding x_t column by column; Σ_{Z_{-k}} = Σ_{Z_k}ᵀ
        for j in 0..=theta {
            self.term(All, &id, Zx(-(j as isize)), false, &id);
            self.term(All, &neg_id, Zx(1 - j as isize), false, &dt);
            for (th, &qt) in q.iter().enumerate() {
                if qt == 0.0 {
                    continue;
                }
                let k = th as isize - j as isize;
                self.term(All, &(&neg_id * qt), Z(k.unsigned_abs()), k < 0, &id);
            }
            self.next_equation();
        }

        // Σ_X = Σ_θ q_θ Σ_{ZX_{-θ}} + DΣ_{X_1}ᵀ + Σ_W off the diagonal; on the
        // diagonal (coupled closure) the own-delay read contributes Σ_Z and
        // Σ_θ q_θ Σ_{ZX_{1-θ}} Dᵀ instead.
        let (offdiag_rows, diag_rows) = match self.closure {
            ZeroLagClosure::Coupled => (Rows::OffDiagonal, Some(Rows::Diagonal)),
            ZeroLagClosure::Decoupled => (Rows::All, None),
        };
        self.term(All, &id, X(0), false, &id);
        self.term(All, &neg_d, X(1), true, &id);
        self.constant(All, &prm.sigma_w);
        for (th, &qt) in q.iter().enumerate() {
            if qt != 0.0 {
                self.term(offdiag_rows, &(&neg_id * qt), Zx(-(th as isize)), false, &id);
            }
        }
        if let Some(rows) = diag_rows {
            self.term(rows, &neg_id, Z(0), false, &id);
            for (th, &qt) in q.iter().enumerate() {
                if qt != 0.0 {
                    self.term(rows, &(&neg_id * qt), Zx(1 - th as isize), false, &dt);
                }
            }
        }
        self.next_equation();

        // Σ_{X_i} = Σ_θ q_θ Σ_{ZX_{i-θ}} + DΣ_{X_{i-1}}
        for i in 1..=top {
            self.term(All, &id, X(i), false, &id);
            self.term(All, &neg_d, X(i - 1), false, &id);
            for (th, &qt) in q.iter().enumerate() {
                if qt != 0.0 {
                    self.term(All, &(&neg_id * qt), Zx(i as isize - th as isize), false, &id);
                }
            }
            self.next_equation();
        }

        debug_assert_eq!(self.eq, self.block_count());
    }

    fn solve(mut self) -> Result<Moments> {
        self.assemble();
        let sol = linalg::solve_checked(&self.lhs, &self.rhs, MAX_CONDITION)?;
        let pp = self.p * self.p;
        let block = |u: Unknown| {
            let start = self.index(u) * pp;
            linalg::unvec(&sol.x.as_slice()[start..start + pp], self.p)
        };
        let theta = self.theta as isize;
        let mut m = Moments {
            x: (0..=self.top).map(|i| block(Unknown::X(i))).collect(),
            z: (0..=self.theta).map(|i| block(Unknown::Z(i))).collect(),
            zx: (-theta..=self.top as isize).map(|i| block(Unknown::Zx(i))).collect(),
            theta: self.theta,
        };
        m.x[0] = (&m.x[0] + m.x[0].transpose()) * 0.5;
        if linalg::min_sym_eigenvalue(&m.x[0]) < -1e-8 * m.x[0].abs().max().max(1.0) {
            return Err(Error::SingularSystem {
                condition: sol.condition,
            });
        }
        Ok(m)
    }
}

/// Solved stationary moment blocks. Only `x` feeds the lag extension; the
/// latent blocks are kept for the consistency tests.
#[cfg_attr(not(test), allow(dead_code))]
struct Moments {
    x: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    /// `zx[j]` is `Σ_{ZX_{j-θ}}`
    zx: Vec<DMatrix<f64>>,
    theta: usize,
}

impl Moments {
    #[cfg(test)]
    fn zx(&self, i: isize) -> &DMatrix<f64> {
        &self.zx[(i + self.theta as isize) as usize]
    }
}
