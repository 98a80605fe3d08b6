//! Independent check of the exact lag covariances against the stationary
//! second moment of the augmented state `s_t = [z_t, ..., z_{t-θ}, x_t]`,
//! obtained by fixed-point iteration with the delay expectation taken
//! coordinate by coordinate.

use latentlag::model::{random_sparse_system_with, RandomSystemOptions, Structure, SystemParams};
use latentlag::{exact_lag_covariances, LagCovSeq};
use nalgebra::DMatrix;

/// Linear map from `(s_{t-1}, v_t, w_t)` to the candidate blocks
/// `[r_0, ..., r_θ, z_t, z_{t-1}, ..., z_{t-θ+1}, u]` where `x_t(i) = r_{Θ(i)}(i) + u(i)`.
struct Candidates {
    m: DMatrix<f64>,
    noise: DMatrix<f64>,
}

fn candidates(prm: &SystemParams) -> Candidates {
    let (p, th) = (prm.p, prm.theta_max);
    let ns = (th + 2) * p;
    let nc = (th + 1) * p + (th + 1) * p + p;
    let mut m = DMatrix::zeros(nc, ns);
    let mut noise = DMatrix::zeros(nc, 2 * p);
    let zt = |m: &mut DMatrix<f64>, row: usize| {
        m.view_mut((row, 0), (p, p)).copy_from(&prm.a);
        m.view_mut((row, (th + 1) * p), (p, p)).copy_from(&prm.b);
    };
    // r_0 = z_t
    zt(&mut m, 0);
    noise.view_mut((0, 0), (p, p)).fill_with_identity();
    // r_k = z_{t-k} = block k-1 of s_{t-1}
    for k in 1..=th {
        m.view_mut((k * p, (k - 1) * p), (p, p)).fill_with_identity();
    }
    // new latent blocks
    let base = (th + 1) * p;
    zt(&mut m, base);
    noise.view_mut((base, 0), (p, p)).fill_with_identity();
    for k in 1..=th {
        m.view_mut((base + k * p, (k - 1) * p), (p, p)).fill_with_identity();
    }
    // u = D x_{t-1} + w_t
    let u = base + (th + 1) * p;
    m.view_mut((u, (th + 1) * p), (p, p)).copy_from(&prm.d);
    noise.view_mut((u, p), (p, p)).fill_with_identity();
    Candidates { m, noise }
}

/// `E[Φ C Φᵀ]` with `Φ` mapping candidates to the new state.
fn expected_state_cov(prm: &SystemParams, c: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, th) = (prm.p, prm.theta_max);
    let latent = (th + 1) * p;
    let u = 2 * latent;
    let phi = mean_selection(prm);
    let mut out = &phi * c * phi.transpose();
    // same-coordinate x entries share one delay draw
    for i in 0..p {
        let mut v = 0.0;
        for (k, &qk) in prm.q.iter().enumerate() {
            let (a, b) = (k * p + i, u + i);
            v += qk * (c[(a, a)] + 2.0 * c[(a, b)] + c[(b, b)]);
        }
        out[(latent + i, latent + i)] = v;
    }
    out
}

fn oracle(prm: &SystemParams, max_lag: usize) -> LagCovSeq {
    let (p, th) = (prm.p, prm.theta_max);
    let cand = candidates(prm);
    let mut noise_cov = DMatrix::zeros(2 * p, 2 * p);
    noise_cov.view_mut((0, 0), (p, p)).copy_from(&prm.sigma_v);
    noise_cov.view_mut((p, p), (p, p)).copy_from(&prm.sigma_w);
    let q = &cand.noise * noise_cov * cand.noise.transpose();
    let ns = (th + 2) * p;
    let mut state = DMatrix::zeros(ns, ns);
    for _ in 0..100_000 {
        let c = &cand.m * &state * cand.m.transpose() + &q;
        let next = expected_state_cov(prm, &c);
        let diff = (&next - &state).abs().max();
        state = next;
        if diff < 1e-15 {
            break;
        }
    }
    // E[s_{t+h} x_tᵀ] = F̄^h E[s_t x_tᵀ], F̄ the mean transition
    let fbar = mean_selection(prm) * &cand.m;
    let xs = (th + 1) * p;
    let mut cross = state.columns(xs, p).into_owned();
    let mut sigmas = Vec::new();
    for _ in 0..=max_lag {
        sigmas.push(cross.rows(xs, p).into_owned());
        cross = &fbar * cross;
    }
    LagCovSeq::new(sigmas).unwrap()
}

/// Mean selection matrix from candidates to state.
fn mean_selection(prm: &SystemParams) -> DMatrix<f64> {
    let (p, th) = (prm.p, prm.theta_max);
    let latent = (th + 1) * p;
    let u = 2 * latent;
    let mut phi = DMatrix::zeros(latent + p, u + p);
    for r in 0..latent {
        phi[(r, latent + r)] = 1.0;
    }
    for i in 0..p {
        for (k, &qk) in prm.q.iter().enumerate() {
            phi[(latent + i, k * p + i)] = qk;
        }
        phi[(latent + i, u + i)] = 1.0;
    }
    phi
}

fn compare(prm: &SystemParams, tol: f64) {
    let max_lag = 2 * prm.theta_max + 2;
    let exact = exact_lag_covariances(prm, max_lag).unwrap();
    let want = oracle(prm, max_lag);
    for i in 0..=max_lag {
        let err = (&exact.sigmas[i] - &want.sigmas[i]).abs().max();
        let scale = want.sigmas[0].abs().max();
        assert!(err <= tol * scale, "lag {i}: error {err:e}");
    }
}

#[test]
fn delayed_feedback_scalar() {
    let z = DMatrix::zeros(1, 1);
    let prm = SystemParams::new(
        z.clone(),
        DMatrix::from_element(1, 1, 0.5),
        z.clone(),
        vec![1.0 / 3.0; 3],
    )
    .with_noise(z, DMatrix::identity(1, 1));
    compare(&prm, 1e-10);
    let want = oracle(&prm, 0);
    assert!((want.sigmas[0][(0, 0)] - 4.0 / 3.0).abs() < 1e-10);
}

#[test]
fn generic_systems_match_fixed_point() {
    for seed in 0..12u64 {
        let p = [2, 3, 4][seed as usize % 3];
        let theta = (seed / 3) as usize % 4;
        let opts = RandomSystemOptions {
            random_noise: true,
            q_concentration: 4.0,
            ..RandomSystemOptions::default()
        };
        let prm = random_sparse_system_with(p, p, theta, Structure::General, 900 + seed, &opts).unwrap();
        compare(&prm, 1e-8);
    }
}

#[test]
fn sparse_diagonal_systems_match_fixed_point() {
    for seed in 0..4u64 {
        let opts = RandomSystemOptions {
            d_diagonal_max: 0.5,
            ..RandomSystemOptions::default()
        };
        let prm = random_sparse_system_with(5, 2, 2, Structure::ASparseBdDiagonal, seed, &opts).unwrap();
        compare(&prm, 1e-8);
    }
}
