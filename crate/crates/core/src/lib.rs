//! Latent-variable linear dynamical systems whose observations read their
//! latent memory through random per-coordinate delays.
//!
//! The model is
//!
//! ```text
//! z_t = A z_{t-1} + B x_{t-1} + v_t          v_t ~ N(0, Σ_V)
//! x_t = z_{t-Θ_t} + D x_{t-1} + w_t          w_t ~ N(0, Σ_W)
//! ```
//!
//! where every coordinate of `Θ_t` is drawn independently from a delay pmf `q`
//! supported on `[0, θ_max]`.
//!
//! The crate covers the whole pipeline: simulation ([`simulate`]), sample and
//! exact lagged covariances ([`covariance`]), block-Toeplitz rank tests and
//! closed-form recovery of the identifiable parameter combinations
//! ([`identify`]), convex estimation of the sign-sparsity pattern of `A`
//! ([`learn`]), a Granger-Lasso baseline ([`granger`]) and the benchmark
//! harness ([`harness`]).

pub mod covariance;
pub mod error;
pub mod granger;
pub mod harness;
pub mod identify;
pub mod learn;
pub mod linalg;
pub mod model;
mod serde_matrix;
pub mod simulate;

pub use covariance::{
    exact_lag_covariances, exact_lag_covariances_with, noise_cross_covariances, sample_lag_covariances, vec_kron_apply,
    LagCovSeq, ZeroLagClosure,
};
pub use error::{Error, Result};
pub use granger::{granger_fit, granger_predict, latentlag_predict, normalized_mse, GrangerConfig, GrangerEstimate};
pub use harness::{
    ingest_csv, mean_roc, roc_from_sweep, run_synthetic, standardize, ExperimentConfig, ExperimentSummary, RocCurve,
    SystemSpec,
};
pub use identify::{
    build_toeplitz, detect_theta_max, numeric_rank, recover_combos_general, recover_combos_theta01, BlockToeplitz,
    IdentifiedCombos,
};
pub use learn::{
    cross_validate, fit, objective, project_diag_pos, project_l1_ball, project_simplex, CvResult, CvRow, LearnConfig,
    LearnEstimate, SignThreshold,
};
pub use model::{
    random_sparse_system, sign_pattern_of, spectral_radius, support_metrics, validate_params, SignPattern, Structure,
    SupportMetrics, SystemParams,
};
pub use simulate::{simulate, SimConfig, Trajectory};
