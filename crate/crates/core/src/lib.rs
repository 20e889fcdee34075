//! Factored PSD matrices (low-rank, low-rank-plus-isotropic, low-rank-plus-
//! diagonal) evolving under Riccati-like matrix ODEs, with every per-step
//! kernel linear in the ambient dimension.

pub mod bench;
pub mod config;
pub mod error;
pub mod factored;
pub mod integrate;
pub mod kalman;
pub mod projection;
pub mod riccati;
pub mod symop;
pub mod viflow;

pub use bench::{run_projection_bench, BenchReport, BenchRow, BenchSpec};
pub use config::{Diagnostics, Tolerances};
pub use error::{Error, Result};
pub use factored::{sample_ppca_gaussian, DiagPos, FactoredPsd, SpdSmall, Stiefel};
pub use integrate::{
    euler_drive, retract_spd_exp, retract_stiefel_qr, step_state, IntegratorConfig,
};
pub use kalman::{
    brownian_experiment, kalman_gain_apply, make_swarm_scenario, run_filter, simulate_truth,
    swarm_experiment, BrownianReport, Control, FilterCov, FilterRun, FilterVariant,
    MeasurementStream, SwarmResult, SwarmRow, SwarmScenario,
};
pub use projection::{
    project, project_fa_dense, project_fa_fast, project_low_rank, project_ppca,
    residual_norm_sq, tangent_to_dense, DiagDelta, TangentDelta,
};
pub use riccati::{
    dense_riccati_rhs, fa_riccati_delta, integrate_dense_riccati, lowrank_riccati_delta,
    ppca_riccati_delta, rhs_symop, LinOpA, NoiseCov, RiccatiParams, SparseC,
};
pub use symop::SymOp;
pub use viflow::{
    gaussian_target_reference, max_principal_angle, stein_factors, top_eigenspace, vi_ppca_delta,
    vi_run, vi_symop, ExpectationMode, SteinFactors, TargetPotential, ViRow, ViRunResult,
};
