//! Centralized tolerance defaults and run diagnostics counters.

/// Numerical tolerances and size guards. One record, shared by every module,
/// so that no kernel carries its own ad-hoc magic numbers.
#[derive(Debug, Clone)]
pub struct Tolerances {
    /// Orthonormality defect allowed on Stiefel factors after
    /// construction or retraction.
    pub eps_orth: f64,
    /// Symmetry defect allowed on small symmetric matrices.
    pub eps_sym: f64,
    /// Largest ambient dimension for which dense d x d materialization
    /// (oracle paths) is permitted.
    pub d_max_dense: usize,
    /// Relative threshold on the smallest singular value of R - sI below
    /// which the PPCA solve switches to a Tikhonov-shifted system.
    pub eps_sing_rel: f64,
    /// Threshold on |1 - 2*Dbar_ii| below which the fast FA path falls back
    /// to the regularized normal-equation solve.
    pub eps_phi: f64,
    /// Regularization added in the FA fallback solve.
    pub tikhonov: f64,
    /// Cap on the total factor width of a structured symmetric operator.
    pub r_max: usize,
    /// Relative floor factor for the positivity clamp on s and psi during
    /// integration: floor = clamp_rel * (current + 1).
    pub clamp_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            eps_orth: 1e-10,
            eps_sym: 1e-12,
            d_max_dense: 2000,
            eps_sing_rel: 1e-10,
            eps_phi: 1e-8,
            tikhonov: 1e-10,
            r_max: 512,
            clamp_rel: 1e-12,
        }
    }
}

/// Counters for the documented degenerate-case fallbacks. Surfaced by the
/// CLI in the metadata sidecar of every run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Times the PPCA solve hit a near-singular R - sI and applied the
    /// Tikhonov shift.
    pub near_singular_rs: u64,
    /// Times the fast FA path hit |1 - 2*Dbar_ii| < eps_phi (or a singular
    /// small system) and used the regularized fallback solve.
    pub ill_conditioned_phi: u64,
    /// Times the integrator clamped s or a psi entry at the positivity floor.
    pub positivity_clamps: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.near_singular_rs += other.near_singular_rs;
        self.ill_conditioned_phi += other.ill_conditioned_phi;
        self.positivity_clamps += other.positivity_clamps;
    }
}
