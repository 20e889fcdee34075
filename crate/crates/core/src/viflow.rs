//! Wasserstein-gradient Gaussian variational flow targeting
//! π(x) ∝ exp(−V(x)/ε): mean ODE μ̇ = −E[∇V], covariance ODE
//! Ṗ = 2εI − E[∇²V]P − PE[∇²V], with the Hessian expectation replaced by the
//! Stein estimate D Bᵀ built from fresh samples each step. The covariance is
//! kept in PPCA form by tangent projection.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::{Diagnostics, Tolerances};
use crate::error::{Error, Result};
use crate::factored::{sample_ppca_gaussian, FactoredPsd, SpdSmall, Stiefel};
use crate::integrate::{step_state, IntegratorConfig};
use crate::projection::{project_ppca, TangentDelta};
use crate::riccati::{ppca_riccati_delta, LinOpA, NoiseCov, RiccatiParams, SparseC};
use crate::symop::SymOp;

/// Target distribution, defined through ∇V and the temperature ε. Gaussian
/// targets additionally carry (m, M) so oracle modes and error metrics can
/// use the closed form.
pub struct TargetPotential {
    grad: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub epsilon: f64,
    pub exact: Option<(DVector<f64>, SpdSmall)>,
}

impl TargetPotential {
    pub fn new(
        epsilon: f64,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::NotPd);
        }
        Ok(TargetPotential {
            grad: Box::new(grad),
            epsilon,
            exact: None,
        })
    }

    /// V(x) = ½(x−m)ᵀM⁻¹(x−m), so ∇V(x) = M⁻¹(x−m).
    pub fn gaussian(m: DVector<f64>, m_cov: SpdSmall, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::NotPd);
        }
        let chol = m_cov.cholesky();
        let m_for_grad = m.clone();
        Ok(TargetPotential {
            grad: Box::new(move |x| {
                let mut v = x - &m_for_grad;
                chol.solve_mut(&mut v);
                v
            }),
            epsilon,
            exact: Some((m, m_cov)),
        })
    }

    pub fn grad_v(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad)(x)
    }
}

/// Stein factorization: D = (1/√K)[∇V(x¹) … ∇V(x^K)],
/// B = (1/√K)[x¹−μ … x^K−μ], so that D Bᵀ ≈ E[∇²V]·P by Stein's lemma.
#[derive(Debug, Clone)]
pub struct SteinFactors {
    pub d: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub k: usize,
}

pub fn stein_factors(
    potential: &TargetPotential,
    mu: &DVector<f64>,
    samples: &DMatrix<f64>,
) -> Result<SteinFactors> {
    let k = samples.ncols();
    if k == 0 {
        return Err(Error::EmptySampleSet);
    }
    if samples.nrows() != mu.len() {
        return Err(Error::DimensionMismatch(format!(
            "samples have {} rows, mean has length {}",
            samples.nrows(),
            mu.len()
        )));
    }
    let dim = mu.len();
    let scale = 1.0 / (k as f64).sqrt();
    let mut d = DMatrix::zeros(dim, k);
    let mut b = DMatrix::zeros(dim, k);
    for j in 0..k {
        let x: DVector<f64> = samples.column(j).into_owned();
        let g = potential.grad_v(&x);
        for i in 0..dim {
            d[(i, j)] = g[i] * scale;
            b[(i, j)] = (x[i] - mu[i]) * scale;
        }
    }
    Ok(SteinFactors { d, b, k })
}

/// The sampled covariance vector field 2εI − (DBᵀ + BDᵀ) as a SymOp.
pub fn vi_symop(factors: &SteinFactors, epsilon: f64) -> Result<SymOp> {
    let dim = factors.d.nrows();
    // −(DBᵀ + BDᵀ) by polarization; the width cap is raised to 3K because the
    // sample count, not the structural rank, sets the width here.
    let terms = vec![
        (-1.0, &factors.d + &factors.b),
        (1.0, factors.d.clone()),
        (1.0, factors.b.clone()),
    ];
    let cap = (3 * factors.k).max(Tolerances::default().r_max);
    SymOp::with_width_limit(
        dim,
        terms,
        Some(DVector::from_element(dim, 2.0 * epsilon)),
        cap,
    )
}

/// PPCA projection of the sampled field; intermediates stay d×K / p×K / p×p.
pub fn vi_ppca_delta(
    u: &Stiefel,
    r: &SpdSmall,
    s: f64,
    factors: &SteinFactors,
    epsilon: f64,
    tol: &Tolerances,
    diags: &mut Diagnostics,
) -> Result<TangentDelta> {
    let h = vi_symop(factors, epsilon)?;
    project_ppca(&h, u, r, s, tol, diags)
}

#[derive(Debug, Clone, Copy)]
pub enum ExpectationMode {
    /// Fresh K-sample batch every step (the experimental scheme).
    MonteCarlo { k: usize },
    /// Closed-form expectations for a Gaussian target; oracle-backed runs.
    ExactGaussian,
}

#[derive(Debug, Clone)]
pub struct ViRow {
    pub t: f64,
    /// ‖μ − m‖ when the exact target is known, NaN otherwise.
    pub mu_err: f64,
    /// Largest principal angle between span(U) and the top-p eigenspace of M
    /// when known, NaN otherwise.
    pub angle: f64,
    pub s: f64,
}

#[derive(Debug, Clone)]
pub struct ViRunResult {
    pub rows: Vec<ViRow>,
    pub mu: DVector<f64>,
    pub cov: FactoredPsd,
    pub diagnostics: Diagnostics,
}

/// Largest principal angle (radians) between span(U) and the span of the
/// orthonormal columns of `basis`.
pub fn max_principal_angle(u: &Stiefel, basis: &DMatrix<f64>) -> f64 {
    let overlap = basis.transpose() * u.matrix();
    let svd = overlap.svd(false, false);
    let sigma_min = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    sigma_min.clamp(-1.0, 1.0).acos()
}

/// Orthonormal basis of the top-p eigenspace of M. Helper for target-aligned
/// diagnostics.
pub fn top_eigenspace(m: &SpdSmall, p: usize) -> DMatrix<f64> {
    let eig = m.matrix().clone().symmetric_eigen();
    let d = m.size();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
    });
    let mut out = DMatrix::zeros(d, p);
    for (col, &idx) in order.iter().take(p).enumerate() {
        out.set_column(col, &eig.eigenvectors.column(idx));
    }
    out
}

/// Runs the mean/covariance flow from (μ₀, PPCA P₀). Sampling (Monte-Carlo
/// mode) happens after discretization, one fresh batch per Euler step, and
/// the same batch drives both the mean and the covariance update.
pub fn vi_run(
    potential: &TargetPotential,
    mu0: &DVector<f64>,
    cov0: &FactoredPsd,
    mode: ExpectationMode,
    config: &IntegratorConfig,
    seed: u64,
) -> Result<ViRunResult> {
    config.validate()?;
    let dim = cov0.d();
    let p = cov0.p();
    if mu0.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "mu0 has length {}, covariance has d = {}",
            mu0.len(),
            dim
        )));
    }
    if !matches!(cov0, FactoredPsd::Ppca { .. }) {
        return Err(Error::MismatchedVariant);
    }
    let tol = &config.tolerances;
    let mut diags = Diagnostics::default();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Exact-expectation machinery, available only for Gaussian targets.
    let exact_setup = match mode {
        ExpectationMode::ExactGaussian => {
            let (m, m_cov) = potential.exact.as_ref().ok_or(Error::MismatchedVariant)?;
            let m_inv = m_cov
                .matrix()
                .clone()
                .cholesky()
                .ok_or(Error::NotPd)?
                .inverse();
            let params = RiccatiParams::new(
                LinOpA::from_dense(&(&m_inv * -1.0))?,
                SymOp::scaled_identity(dim, 2.0 * potential.epsilon),
                SparseC::none(dim),
                NoiseCov::isotropic(0, 1.0)?,
            )?;
            Some((m.clone(), m_inv, params))
        }
        ExpectationMode::MonteCarlo { .. } => None,
    };
    let basis = potential
        .exact
        .as_ref()
        .map(|(_, m_cov)| top_eigenspace(m_cov, p));

    let mut mu = mu0.clone();
    let mut cov = cov0.clone();
    let mut rows = Vec::new();
    let record = |t: f64, mu: &DVector<f64>, cov: &FactoredPsd, rows: &mut Vec<ViRow>| {
        let (mu_err, angle) = match (&potential.exact, &basis) {
            (Some((m, _)), Some(b)) => {
                ((mu - m).norm(), max_principal_angle(cov.stiefel(), b))
            }
            _ => (f64::NAN, f64::NAN),
        };
        let s = match cov {
            FactoredPsd::Ppca { s, .. } => *s,
            _ => unreachable!(),
        };
        rows.push(ViRow { t, mu_err, angle, s });
    };
    record(0.0, &mu, &cov, &mut rows);

    let h = config.h;
    let n = config.n_steps();
    for step in 0..n {
        let (grad_mean, delta) = match mode {
            ExpectationMode::MonteCarlo { k } => {
                let samples = sample_ppca_gaussian(&mu, &cov, k, &mut rng)?;
                let factors = stein_factors(potential, &mu, &samples)?;
                // E[∇V] ≈ (1/K)Σ∇V(xᵏ) = D·1/√K.
                let ones = DVector::from_element(k, 1.0 / (k as f64).sqrt());
                let grad_mean = &factors.d * ones;
                let (u, r, s) = match &cov {
                    FactoredPsd::Ppca { u, r, s } => (u, r, *s),
                    _ => unreachable!(),
                };
                let delta =
                    vi_ppca_delta(u, r, s, &factors, potential.epsilon, tol, &mut diags)?;
                (grad_mean, delta)
            }
            ExpectationMode::ExactGaussian => {
                let (m, m_inv, params) = exact_setup.as_ref().unwrap();
                let grad_mean = m_inv * (&mu - m);
                let (u, r, s) = match &cov {
                    FactoredPsd::Ppca { u, r, s } => (u, r, *s),
                    _ => unreachable!(),
                };
                let delta = ppca_riccati_delta(u, r, s, params, tol, &mut diags)?;
                (grad_mean, delta)
            }
        };
        mu -= grad_mean * h;
        cov = step_state(&cov, &delta, h, tol, &mut diags)?;
        if mu.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        if step + 1 == n || (step + 1) % config.record_every == 0 {
            record((step + 1) as f64 * h, &mu, &cov, &mut rows);
        }
    }
    Ok(ViRunResult {
        rows,
        mu,
        cov,
        diagnostics: diags,
    })
}

/// Dense RK4 oracle for the Gaussian-target flow:
/// μ̇ = −M⁻¹(μ−m), Ṗ = 2εI − M⁻¹P − PM⁻¹; converges to (m, εM).
pub fn gaussian_target_reference(
    m: &DVector<f64>,
    m_cov: &SpdSmall,
    epsilon: f64,
    mu0: &DVector<f64>,
    p0: &DMatrix<f64>,
    config: &IntegratorConfig,
) -> Result<Vec<(f64, DVector<f64>, DMatrix<f64>)>> {
    config.validate()?;
    let dim = m.len();
    if dim > config.tolerances.d_max_dense {
        return Err(Error::TooLargeToDensify {
            d: dim,
            limit: config.tolerances.d_max_dense,
        });
    }
    let m_inv = m_cov
        .matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPd)?
        .inverse();
    let rhs_mu = |mu: &DVector<f64>| -(&m_inv * (mu - m));
    let rhs_p = |p: &DMatrix<f64>| {
        let mp = &m_inv * p;
        let out = DMatrix::identity(dim, dim) * (2.0 * epsilon) - &mp - mp.transpose();
        (&out + out.transpose()) * 0.5
    };
    let h = config.h;
    let n = config.n_steps();
    let mut mu = mu0.clone();
    let mut p = (p0 + p0.transpose()) * 0.5;
    let mut out = vec![(0.0, mu.clone(), p.clone())];
    for step in 0..n {
        let (a1, b1) = (rhs_mu(&mu), rhs_p(&p));
        let (a2, b2) = (rhs_mu(&(&mu + &a1 * (h / 2.0))), rhs_p(&(&p + &b1 * (h / 2.0))));
        let (a3, b3) = (rhs_mu(&(&mu + &a2 * (h / 2.0))), rhs_p(&(&p + &b2 * (h / 2.0))));
        let (a4, b4) = (rhs_mu(&(&mu + &a3 * h)), rhs_p(&(&p + &b3 * h)));
        mu += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        p += (b1 + b2 * 2.0 + b3 * 2.0 + b4) * (h / 6.0);
        if mu.iter().any(|x| !x.is_finite()) || p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        if step + 1 == n || (step + 1) % config.record_every == 0 {
            out.push(((step + 1) as f64 * h, mu.clone(), p.clone()));
        }
    }
    Ok(out)
}
