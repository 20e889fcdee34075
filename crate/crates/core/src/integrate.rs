//! Retraction-based explicit Euler driver. Each step projects the vector
//! field (caller-supplied), then retracts: QR on the Stiefel factor,
//! exponential map on the small PD core, additive update with a positivity
//! clamp on s / ψ.

use nalgebra::DMatrix;

use crate::config::{Diagnostics, Tolerances};
use crate::error::{Error, Result};
use crate::factored::{thin_qr_positive, DiagPos, FactoredPsd, SpdSmall, Stiefel};
use crate::projection::{DiagDelta, TangentDelta};

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    /// Time step.
    pub h: f64,
    /// Horizon.
    pub t_end: f64,
    /// Observer stride, in steps. Step 0 and the final step are always
    /// reported.
    pub record_every: usize,
    pub tolerances: Tolerances,
}

impl IntegratorConfig {
    pub fn new(h: f64, t_end: f64, record_every: usize) -> Result<Self> {
        let cfg = IntegratorConfig {
            h,
            t_end,
            record_every: record_every.max(1),
            tolerances: Tolerances::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !(self.t_end >= self.h) {
            return Err(Error::DimensionMismatch(format!(
                "need 0 < h <= t_end, got h = {}, t_end = {}",
                self.h, self.t_end
            )));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        ((self.t_end / self.h).round() as usize).max(1)
    }
}

/// QR retraction on the Stiefel manifold: qf(U + h δU) with the positive-
/// diagonal sign convention. Exactly the identity when δU = 0.
pub fn retract_stiefel_qr(u: &Stiefel, d_u: &DMatrix<f64>, h: f64) -> Result<Stiefel> {
    if d_u.iter().all(|&x| x == 0.0) {
        return Ok(u.clone());
    }
    let (q, _) = thin_qr_positive(&(u.matrix() + d_u * h))?;
    Stiefel::new(q)
}

/// Exponential retraction on PD matrices: R½ exp(h R⁻½ δR R⁻½) R½.
/// Exactly the identity when δR = 0.
pub fn retract_spd_exp(r: &SpdSmall, d_r: &DMatrix<f64>, h: f64) -> Result<SpdSmall> {
    if d_r.iter().all(|&x| x == 0.0) {
        return Ok(r.clone());
    }
    let (sq, isq) = r.sqrt_pair();
    let mid = (&isq * d_r * &isq) * h;
    let mid = (&mid + mid.transpose()) * 0.5;
    let eig = mid.symmetric_eigen();
    let p = r.size();
    let mut exp_mid = DMatrix::zeros(p, p);
    for k in 0..p {
        let v = eig.eigenvectors.column(k);
        exp_mid += v * v.transpose() * eig.eigenvalues[k].exp();
    }
    SpdSmall::new(&sq * exp_mid * &sq)
}

fn clamp_floor(current: f64, rel: f64) -> f64 {
    rel * (current + 1.0)
}

/// One retraction step. Clamps s / ψ at the positivity floor and counts
/// clamps in `diags`.
pub fn step_state(
    state: &FactoredPsd,
    delta: &TangentDelta,
    h: f64,
    tol: &Tolerances,
    diags: &mut Diagnostics,
) -> Result<FactoredPsd> {
    match (state, &delta.diag) {
        (FactoredPsd::LowRank { u, r }, DiagDelta::None) => {
            let u_new = retract_stiefel_qr(u, &delta.d_u, h)?;
            let r_new = retract_spd_exp(r, &delta.d_r, h)?;
            FactoredPsd::low_rank(u_new, r_new)
        }
        (FactoredPsd::Ppca { u, r, s }, DiagDelta::Isotropic(ds)) => {
            let u_new = retract_stiefel_qr(u, &delta.d_u, h)?;
            let r_new = retract_spd_exp(r, &delta.d_r, h)?;
            let mut s_new = s + h * ds;
            let floor = clamp_floor(*s, tol.clamp_rel);
            if s_new < floor {
                s_new = floor;
                diags.positivity_clamps += 1;
            }
            FactoredPsd::ppca(u_new, r_new, s_new)
        }
        (FactoredPsd::Fa { u, r, psi }, DiagDelta::Diagonal(d_psi)) => {
            let u_new = retract_stiefel_qr(u, &delta.d_u, h)?;
            let r_new = retract_spd_exp(r, &delta.d_r, h)?;
            let mut v = psi.values().clone();
            for i in 0..v.len() {
                let floor = clamp_floor(v[i], tol.clamp_rel);
                v[i] += h * d_psi[i];
                if v[i] < floor {
                    v[i] = floor;
                    diags.positivity_clamps += 1;
                }
            }
            FactoredPsd::fa(u_new, r_new, DiagPos::new(v)?)
        }
        _ => Err(Error::MismatchedVariant),
    }
}

fn delta_is_zero(delta: &TangentDelta) -> bool {
    let diag_zero = match &delta.diag {
        DiagDelta::None => true,
        DiagDelta::Isotropic(ds) => *ds == 0.0,
        DiagDelta::Diagonal(v) => v.iter().all(|&x| x == 0.0),
    };
    diag_zero
        && delta.d_u.iter().all(|&x| x == 0.0)
        && delta.d_r.iter().all(|&x| x == 0.0)
}

fn delta_is_finite(delta: &TangentDelta) -> bool {
    let diag_ok = match &delta.diag {
        DiagDelta::None => true,
        DiagDelta::Isotropic(ds) => ds.is_finite(),
        DiagDelta::Diagonal(v) => v.iter().all(|x| x.is_finite()),
    };
    diag_ok
        && delta.d_u.iter().all(|x| x.is_finite())
        && delta.d_r.iter().all(|x| x.is_finite())
}

fn state_is_finite(state: &FactoredPsd) -> bool {
    let factors_ok = state.stiefel().matrix().iter().all(|x| x.is_finite())
        && state.core().matrix().iter().all(|x| x.is_finite());
    let diag_ok = match state {
        FactoredPsd::LowRank { .. } => true,
        FactoredPsd::Ppca { s, .. } => s.is_finite(),
        FactoredPsd::Fa { psi, .. } => psi.values().iter().all(|x| x.is_finite()),
    };
    factors_ok && diag_ok
}

/// Explicit Euler with retractions. `delta_fn(t, state, diags)` supplies the
/// projected vector field; `observer(t, state, diags)` fires at step 0, every
/// `record_every` steps, and at the end. A delta that is exactly zero leaves
/// the state bit-for-bit unchanged.
pub fn euler_drive<F, O>(
    state: FactoredPsd,
    mut delta_fn: F,
    config: &IntegratorConfig,
    mut observer: O,
) -> Result<(FactoredPsd, Diagnostics)>
where
    F: FnMut(f64, &FactoredPsd, &mut Diagnostics) -> Result<TangentDelta>,
    O: FnMut(f64, &FactoredPsd, &Diagnostics),
{
    config.validate()?;
    let mut diags = Diagnostics::default();
    let mut state = state;
    let n = config.n_steps();
    observer(0.0, &state, &diags);
    for step in 0..n {
        let t = step as f64 * config.h;
        let delta = delta_fn(t, &state, &mut diags)?;
        if !delta_is_finite(&delta) {
            return Err(Error::NonFiniteState { step });
        }
        if !delta_is_zero(&delta) {
            state = step_state(&state, &delta, config.h, &config.tolerances, &mut diags)?;
        }
        if !state_is_finite(&state) {
            return Err(Error::NonFiniteState { step });
        }
        let done = step + 1 == n;
        if done || (step + 1) % config.record_every == 0 {
            observer((step + 1) as f64 * config.h, &state, &diags);
        }
    }
    Ok((state, diags))
}
