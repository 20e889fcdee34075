//! Kalman-Bucy filter bank over the covariance variants, the 2-D swarm
//! scenario, and the Brownian-motion error analysis.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::config::{Diagnostics, Tolerances};
use crate::error::{Error, Result};
use crate::factored::{DiagPos, FactoredPsd, SpdSmall, Stiefel};
use crate::integrate::{step_state, IntegratorConfig};
use crate::projection::residual_norm_sq;
use crate::riccati::{
    dense_riccati_rhs, fa_riccati_delta, lowrank_riccati_delta, ppca_riccati_delta, rhs_symop,
    LinOpA, NoiseCov, RiccatiParams, SparseC,
};
use crate::symop::SymOp;

/// Isotropic floor used when PPCA/FA states are initialized from a purely
/// low-rank P₀, so all variants start at (numerically) the same matrix.
pub const INIT_DIAG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub enum Control {
    Zero,
    Constant(DVector<f64>),
}

impl Control {
    pub fn eval(&self, d: usize, _t: f64) -> DVector<f64> {
        match self {
            Control::Zero => DVector::zeros(d),
            Control::Constant(u) => u.clone(),
        }
    }
}

/// Swarm of n agents in the plane; state dimension d = 2n. Each agent
/// observes the relative position of one fixed other agent; the queen also
/// carries an absolute (GPS) measurement.
#[derive(Debug, Clone)]
pub struct SwarmScenario {
    pub n_agents: usize,
    /// (observer, observed) pairs, one per agent.
    pub visibility: Vec<(usize, usize)>,
    pub queen_index: usize,
    pub q_diag: DVector<f64>,
    pub n_scale: f64,
    pub control: Control,
}

impl SwarmScenario {
    pub fn d(&self) -> usize {
        2 * self.n_agents
    }

    pub fn k(&self) -> usize {
        2 * self.n_agents + 2
    }

    /// Two ±1 rows per visibility pair (x and y coordinates of Xⱼ − Xᵢ),
    /// then two absolute rows for the queen.
    pub fn measurement(&self) -> Result<SparseC> {
        let d = self.d();
        let mut rows = Vec::with_capacity(self.k());
        for &(i, j) in &self.visibility {
            rows.push(vec![(2 * j, 1.0), (2 * i, -1.0)]);
            rows.push(vec![(2 * j + 1, 1.0), (2 * i + 1, -1.0)]);
        }
        let q = self.queen_index;
        rows.push(vec![(2 * q, 1.0)]);
        rows.push(vec![(2 * q + 1, 1.0)]);
        SparseC::new(d, rows)
    }

    pub fn riccati_params(&self) -> Result<RiccatiParams> {
        let c = self.measurement()?;
        let k = c.k();
        RiccatiParams::new(
            LinOpA::zero(self.d()),
            SymOp::from_diag(self.q_diag.clone()),
            c,
            NoiseCov::isotropic(k, self.n_scale)?,
        )
    }
}

pub fn make_swarm_scenario(
    n_agents: usize,
    seed: u64,
    q_dispersion: f64,
    n_scale: f64,
) -> Result<SwarmScenario> {
    if n_agents < 2 {
        return Err(Error::DimensionMismatch(format!(
            "need at least 2 agents, got {n_agents}"
        )));
    }
    if !(q_dispersion >= 0.0 && q_dispersion < 1.0) || !(n_scale > 0.0) {
        return Err(Error::NotPd);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let visibility = (0..n_agents)
        .map(|i| {
            let mut j = rng.gen_range(0..n_agents - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect();
    let d = 2 * n_agents;
    let q_diag =
        DVector::from_fn(d, |_, _| rng.gen_range(1.0 - q_dispersion..=1.0 + q_dispersion));
    Ok(SwarmScenario {
        n_agents,
        visibility,
        queen_index: 0,
        q_diag,
        n_scale,
        control: Control::Zero,
    })
}

/// Truth states x₀ … x_n and the measurement-rate stream y₀ … y_{n−1}
/// (yₖ is used by the filter during step k).
#[derive(Debug, Clone)]
pub struct MeasurementStream {
    pub truth: Vec<DVector<f64>>,
    pub ys: Vec<DVector<f64>>,
    pub h: f64,
}

/// Euler-Maruyama truth simulation. Process noise scales with √h; the
/// measurement stream carries the formal rate y = Cx + v/√h. `noise_free`
/// zeroes both noises (observer mode).
pub fn simulate_truth(
    scenario: &SwarmScenario,
    x0: &DVector<f64>,
    config: &IntegratorConfig,
    rng: &mut ChaCha12Rng,
    noise_free: bool,
) -> Result<MeasurementStream> {
    config.validate()?;
    let d = scenario.d();
    if x0.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "x0 has length {}, expected {d}",
            x0.len()
        )));
    }
    let c = scenario.measurement()?;
    let h = config.h;
    let n = config.n_steps();
    let mut x = x0.clone();
    let mut truth = Vec::with_capacity(n + 1);
    let mut ys = Vec::with_capacity(n);
    truth.push(x.clone());
    let sqrt_h = h.sqrt();
    let v_scale = (scenario.n_scale / h).sqrt();
    for step in 0..n {
        let t = step as f64 * h;
        let mut y = c.apply_vec(&x);
        if !noise_free {
            for i in 0..y.len() {
                y[i] += v_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        ys.push(y);
        let u = scenario.control.eval(d, t);
        x += u * h;
        if !noise_free {
            for i in 0..d {
                x[i] += sqrt_h * scenario.q_diag[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        truth.push(x.clone());
    }
    Ok(MeasurementStream { truth, ys, h })
}

/// Filter covariance: factored, or the dense full-KF reference.
#[derive(Debug, Clone)]
pub enum FilterCov {
    Dense(DMatrix<f64>),
    Factored(FactoredPsd),
}

impl FilterCov {
    pub fn densify(&self, d_max_dense: usize) -> Result<DMatrix<f64>> {
        match self {
            FilterCov::Dense(m) => Ok(m.clone()),
            FilterCov::Factored(f) => f.densify(d_max_dense),
        }
    }
}

/// K·innovation = P Cᵀ N⁻¹ innovation via factored products only.
pub fn kalman_gain_apply(
    cov: &FilterCov,
    c: &SparseC,
    n: &NoiseCov,
    innovation: &DVector<f64>,
) -> Result<DVector<f64>> {
    if innovation.len() != c.k() {
        return Err(Error::DimensionMismatch(format!(
            "innovation length {} vs k = {}",
            innovation.len(),
            c.k()
        )));
    }
    let w = c.apply_transpose_vec(&n.solve_vec(innovation)?);
    match cov {
        FilterCov::Dense(m) => Ok(m * w),
        FilterCov::Factored(f) => f.apply_vec(&w),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVariant {
    Full,
    LowRank,
    Ppca,
    Fa,
}

impl FilterVariant {
    pub fn name(self) -> &'static str {
        match self {
            FilterVariant::Full => "full",
            FilterVariant::LowRank => "lowrank",
            FilterVariant::Ppca => "ppca",
            FilterVariant::Fa => "fa",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub variant: FilterVariant,
    pub times: Vec<f64>,
    pub xhats: Vec<DVector<f64>>,
    pub covs: Vec<FilterCov>,
    /// ‖H − P(H)‖²_F at each recorded state; 0 for the full variant.
    pub residuals: Vec<f64>,
    pub diag_snapshots: Vec<Diagnostics>,
    pub diagnostics: Diagnostics,
}

fn init_cov(variant: FilterVariant, p0: &FactoredPsd, d_max: usize) -> Result<FilterCov> {
    let (u, r) = match p0 {
        FactoredPsd::LowRank { u, r } => (u.clone(), r.clone()),
        _ => {
            return Err(Error::MismatchedVariant);
        }
    };
    Ok(match variant {
        FilterVariant::Full => FilterCov::Dense(p0.densify(d_max)?),
        FilterVariant::LowRank => FilterCov::Factored(FactoredPsd::low_rank(u, r)?),
        FilterVariant::Ppca => FilterCov::Factored(FactoredPsd::ppca(u, r, INIT_DIAG_FLOOR)?),
        FilterVariant::Fa => FilterCov::Factored(FactoredPsd::fa(
            u.clone(),
            r,
            DiagPos::constant(u.d(), INIT_DIAG_FLOOR)?,
        )?),
    })
}

fn variant_delta(
    state: &FactoredPsd,
    params: &RiccatiParams,
    tol: &Tolerances,
    diags: &mut Diagnostics,
) -> Result<crate::projection::TangentDelta> {
    match state {
        FactoredPsd::LowRank { u, r } => lowrank_riccati_delta(u, r, params),
        FactoredPsd::Ppca { u, r, s } => ppca_riccati_delta(u, r, *s, params, tol, diags),
        FactoredPsd::Fa { u, r, psi } => fa_riccati_delta(u, r, psi, params, tol, diags),
    }
}

fn residual_at(state: &FactoredPsd, params: &RiccatiParams, tol: &Tolerances) -> Result<f64> {
    // Scratch diagnostics: monitoring must not double-count fallbacks.
    let mut scratch = Diagnostics::default();
    let h = rhs_symop(state, params)?;
    let delta = variant_delta(state, params, tol, &mut scratch)?;
    residual_norm_sq(&h, state, &delta)
}

fn rk4_dense_cov(
    p: &DMatrix<f64>,
    params: &RiccatiParams,
    h: f64,
    d_max: usize,
) -> Result<DMatrix<f64>> {
    let k1 = dense_riccati_rhs(p, params, d_max)?;
    let k2 = dense_riccati_rhs(&(p + &k1 * (h / 2.0)), params, d_max)?;
    let k3 = dense_riccati_rhs(&(p + &k2 * (h / 2.0)), params, d_max)?;
    let k4 = dense_riccati_rhs(&(p + &k3 * h), params, d_max)?;
    let out = p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    Ok((&out + out.transpose()) * 0.5)
}

/// One filter over a fixed measurement stream. The covariance evolves by the
/// matching Riccati flow (dense RK4 for `Full`, retraction Euler otherwise);
/// the state by Euler on dX̂ = u dt + K(dy − CX̂ dt).
pub fn run_filter(
    params: &RiccatiParams,
    variant: FilterVariant,
    p0: &FactoredPsd,
    x0hat: &DVector<f64>,
    stream: &MeasurementStream,
    control: &Control,
    config: &IntegratorConfig,
) -> Result<FilterRun> {
    config.validate()?;
    let tol = &config.tolerances;
    let d = params.d();
    let h = config.h;
    let n = stream.ys.len();
    let mut diags = Diagnostics::default();
    let mut cov = init_cov(variant, p0, tol.d_max_dense)?;
    let mut xhat = x0hat.clone();

    let mut run = FilterRun {
        variant,
        times: Vec::new(),
        xhats: Vec::new(),
        covs: Vec::new(),
        residuals: Vec::new(),
        diag_snapshots: Vec::new(),
        diagnostics: Diagnostics::default(),
    };
    let record = |t: f64,
                      xhat: &DVector<f64>,
                      cov: &FilterCov,
                      diags: &Diagnostics,
                      run: &mut FilterRun|
     -> Result<()> {
        let residual = match cov {
            FilterCov::Dense(_) => 0.0,
            FilterCov::Factored(state) => residual_at(state, params, tol)?,
        };
        run.times.push(t);
        run.xhats.push(xhat.clone());
        run.covs.push(cov.clone());
        run.residuals.push(residual);
        run.diag_snapshots.push(*diags);
        Ok(())
    };
    record(0.0, &xhat, &cov, &diags, &mut run)?;

    for step in 0..n {
        let t = step as f64 * h;
        let innovation = &stream.ys[step] - params.c.apply_vec(&xhat);
        let gain = kalman_gain_apply(&cov, &params.c, &params.n, &innovation)?;
        let u = control.eval(d, t);
        xhat += (u + gain) * h;
        if xhat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        cov = match cov {
            FilterCov::Dense(p) => FilterCov::Dense(rk4_dense_cov(&p, params, h, tol.d_max_dense)?),
            FilterCov::Factored(state) => {
                let delta = variant_delta(&state, params, tol, &mut diags)?;
                FilterCov::Factored(step_state(&state, &delta, h, tol, &mut diags)?)
            }
        };
        if step + 1 == n || (step + 1) % config.record_every == 0 {
            record((step + 1) as f64 * h, &xhat, &cov, &diags, &mut run)?;
        }
    }
    run.diagnostics = diags;
    Ok(run)
}

/// One recorded row of the swarm comparison. Arrays are ordered
/// [lowrank, ppca, fa].
#[derive(Debug, Clone)]
pub struct SwarmRow {
    pub t: f64,
    pub err_state: [f64; 3],
    pub covdist: [f64; 3],
    pub residual: [f64; 3],
    pub clamp_count: u64,
    pub fallback_count: u64,
}

#[derive(Debug, Clone)]
pub struct SwarmResult {
    pub rows: Vec<SwarmRow>,
    pub diagnostics: Diagnostics,
}

/// Runs the full-KF reference and the three factored filters on one shared
/// measurement stream, from a common low-rank P₀ = U·(2I)·Uᵀ.
pub fn swarm_experiment(
    scenario: &SwarmScenario,
    p: usize,
    config: &IntegratorConfig,
    seed: u64,
    noise_free: bool,
) -> Result<SwarmResult> {
    let d = scenario.d();
    let params = scenario.riccati_params()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x0 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u0 = Stiefel::random(d, p, &mut rng)?;
    let p0 = FactoredPsd::low_rank(u0, SpdSmall::scaled_identity(p, 2.0)?)?;
    let stream = simulate_truth(scenario, &x0, config, &mut rng, noise_free)?;

    let full = run_filter(
        &params,
        FilterVariant::Full,
        &p0,
        &x0,
        &stream,
        &scenario.control,
        config,
    )?;
    let variants = [FilterVariant::LowRank, FilterVariant::Ppca, FilterVariant::Fa];
    let runs: Vec<FilterRun> = variants
        .iter()
        .map(|&v| {
            run_filter(&params, v, &p0, &x0, &stream, &scenario.control, config)
        })
        .collect::<Result<_>>()?;

    let d_max = config.tolerances.d_max_dense;
    let mut rows = Vec::with_capacity(full.times.len());
    for idx in 0..full.times.len() {
        let p_full = full.covs[idx].densify(d_max)?;
        let p_full_norm = p_full.norm().max(f64::MIN_POSITIVE);
        let mut err_state = [0.0; 3];
        let mut covdist = [0.0; 3];
        let mut residual = [0.0; 3];
        let mut clamp_count = 0;
        let mut fallback_count = 0;
        for (vi, run) in runs.iter().enumerate() {
            err_state[vi] = (&run.xhats[idx] - &full.xhats[idx]).norm();
            covdist[vi] = (run.covs[idx].densify(d_max)? - &p_full).norm() / p_full_norm;
            residual[vi] = run.residuals[idx];
            clamp_count += run.diag_snapshots[idx].positivity_clamps;
            fallback_count += run.diag_snapshots[idx].near_singular_rs
                + run.diag_snapshots[idx].ill_conditioned_phi;
        }
        rows.push(SwarmRow {
            t: full.times[idx],
            err_state,
            covdist,
            residual,
            clamp_count,
            fallback_count,
        });
    }
    let mut diagnostics = Diagnostics::default();
    for run in &runs {
        diagnostics.merge(&run.diagnostics);
    }
    Ok(SwarmResult { rows, diagnostics })
}

/// Brownian-motion report: factored steady states plus the deterministic
/// error second moment Tr Σ(t) under each steady-state gain, from the
/// Lyapunov ODE Σ̇ = −KΣ − ΣKᵀ + Q + KNKᵀ.
#[derive(Debug, Clone)]
pub struct BrownianReport {
    pub d: usize,
    pub p: usize,
    pub lambda: f64,
    pub nu: f64,
    pub r_inf_lowrank: DMatrix<f64>,
    pub r_inf_ppca: DMatrix<f64>,
    pub s_inf: f64,
    /// d Tr Σ / dt for the low-rank gain at the end of the horizon.
    pub lowrank_growth_rate: f64,
    /// Tr Σ at the end of the horizon for the PPCA gain.
    pub ppca_plateau: f64,
    pub expected_growth_rate: f64,
    pub expected_plateau: f64,
    /// (t, Tr Σ_lowrank, Tr Σ_ppca).
    pub trace_rows: Vec<(f64, f64, f64)>,
    pub diagnostics: Diagnostics,
}

fn lyapunov_traces(
    k_gain: &DMatrix<f64>,
    lambda: f64,
    nu: f64,
    config: &IntegratorConfig,
) -> Vec<(f64, f64)> {
    let d = k_gain.nrows();
    let knk = k_gain * k_gain.transpose() * nu;
    let rhs = |sigma: &DMatrix<f64>| -> DMatrix<f64> {
        let ks = k_gain * sigma;
        let out = -&ks - ks.transpose() + DMatrix::identity(d, d) * lambda + &knk;
        (&out + out.transpose()) * 0.5
    };
    let h = config.h;
    let n = config.n_steps();
    let mut sigma = DMatrix::zeros(d, d);
    let mut out = vec![(0.0, 0.0)];
    for step in 0..n {
        let k1 = rhs(&sigma);
        let k2 = rhs(&(&sigma + &k1 * (h / 2.0)));
        let k3 = rhs(&(&sigma + &k2 * (h / 2.0)));
        let k4 = rhs(&(&sigma + &k3 * h));
        sigma += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if step + 1 == n || (step + 1) % config.record_every == 0 {
            out.push(((step + 1) as f64 * h, sigma.trace()));
        }
    }
    out
}

pub fn brownian_experiment(
    d: usize,
    p: usize,
    lambda: f64,
    nu: f64,
    config: &IntegratorConfig,
    seed: u64,
) -> Result<BrownianReport> {
    if p >= d {
        return Err(Error::DimensionMismatch(format!(
            "need p < d, got p = {p}, d = {d}"
        )));
    }
    let params = RiccatiParams::new(
        LinOpA::zero(d),
        SymOp::scaled_identity(d, lambda),
        SparseC::identity(d),
        NoiseCov::isotropic(d, nu)?,
    )?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let u0 = Stiefel::random(d, p, &mut rng)?;
    let r0 = SpdSmall::scaled_identity(p, 2.0)?;
    let tol = &config.tolerances;
    let mut diags = Diagnostics::default();

    let lowrank0 = FactoredPsd::low_rank(u0.clone(), r0.clone())?;
    let (lowrank_inf, d1) = crate::integrate::euler_drive(
        lowrank0,
        |_, st, dg| variant_delta(st, &params, tol, dg),
        config,
        |_, _, _| {},
    )?;
    diags.merge(&d1);

    let ppca0 = FactoredPsd::ppca(u0.clone(), r0.clone(), INIT_DIAG_FLOOR)?;
    let (ppca_inf, d2) = crate::integrate::euler_drive(
        ppca0,
        |_, st, dg| variant_delta(st, &params, tol, dg),
        config,
        |_, _, _| {},
    )?;
    diags.merge(&d2);

    let (r_inf_lowrank, u_lr) = match &lowrank_inf {
        FactoredPsd::LowRank { u, r } => (r.matrix().clone(), u.clone()),
        _ => unreachable!(),
    };
    let (r_inf_ppca, s_inf) = match &ppca_inf {
        FactoredPsd::Ppca { r, s, .. } => (r.matrix().clone(), *s),
        _ => unreachable!(),
    };

    // Steady-state gains K = P∞ / ν (C = I).
    let k_lowrank =
        u_lr.matrix() * &r_inf_lowrank * u_lr.matrix().transpose() / nu;
    let k_ppca = ppca_inf.densify(tol.d_max_dense)? / nu;
    let tr_lr = lyapunov_traces(&k_lowrank, lambda, nu, config);
    let tr_pp = lyapunov_traces(&k_ppca, lambda, nu, config);

    let m = tr_lr.len();
    let (t1, v1) = tr_lr[m - 2];
    let (t2, v2) = tr_lr[m - 1];
    let lowrank_growth_rate = (v2 - v1) / (t2 - t1);
    let ppca_plateau = tr_pp[m - 1].1;

    let trace_rows = tr_lr
        .iter()
        .zip(&tr_pp)
        .map(|(&(t, a), &(_, b))| (t, a, b))
        .collect();
    Ok(BrownianReport {
        d,
        p,
        lambda,
        nu,
        r_inf_lowrank,
        r_inf_ppca,
        s_inf,
        lowrank_growth_rate,
        ppca_plateau,
        expected_growth_rate: (d - p) as f64 * lambda,
        expected_plateau: d as f64 * (lambda * nu).sqrt(),
        trace_rows,
        diagnostics: diags,
    })
}
