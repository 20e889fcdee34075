//! The five experiment runners. Each writes a CSV, a JSON metadata sidecar,
//! and a gnuplot script into the output directory, then prints the artifact
//! paths and a short summary.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use psdflow::{
    brownian_experiment, euler_drive, fa_riccati_delta, integrate_dense_riccati,
    lowrank_riccati_delta, make_swarm_scenario, ppca_riccati_delta, run_projection_bench,
    swarm_experiment, vi_run, BenchSpec, Diagnostics, ExpectationMode, FactoredPsd,
    IntegratorConfig, LinOpA, NoiseCov, RiccatiParams, SparseC, SpdSmall, Stiefel, SymOp,
    TargetPotential, Tolerances,
};

use crate::config::{
    lib_err, BenchConfig, BrownianConfig, CliError, RiccatiConfig, SwarmConfig, ViConfig,
};
use crate::output::{write_csv, write_meta, write_plot_script, Cell};

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn grid_config(h: f64, t_end: f64, record_every: usize) -> Result<IntegratorConfig, CliError> {
    IntegratorConfig::new(h, t_end, record_every).map_err(lib_err)
}

// ---------------------------------------------------------------------------

pub fn project_bench(cfg: &BenchConfig, out: &Path) -> Result<(), CliError> {
    let started = now();
    let spec = BenchSpec {
        dims: cfg.dims.clone(),
        p: cfg.p,
        r: cfg.r,
        reps: cfg.reps,
        seed: cfg.seed,
    };
    let report = run_projection_bench(&spec).map_err(lib_err)?;
    let rows: Vec<Vec<Cell>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::U(r.d as u64),
                Cell::F(r.time_s[0]),
                Cell::F(r.time_s[1]),
                Cell::F(r.time_s[2]),
                Cell::U(r.mem_words[0] as u64),
                Cell::U(r.mem_words[1] as u64),
                Cell::U(r.mem_words[2] as u64),
            ]
        })
        .collect();
    let csv = write_csv(
        out,
        "project_bench.csv",
        &[
            "d",
            "time_lowrank_s",
            "time_ppca_s",
            "time_fa_s",
            "mem_words_lowrank",
            "mem_words_ppca",
            "mem_words_fa",
        ],
        &rows,
    )?;
    let meta = write_meta(
        out,
        "project_bench.meta.json",
        "project-bench",
        cfg,
        &Diagnostics::default(),
        json!({
            "slope_lowrank": report.slope[0],
            "slope_ppca": report.slope[1],
            "slope_fa": report.slope[2],
        }),
        &started,
    )?;
    let plot = write_plot_script(
        out,
        "project_bench.gp",
        "project_bench.csv",
        "projection time vs ambient dimension",
        &[(2, "low-rank"), (3, "ppca"), (4, "fa")],
        true,
    )?;
    print!("{}", report.summary());
    println!("wrote {}, {}, {}", csv.display(), meta.display(), plot.display());
    Ok(())
}

// ---------------------------------------------------------------------------

/// Deterministic random Riccati instance: stable dense drift, structured
/// PSD diffusion, sparse two-entry measurement rows.
fn random_riccati_instance(
    d: usize,
    k: usize,
    seed: u64,
) -> Result<RiccatiParams, CliError> {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut a_mat = DMatrix::from_fn(d, d, |_, _| {
        rng.sample::<f64, _>(StandardNormal) * 0.3 / (d as f64).sqrt()
    });
    for i in 0..d {
        a_mat[(i, i)] -= 0.8;
    }
    let a = LinOpA::from_dense(&a_mat).map_err(lib_err)?;
    let gq = DMatrix::from_fn(d, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qd = DVector::from_fn(d, |_, _| rng.gen_range(0.1..1.0));
    let q = SymOp::new(d, vec![(1.0, gq)], Some(qd)).map_err(lib_err)?;
    let rows = (0..k)
        .map(|_| {
            vec![
                (rng.gen_range(0..d), rng.gen_range(-1.0..1.0f64)),
                (rng.gen_range(0..d), rng.gen_range(-1.0..1.0f64)),
            ]
        })
        .collect();
    let c = SparseC::new(d, rows).map_err(lib_err)?;
    let n = NoiseCov::isotropic(k, 1.0).map_err(lib_err)?;
    RiccatiParams::new(a, q, c, n).map_err(lib_err)
}

pub fn riccati_compare(cfg: &RiccatiConfig, out: &Path) -> Result<(), CliError> {
    let started = now();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed);
    let params = random_riccati_instance(cfg.d, cfg.k, cfg.seed.wrapping_add(1))?;
    let config = grid_config(cfg.grid.h, cfg.grid.t_end, cfg.grid.record_every)?;
    let tol = Tolerances::default();

    let u0 = Stiefel::random(cfg.d, cfg.p, &mut rng).map_err(lib_err)?;
    let r0 = SpdSmall::scaled_identity(cfg.p, 2.0).map_err(lib_err)?;
    let p0_dense = u0.matrix() * r0.matrix() * u0.matrix().transpose();

    let reference = integrate_dense_riccati(&p0_dense, &params, &config).map_err(lib_err)?;

    let mut diagnostics = Diagnostics::default();
    let mut variant_states: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let starts = [
        FactoredPsd::low_rank(u0.clone(), r0.clone()).map_err(lib_err)?,
        FactoredPsd::ppca(u0.clone(), r0.clone(), 1e-6).map_err(lib_err)?,
        FactoredPsd::fa(
            u0.clone(),
            r0.clone(),
            psdflow::DiagPos::constant(cfg.d, 1e-6).map_err(lib_err)?,
        )
        .map_err(lib_err)?,
    ];
    for state0 in starts {
        let mut snapshots = Vec::new();
        let (_, dg) = euler_drive(
            state0,
            |_, st, dgs| match st {
                FactoredPsd::LowRank { u, r } => lowrank_riccati_delta(u, r, &params),
                FactoredPsd::Ppca { u, r, s } => ppca_riccati_delta(u, r, *s, &params, &tol, dgs),
                FactoredPsd::Fa { u, r, psi } => fa_riccati_delta(u, r, psi, &params, &tol, dgs),
            },
            &config,
            |_, st, _| snapshots.push(st.densify(tol.d_max_dense).unwrap()),
        )
        .map_err(lib_err)?;
        diagnostics.merge(&dg);
        variant_states.push(snapshots);
    }

    let mut rows = Vec::new();
    for (idx, (t, p_ref)) in reference.iter().enumerate() {
        let scale = p_ref.norm().max(f64::MIN_POSITIVE);
        let mut row = vec![Cell::F(*t)];
        for states in &variant_states {
            row.push(Cell::F((&states[idx] - p_ref).norm() / scale));
        }
        rows.push(row);
    }
    let csv = write_csv(
        out,
        "riccati_compare.csv",
        &["t", "covdist_lowrank", "covdist_ppca", "covdist_fa"],
        &rows,
    )?;
    let last = reference.len() - 1;
    let finals: Vec<f64> = variant_states
        .iter()
        .map(|s| (&s[last] - &reference[last].1).norm() / reference[last].1.norm())
        .collect();
    let meta = write_meta(
        out,
        "riccati_compare.meta.json",
        "riccati-compare",
        cfg,
        &diagnostics,
        json!({
            "final_covdist_lowrank": finals[0],
            "final_covdist_ppca": finals[1],
            "final_covdist_fa": finals[2],
        }),
        &started,
    )?;
    let plot = write_plot_script(
        out,
        "riccati_compare.gp",
        "riccati_compare.csv",
        "relative distance to dense RK4 Riccati solution",
        &[(2, "low-rank"), (3, "ppca"), (4, "fa")],
        true,
    )?;
    println!(
        "final relative covariance distance: low-rank {:.3e}, ppca {:.3e}, fa {:.3e}",
        finals[0], finals[1], finals[2]
    );
    println!("wrote {}, {}, {}", csv.display(), meta.display(), plot.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn swarm(cfg: &SwarmConfig, out: &Path) -> Result<(), CliError> {
    let started = now();
    let scenario = make_swarm_scenario(cfg.d / 2, cfg.seed, cfg.q_dispersion, cfg.n_scale)
        .map_err(lib_err)?;
    let config = grid_config(cfg.grid.h, cfg.grid.t_end, cfg.grid.record_every)?;
    let result =
        swarm_experiment(&scenario, cfg.p, &config, cfg.seed, cfg.noise_free).map_err(lib_err)?;

    let rows: Vec<Vec<Cell>> = result
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::F(r.t),
                Cell::F(r.err_state[0]),
                Cell::F(r.err_state[1]),
                Cell::F(r.err_state[2]),
                Cell::F(r.covdist[0]),
                Cell::F(r.covdist[1]),
                Cell::F(r.covdist[2]),
                Cell::F(r.residual[0]),
                Cell::F(r.residual[1]),
                Cell::F(r.residual[2]),
                Cell::U(r.clamp_count),
                Cell::U(r.fallback_count),
            ]
        })
        .collect();
    let csv = write_csv(
        out,
        "swarm_run.csv",
        &[
            "t",
            "err_state_lowrank",
            "err_state_ppca",
            "err_state_fa",
            "covdist_lowrank",
            "covdist_ppca",
            "covdist_fa",
            "residual_lowrank",
            "residual_ppca",
            "residual_fa",
            "clamp_count",
            "fallback_count",
        ],
        &rows,
    )?;
    let n = result.rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&psdflow::SwarmRow) -> f64| {
        result.rows.iter().map(|r| f(r)).sum::<f64>() / n
    };
    let meta = write_meta(
        out,
        "swarm_run.meta.json",
        "swarm",
        cfg,
        &result.diagnostics,
        json!({
            "mean_covdist_lowrank": mean(&|r| r.covdist[0]),
            "mean_covdist_ppca": mean(&|r| r.covdist[1]),
            "mean_covdist_fa": mean(&|r| r.covdist[2]),
            "mean_err_state_lowrank": mean(&|r| r.err_state[0]),
            "mean_err_state_ppca": mean(&|r| r.err_state[1]),
            "mean_err_state_fa": mean(&|r| r.err_state[2]),
        }),
        &started,
    )?;
    let plot = write_plot_script(
        out,
        "swarm_run.gp",
        "swarm_run.csv",
        "covariance distance to the full Kalman-Bucy filter",
        &[(5, "low-rank"), (6, "ppca"), (7, "fa")],
        true,
    )?;
    println!(
        "time-averaged covdist: low-rank {:.4}, ppca {:.4}, fa {:.4}",
        mean(&|r| r.covdist[0]),
        mean(&|r| r.covdist[1]),
        mean(&|r| r.covdist[2]),
    );
    println!("wrote {}, {}, {}", csv.display(), meta.display(), plot.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn brownian(cfg: &BrownianConfig, out: &Path) -> Result<(), CliError> {
    let started = now();
    use rand::SeedableRng;
    let config = grid_config(cfg.grid.h, cfg.grid.t_end, cfg.grid.record_every)?;
    let tol = Tolerances::default();
    let target = (cfg.lambda * cfg.nu).sqrt();
    let params = RiccatiParams::new(
        LinOpA::zero(cfg.d),
        SymOp::scaled_identity(cfg.d, cfg.lambda),
        SparseC::identity(cfg.d),
        NoiseCov::isotropic(cfg.d, cfg.nu).map_err(lib_err)?,
    )
    .map_err(lib_err)?;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed);
    let u0 = Stiefel::random(cfg.d, cfg.p, &mut rng).map_err(lib_err)?;
    let r0 = SpdSmall::scaled_identity(cfg.p, 2.0).map_err(lib_err)?;
    let eye = DMatrix::identity(cfg.p, cfg.p) * target;

    // Factored flows, observed on the recording grid.
    let mut diagnostics = Diagnostics::default();
    let mut lr_rows: Vec<(f64, f64)> = Vec::new();
    let (_, dg) = euler_drive(
        FactoredPsd::low_rank(u0.clone(), r0.clone()).map_err(lib_err)?,
        |_, st, _| match st {
            FactoredPsd::LowRank { u, r } => lowrank_riccati_delta(u, r, &params),
            _ => unreachable!(),
        },
        &config,
        |t, st, _| lr_rows.push((t, (st.core().matrix() - &eye).norm())),
    )
    .map_err(lib_err)?;
    diagnostics.merge(&dg);
    let mut pp_rows: Vec<(f64, f64, f64)> = Vec::new();
    let (_, dg) = euler_drive(
        FactoredPsd::ppca(u0, r0, 1e-6).map_err(lib_err)?,
        |_, st, dgs| match st {
            FactoredPsd::Ppca { u, r, s } => ppca_riccati_delta(u, r, *s, &params, &tol, dgs),
            _ => unreachable!(),
        },
        &config,
        |t, st, _| match st {
            FactoredPsd::Ppca { r, s, .. } => {
                pp_rows.push((t, *s, (r.matrix() - &eye).norm()))
            }
            _ => unreachable!(),
        },
    )
    .map_err(lib_err)?;
    diagnostics.merge(&dg);

    let rows: Vec<Vec<Cell>> = lr_rows
        .iter()
        .zip(&pp_rows)
        .map(|(&(t, rdev_lr), &(_, s, rdev_pp))| {
            vec![Cell::F(t), Cell::F(s), Cell::F(rdev_lr), Cell::F(rdev_pp)]
        })
        .collect();
    let csv = write_csv(
        out,
        "brownian_run.csv",
        &["t", "s", "rdev_lowrank", "rdev_ppca"],
        &rows,
    )?;

    // Deterministic error-moment propagation under the steady-state gains.
    let report =
        brownian_experiment(cfg.d, cfg.p, cfg.lambda, cfg.nu, &config, cfg.seed).map_err(lib_err)?;
    diagnostics.merge(&report.diagnostics);
    let trace_rows: Vec<Vec<Cell>> = report
        .trace_rows
        .iter()
        .map(|&(t, lr, pp)| vec![Cell::F(t), Cell::F(lr), Cell::F(pp)])
        .collect();
    let traces_csv = write_csv(
        out,
        "brownian_traces.csv",
        &["t", "err_trace_lowrank", "err_trace_ppca"],
        &trace_rows,
    )?;
    let meta = write_meta(
        out,
        "brownian_run.meta.json",
        "brownian",
        cfg,
        &diagnostics,
        json!({
            "steady_state_target": target,
            "s_inf": report.s_inf,
            "lowrank_growth_rate": report.lowrank_growth_rate,
            "expected_growth_rate": report.expected_growth_rate,
            "ppca_plateau": report.ppca_plateau,
            "expected_plateau": report.expected_plateau,
        }),
        &started,
    )?;
    let plot = write_plot_script(
        out,
        "brownian_traces.gp",
        "brownian_traces.csv",
        "filter error second moment under steady-state gains",
        &[(2, "low-rank"), (3, "ppca")],
        false,
    )?;
    println!(
        "s(t_end) = {} (steady-state target {target}); low-rank error growth {:.4}/s, ppca plateau {:.4}",
        report.s_inf, report.lowrank_growth_rate, report.ppca_plateau
    );
    println!(
        "wrote {}, {}, {}, {}",
        csv.display(),
        traces_csv.display(),
        meta.display(),
        plot.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn viflow(cfg: &ViConfig, out: &Path) -> Result<(), CliError> {
    let started = now();
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    let config = grid_config(cfg.grid.h, cfg.grid.t_end, cfg.grid.record_every)?;
    let d = cfg.d;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    // Gaussian target with a decaying, rotated spectrum: the top-p
    // eigenspace is well separated, so subspace alignment is observable.
    let m = DVector::from_fn(d, |i, _| (i as f64 * 0.3).sin());
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let vals = DVector::from_fn(d, |i, _| 0.9 * 0.55f64.powi(i as i32) + 0.03);
    let m_cov = SpdSmall::new(&q * DMatrix::from_diagonal(&vals) * q.transpose())
        .map_err(lib_err)?;
    let pot = TargetPotential::gaussian(m.clone(), m_cov, cfg.epsilon).map_err(lib_err)?;

    let mu0 = DVector::from_element(d, 3.0);
    let u0 = Stiefel::random(d, cfg.p, &mut rng).map_err(lib_err)?;
    let cov0 = FactoredPsd::ppca(
        u0,
        SpdSmall::scaled_identity(cfg.p, 2.0).map_err(lib_err)?,
        0.5,
    )
    .map_err(lib_err)?;
    let mode = match cfg.mode.as_str() {
        "exact" => ExpectationMode::ExactGaussian,
        _ => ExpectationMode::MonteCarlo { k: cfg.k },
    };
    let res = vi_run(&pot, &mu0, &cov0, mode, &config, cfg.seed).map_err(lib_err)?;

    let rows: Vec<Vec<Cell>> = res
        .rows
        .iter()
        .map(|r| vec![Cell::F(r.t), Cell::F(r.mu_err), Cell::F(r.angle), Cell::F(r.s)])
        .collect();
    let csv = write_csv(out, "viflow_run.csv", &["t", "mu_err", "angle", "s"], &rows)?;
    let last = res.rows.last().expect("at least the initial row");
    let meta = write_meta(
        out,
        "viflow_run.meta.json",
        "viflow",
        cfg,
        &res.diagnostics,
        json!({
            "final_mu_err": last.mu_err,
            "final_angle": last.angle,
            "final_s": last.s,
        }),
        &started,
    )?;
    let plot = write_plot_script(
        out,
        "viflow_run.gp",
        "viflow_run.csv",
        "mean error and subspace angle along the flow",
        &[(2, "|mu - m|"), (3, "principal angle")],
        true,
    )?;
    println!(
        "final |mu - m| = {:.3e}, principal angle = {:.4} rad, s = {:.4}",
        last.mu_err, last.angle, last.s
    );
    println!("wrote {}, {}, {}", csv.display(), meta.display(), plot.display());
    Ok(())
}
