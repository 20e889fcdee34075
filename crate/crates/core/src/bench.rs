//! Projection timing harness: median wall times per ambient dimension and
//! fitted log-log scaling exponents. Single-threaded on purpose so the
//! exponents mean something.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::config::{Diagnostics, Tolerances};
use crate::error::{Error, Result};
use crate::factored::{DiagPos, SpdSmall, Stiefel};
use crate::projection::{project_fa_fast, project_low_rank, project_ppca};
use crate::symop::SymOp;

#[derive(Debug, Clone)]
pub struct BenchSpec {
    /// Ambient dimensions, ascending.
    pub dims: Vec<usize>,
    /// Factor rank.
    pub p: usize,
    /// Width of the random H = GGᵀ; must exceed p so the rank-p
    /// approximation is not exact.
    pub r: usize,
    /// Repetitions per (d, method); the median is reported. A warm-up run
    /// is discarded. Clamped up to 5.
    pub reps: usize,
    pub seed: u64,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r <= self.p || self.p == 0 {
            return Err(Error::DimensionMismatch(format!(
                "need r > p >= 1, got p = {}, r = {}",
                self.p, self.r
            )));
        }
        if self.dims.is_empty() || self.dims.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::DimensionMismatch(
                "dims must be non-empty and strictly ascending".into(),
            ));
        }
        if *self.dims.first().unwrap() <= self.p {
            return Err(Error::DimensionMismatch(format!(
                "smallest d = {} must exceed p = {}",
                self.dims[0], self.p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub d: usize,
    /// Median wall times, seconds: [lowrank, ppca, fa].
    pub time_s: [f64; 3],
    /// Analytic working-set estimates, f64 words: [lowrank, ppca, fa].
    pub mem_words: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub rows: Vec<BenchRow>,
    /// Fitted log-log slopes of time vs d: [lowrank, ppca, fa].
    pub slope: [f64; 3],
}

impl BenchReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "projection benchmark: p = {}, r = {}, reps = {}\n",
            self.spec.p, self.spec.r, self.spec.reps
        ));
        out.push_str("        d   lowrank [s]      ppca [s]        fa [s]\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{:>9}  {:>12.6}  {:>12.6}  {:>12.6}\n",
                row.d, row.time_s[0], row.time_s[1], row.time_s[2]
            ));
        }
        out.push_str(&format!(
            "log-log slope vs d: lowrank {:.3}, ppca {:.3}, fa {:.3}\n",
            self.slope[0], self.slope[1], self.slope[2]
        ));
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Times the three projectors on H = GGᵀ with G of width r, at each d.
pub fn run_projection_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let tol = Tolerances {
        r_max: spec.r.max(Tolerances::default().r_max),
        ..Tolerances::default()
    };
    let reps = spec.reps.max(5);
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let p = spec.p;
    let q = p * (p + 1) / 2;
    let mut rows = Vec::with_capacity(spec.dims.len());
    for &d in &spec.dims {
        let g = DMatrix::from_fn(d, spec.r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h = SymOp::with_width_limit(d, vec![(1.0, g)], None, tol.r_max)?;
        let u = Stiefel::random(d, p, &mut rng)?;
        let r_core = {
            let gg = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            SpdSmall::new(&gg * gg.transpose() + DMatrix::identity(p, p))?
        };
        let s = 0.5;
        let psi = DiagPos::new(DVector::from_fn(d, |_, _| 0.5 + rng.gen_range(0.0..0.5)))?;
        let mut diags = Diagnostics::default();

        // Warm-up, discarded.
        project_low_rank(&h, &u, &r_core)?;
        project_ppca(&h, &u, &r_core, s, &tol, &mut diags)?;
        project_fa_fast(&h, &u, &r_core, &psi, &tol, &mut diags)?;

        let mut times = [Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..reps {
            let t0 = Instant::now();
            let out = project_low_rank(&h, &u, &r_core)?;
            times[0].push(t0.elapsed().as_secs_f64());
            std::hint::black_box(&out);

            let t0 = Instant::now();
            let out = project_ppca(&h, &u, &r_core, s, &tol, &mut diags)?;
            times[1].push(t0.elapsed().as_secs_f64());
            std::hint::black_box(&out);

            let t0 = Instant::now();
            let out = project_fa_fast(&h, &u, &r_core, &psi, &tol, &mut diags)?;
            times[2].push(t0.elapsed().as_secs_f64());
            std::hint::black_box(&out);
        }
        let base = d * (p + spec.r);
        rows.push(BenchRow {
            d,
            time_s: [
                median(times[0].clone()),
                median(times[1].clone()),
                median(times[2].clone()),
            ],
            mem_words: [base, base, base + q * q + 2 * q],
        });
    }
    let ds: Vec<f64> = spec.dims.iter().map(|&d| d as f64).collect();
    let slope = [0, 1, 2].map(|m| {
        let ts: Vec<f64> = rows.iter().map(|r| r.time_s[m]).collect();
        loglog_slope(&ds, &ts)
    });
    Ok(BenchReport {
        spec: spec.clone(),
        rows,
        slope,
    })
}
