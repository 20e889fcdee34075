//! Verifies the linear-in-d memory contract with a counting allocator:
//! none of the large-d code paths may allocate a d x d intermediate.
//! Everything runs inside one #[test] so measurements never interleave.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use psdflow::{
    fa_riccati_delta, lowrank_riccati_delta, ppca_riccati_delta, project_fa_fast,
    project_low_rank, project_ppca, residual_norm_sq, DiagPos, Diagnostics, FactoredPsd, LinOpA,
    NoiseCov, RiccatiParams, SparseC, SpdSmall, Stiefel, SymOp, Tolerances,
};

struct PeakAlloc {
    current: AtomicUsize,
    peak: AtomicUsize,
}

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let c = self.current.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            self.peak.fetch_max(c, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, p: *mut u8, layout: Layout) {
        self.current.fetch_sub(layout.size(), Ordering::SeqCst);
        System.dealloc(p, layout);
    }
}

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc {
    current: AtomicUsize::new(0),
    peak: AtomicUsize::new(0),
};

fn measure<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = ALLOC.current.load(Ordering::SeqCst);
    ALLOC.peak.store(base, Ordering::SeqCst);
    let out = f();
    let peak = ALLOC.peak.load(Ordering::SeqCst);
    (out, peak.saturating_sub(base))
}

#[test]
fn no_quadratic_intermediates() {
    let d = 100_000;
    let p = 5;
    let width = 12;
    let dxd_bytes = 8 * d * d; // what a single dense d x d would cost
    let tol = Tolerances::default();
    let mut diags = Diagnostics::default();
    let mut rng = ChaCha12Rng::seed_from_u64(3);

    let g = DMatrix::from_fn(d, width, |_, _| rng.sample::<f64, _>(StandardNormal));
    let c = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
    let h = SymOp::new(d, vec![(1.0, g)], Some(c)).unwrap();
    let u = Stiefel::random(d, p, &mut rng).unwrap();
    let gg = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let r = SpdSmall::new(&gg * gg.transpose() + DMatrix::identity(p, p)).unwrap();
    let psi = DiagPos::new(DVector::from_fn(d, |_, _| rng.gen_range(0.5..1.5))).unwrap();

    // Every peak stays within a small multiple of d*(p + width) words,
    // orders of magnitude below one d x d matrix.
    let linear_budget = 32 * 8 * d * (p + width);
    assert!(linear_budget < dxd_bytes / 100);

    let ((), lr) = measure(|| {
        project_low_rank(&h, &u, &r).unwrap();
    });
    let ((), pp) = measure(|| {
        project_ppca(&h, &u, &r, 0.5, &tol, &mut diags).unwrap();
    });
    let (fa_delta, fa) = measure(|| project_fa_fast(&h, &u, &r, &psi, &tol, &mut diags).unwrap());
    assert!(lr <= linear_budget, "low-rank projection peak {lr} bytes");
    assert!(pp <= linear_budget, "ppca projection peak {pp} bytes");
    assert!(fa <= linear_budget, "fa projection peak {fa} bytes");

    // Residual monitor at scale, on the FA instance just projected.
    let base = FactoredPsd::fa(u.clone(), r.clone(), psi.clone()).unwrap();
    let (res, mon) = measure(|| residual_norm_sq(&h, &base, &fa_delta).unwrap());
    assert!(res.is_finite() && res >= -1e-6);
    assert!(mon <= linear_budget, "residual monitor peak {mon} bytes");

    // Factored apply / Woodbury solve.
    let x = DMatrix::from_fn(d, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let ppca = FactoredPsd::ppca(u.clone(), r.clone(), 0.5).unwrap();
    let ((), ap) = measure(|| {
        ppca.apply(&x).unwrap();
    });
    let ((), wb) = measure(|| {
        base.woodbury_solve(&x).unwrap();
    });
    assert!(ap <= linear_budget, "apply peak {ap} bytes");
    assert!(wb <= linear_budget, "woodbury_solve peak {wb} bytes");

    // Direct Riccati deltas at scale, with a sparse C and diagonal A.
    let a = LinOpA::diagonal(DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.0)));
    let qg = DMatrix::from_fn(d, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = SymOp::new(d, vec![(1.0, qg)], Some(DVector::from_element(d, 0.3))).unwrap();
    let k = 8;
    let rows = (0..k)
        .map(|_| vec![(rng.gen_range(0..d), 1.0), (rng.gen_range(0..d), -1.0)])
        .collect();
    let cs = SparseC::new(d, rows).unwrap();
    let n = NoiseCov::isotropic(k, 1.0).unwrap();
    let params = RiccatiParams::new(a, q, cs, n).unwrap();
    let ((), rl) = measure(|| {
        lowrank_riccati_delta(&u, &r, &params).unwrap();
    });
    let ((), rp) = measure(|| {
        ppca_riccati_delta(&u, &r, 0.5, &params, &tol, &mut diags).unwrap();
    });
    let ((), rf) = measure(|| {
        fa_riccati_delta(&u, &r, &psi, &params, &tol, &mut diags).unwrap();
    });
    assert!(rl <= linear_budget, "low-rank riccati delta peak {rl} bytes");
    assert!(rp <= linear_budget, "ppca riccati delta peak {rp} bytes");
    assert!(rf <= linear_budget, "fa riccati delta peak {rf} bytes");
}
