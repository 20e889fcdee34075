//! Property-based checks of the algebraic invariants the kernels promise:
//! tangency of projections, linearity, contraction, agreement of fast and
//! dense paths, and round-trips of the factored representations.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use psdflow::{
    project, project_fa_dense, project_fa_fast, residual_norm_sq, tangent_to_dense, DiagDelta,
    DiagPos, Diagnostics, FactoredPsd, SpdSmall, Stiefel, SymOp, Tolerances,
};

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn randn(d: usize, c: usize, r: &mut ChaCha12Rng) -> DMatrix<f64> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    DMatrix::from_fn(d, c, |_, _| r.sample::<f64, _>(StandardNormal))
}

fn random_h(d: usize, r: &mut ChaCha12Rng) -> (SymOp, DMatrix<f64>) {
    use rand::Rng;
    let g = randn(d, 3, r);
    let c = DVector::from_fn(d, |_, _| r.gen_range(-1.0..1.0));
    let dense = &g * g.transpose() + DMatrix::from_diagonal(&c);
    (SymOp::new(d, vec![(1.0, g)], Some(c)).unwrap(), dense)
}

fn random_base(variant: usize, d: usize, p: usize, r: &mut ChaCha12Rng) -> FactoredPsd {
    use rand::Rng;
    let u = Stiefel::random(d, p, r).unwrap();
    let g = randn(p, p, r);
    let core = SpdSmall::new(&g * g.transpose() + DMatrix::identity(p, p)).unwrap();
    match variant {
        0 => FactoredPsd::low_rank(u, core).unwrap(),
        1 => FactoredPsd::ppca(u, core, 0.4).unwrap(),
        _ => {
            let psi = DiagPos::new(DVector::from_fn(d, |_, _| r.gen_range(0.3..1.7))).unwrap();
            FactoredPsd::fa(u, core, psi).unwrap()
        }
    }
}

fn instance_strategy() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 0usize..3, 8usize..30, 2usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The projected delta is tangent: U'dU = 0 and dR symmetric.
    #[test]
    fn projection_is_tangent((seed, variant, d, p) in instance_strategy()) {
        let mut r = rng(seed);
        let (h, _) = random_h(d, &mut r);
        let base = random_base(variant, d, p, &mut r);
        let mut diags = Diagnostics::default();
        let delta = project(&h, &base, &Tolerances::default(), &mut diags).unwrap();
        prop_assert!(delta.horizontality_defect(base.stiefel()) <= 1e-10);
        prop_assert!((&delta.d_r - delta.d_r.transpose()).norm() <= 1e-12);
    }

    /// Projecting a vector that is already tangent returns it (idempotence
    /// of the orthogonal projector on its own range).
    #[test]
    fn projection_fixes_tangent_vectors((seed, variant, d, p) in instance_strategy()) {
        let mut r = rng(seed);
        let base = random_base(variant, d, p, &mut r);
        let (h_raw, _) = random_h(d, &mut r);
        let mut diags = Diagnostics::default();
        let tol = Tolerances::default();
        let first = project(&h_raw, &base, &tol, &mut diags).unwrap();
        let dy = tangent_to_dense(&base, &first, tol.d_max_dense).unwrap();
        let h_tan = SymOp::from_dense_sym(&dy, tol.d_max_dense).unwrap();
        let second = project(&h_tan, &base, &tol, &mut diags).unwrap();
        let dy2 = tangent_to_dense(&base, &second, tol.d_max_dense).unwrap();
        prop_assert!((&dy2 - &dy).norm() <= 1e-7 * (1.0 + dy.norm()));
        // And the residual of an in-range vector vanishes.
        let res = residual_norm_sq(&h_tan, &base, &second).unwrap();
        prop_assert!(res.abs() <= 1e-7 * (1.0 + dy.norm_squared()));
    }

    /// P(aH1 + bH2) = aP(H1) + bP(H2), compared through densified deltas.
    #[test]
    fn projection_is_linear((seed, variant, d, p) in instance_strategy(),
                            a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let base = random_base(variant, d, p, &mut r);
        let (h1, h1d) = random_h(d, &mut r);
        let (h2, h2d) = random_h(d, &mut r);
        let tol = Tolerances::default();
        let mut diags = Diagnostics::default();
        let combo = SymOp::from_dense_sym(&(&h1d * a + &h2d * b), tol.d_max_dense).unwrap();
        let dc = tangent_to_dense(&base, &project(&combo, &base, &tol, &mut diags).unwrap(), tol.d_max_dense).unwrap();
        let d1 = tangent_to_dense(&base, &project(&h1, &base, &tol, &mut diags).unwrap(), tol.d_max_dense).unwrap();
        let d2 = tangent_to_dense(&base, &project(&h2, &base, &tol, &mut diags).unwrap(), tol.d_max_dense).unwrap();
        let lin = d1 * a + d2 * b;
        prop_assert!((&dc - &lin).norm() <= 1e-7 * (1.0 + lin.norm()));
    }

    /// Orthogonal projection is a contraction: |P(H)|_F <= |H|_F, and the
    /// Pythagoras split holds.
    #[test]
    fn projection_contracts_and_splits((seed, variant, d, p) in instance_strategy()) {
        let mut r = rng(seed);
        let base = random_base(variant, d, p, &mut r);
        let (h, _) = random_h(d, &mut r);
        let tol = Tolerances::default();
        let mut diags = Diagnostics::default();
        let delta = project(&h, &base, &tol, &mut diags).unwrap();
        let dy = tangent_to_dense(&base, &delta, tol.d_max_dense).unwrap();
        let hsq = h.frob_sq();
        prop_assert!(dy.norm_squared() <= hsq * (1.0 + 1e-10));
        let res = residual_norm_sq(&h, &base, &delta).unwrap();
        prop_assert!((hsq - dy.norm_squared() - res).abs() <= 1e-8 * hsq);
    }

    /// Fast and dense FA solvers agree on every component.
    #[test]
    fn fa_fast_equals_dense((seed, d, p) in (any::<u64>(), 8usize..30, 2usize..5)) {
        let mut r = rng(seed);
        let base = random_base(2, d, p, &mut r);
        let (h, _) = random_h(d, &mut r);
        let (u, core, psi) = match &base {
            FactoredPsd::Fa { u, r, psi } => (u, r, psi),
            _ => unreachable!(),
        };
        let tol = Tolerances::default();
        let mut diags = Diagnostics::default();
        let fast = project_fa_fast(&h, u, core, psi, &tol, &mut diags).unwrap();
        let dense = project_fa_dense(&h, u, core, psi, &tol).unwrap();
        prop_assert!((&fast.d_u - &dense.d_u).norm() <= 1e-8 * (1.0 + dense.d_u.norm()));
        prop_assert!((&fast.d_r - &dense.d_r).norm() <= 1e-8 * (1.0 + dense.d_r.norm()));
        match (&fast.diag, &dense.diag) {
            (DiagDelta::Diagonal(a), DiagDelta::Diagonal(b)) => {
                prop_assert!((a - b).norm() <= 1e-8 * (1.0 + b.norm()));
            }
            _ => prop_assert!(false),
        }
    }

    /// densify, apply, and woodbury_solve are mutually consistent.
    #[test]
    fn factored_roundtrips((seed, variant, d, p) in instance_strategy()) {
        let mut r = rng(seed);
        let base = random_base(variant, d, p, &mut r);
        let dense = base.densify(2000).unwrap();
        let x = randn(d, 2, &mut r);
        let applied = base.apply(&x).unwrap();
        prop_assert!((&applied - &dense * &x).norm() <= 1e-9 * (1.0 + applied.norm()));
        if !matches!(base, FactoredPsd::LowRank { .. }) {
            let solved = base.woodbury_solve(&x).unwrap();
            let back = base.apply(&solved).unwrap();
            prop_assert!((&back - &x).norm() <= 1e-8 * (1.0 + x.norm()));
        }
        // PSD: v' Y v >= 0 for a random direction.
        let v = randn(d, 1, &mut r);
        let quad = (v.transpose() * &dense * &v)[(0, 0)];
        prop_assert!(quad >= -1e-10 * v.norm_squared());
    }

    /// Structured operator arithmetic agrees with dense materialization.
    #[test]
    fn symop_matches_dense((seed, d) in (any::<u64>(), 5usize..40)) {
        let mut r = rng(seed);
        let (h, dense) = random_h(d, &mut r);
        let x = randn(d, 3, &mut r);
        prop_assert!((h.mul_tall(&x).unwrap() - &dense * &x).norm() <= 1e-9 * (1.0 + dense.norm() * x.norm()));
        let (diag, trace) = h.diag_and_trace();
        prop_assert!((trace - dense.trace()).abs() <= 1e-9 * (1.0 + dense.trace().abs()));
        prop_assert!((diag - dense.diagonal()).norm() <= 1e-9 * (1.0 + dense.norm()));
        let frob = h.frob_sq();
        prop_assert!((frob - dense.norm_squared()).abs() <= 1e-8 * (1.0 + dense.norm_squared()));
    }
}
