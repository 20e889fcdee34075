//! Exact orthogonal projection of a structured symmetric derivative H onto
//! the tangent structures of the three factored sets, plus the linear-in-d
//! residual monitors. The FA projection comes in a dense oracle form and a
//! fast streaming form whose per-call memory is O(dp + p⁴).

use nalgebra::{DMatrix, DVector};

use crate::config::{Diagnostics, Tolerances};
use crate::error::{Error, Result};
use crate::factored::{DiagPos, FactoredPsd, SpdSmall, Stiefel};
use crate::symop::SymOp;

/// Diagonal component of a tangent vector, tagged per variant.
#[derive(Debug, Clone)]
pub enum DiagDelta {
    /// Low-rank: no diagonal component.
    None,
    /// PPCA: δs.
    Isotropic(f64),
    /// FA: diag(δψ).
    Diagonal(DVector<f64>),
}

/// Projected derivative (δU, δR, δs or δψ) with UᵀδU = 0 and δR symmetric.
#[derive(Debug, Clone)]
pub struct TangentDelta {
    pub d_u: DMatrix<f64>,
    pub d_r: DMatrix<f64>,
    pub diag: DiagDelta,
}

impl TangentDelta {
    pub fn new(d_u: DMatrix<f64>, d_r: DMatrix<f64>, diag: DiagDelta) -> Self {
        let d_r = (&d_r + d_r.transpose()) * 0.5;
        TangentDelta { d_u, d_r, diag }
    }

    pub fn zero(base: &FactoredPsd) -> Self {
        let (d, p) = (base.d(), base.p());
        let diag = match base {
            FactoredPsd::LowRank { .. } => DiagDelta::None,
            FactoredPsd::Ppca { .. } => DiagDelta::Isotropic(0.0),
            FactoredPsd::Fa { .. } => DiagDelta::Diagonal(DVector::zeros(d)),
        };
        TangentDelta {
            d_u: DMatrix::zeros(d, p),
            d_r: DMatrix::zeros(p, p),
            diag,
        }
    }

    /// Horizontality defect ‖Uᵀ δU‖.
    pub fn horizontality_defect(&self, u: &Stiefel) -> f64 {
        (u.matrix().transpose() * &self.d_u).norm()
    }
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Solves X A = B for symmetric A, clamping eigenvalues of magnitude below
/// `eps` (in either direction) so near-singular shifts R - sI stay solvable.
/// Returns whether clamping occurred.
pub(crate) fn solve_right_sym_clamped(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eps: f64,
) -> (DMatrix<f64>, bool) {
    let eig = a.clone().symmetric_eigen();
    let p = a.nrows();
    let mut clamped = false;
    let mut inv = DMatrix::zeros(p, p);
    for k in 0..p {
        let lam = eig.eigenvalues[k];
        // Tikhonov coefficient λ/(λ²+ε²) for small eigenvalues: bounded,
        // and exactly zero on the null space instead of amplifying noise.
        let coeff = if lam.abs() < eps {
            clamped = true;
            lam / (lam * lam + eps * eps)
        } else {
            1.0 / lam
        };
        let v = eig.eigenvectors.column(k);
        inv += v * v.transpose() * coeff;
    }
    (b * inv, clamped)
}

/// Low-rank tangent projection: δU = (I - UUᵀ) H U R⁻¹, δR = Uᵀ H U.
pub fn project_low_rank(h: &SymOp, u: &Stiefel, r: &SpdSmall) -> Result<TangentDelta> {
    check_dims(h, u, r)?;
    let um = u.matrix();
    let hu = h.mul_tall(um)?;
    let d_r = sym(um.transpose() * &hu);
    let perp = &hu - um * (um.transpose() * &hu);
    let d_u = r.solve_right(&perp);
    Ok(TangentDelta::new(d_u, d_r, DiagDelta::None))
}

/// PPCA tangent projection: additionally δs = [Tr H - Tr(UᵀHU)]/(d - p), and the δU solve
/// uses R - sI (Tikhonov-clamped when near singular, counted).
pub fn project_ppca(
    h: &SymOp,
    u: &Stiefel,
    r: &SpdSmall,
    s: f64,
    tol: &Tolerances,
    diags: &mut Diagnostics,
) -> Result<TangentDelta> {
    check_dims(h, u, r)?;
    let (d, p) = (u.d(), u.p());
    let um = u.matrix();
    let hu = h.mul_tall(um)?;
    let d_r = sym(um.transpose() * &hu);
    let d_s = (h.trace() - d_r.trace()) / (d - p) as f64;
    let perp = &hu - um * (um.transpose() * &hu);
    let shifted = r.matrix() - DMatrix::identity(p, p) * s;
    let eps = tol.eps_sing_rel * r.matrix().norm().max(1.0);
    let (d_u, clamped) = solve_right_sym_clamped(&shifted, &perp, eps);
    if clamped {
        diags.near_singular_rs += 1;
    }
    Ok(TangentDelta::new(d_u, d_r, DiagDelta::Isotropic(d_s)))
}

/// Direct FA tangent projection: materializes (I - UUᵀ)°² and pseudo-inverts it.
/// Oracle path, guarded by the dense-size limit.
pub fn project_fa_dense(
    h: &SymOp,
    u: &Stiefel,
    r: &SpdSmall,
    psi: &DiagPos,
    tol: &Tolerances,
) -> Result<TangentDelta> {
    check_dims(h, u, r)?;
    check_psi(u, psi)?;
    let d = u.d();
    if d > tol.d_max_dense {
        return Err(Error::TooLargeToDensify {
            d,
            limit: tol.d_max_dense,
        });
    }
    let um = u.matrix();
    let h_dense = h.densify(tol.d_max_dense)?;
    let pi = DMatrix::identity(d, d) - um * um.transpose();
    let m2 = pi.component_mul(&pi);
    let rhs = (&pi * &h_dense * &pi).diagonal();
    let d_psi = pseudo_solve_sym(&m2, &rhs);
    let mut h_shift = h_dense;
    for i in 0..d {
        h_shift[(i, i)] -= d_psi[i];
    }
    let hu = &h_shift * um;
    let d_r = sym(um.transpose() * &hu);
    let perp = &hu - um * (um.transpose() * &hu);
    let d_u = r.solve_right(&perp);
    Ok(TangentDelta::new(d_u, d_r, DiagDelta::Diagonal(d_psi)))
}

/// Moore-Penrose solve of a symmetric PSD system with relative eigenvalue
/// cutoff 1e-12.
fn pseudo_solve_sym(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    // SVD rather than symmetric_eigen: the latter can return a wholesale
    // wrong decomposition on some well-conditioned inputs. Refine against
    // the exact matrix until the range-component residual stops improving.
    let svd = a.clone().svd(true, true);
    let cutoff = svd.singular_values.max() * 1e-12;
    let apply_pinv = |rhs: &DVector<f64>| {
        svd.solve(rhs, cutoff)
            .expect("SVD solve with both factors requested")
    };
    let mut x = apply_pinv(b);
    let scale = b.norm().max(f64::MIN_POSITIVE);
    let mut best = x.clone();
    let mut best_res = f64::INFINITY;
    for _ in 0..10 {
        let res = b - a * &x;
        // Only the range component of the residual is reducible; for a
        // singular system the null-space component never shrinks.
        let reducible = apply_pinv(&res).norm();
        let range_res = (a * apply_pinv(&res)).norm();
        if range_res < best_res {
            best_res = range_res;
            best = x.clone();
        }
        if reducible <= 1e-15 * scale {
            break;
        }
        x += apply_pinv(&res);
    }
    best
}

/// Quantities of the fast FA solve. The Υ matrix is
/// never materialized; `gram` holds ΥᵀφΥ accumulated row by row.
#[derive(Debug, Clone)]
pub struct FaSolverWorkspace {
    pub h_bar: DVector<f64>,
    pub h_u: DVector<f64>,
    pub lambda: DVector<f64>,
    pub d_bar: DVector<f64>,
    pub gram: DMatrix<f64>,
    pub rhs_small: DVector<f64>,
}

fn upsilon_row(u_row: &[f64], buf: &mut [f64]) {
    let p = u_row.len();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut idx = 0;
    for i in 0..p {
        for j in (i + 1)..p {
            buf[idx] = sqrt2 * u_row[i] * u_row[j];
            idx += 1;
        }
    }
    for i in 0..p {
        buf[idx] = u_row[i] * u_row[i];
        idx += 1;
    }
}

/// Builds h̄, h̄_U, Λ, D̄ and the right-hand side b = h̄ - 2h̄_U + Λ from H
/// and U with O(dp²) work and O(dp) memory.
fn fa_rhs_quantities(
    h: &SymOp,
    u: &Stiefel,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let um = u.matrix();
    let d = u.d();
    let hu = h.mul_tall(um)?;
    let s_small = sym(um.transpose() * &hu); // UᵀHU
    let t = um * &s_small; // U (UᵀHU), d x p
    let (h_bar, _) = h.diag_and_trace();
    let mut h_u = DVector::zeros(d);
    let mut lambda = DVector::zeros(d);
    for k in 0..d {
        h_u[k] = um.row(k).dot(&hu.row(k));
        lambda[k] = um.row(k).dot(&t.row(k));
    }
    let d_bar = u.row_norms_sq();
    Ok((h_bar, h_u, lambda, d_bar, hu, s_small))
}

/// Fast FA tangent projection: the diagonal solve at linear cost in d.
/// Falls back to a matrix-free CG on the regularized normal equations when
/// the φ = (I - 2D̄)⁻¹ step is ill conditioned.
pub fn project_fa_fast(
    h: &SymOp,
    u: &Stiefel,
    r: &SpdSmall,
    psi: &DiagPos,
    tol: &Tolerances,
    diags: &mut Diagnostics,
) -> Result<TangentDelta> {
    check_dims(h, u, r)?;
    check_psi(u, psi)?;
    let (h_bar, h_u, lambda, d_bar, hu, _s_small) = fa_rhs_quantities(h, u)?;
    let b = &h_bar - &h_u * 2.0 + &lambda;
    let (d_psi, _ws) = fa_diag_solve(u, &b, &d_bar, &h_bar, &h_u, &lambda, tol, diags);
    finish_fa_delta(u, r, &hu, &d_psi)
}

/// Shared tail: δU = (I-UUᵀ)(H-δψ)UR⁻¹, δR = Uᵀ(H-δψ)U given HU and δψ.
pub(crate) fn finish_fa_delta(
    u: &Stiefel,
    r: &SpdSmall,
    hu: &DMatrix<f64>,
    d_psi: &DVector<f64>,
) -> Result<TangentDelta> {
    let um = u.matrix();
    let mut v1 = hu.clone();
    for j in 0..v1.ncols() {
        for i in 0..v1.nrows() {
            v1[(i, j)] -= d_psi[i] * um[(i, j)];
        }
    }
    let d_r = sym(um.transpose() * &v1);
    let perp = &v1 - um * (um.transpose() * &v1);
    let d_u = r.solve_right(&perp);
    Ok(TangentDelta::new(
        d_u,
        d_r,
        DiagDelta::Diagonal(d_psi.clone()),
    ))
}

/// Solves (I - 2D̄ + ΥΥᵀ) δψ̄ = b streaming over the rows of Υ.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fa_diag_solve(
    u: &Stiefel,
    b: &DVector<f64>,
    d_bar: &DVector<f64>,
    h_bar: &DVector<f64>,
    h_u: &DVector<f64>,
    lambda: &DVector<f64>,
    tol: &Tolerances,
    diags: &mut Diagnostics,
) -> (DVector<f64>, FaSolverWorkspace) {
    let um = u.matrix();
    let (d, p) = (u.d(), u.p());
    let q = p * (p + 1) / 2;
    let mut ybuf = vec![0.0; q];

    let well_conditioned = d_bar.iter().all(|&x| (1.0 - 2.0 * x).abs() >= tol.eps_phi);

    let mut gram = DMatrix::zeros(q, q);
    let mut rhs_small = DVector::zeros(q);
    let d_psi = if q >= d {
        // The Woodbury rearrangement pays off only while q = p(p+1)/2 stays
        // below d; past that point the q×q correction system is larger than
        // the d×d system it came from, so solve (I - UUᵀ)°² directly.
        match fa_direct_solve(um, b) {
            Some(x) => x,
            None => {
                diags.ill_conditioned_phi += 1;
                fa_cg_fallback(um, b, d_bar, tol, &mut ybuf)
            }
        }
    } else if well_conditioned {
        let phi: Vec<f64> = d_bar.iter().map(|&x| 1.0 / (1.0 - 2.0 * x)).collect();
        for k in 0..d {
            let row: Vec<f64> = um.row(k).iter().copied().collect();
            upsilon_row(&row, &mut ybuf);
            let pk = phi[k];
            for a in 0..q {
                let ya = ybuf[a];
                rhs_small[a] += pk * b[k] * ya;
                for bb in a..q {
                    gram[(a, bb)] += pk * ya * ybuf[bb];
                }
            }
        }
        for a in 0..q {
            for bb in 0..a {
                gram[(a, bb)] = gram[(bb, a)];
            }
        }
        let small = &gram + DMatrix::identity(q, q);
        let lu = small.lu();
        // One Woodbury pass: x = φ(rhs - Υ (I + ΥᵀφΥ)⁻¹ Υᵀ φ rhs).
        let wood_solve = |rhs: &DVector<f64>, ybuf: &mut [f64]| -> Option<DVector<f64>> {
            let phir = DVector::from_fn(d, |k, _| phi[k] * rhs[k]);
            let z = lu.solve(&upsilon_t_apply(um, &phir, ybuf))?;
            let mut out = DVector::zeros(d);
            for k in 0..d {
                let row: Vec<f64> = um.row(k).iter().copied().collect();
                upsilon_row(&row, ybuf);
                let mut dot = 0.0;
                for a in 0..q {
                    dot += ybuf[a] * z[a];
                }
                out[k] = phi[k] * (rhs[k] - dot);
            }
            Some(out)
        };
        let m_apply = |v: &DVector<f64>, ybuf: &mut [f64]| -> DVector<f64> {
            let mut out = DVector::from_fn(d, |k, _| (1.0 - 2.0 * d_bar[k]) * v[k]);
            let t = upsilon_t_apply(um, v, ybuf);
            upsilon_apply_add(um, &t, ybuf, &mut out);
            out
        };
        // The additive split I - 2D̄ + ΥΥᵀ can be far worse conditioned than
        // the (PSD, eigenvalues in [0,1]) matrix it represents, so the raw
        // Woodbury solution may carry a large forward error even when every
        // φ_k is tame. Matrix-free iterative refinement contracts that error
        // as long as the split is merely bad rather than hopeless; if the
        // residual will not shrink, give up and use the regularized CG.
        let b_scale = b.norm().max(f64::MIN_POSITIVE);
        let refined = wood_solve(b, &mut ybuf).and_then(|mut x| {
            let mut res_norm = f64::INFINITY;
            for _ in 0..4 {
                let res = b - m_apply(&x, &mut ybuf);
                res_norm = res.norm();
                if res_norm <= 1e-14 * b_scale {
                    break;
                }
                x += wood_solve(&res, &mut ybuf)?;
            }
            if res_norm <= 1e-10 * b_scale {
                Some(x)
            } else {
                None
            }
        });
        match refined {
            Some(x) => x,
            None => {
                diags.ill_conditioned_phi += 1;
                fa_cg_fallback(um, b, d_bar, tol, &mut ybuf)
            }
        }
    } else {
        diags.ill_conditioned_phi += 1;
        fa_cg_fallback(um, b, d_bar, tol, &mut ybuf)
    };

    let ws = FaSolverWorkspace {
        h_bar: h_bar.clone(),
        h_u: h_u.clone(),
        lambda: lambda.clone(),
        d_bar: d_bar.clone(),
        gram,
        rhs_small,
    };
    (d_psi, ws)
}

/// Dense Cholesky solve of (I - UUᵀ)°² x = b for the q ≥ d regime, with
/// iterative refinement against the exactly assembled matrix. Returns None
/// when the matrix is not numerically PD or refinement stalls.
fn fa_direct_solve(um: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let d = um.nrows();
    let pi = DMatrix::identity(d, d) - um * um.transpose();
    let m = pi.component_mul(&pi);
    let chol = m.clone().cholesky()?;
    let mut x = chol.solve(b);
    let b_scale = b.norm().max(f64::MIN_POSITIVE);
    let mut res_norm = f64::INFINITY;
    for _ in 0..4 {
        let res = b - &m * &x;
        res_norm = res.norm();
        if res_norm <= 1e-14 * b_scale {
            break;
        }
        x += chol.solve(&res);
    }
    (res_norm <= 1e-10 * b_scale).then_some(x)
}

/// Υᵀ v, streamed over rows.
fn upsilon_t_apply(um: &DMatrix<f64>, v: &DVector<f64>, ybuf: &mut [f64]) -> DVector<f64> {
    let q = ybuf.len();
    let mut out = DVector::zeros(q);
    for k in 0..um.nrows() {
        let row: Vec<f64> = um.row(k).iter().copied().collect();
        upsilon_row(&row, ybuf);
        for a in 0..q {
            out[a] += ybuf[a] * v[k];
        }
    }
    out
}

/// Υ w added into `out`, streamed over rows.
fn upsilon_apply_add(um: &DMatrix<f64>, w: &DVector<f64>, ybuf: &mut [f64], out: &mut DVector<f64>) {
    let q = ybuf.len();
    for k in 0..um.nrows() {
        let row: Vec<f64> = um.row(k).iter().copied().collect();
        upsilon_row(&row, ybuf);
        let mut dot = 0.0;
        for a in 0..q {
            dot += ybuf[a] * w[a];
        }
        out[k] += dot;
    }
}

/// Conjugate gradient on (I - 2D̄ + ΥΥᵀ + εI) x = b. The unregularized
/// matrix is (I - UUᵀ)°², hence PSD; with the shift it is PD. Matrix-free,
/// O(dp²) per iteration.
fn fa_cg_fallback(
    um: &DMatrix<f64>,
    b: &DVector<f64>,
    d_bar: &DVector<f64>,
    tol: &Tolerances,
    ybuf: &mut [f64],
) -> DVector<f64> {
    let d = um.nrows();
    let eps = tol.tikhonov;
    let matvec = |v: &DVector<f64>, ybuf: &mut [f64]| -> DVector<f64> {
        let mut out = DVector::zeros(d);
        for k in 0..d {
            out[k] = (1.0 - 2.0 * d_bar[k] + eps) * v[k];
        }
        let t = upsilon_t_apply(um, v, ybuf);
        upsilon_apply_add(um, &t, ybuf, &mut out);
        out
    };
    let mut x = DVector::zeros(d);
    let mut res = b.clone();
    let mut dir = res.clone();
    let mut rs_old = res.norm_squared();
    let target = rs_old * 1e-24;
    let max_iter = 20 * ybuf.len() + 200;
    for _ in 0..max_iter {
        if rs_old <= target {
            break;
        }
        let ad = matvec(&dir, ybuf);
        let alpha = rs_old / dir.dot(&ad);
        if !alpha.is_finite() {
            break;
        }
        x += &dir * alpha;
        res -= ad * alpha;
        let rs_new = res.norm_squared();
        dir = &res + &dir * (rs_new / rs_old);
        rs_old = rs_new;
    }
    x
}

/// Projects H onto the tangent structure of `base`, FA via the fast path.
pub fn project(
    h: &SymOp,
    base: &FactoredPsd,
    tol: &Tolerances,
    diags: &mut Diagnostics,
) -> Result<TangentDelta> {
    match base {
        FactoredPsd::LowRank { u, r } => project_low_rank(h, u, r),
        FactoredPsd::Ppca { u, r, s } => project_ppca(h, u, r, *s, tol, diags),
        FactoredPsd::Fa { u, r, psi } => project_fa_fast(h, u, r, psi, tol, diags),
    }
}

/// ‖H - P(H)‖²_F at linear cost in d (residual monitor).
pub fn residual_norm_sq(h: &SymOp, base: &FactoredPsd, delta: &TangentDelta) -> Result<f64> {
    let u = base.stiefel();
    let um = u.matrix();
    let (d, p) = (u.d(), u.p());
    let hu = h.mul_tall(um)?;
    let s_small = um.transpose() * &hu;
    // Tr((I-UUᵀ)H(I-UUᵀ)H) = Tr H² - 2‖HU‖² + ‖UᵀHU‖².
    let lowrank_res = h.frob_sq() - 2.0 * hu.norm_squared() + s_small.norm_squared();
    match (base, &delta.diag) {
        (FactoredPsd::LowRank { .. }, DiagDelta::None) => Ok(lowrank_res),
        (FactoredPsd::Ppca { .. }, DiagDelta::Isotropic(ds)) => {
            // ‖Π(H - δs I)Π‖² = Tr(ΠHΠH) - (d-p) δs².
            Ok(lowrank_res - (d - p) as f64 * ds * ds)
        }
        (FactoredPsd::Fa { .. }, DiagDelta::Diagonal(d_psi)) => {
            let (h_bar, _) = h.diag_and_trace();
            let mut h_u = DVector::zeros(d);
            let t = um * sym(s_small.clone());
            let mut lambda = DVector::zeros(d);
            for k in 0..d {
                h_u[k] = um.row(k).dot(&hu.row(k));
                lambda[k] = um.row(k).dot(&t.row(k));
            }
            let d_bar = u.row_norms_sq();
            let alpha = lowrank_res - h_bar.norm_squared();
            let q = p * (p + 1) / 2;
            let mut ybuf = vec![0.0; q];
            let ups = upsilon_t_apply(um, d_psi, &mut ybuf);
            let mut val = alpha + (&h_bar - d_psi).norm_squared() + 4.0 * h_u.dot(d_psi)
                - 2.0 * lambda.dot(d_psi)
                + ups.norm_squared();
            for k in 0..d {
                val -= 2.0 * d_bar[k] * d_psi[k] * d_psi[k];
            }
            Ok(val)
        }
        _ => Err(Error::MismatchedVariant),
    }
}

/// Materializes δY for the base's parameterization. Test utility.
pub fn tangent_to_dense(
    base: &FactoredPsd,
    delta: &TangentDelta,
    d_max_dense: usize,
) -> Result<DMatrix<f64>> {
    let d = base.d();
    if d > d_max_dense {
        return Err(Error::TooLargeToDensify {
            d,
            limit: d_max_dense,
        });
    }
    let um = base.stiefel().matrix();
    let p = base.p();
    match (base, &delta.diag) {
        (FactoredPsd::LowRank { r, .. }, DiagDelta::None) => {
            let a = &delta.d_u * r.matrix() * um.transpose();
            Ok(&a + a.transpose() + um * &delta.d_r * um.transpose())
        }
        (FactoredPsd::Ppca { r, s, .. }, DiagDelta::Isotropic(ds)) => {
            let shifted = r.matrix() - DMatrix::identity(p, p) * *s;
            let a = &delta.d_u * &shifted * um.transpose();
            let mid = um * (&delta.d_r - DMatrix::identity(p, p) * *ds) * um.transpose();
            Ok(&a + a.transpose() + mid + DMatrix::identity(d, d) * *ds)
        }
        (FactoredPsd::Fa { r, .. }, DiagDelta::Diagonal(d_psi)) => {
            let a = &delta.d_u * r.matrix() * um.transpose();
            let mut out = &a + a.transpose() + um * &delta.d_r * um.transpose();
            for i in 0..d {
                out[(i, i)] += d_psi[i];
            }
            Ok(out)
        }
        _ => Err(Error::MismatchedVariant),
    }
}

fn check_dims(h: &SymOp, u: &Stiefel, r: &SpdSmall) -> Result<()> {
    if h.d() != u.d() {
        return Err(Error::DimensionMismatch(format!(
            "operator dimension {} does not match d = {}",
            h.d(),
            u.d()
        )));
    }
    if r.size() != u.p() {
        return Err(Error::DimensionMismatch(format!(
            "core size {} does not match p = {}",
            r.size(),
            u.p()
        )));
    }
    Ok(())
}

fn check_psi(u: &Stiefel, psi: &DiagPos) -> Result<()> {
    if psi.len() != u.d() {
        return Err(Error::DimensionMismatch(format!(
            "psi length {} does not match d = {}",
            psi.len(),
            u.d()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_symop(d: usize, seed: u64) -> SymOp {
        let mut rng = rng(seed);
        let g1 = DMatrix::from_fn(d, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g2 = DMatrix::from_fn(d, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        SymOp::new(d, vec![(1.0, g1), (-0.6, g2)], Some(c)).unwrap()
    }

    fn random_base(d: usize, p: usize, kind: &str, seed: u64) -> FactoredPsd {
        let mut rng = rng(seed);
        let u = Stiefel::random(d, p, &mut rng).unwrap();
        let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = SpdSmall::new(&g * g.transpose() + DMatrix::identity(p, p)).unwrap();
        match kind {
            "lowrank" => FactoredPsd::low_rank(u, r).unwrap(),
            "ppca" => FactoredPsd::ppca(u, r, 0.3 + rng.gen_range(0.0..1.0)).unwrap(),
            "fa" => {
                let psi =
                    DiagPos::new(DVector::from_fn(d, |_, _| 0.3 + rng.gen_range(0.0..1.0)))
                        .unwrap();
                FactoredPsd::fa(u, r, psi).unwrap()
            }
            _ => unreachable!(),
        }
    }

    fn dense_projection(base: &FactoredPsd, delta: &TangentDelta) -> DMatrix<f64> {
        tangent_to_dense(base, delta, 2000).unwrap()
    }

    #[test]
    fn lowrank_tangent_input_is_reproduced() {
        // H = U M Uᵀ is already tangent: δU = 0, δR = M.
        let base = random_base(15, 3, "lowrank", 1);
        let (u, r) = match &base {
            FactoredPsd::LowRank { u, r } => (u, r),
            _ => unreachable!(),
        };
        let mut rng = rng(2);
        let g = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = (&g + g.transpose()) * 0.5;
        let eig = m.clone().symmetric_eigen();
        let mut terms = Vec::new();
        for k in 0..3 {
            let col = u.matrix() * eig.eigenvectors.column(k);
            let v = DMatrix::from_column_slice(15, 1, col.as_slice());
            terms.push((eig.eigenvalues[k], v));
        }
        let h = SymOp::new(15, terms, None).unwrap();
        let delta = project_low_rank(&h, u, r).unwrap();
        assert!(delta.d_u.norm() <= 1e-10);
        assert!((&delta.d_r - &m).norm() <= 1e-10);
        let res = residual_norm_sq(&h, &base, &delta).unwrap();
        assert!(res.abs() <= 1e-8 * h.frob_sq());
    }

    #[test]
    fn lowrank_identity_input() {
        let base = random_base(12, 4, "lowrank", 3);
        let (u, r) = match &base {
            FactoredPsd::LowRank { u, r } => (u, r),
            _ => unreachable!(),
        };
        let h = SymOp::scaled_identity(12, 1.0);
        let delta = project_low_rank(&h, u, r).unwrap();
        assert!(delta.d_u.norm() <= 1e-12);
        assert!((&delta.d_r - DMatrix::identity(4, 4)).norm() <= 1e-12);
    }

    #[test]
    fn ppca_identity_is_tangent() {
        let base = random_base(14, 3, "ppca", 4);
        let (u, r, s) = match &base {
            FactoredPsd::Ppca { u, r, s } => (u, r, *s),
            _ => unreachable!(),
        };
        let h = SymOp::scaled_identity(14, 1.0);
        let mut diags = Diagnostics::default();
        let delta = project_ppca(&h, u, r, s, &Tolerances::default(), &mut diags).unwrap();
        match delta.diag {
            DiagDelta::Isotropic(ds) => assert!((ds - 1.0).abs() <= 1e-12),
            _ => panic!("wrong variant"),
        }
        assert!(delta.d_u.norm() <= 1e-10);
        let py = dense_projection(&base, &delta);
        assert!((py - DMatrix::identity(14, 14)).norm() <= 1e-10);
        let res = residual_norm_sq(&h, &base, &delta).unwrap();
        assert!(res.abs() <= 1e-8 * 14.0);
    }

    #[test]
    fn ppca_range_confined_h_gives_zero_ds() {
        let base = random_base(16, 3, "ppca", 5);
        let (u, r, s) = match &base {
            FactoredPsd::Ppca { u, r, s } => (u, r, *s),
            _ => unreachable!(),
        };
        // H = U M Uᵀ: Tr H = Tr UᵀHU.
        let um = u.matrix().clone();
        let h =
            SymOp::from_outer(1.7, DMatrix::from_column_slice(16, 1, um.column(0).as_slice()))
                .unwrap();
        let mut diags = Diagnostics::default();
        let delta = project_ppca(&h, u, r, s, &Tolerances::default(), &mut diags).unwrap();
        match delta.diag {
            DiagDelta::Isotropic(ds) => assert!(ds.abs() <= 1e-12),
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn fa_dense_diagonal_h_is_exact() {
        let base = random_base(18, 3, "fa", 6);
        let (u, r, psi) = match &base {
            FactoredPsd::Fa { u, r, psi } => (u, r, psi),
            _ => unreachable!(),
        };
        let mut rng = rng(7);
        let hvec = DVector::from_fn(18, |_, _| rng.gen_range(-1.0..1.0));
        let h = SymOp::from_diag(hvec);
        let tol = Tolerances::default();
        let delta = project_fa_dense(&h, u, r, psi, &tol).unwrap();
        let py = dense_projection(&base, &delta);
        let hd = h.densify(2000).unwrap();
        assert!((py - &hd).norm() <= 1e-8 * hd.norm());
        let res = residual_norm_sq(&h, &base, &delta).unwrap();
        assert!(res.abs() <= 1e-8 * h.frob_sq());
    }

    #[test]
    fn fa_fast_identity_input_residual_zero() {
        let base = random_base(20, 3, "fa", 8);
        let (u, r, psi) = match &base {
            FactoredPsd::Fa { u, r, psi } => (u, r, psi),
            _ => unreachable!(),
        };
        let h = SymOp::scaled_identity(20, 1.0);
        let tol = Tolerances::default();
        let mut diags = Diagnostics::default();
        let delta = project_fa_fast(&h, u, r, psi, &tol, &mut diags).unwrap();
        let py = dense_projection(&base, &delta);
        assert!((py - DMatrix::identity(20, 20)).norm() <= 1e-8);
        let res = residual_norm_sq(&h, &base, &delta).unwrap();
        assert!(res.abs() <= 1e-8 * 20.0);
    }

    #[test]
    fn fa_fast_matches_fa_dense() {
        let tol = Tolerances::default();
        for seed in 0..20 {
            let d = 20 + (seed as usize % 3) * 10;
            let p = 3 + (seed as usize % 4);
            let base = random_base(d, p, "fa", 100 + seed);
            let (u, r, psi) = match &base {
                FactoredPsd::Fa { u, r, psi } => (u, r, psi),
                _ => unreachable!(),
            };
            let h = random_symop(d, 200 + seed);
            let mut diags = Diagnostics::default();
            let fast = project_fa_fast(&h, u, r, psi, &tol, &mut diags).unwrap();
            let dense = project_fa_dense(&h, u, r, psi, &tol).unwrap();
            let dy_fast = dense_projection(&base, &fast);
            let dy_dense = dense_projection(&base, &dense);
            assert!(
                (dy_fast - &dy_dense).norm() <= 1e-8 * dy_dense.norm().max(1.0),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn residual_of_normal_h_is_total_for_lowrank() {
        // H = GGᵀ with G ⟂ span(U): residual equals ‖GᵀG‖².
        let mut r = rng(9);
        let u = Stiefel::random(12, 3, &mut r).unwrap();
        let g_raw = DMatrix::from_fn(12, 2, |_, _| r.sample::<f64, _>(StandardNormal));
        let g = u.project_complement(&g_raw);
        let h = SymOp::from_outer(1.0, g.clone()).unwrap();
        let core = SpdSmall::identity(3);
        let base = FactoredPsd::low_rank(u.clone(), core.clone()).unwrap();
        let delta = project_low_rank(&h, &u, &core).unwrap();
        let res = residual_norm_sq(&h, &base, &delta).unwrap();
        let expect = (g.transpose() * &g).norm_squared();
        assert!((res - expect).abs() <= 1e-8 * expect);
    }

    #[test]
    fn residuals_match_dense_for_all_variants() {
        let tol = Tolerances::default();
        for kind in ["lowrank", "ppca", "fa"] {
            for seed in 0..8 {
                let base = random_base(25, 4, kind, 300 + seed);
                let h = random_symop(25, 400 + seed);
                let mut diags = Diagnostics::default();
                let delta = project(&h, &base, &tol, &mut diags).unwrap();
                let res = residual_norm_sq(&h, &base, &delta).unwrap();
                let hd = h.densify(2000).unwrap();
                let py = dense_projection(&base, &delta);
                let dense_res = (hd - py).norm_squared();
                assert!(
                    (res - dense_res).abs() <= 1e-8 * dense_res.max(1.0),
                    "{kind} seed {seed}: {res} vs {dense_res}"
                );
            }
        }
    }

    #[test]
    fn projection_is_contractive_and_pythagorean() {
        let tol = Tolerances::default();
        for kind in ["lowrank", "ppca", "fa"] {
            for seed in 0..5 {
                let base = random_base(22, 3, kind, 500 + seed);
                let h = random_symop(22, 600 + seed);
                let mut diags = Diagnostics::default();
                let delta = project(&h, &base, &tol, &mut diags).unwrap();
                let py = dense_projection(&base, &delta);
                let h_norm_sq = h.frob_sq();
                assert!(py.norm() <= h_norm_sq.sqrt() + 1e-10);
                let res = residual_norm_sq(&h, &base, &delta).unwrap();
                let lhs = h_norm_sq;
                let rhs = res + py.norm_squared();
                assert!((lhs - rhs).abs() <= 1e-8 * lhs, "{kind}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn projection_is_linear_in_h() {
        let tol = Tolerances::default();
        for kind in ["lowrank", "ppca", "fa"] {
            let base = random_base(18, 3, kind, 700);
            let h1 = random_symop(18, 701);
            let h2 = random_symop(18, 702);
            let (a, b) = (1.7, -0.4);
            let comb = h1.scale(a).add(&h2.scale(b)).unwrap();
            let mut diags = Diagnostics::default();
            let d1 = project(&h1, &base, &tol, &mut diags).unwrap();
            let d2 = project(&h2, &base, &tol, &mut diags).unwrap();
            let dc = project(&comb, &base, &tol, &mut diags).unwrap();
            let lhs = dense_projection(&base, &dc);
            let rhs = dense_projection(&base, &d1) * a + dense_projection(&base, &d2) * b;
            assert!((lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0), "{kind}");
        }
    }

    #[test]
    fn horizontality_holds() {
        let tol = Tolerances::default();
        for kind in ["lowrank", "ppca", "fa"] {
            let base = random_base(30, 5, kind, 800);
            let h = random_symop(30, 801);
            let mut diags = Diagnostics::default();
            let delta = project(&h, &base, &tol, &mut diags).unwrap();
            let defect = delta.horizontality_defect(base.stiefel());
            assert!(defect <= 1e-9 * delta.d_u.norm().max(1.0), "{kind}");
        }
    }

    #[test]
    fn fa_fallback_path_still_solves() {
        // Force |1 - 2 Dbar_ii| below threshold: a row of U with norm² = 1/2.
        let d = 10;
        let p = 2;
        let mut um = DMatrix::zeros(d, p);
        let a = (0.5f64).sqrt();
        um[(0, 0)] = a;
        um[(1, 0)] = a;
        um[(0, 1)] = a;
        um[(1, 1)] = -a;
        let u = Stiefel::new(um).unwrap();
        let r = SpdSmall::identity(p);
        let psi = DiagPos::constant(d, 1.0).unwrap();
        let h = random_symop(d, 900);
        let tol = Tolerances::default();
        let mut diags = Diagnostics::default();
        let fast = project_fa_fast(&h, &u, &r, &psi, &tol, &mut diags).unwrap();
        assert_eq!(diags.ill_conditioned_phi, 1);
        let dense = project_fa_dense(&h, &u, &r, &psi, &tol).unwrap();
        let base = FactoredPsd::fa(u, r, psi).unwrap();
        let dy_fast = dense_projection(&base, &fast);
        let dy_dense = dense_projection(&base, &dense);
        assert!((dy_fast - &dy_dense).norm() <= 1e-6 * dy_dense.norm().max(1.0));
    }

    #[test]
    fn zero_delta_densifies_to_zero() {
        let base = random_base(10, 2, "ppca", 950);
        let delta = TangentDelta::zero(&base);
        let dy = tangent_to_dense(&base, &delta, 2000).unwrap();
        assert_eq!(dy.norm(), 0.0);
    }

    #[test]
    fn ppca_pure_ds_is_identity() {
        // δU = 0, δR = δs I gives δY = I by the (tan:psi2) identity.
        let base = random_base(9, 2, "ppca", 960);
        let delta = TangentDelta::new(
            DMatrix::zeros(9, 2),
            DMatrix::identity(2, 2),
            DiagDelta::Isotropic(1.0),
        );
        let dy = tangent_to_dense(&base, &delta, 2000).unwrap();
        assert!((dy - DMatrix::identity(9, 9)).norm() <= 1e-12);
    }
}
