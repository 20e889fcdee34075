//! Riccati vector fields: the dense reference, and direct evaluations of the
//! projected fields on the three factored sets. The measurement term
//! S = CᵀN⁻¹C is never formed; everything flows through the sparse C and the
//! Cholesky factor of N, so each evaluation is linear in d.

use nalgebra::{DMatrix, DVector};

use crate::config::{Diagnostics, Tolerances};
use crate::error::{Error, Result};
use crate::factored::{DiagPos, FactoredPsd, SpdSmall, Stiefel};
use crate::integrate::IntegratorConfig;
use crate::projection::{project_fa_fast, solve_right_sym_clamped, DiagDelta, TangentDelta};
use crate::symop::SymOp;

/// Structured drift operator A: zero, diagonal, or a sum of tall outer
/// products Σⱼ XⱼYⱼᵀ.
#[derive(Debug, Clone)]
pub enum LinOpA {
    Zero { d: usize },
    Diagonal(DVector<f64>),
    OuterSum {
        d: usize,
        factors: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    },
}

impl LinOpA {
    pub fn zero(d: usize) -> Self {
        LinOpA::Zero { d }
    }

    pub fn diagonal(v: DVector<f64>) -> Self {
        LinOpA::Diagonal(v)
    }

    pub fn outer_sum(d: usize, factors: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> Result<Self> {
        for (x, y) in &factors {
            if x.nrows() != d || y.nrows() != d || x.ncols() != y.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "outer factor shapes {:?} and {:?} incompatible with d = {d}",
                    x.shape(),
                    y.shape()
                )));
            }
        }
        Ok(LinOpA::OuterSum { d, factors })
    }

    /// Encodes a small dense A exactly (A = A·Iᵀ). Oracle utility.
    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "square matrix required, got {:?}",
                m.shape()
            )));
        }
        let d = m.nrows();
        LinOpA::outer_sum(d, vec![(m.clone(), DMatrix::identity(d, d))])
    }

    pub fn d(&self) -> usize {
        match self {
            LinOpA::Zero { d } => *d,
            LinOpA::Diagonal(v) => v.len(),
            LinOpA::OuterSum { d, .. } => *d,
        }
    }

    /// A X for tall X.
    pub fn apply_tall(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            LinOpA::Zero { .. } => DMatrix::zeros(x.nrows(), x.ncols()),
            LinOpA::Diagonal(v) => {
                let mut out = x.clone();
                for j in 0..out.ncols() {
                    for i in 0..out.nrows() {
                        out[(i, j)] *= v[i];
                    }
                }
                out
            }
            LinOpA::OuterSum { d, factors } => {
                let mut out = DMatrix::zeros(*d, x.ncols());
                for (u, v) in factors {
                    out += u * (v.transpose() * x);
                }
                out
            }
        }
    }

    /// Aᵀ X for tall X.
    pub fn apply_transpose_tall(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            LinOpA::Zero { .. } => DMatrix::zeros(x.nrows(), x.ncols()),
            LinOpA::Diagonal(_) => self.apply_tall(x),
            LinOpA::OuterSum { d, factors } => {
                let mut out = DMatrix::zeros(*d, x.ncols());
                for (u, v) in factors {
                    out += v * (u.transpose() * x);
                }
                out
            }
        }
    }

    pub fn diagonal_vec(&self) -> DVector<f64> {
        match self {
            LinOpA::Zero { d } => DVector::zeros(*d),
            LinOpA::Diagonal(v) => v.clone(),
            LinOpA::OuterSum { d, factors } => {
                let mut out = DVector::zeros(*d);
                for (u, v) in factors {
                    for i in 0..*d {
                        out[i] += u.row(i).dot(&v.row(i));
                    }
                }
                out
            }
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal_vec().sum()
    }

    /// SymOp encoding of α(Aψ + ψAᵀ) for a diagonal weight ψ (α absorbs the
    /// isotropic PPCA case ψ = sI via `scaled_sym`).
    pub fn sym_with_diag(&self, psi: &DVector<f64>) -> Result<SymOp> {
        match self {
            LinOpA::Zero { d } => Ok(SymOp::zero(*d)),
            LinOpA::Diagonal(a) => {
                Ok(SymOp::from_diag(DVector::from_fn(a.len(), |i, _| {
                    2.0 * a[i] * psi[i]
                })))
            }
            LinOpA::OuterSum { d, factors } => {
                let mut acc = SymOp::zero(*d);
                for (u, v) in factors {
                    let mut pv = v.clone();
                    for j in 0..pv.ncols() {
                        for i in 0..pv.nrows() {
                            pv[(i, j)] *= psi[i];
                        }
                    }
                    acc = acc.add(&SymOp::cross_product(u, &pv)?)?;
                }
                Ok(acc)
            }
        }
    }

    /// SymOp encoding of s(A + Aᵀ).
    pub fn scaled_sym(&self, s: f64) -> Result<SymOp> {
        self.sym_with_diag(&DVector::from_element(self.d(), s))
    }

    pub fn densify(&self, d_max_dense: usize) -> Result<DMatrix<f64>> {
        let d = self.d();
        if d > d_max_dense {
            return Err(Error::TooLargeToDensify {
                d,
                limit: d_max_dense,
            });
        }
        Ok(self.apply_tall(&DMatrix::identity(d, d)))
    }
}

/// k×d measurement matrix stored as one entry list per row.
#[derive(Debug, Clone)]
pub struct SparseC {
    d: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseC {
    pub fn new(d: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for row in &rows {
            for &(j, _) in row {
                if j >= d {
                    return Err(Error::DimensionMismatch(format!(
                        "column index {j} out of range for d = {d}"
                    )));
                }
            }
        }
        Ok(SparseC { d, rows })
    }

    /// The empty measurement (k = 0).
    pub fn none(d: usize) -> Self {
        SparseC { d, rows: Vec::new() }
    }

    /// C = I (full observation).
    pub fn identity(d: usize) -> Self {
        SparseC {
            d,
            rows: (0..d).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// C X, k×m output.
    pub fn apply_tall(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.k(), x.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, val) in row {
                for c in 0..x.ncols() {
                    out[(i, c)] += val * x[(j, c)];
                }
            }
        }
        out
    }

    /// Cᵀ Y, d×m output.
    pub fn apply_transpose_tall(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d, y.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, val) in row {
                for c in 0..y.ncols() {
                    out[(j, c)] += val * y[(i, c)];
                }
            }
        }
        out
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.k());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, val) in row {
                out[i] += val * x[j];
            }
        }
        out
    }

    pub fn apply_transpose_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.d);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, val) in row {
                out[j] += val * y[i];
            }
        }
        out
    }

    pub fn densify(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.k(), self.d);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, val) in row {
                out[(i, j)] += val;
            }
        }
        out
    }
}

/// k×k SPD measurement-noise covariance.
#[derive(Debug, Clone)]
pub enum NoiseCov {
    Isotropic { k: usize, value: f64 },
    Diagonal(DVector<f64>),
    Full(SpdSmall),
}

impl NoiseCov {
    pub fn isotropic(k: usize, value: f64) -> Result<Self> {
        if !(value > 0.0) {
            return Err(Error::NotPd);
        }
        Ok(NoiseCov::Isotropic { k, value })
    }

    pub fn k(&self) -> usize {
        match self {
            NoiseCov::Isotropic { k, .. } => *k,
            NoiseCov::Diagonal(v) => v.len(),
            NoiseCov::Full(m) => m.size(),
        }
    }

    /// L⁻ᵀ where N = LLᵀ; k×k.
    pub fn chol_lt_inv(&self) -> Result<DMatrix<f64>> {
        let k = self.k();
        match self {
            NoiseCov::Isotropic { value, .. } => {
                Ok(DMatrix::identity(k, k) / value.sqrt())
            }
            NoiseCov::Diagonal(v) => {
                for (i, &x) in v.iter().enumerate() {
                    if !(x > 0.0) {
                        return Err(Error::NonPositiveDiagonal { index: i });
                    }
                }
                Ok(DMatrix::from_diagonal(&v.map(|x| 1.0 / x.sqrt())))
            }
            NoiseCov::Full(m) => {
                let l = m.cholesky().l();
                let l_inv = l
                    .solve_lower_triangular(&DMatrix::identity(k, k))
                    .ok_or(Error::NotPd)?;
                Ok(l_inv.transpose())
            }
        }
    }

    /// N⁻¹ y.
    pub fn solve_vec(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            NoiseCov::Isotropic { value, .. } => Ok(y / *value),
            NoiseCov::Diagonal(v) => Ok(DVector::from_fn(y.len(), |i, _| y[i] / v[i])),
            NoiseCov::Full(m) => {
                let mut out = y.clone();
                m.cholesky().solve_mut(&mut out);
                Ok(out)
            }
        }
    }

    pub fn densify(&self) -> DMatrix<f64> {
        let k = self.k();
        match self {
            NoiseCov::Isotropic { value, .. } => DMatrix::identity(k, k) * *value,
            NoiseCov::Diagonal(v) => DMatrix::from_diagonal(v),
            NoiseCov::Full(m) => m.matrix().clone(),
        }
    }
}

/// Parameters of Ṗ = AP + PAᵀ + Q − PCᵀN⁻¹CP. The factor W = CᵀL⁻ᵀ
/// (so that S = WWᵀ) is precomputed once; k ≪ d keeps it thin.
#[derive(Debug, Clone)]
pub struct RiccatiParams {
    pub a: LinOpA,
    pub q: SymOp,
    pub c: SparseC,
    pub n: NoiseCov,
    w: DMatrix<f64>,
    tr_s: f64,
}

impl RiccatiParams {
    pub fn new(a: LinOpA, q: SymOp, c: SparseC, n: NoiseCov) -> Result<Self> {
        let d = a.d();
        if q.d() != d || c.d() != d {
            return Err(Error::DimensionMismatch(format!(
                "A ({}), Q ({}), C (d = {}) disagree",
                d,
                q.d(),
                c.d()
            )));
        }
        if n.k() != c.k() {
            return Err(Error::DimensionMismatch(format!(
                "N is {}x{} but C has {} rows",
                n.k(),
                n.k(),
                c.k()
            )));
        }
        let w = c.apply_transpose_tall(&n.chol_lt_inv()?);
        let tr_s = w.norm_squared();
        Ok(RiccatiParams { a, q, c, n, w, tr_s })
    }

    pub fn d(&self) -> usize {
        self.a.d()
    }

    pub fn k(&self) -> usize {
        self.c.k()
    }

    /// W with S = WWᵀ, d×k.
    pub fn w_factor(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Tr S = Tr(N⁻¹CCᵀ).
    pub fn tr_s(&self) -> f64 {
        self.tr_s
    }
}

/// Exact dense right-hand side AP + PAᵀ + Q − PSP. Oracle only.
pub fn dense_riccati_rhs(
    p: &DMatrix<f64>,
    params: &RiccatiParams,
    d_max_dense: usize,
) -> Result<DMatrix<f64>> {
    let d = params.d();
    if d > d_max_dense {
        return Err(Error::TooLargeToDensify {
            d,
            limit: d_max_dense,
        });
    }
    if p.nrows() != d || p.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "P has shape {:?}, expected {d}x{d}",
            p.shape()
        )));
    }
    let ap = params.a.apply_tall(p);
    let pw = p * &params.w;
    let out = &ap + ap.transpose() + params.q.densify(d_max_dense)? - &pw * pw.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Dense RK4 reference trajectory. Records (t, P) every `record_every` steps
/// plus the endpoints.
pub fn integrate_dense_riccati(
    p0: &DMatrix<f64>,
    params: &RiccatiParams,
    config: &IntegratorConfig,
) -> Result<Vec<(f64, DMatrix<f64>)>> {
    config.validate()?;
    let d_max = config.tolerances.d_max_dense;
    let mut p = (p0 + p0.transpose()) * 0.5;
    let h = config.h;
    let n = config.n_steps();
    let mut out = vec![(0.0, p.clone())];
    for step in 0..n {
        let k1 = dense_riccati_rhs(&p, params, d_max)?;
        let k2 = dense_riccati_rhs(&(&p + &k1 * (h / 2.0)), params, d_max)?;
        let k3 = dense_riccati_rhs(&(&p + &k2 * (h / 2.0)), params, d_max)?;
        let k4 = dense_riccati_rhs(&(&p + &k3 * h), params, d_max)?;
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        p = (&p + p.transpose()) * 0.5;
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        if step + 1 == n || (step + 1) % config.record_every == 0 {
            out.push(((step + 1) as f64 * h, p.clone()));
        }
    }
    Ok(out)
}

/// The Riccati vector field at Y, encoded as a SymOp, for residual monitors.
pub fn rhs_symop(y: &FactoredPsd, params: &RiccatiParams) -> Result<SymOp> {
    let d = y.d();
    if params.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "params dimension {} does not match state dimension {d}",
            params.d()
        )));
    }
    let um = y.stiefel().matrix();
    // A Y + Y Aᵀ split as A(UR̃)Uᵀ + U(AUR̃)ᵀ plus the diagonal remainder.
    let (r_eff, extra) = match y {
        FactoredPsd::LowRank { r, .. } => (r.matrix().clone(), SymOp::zero(d)),
        FactoredPsd::Ppca { r, s, .. } => (
            r.matrix() - DMatrix::identity(r.size(), r.size()) * *s,
            params.a.scaled_sym(*s)?,
        ),
        FactoredPsd::Fa { r, psi, .. } => {
            (r.matrix().clone(), params.a.sym_with_diag(psi.values())?)
        }
    };
    let aur = params.a.apply_tall(&(um * &r_eff));
    let drift = SymOp::cross_product(&aur, um)?.add(&extra)?;
    let yw = y.apply(&params.w)?;
    let meas = SymOp::new(d, vec![(-1.0, yw)], None)?;
    drift.add(&params.q)?.add(&meas)
}

/// Low-rank Riccati field: U̇ = (I−UUᵀ)(AU + QUR⁻¹),
/// Ṙ = UᵀAUR + RUᵀAᵀU + UᵀQU − RUᵀSUR. Never forms H.
pub fn lowrank_riccati_delta(
    u: &Stiefel,
    r: &SpdSmall,
    params: &RiccatiParams,
) -> Result<TangentDelta> {
    check_params(u, r, params)?;
    let um = u.matrix();
    let au = params.a.apply_tall(um);
    let qu = params.q.mul_tall(um)?;
    let wu = params.w.transpose() * um; // k×p
    let usu = wu.transpose() * &wu; // UᵀSU
    let uau = um.transpose() * &au;
    let uqu = um.transpose() * &qu;
    let d_r = &uau * r.matrix() + r.matrix() * uau.transpose() + &uqu
        - r.matrix() * &usu * r.matrix();
    let dir = &au + r.solve_right(&qu);
    let d_u = u.project_complement(&dir);
    Ok(TangentDelta::new(d_u, d_r, DiagDelta::None))
}

/// PPCA-Riccati field; the trace term never touches d-sized
/// intermediates beyond the factors already held.
pub fn ppca_riccati_delta(
    u: &Stiefel,
    r: &SpdSmall,
    s: f64,
    params: &RiccatiParams,
    tol: &Tolerances,
    diags: &mut Diagnostics,
) -> Result<TangentDelta> {
    check_params(u, r, params)?;
    let (d, p) = (u.d(), u.p());
    let um = u.matrix();
    let au = params.a.apply_tall(um);
    let atu = params.a.apply_transpose_tall(um);
    let qu = params.q.mul_tall(um)?;
    let wu = params.w.transpose() * um; // WᵀU, k×p
    let su = &params.w * &wu; // SU, d×p
    let usu = wu.transpose() * &wu;
    let uau = um.transpose() * &au;
    let uqu = um.transpose() * &qu;

    let (_, tr_q) = params.q.diag_and_trace();
    let d_s = (2.0 * s * (params.a.trace() - uau.trace()) + (tr_q - uqu.trace())
        - s * s * (params.tr_s - usu.trace()))
        / (d - p) as f64;

    let d_r = &uau * r.matrix() + r.matrix() * uau.transpose() + &uqu
        - r.matrix() * &usu * r.matrix();

    let dir = &au * r.matrix() + &qu + &atu * s - &su * (r.matrix() * s);
    let perp = u.project_complement(&dir);
    let shifted = r.matrix() - DMatrix::identity(p, p) * s;
    let eps = tol.eps_sing_rel * r.matrix().norm().max(1.0);
    let (d_u, clamped) = solve_right_sym_clamped(&shifted, &perp, eps);
    if clamped {
        diags.near_singular_rs += 1;
    }
    Ok(TangentDelta::new(d_u, d_r, DiagDelta::Isotropic(d_s)))
}

/// FA-Riccati field: M = Aψ + ψAᵀ + Q − ψSψ is projected with the
/// fast FA solver, then the drift/measurement terms that act through URUᵀ are
/// added back to δU and δR.
pub fn fa_riccati_delta(
    u: &Stiefel,
    r: &SpdSmall,
    psi: &DiagPos,
    params: &RiccatiParams,
    tol: &Tolerances,
    diags: &mut Diagnostics,
) -> Result<TangentDelta> {
    check_params(u, r, params)?;
    let d = u.d();
    let um = u.matrix();
    let pv = psi.values();

    // M as a SymOp: ψW has k columns.
    let mut psi_w = params.w.clone();
    for j in 0..psi_w.ncols() {
        for i in 0..d {
            psi_w[(i, j)] *= pv[i];
        }
    }
    let m = params
        .a
        .sym_with_diag(pv)?
        .add(&params.q)?
        .add(&SymOp::new(d, vec![(-1.0, psi_w.clone())], None)?)?;

    let base = project_fa_fast(&m, u, r, psi, tol, diags)?;
    let d_psi = match &base.diag {
        DiagDelta::Diagonal(v) => v.clone(),
        _ => unreachable!(),
    };

    let au = params.a.apply_tall(um);
    let wu = params.w.transpose() * um; // WᵀU
    let su = &params.w * &wu; // SU
    let psi_su = {
        let mut t = su.clone();
        for j in 0..t.ncols() {
            for i in 0..d {
                t[(i, j)] *= pv[i];
            }
        }
        t
    };
    let u_psi_su = um.transpose() * &psi_su; // UᵀψSU
    let usu = wu.transpose() * &wu; // UᵀSU
    let uau = um.transpose() * &au;

    let extra_dir = u.project_complement(&(&au - &psi_su));
    let d_u = &base.d_u + extra_dir;
    let d_r = &base.d_r + (-&u_psi_su * r.matrix() - r.matrix() * u_psi_su.transpose()
        - r.matrix() * &usu * r.matrix()
        + &uau * r.matrix()
        + r.matrix() * uau.transpose());
    Ok(TangentDelta::new(d_u, d_r, DiagDelta::Diagonal(d_psi)))
}

fn check_params(u: &Stiefel, r: &SpdSmall, params: &RiccatiParams) -> Result<()> {
    if params.d() != u.d() || r.size() != u.p() {
        return Err(Error::DimensionMismatch(format!(
            "params d = {}, state d = {}, core {} vs p = {}",
            params.d(),
            u.d(),
            r.size(),
            u.p()
        )));
    }
    Ok(())
}
