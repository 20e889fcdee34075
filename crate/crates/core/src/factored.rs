//! Factored PSD matrix representations: low-rank U R Uᵀ, PPCA
//! U R Uᵀ + s (I - U Uᵀ) and FA U R Uᵀ + ψ, with matrix-vector algebra,
//! Woodbury-style inversion and Gaussian sampling. All operations are
//! linear in the ambient dimension d; dense materialization exists only
//! for oracle/test use behind a size guard.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::Tolerances;
use crate::error::{Error, Result};

/// Thin QR with the sign convention diag(R) >= 0, so the factorization is
/// unique and reproducible across platforms.
pub(crate) fn thin_qr_positive(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let scale = m.norm().max(1.0);
    for j in 0..r.ncols() {
        let rjj = r[(j, j)];
        if rjj.abs() <= 1e-13 * scale {
            return Err(Error::RankDeficient);
        }
        if rjj < 0.0 {
            for i in 0..q.nrows() {
                q[(i, j)] = -q[(i, j)];
            }
            for k in 0..r.ncols() {
                r[(j, k)] = -r[(j, k)];
            }
        }
    }
    Ok((q, r))
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// A d x p matrix with orthonormal columns (point on the Stiefel manifold).
#[derive(Debug, Clone, PartialEq)]
pub struct Stiefel {
    u: DMatrix<f64>,
}

impl Stiefel {
    pub fn new(u: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(u, Tolerances::default().eps_orth)
    }

    pub fn with_tolerance(u: DMatrix<f64>, eps_orth: f64) -> Result<Self> {
        let (d, p) = u.shape();
        if p < 1 || p >= d {
            return Err(Error::DimensionMismatch(format!(
                "Stiefel factor needs 1 <= p < d, got d={d}, p={p}"
            )));
        }
        let defect = orth_defect(&u);
        if !(defect <= eps_orth) {
            return Err(Error::NotOrthonormal {
                defect,
                tol: eps_orth,
            });
        }
        Ok(Stiefel { u })
    }

    /// Haar-ish random point: QR of a Gaussian matrix.
    pub fn random<R: Rng + ?Sized>(d: usize, p: usize, rng: &mut R) -> Result<Self> {
        let g = gaussian_matrix(d, p, rng);
        let (q, _) = thin_qr_positive(&g)?;
        Stiefel::new(q)
    }

    /// First p columns of the identity.
    pub fn canonical(d: usize, p: usize) -> Result<Self> {
        Stiefel::new(DMatrix::identity(d, p))
    }

    pub fn d(&self) -> usize {
        self.u.nrows()
    }

    pub fn p(&self) -> usize {
        self.u.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn orth_defect(&self) -> f64 {
        orth_defect(&self.u)
    }

    /// Explicit maintenance operation: re-orthonormalize the columns via QR.
    /// Never called implicitly.
    pub fn reorthonormalize(&self) -> Result<Self> {
        let (q, _) = thin_qr_positive(&self.u)?;
        Stiefel::new(q)
    }

    /// (I - U Uᵀ) X without forming the projector.
    pub fn project_complement(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let utx = self.u.transpose() * x;
        x - &self.u * utx
    }

    /// Row norms squared: Dbar_ii = sum_j U_ij² of the fast FA path.
    pub fn row_norms_sq(&self) -> DVector<f64> {
        DVector::from_fn(self.d(), |i, _| self.u.row(i).norm_squared())
    }
}

fn orth_defect(u: &DMatrix<f64>) -> f64 {
    let p = u.ncols();
    let gram = u.transpose() * u;
    (gram - DMatrix::identity(p, p)).norm()
}

/// Small p x p symmetric positive definite matrix. Symmetrized on
/// construction, positive definiteness checked via Cholesky.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdSmall {
    m: DMatrix<f64>,
}

impl SpdSmall {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "SPD factor must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = (&m + m.transpose()) * 0.5;
        if nalgebra::Cholesky::new(sym.clone()).is_none() {
            return Err(Error::NotPd);
        }
        Ok(SpdSmall { m: sym })
    }

    pub fn identity(p: usize) -> Self {
        SpdSmall {
            m: DMatrix::identity(p, p),
        }
    }

    pub fn scaled_identity(p: usize, a: f64) -> Result<Self> {
        SpdSmall::new(DMatrix::identity(p, p) * a)
    }

    pub fn size(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn cholesky(&self) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
        // Succeeds by the construction invariant.
        nalgebra::Cholesky::new(self.m.clone()).expect("SpdSmall invariant violated")
    }

    /// Solves X R = B for X, i.e. X = B R⁻¹.
    pub fn solve_right(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        // R symmetric: X = (R⁻¹ Bᵀ)ᵀ.
        self.cholesky().solve(&b.transpose()).transpose()
    }

    /// Solves R X = B.
    pub fn solve_left(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.cholesky().solve(b)
    }

    /// (R^{1/2}, R^{-1/2}) via the symmetric eigendecomposition.
    pub fn sqrt_pair(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let eig = self.m.clone().symmetric_eigen();
        let p = self.size();
        let mut sq = DMatrix::zeros(p, p);
        let mut isq = DMatrix::zeros(p, p);
        for k in 0..p {
            let lam = eig.eigenvalues[k].max(f64::MIN_POSITIVE);
            let v = eig.eigenvectors.column(k);
            let root = lam.sqrt();
            sq += v * v.transpose() * root;
            isq += v * v.transpose() / root;
        }
        (sq, isq)
    }
}

/// Length-d diagonal with strictly positive entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagPos {
    v: DVector<f64>,
}

impl DiagPos {
    pub fn new(v: DVector<f64>) -> Result<Self> {
        for (i, &x) in v.iter().enumerate() {
            if !(x > 0.0) {
                return Err(Error::NonPositiveDiagonal { index: i });
            }
        }
        Ok(DiagPos { v })
    }

    pub fn constant(d: usize, value: f64) -> Result<Self> {
        DiagPos::new(DVector::from_element(d, value))
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn min(&self) -> f64 {
        self.v.min()
    }
}

/// The three factored covariance forms.
#[derive(Debug, Clone)]
pub enum FactoredPsd {
    /// U R Uᵀ — rank p, not invertible.
    LowRank { u: Stiefel, r: SpdSmall },
    /// U R Uᵀ + s (I - U Uᵀ) = U (R - sI) Uᵀ + sI — invertible for s > 0.
    Ppca { u: Stiefel, r: SpdSmall, s: f64 },
    /// U R Uᵀ + ψ — invertible for ψ > 0.
    Fa {
        u: Stiefel,
        r: SpdSmall,
        psi: DiagPos,
    },
}

impl FactoredPsd {
    pub fn low_rank(u: Stiefel, r: SpdSmall) -> Result<Self> {
        check_core_dims(&u, &r)?;
        Ok(FactoredPsd::LowRank { u, r })
    }

    pub fn ppca(u: Stiefel, r: SpdSmall, s: f64) -> Result<Self> {
        check_core_dims(&u, &r)?;
        if !(s > 0.0) {
            return Err(Error::NonPositiveDiagonal { index: 0 });
        }
        Ok(FactoredPsd::Ppca { u, r, s })
    }

    pub fn fa(u: Stiefel, r: SpdSmall, psi: DiagPos) -> Result<Self> {
        check_core_dims(&u, &r)?;
        if psi.len() != u.d() {
            return Err(Error::DimensionMismatch(format!(
                "psi length {} does not match d = {}",
                psi.len(),
                u.d()
            )));
        }
        Ok(FactoredPsd::Fa { u, r, psi })
    }

    pub fn d(&self) -> usize {
        self.stiefel().d()
    }

    pub fn p(&self) -> usize {
        self.stiefel().p()
    }

    pub fn stiefel(&self) -> &Stiefel {
        match self {
            FactoredPsd::LowRank { u, .. }
            | FactoredPsd::Ppca { u, .. }
            | FactoredPsd::Fa { u, .. } => u,
        }
    }

    pub fn core(&self) -> &SpdSmall {
        match self {
            FactoredPsd::LowRank { r, .. }
            | FactoredPsd::Ppca { r, .. }
            | FactoredPsd::Fa { r, .. } => r,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            FactoredPsd::LowRank { .. } => "lowrank",
            FactoredPsd::Ppca { .. } => "ppca",
            FactoredPsd::Fa { .. } => "fa",
        }
    }

    /// Dense materialization, oracle/test use only.
    pub fn densify(&self, d_max_dense: usize) -> Result<DMatrix<f64>> {
        let d = self.d();
        if d > d_max_dense {
            return Err(Error::TooLargeToDensify {
                d,
                limit: d_max_dense,
            });
        }
        let out = match self {
            FactoredPsd::LowRank { u, r } => {
                let um = u.matrix();
                um * r.matrix() * um.transpose()
            }
            FactoredPsd::Ppca { u, r, s } => {
                // U (R - sI) Uᵀ + sI, Eq.-identical to U R Uᵀ + s (I - U Uᵀ).
                let um = u.matrix();
                let p = u.p();
                let shifted = r.matrix() - DMatrix::identity(p, p) * *s;
                um * shifted * um.transpose() + DMatrix::identity(d, d) * *s
            }
            FactoredPsd::Fa { u, r, psi } => {
                let um = u.matrix();
                let mut m = um * r.matrix() * um.transpose();
                for i in 0..d {
                    m[(i, i)] += psi.values()[i];
                }
                m
            }
        };
        // Exact symmetry for downstream eigen-solves.
        Ok((&out + out.transpose()) * 0.5)
    }

    /// Y X for a tall X (m ≪ d). Never materializes d x d.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.d() {
            return Err(Error::DimensionMismatch(format!(
                "apply expects {} rows, got {}",
                self.d(),
                x.nrows()
            )));
        }
        Ok(match self {
            FactoredPsd::LowRank { u, r } => {
                let utx = u.matrix().transpose() * x;
                u.matrix() * (r.matrix() * utx)
            }
            FactoredPsd::Ppca { u, r, s } => {
                let p = u.p();
                let utx = u.matrix().transpose() * x;
                let shifted = r.matrix() - DMatrix::identity(p, p) * *s;
                u.matrix() * (shifted * utx) + x * *s
            }
            FactoredPsd::Fa { u, r, psi } => {
                let utx = u.matrix().transpose() * x;
                let mut out = u.matrix() * (r.matrix() * utx);
                for j in 0..out.ncols() {
                    for i in 0..out.nrows() {
                        out[(i, j)] += psi.values()[i] * x[(i, j)];
                    }
                }
                out
            }
        })
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(DVector::from_column_slice(self.apply(&m)?.as_slice()))
    }

    /// Y⁻¹ B at O(p³ + d p m) cost.
    ///
    /// PPCA: exact spectral split Y⁻¹ = U R⁻¹ Uᵀ + s⁻¹ (I - U Uᵀ), valid for
    /// any PD R (R - sI may be singular, so the literal small-block Woodbury
    /// route is not used). FA: the Woodbury identity on U R Uᵀ + ψ.
    pub fn woodbury_solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.d() {
            return Err(Error::DimensionMismatch(format!(
                "woodbury_solve expects {} rows, got {}",
                self.d(),
                b.nrows()
            )));
        }
        match self {
            FactoredPsd::LowRank { .. } => Err(Error::NotInvertible),
            FactoredPsd::Ppca { u, r, s } => {
                let utb = u.matrix().transpose() * b;
                let span = u.matrix() * r.solve_left(&utb);
                let compl = (b - u.matrix() * utb) / *s;
                Ok(span + compl)
            }
            FactoredPsd::Fa { u, r, psi } => {
                // (URUᵀ + ψ)⁻¹ = ψ⁻¹ - ψ⁻¹U (R⁻¹ + Uᵀψ⁻¹U)⁻¹ Uᵀψ⁻¹.
                let p = u.p();
                let um = u.matrix();
                let psi_inv = psi.values().map(|x| 1.0 / x);
                let scale_rows = |m: &DMatrix<f64>| -> DMatrix<f64> {
                    let mut out = m.clone();
                    for j in 0..out.ncols() {
                        for i in 0..out.nrows() {
                            out[(i, j)] *= psi_inv[i];
                        }
                    }
                    out
                };
                let pinv_u = scale_rows(um); // ψ⁻¹U, d x p
                let pinv_b = scale_rows(b);
                let r_inv = r.solve_left(&DMatrix::identity(p, p));
                let inner = r_inv + um.transpose() * &pinv_u;
                let inner_lu = inner.lu();
                let small = inner_lu
                    .solve(&(um.transpose() * &pinv_b))
                    .ok_or(Error::SingularSmallSystem { size: p })?;
                Ok(&pinv_b - pinv_u * small)
            }
        }
    }

    pub fn woodbury_solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        Ok(DVector::from_column_slice(
            self.woodbury_solve(&m)?.as_slice(),
        ))
    }
}

fn check_core_dims(u: &Stiefel, r: &SpdSmall) -> Result<()> {
    if r.size() != u.p() {
        return Err(Error::DimensionMismatch(format!(
            "core size {} does not match p = {}",
            r.size(),
            u.p()
        )));
    }
    Ok(())
}

/// n samples of N(mean, Y) for a PPCA covariance, as the columns of a d x n
/// matrix. Samples U z₃ + (I - U Uᵀ) z₄ with z₃ ~ N(0, R), z₄ ~ N(0, sI),
/// at O(n d p) cost.
pub fn sample_ppca_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    y: &FactoredPsd,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (u, r, s) = match y {
        FactoredPsd::Ppca { u, r, s } => (u, r, *s),
        _ => return Err(Error::MismatchedVariant),
    };
    if mean.len() != u.d() {
        return Err(Error::DimensionMismatch(format!(
            "mean length {} does not match d = {}",
            mean.len(),
            u.d()
        )));
    }
    if n == 0 {
        return Err(Error::EmptySampleSet);
    }
    let d = u.d();
    let p = u.p();
    let l = r.cholesky().l();
    let z3 = gaussian_matrix(p, n, rng);
    let z4 = gaussian_matrix(d, n, rng) * s.sqrt();
    let mut out = u.matrix() * (l * z3) + u.project_complement(&z4);
    for j in 0..n {
        for i in 0..d {
            out[(i, j)] += mean[i];
        }
    }
    Ok(out)
}
