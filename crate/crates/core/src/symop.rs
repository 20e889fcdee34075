//! Structured symmetric operators H = Σ αⱼ Gⱼ Gⱼᵀ + diag(c). Every
//! derivative fed to the tangent projections is encoded this way, so all
//! downstream costs stay linear in d.

use nalgebra::{DMatrix, DVector};

use crate::config::Tolerances;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SymOp {
    d: usize,
    terms: Vec<(f64, DMatrix<f64>)>,
    diag: Option<DVector<f64>>,
    /// Tr H, fixed at construction so repeated queries cost nothing.
    trace: f64,
}

fn trace_of(terms: &[(f64, DMatrix<f64>)], diag: Option<&DVector<f64>>) -> f64 {
    let mut tr = diag.map_or(0.0, |c| c.sum());
    for (alpha, g) in terms {
        tr += alpha * g.norm_squared();
    }
    tr
}

impl SymOp {
    pub fn new(
        d: usize,
        terms: Vec<(f64, DMatrix<f64>)>,
        diag: Option<DVector<f64>>,
    ) -> Result<Self> {
        Self::with_width_limit(d, terms, diag, Tolerances::default().r_max)
    }

    pub fn with_width_limit(
        d: usize,
        terms: Vec<(f64, DMatrix<f64>)>,
        diag: Option<DVector<f64>>,
        r_max: usize,
    ) -> Result<Self> {
        let mut width = 0;
        for (_, g) in &terms {
            if g.nrows() != d {
                return Err(Error::DimensionMismatch(format!(
                    "factor has {} rows, expected {}",
                    g.nrows(),
                    d
                )));
            }
            width += g.ncols();
        }
        if width > r_max {
            return Err(Error::WidthExceeded {
                width,
                limit: r_max,
            });
        }
        if let Some(c) = &diag {
            if c.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "diagonal has length {}, expected {}",
                    c.len(),
                    d
                )));
            }
        }
        let trace = trace_of(&terms, diag.as_ref());
        Ok(SymOp {
            d,
            terms,
            diag,
            trace,
        })
    }

    pub fn zero(d: usize) -> Self {
        SymOp {
            d,
            terms: Vec::new(),
            diag: None,
            trace: 0.0,
        }
    }

    pub fn from_diag(c: DVector<f64>) -> Self {
        let d = c.len();
        let trace = c.sum();
        SymOp {
            d,
            terms: Vec::new(),
            diag: Some(c),
            trace,
        }
    }

    pub fn scaled_identity(d: usize, a: f64) -> Self {
        SymOp::from_diag(DVector::from_element(d, a))
    }

    pub fn from_outer(alpha: f64, g: DMatrix<f64>) -> Result<Self> {
        let d = g.nrows();
        SymOp::new(d, vec![(alpha, g)], None)
    }

    /// X Yᵀ + Y Xᵀ re-encoded through the polarization identity
    /// (X+Y)(X+Y)ᵀ - XXᵀ - YYᵀ as three symmetric outer products.
    pub fn cross_product(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(Error::DimensionMismatch(format!(
                "cross factors have shapes {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let d = x.nrows();
        SymOp::new(
            d,
            vec![(1.0, x + y), (-1.0, x.clone()), (-1.0, y.clone())],
            None,
        )
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn width(&self) -> usize {
        self.terms.iter().map(|(_, g)| g.ncols()).sum()
    }

    pub fn terms(&self) -> &[(f64, DMatrix<f64>)] {
        &self.terms
    }

    pub fn diag_term(&self) -> Option<&DVector<f64>> {
        self.diag.as_ref()
    }

    pub fn add(&self, other: &SymOp) -> Result<SymOp> {
        if self.d != other.d {
            return Err(Error::DimensionMismatch(format!(
                "cannot add operators of dimension {} and {}",
                self.d, other.d
            )));
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        let diag = match (&self.diag, &other.diag) {
            (Some(a), Some(b)) => Some(a + b),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (None, None) => None,
        };
        SymOp::new(self.d, terms, diag)
    }

    pub fn scale(&self, a: f64) -> SymOp {
        SymOp {
            d: self.d,
            terms: self.terms.iter().map(|(al, g)| (a * al, g.clone())).collect(),
            diag: self.diag.as_ref().map(|c| c * a),
            trace: self.trace * a,
        }
    }

    /// H M for a tall M, evaluated as Σ αⱼ Gⱼ (Gⱼᵀ M) + c ∘ rows(M).
    pub fn mul_tall(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "mul_tall expects {} rows, got {}",
                self.d,
                m.nrows()
            )));
        }
        let mut out = DMatrix::zeros(self.d, m.ncols());
        for (alpha, g) in &self.terms {
            let gtm = g.transpose() * m;
            out += g * gtm * *alpha;
        }
        if let Some(c) = &self.diag {
            for j in 0..m.ncols() {
                for i in 0..self.d {
                    out[(i, j)] += c[i] * m[(i, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        Ok(DVector::from_column_slice(self.mul_tall(&m)?.as_slice()))
    }

    /// (diag(H), Tr H). Accumulated column by column so the factors are
    /// read in storage order.
    pub fn diag_and_trace(&self) -> (DVector<f64>, f64) {
        let mut h_bar = match &self.diag {
            Some(c) => c.clone(),
            None => DVector::zeros(self.d),
        };
        for (alpha, g) in &self.terms {
            for j in 0..g.ncols() {
                let col = g.column(j);
                for i in 0..self.d {
                    h_bar[i] += alpha * col[i] * col[i];
                }
            }
        }
        let tr = h_bar.sum();
        (h_bar, tr)
    }

    /// Tr H, precomputed at construction.
    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// Tr(H²) = ‖H‖²_F, computed from the factors without densifying.
    pub fn frob_sq(&self) -> f64 {
        let mut total = 0.0;
        for (j, (aj, gj)) in self.terms.iter().enumerate() {
            for (k, (ak, gk)) in self.terms.iter().enumerate() {
                if k < j {
                    continue;
                }
                let cross = (gj.transpose() * gk).norm_squared();
                let contrib = aj * ak * cross;
                total += if k == j { contrib } else { 2.0 * contrib };
            }
        }
        if let Some(c) = &self.diag {
            for (aj, gj) in &self.terms {
                let mut s = 0.0;
                for i in 0..self.d {
                    s += c[i] * gj.row(i).norm_squared();
                }
                total += 2.0 * aj * s;
            }
            total += c.iter().map(|x| x * x).sum::<f64>();
        }
        total
    }

    /// Dense materialization, oracle/test use only.
    pub fn densify(&self, d_max_dense: usize) -> Result<DMatrix<f64>> {
        if self.d > d_max_dense {
            return Err(Error::TooLargeToDensify {
                d: self.d,
                limit: d_max_dense,
            });
        }
        let mut out = DMatrix::zeros(self.d, self.d);
        for (alpha, g) in &self.terms {
            out += g * g.transpose() * *alpha;
        }
        if let Some(c) = &self.diag {
            for i in 0..self.d {
                out[(i, i)] += c[i];
            }
        }
        Ok(out)
    }

    /// Encodes a small dense symmetric matrix through its eigendecomposition.
    /// Oracle/test utility for feeding dense matrices to the projections.
    pub fn from_dense_sym(m: &DMatrix<f64>, d_max_dense: usize) -> Result<SymOp> {
        let d = m.nrows();
        if m.ncols() != d {
            return Err(Error::DimensionMismatch(
                "from_dense_sym expects a square matrix".into(),
            ));
        }
        if d > d_max_dense {
            return Err(Error::TooLargeToDensify {
                d,
                limit: d_max_dense,
            });
        }
        let sym = (m + m.transpose()) * 0.5;
        // Exact two-term split M = (1/4α)[(M+αI)(M+αI)ᵀ − (M−αI)(M−αI)ᵀ];
        // an eigendecomposition-based reconstruction loses several digits.
        let alpha = sym.norm().max(1.0);
        let shift = DMatrix::from_diagonal_element(d, d, alpha);
        let plus = &sym + &shift;
        let minus = &sym - &shift;
        let coef = 1.0 / (4.0 * alpha);
        SymOp::with_width_limit(d, vec![(coef, plus), (-coef, minus)], None, 2 * d)
    }
}
