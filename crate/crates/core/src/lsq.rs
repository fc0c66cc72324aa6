//! Ordinary and restricted least squares with robust covariances.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg::{rank, sym_inverse_checked, symmetrize, PivotedQr};

/// Role of a regressor column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum ColumnLabel {
    Intercept,
    /// Indicator of level `q`.
    Treatment(usize),
    Covariate(usize),
    /// `1(Z = q) x_j`.
    Interaction {
        level: usize,
        covariate: usize,
    },
    /// Factor product `Z_𝒦`, subset as a bitmask (bit `k` is factor `k`).
    Factor(u32),
    FactorCovariate {
        subset: u32,
        covariate: usize,
    },
    /// Column `k` of a linearly transformed design.
    Transformed(usize),
}

impl fmt::Display for ColumnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnLabel::Intercept => write!(f, "(intercept)"),
            ColumnLabel::Treatment(q) => write!(f, "t{}", q + 1),
            ColumnLabel::Covariate(j) => write!(f, "x{}", j + 1),
            ColumnLabel::Interaction { level, covariate } => write!(f, "t{}:x{}", level + 1, covariate + 1),
            ColumnLabel::Factor(s) => write!(f, "{}", subset_name(*s)),
            ColumnLabel::FactorCovariate { subset, covariate } => {
                write!(f, "{}:x{}", subset_name(*subset), covariate + 1)
            }
            ColumnLabel::Transformed(k) => write!(f, "c{}", k + 1),
        }
    }
}

/// Letters for a factor subset: bit 0 is `A`. The empty set prints as `1`.
pub fn subset_name(mask: u32) -> String {
    if mask == 0 {
        return "1".into();
    }
    (0..32).filter(|k| mask >> k & 1 == 1).map(|k| char::from(b'A' + k as u8)).collect()
}

/// Regressor matrix with column roles.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub labels: Vec<ColumnLabel>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, labels: Vec<ColumnLabel>) -> Result<Self> {
        if values.ncols() != labels.len() {
            return invalid(format!("{} labels for {} columns", labels.len(), values.ncols()));
        }
        Ok(DesignMatrix { values, labels })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// Structural class of a restriction on the `(Ȳ, γ)` coefficient split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RestrictionKind {
    Empty,
    /// Rows touch only the interaction block.
    CorrelationOnly,
    /// First `rows_y` rows touch only the mean block, the rest only the interaction block.
    Separable {
        rows_y: usize,
    },
    General,
}

/// Linear equality system `R θ = r` with full row rank.
#[derive(Clone, Debug)]
pub struct Restriction {
    r_mat: DMatrix<f64>,
    r: DVector<f64>,
    kind: RestrictionKind,
}

impl Restriction {
    /// No constraint on `p` coefficients.
    pub fn empty(p: usize) -> Self {
        Restriction { r_mat: DMatrix::zeros(0, p), r: DVector::zeros(0), kind: RestrictionKind::Empty }
    }

    /// Validates rank and classifies against a split after `split` mean columns.
    ///
    /// With `split = None` every non-empty restriction is `General`.
    pub fn new(r_mat: DMatrix<f64>, r: DVector<f64>, split: Option<usize>) -> Result<Self> {
        let (m, p) = r_mat.shape();
        if r.len() != m {
            return invalid(format!("restriction has {m} rows but {} right-hand values", r.len()));
        }
        if m == 0 {
            return Ok(Restriction::empty(p));
        }
        if m > p {
            return invalid(format!("{m} restriction rows exceed {p} coefficients"));
        }
        let rk = rank(&r_mat);
        if rk < m {
            return Err(Error::Numerical(format!("restriction matrix has rank {rk} < {m} rows")));
        }
        let kind = match split {
            Some(s) if s <= p => classify(&r_mat, s),
            Some(s) => return invalid(format!("split {s} exceeds {p} coefficients")),
            None => RestrictionKind::General,
        };
        let (r_mat, r) = match kind {
            RestrictionKind::Separable { .. } => reorder_separable(&r_mat, &r, split.unwrap()),
            _ => (r_mat, r),
        };
        let kind = match kind {
            RestrictionKind::Separable { .. } => {
                let rows_y = count_mean_rows(&r_mat, split.unwrap());
                RestrictionKind::Separable { rows_y }
            }
            k => k,
        };
        Ok(Restriction { r_mat, r, kind })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r_mat
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn kind(&self) -> &RestrictionKind {
        &self.kind
    }

    pub fn m(&self) -> usize {
        self.r_mat.nrows()
    }

    pub fn p(&self) -> usize {
        self.r_mat.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.m() == 0
    }

    /// `(RΓ, r)`: the same restriction on coefficients of `χΓ`.
    pub fn transformed(&self, gamma: &DMatrix<f64>) -> Restriction {
        Restriction { r_mat: &self.r_mat * gamma, r: self.r.clone(), kind: self.kind.clone() }
    }
}

fn row_touches(r_mat: &DMatrix<f64>, i: usize, cols: std::ops::Range<usize>) -> bool {
    cols.into_iter().any(|j| r_mat[(i, j)] != 0.0)
}

fn classify(r_mat: &DMatrix<f64>, split: usize) -> RestrictionKind {
    let p = r_mat.ncols();
    let mut any_mean = false;
    for i in 0..r_mat.nrows() {
        let mean = row_touches(r_mat, i, 0..split);
        let inter = row_touches(r_mat, i, split..p);
        if mean && inter {
            return RestrictionKind::General;
        }
        any_mean |= mean;
    }
    if any_mean {
        RestrictionKind::Separable { rows_y: 0 }
    } else {
        RestrictionKind::CorrelationOnly
    }
}

fn count_mean_rows(r_mat: &DMatrix<f64>, split: usize) -> usize {
    (0..r_mat.nrows()).filter(|&i| row_touches(r_mat, i, 0..split)).count()
}

/// Puts mean-block rows first, keeping relative order.
fn reorder_separable(r_mat: &DMatrix<f64>, r: &DVector<f64>, split: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut order: Vec<usize> = (0..r_mat.nrows()).filter(|&i| row_touches(r_mat, i, 0..split)).collect();
    order.extend((0..r_mat.nrows()).filter(|&i| !row_touches(r_mat, i, 0..split)));
    let m = DMatrix::from_fn(r_mat.nrows(), r_mat.ncols(), |i, j| r_mat[(order[i], j)]);
    let v = DVector::from_fn(r.len(), |i, _| r[order[i]]);
    (m, v)
}

/// Coefficients, residuals and the pieces the covariance formulas need.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub design: DesignMatrix,
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `(χᵀχ)⁻¹`, assembled from the QR factor.
    pub xtx_inv: DMatrix<f64>,
    pub restriction: Restriction,
    /// `I − M_r R`; identity for OLS.
    pub projector: DMatrix<f64>,
}

/// Least squares on a full-column-rank design.
pub fn ols_fit(design: &DesignMatrix, y: &DVector<f64>) -> Result<FitResult> {
    let (n, p) = design.values.shape();
    if y.len() != n {
        return invalid(format!("{} outcomes for {n} design rows", y.len()));
    }
    if p == 0 {
        return invalid("design has no columns");
    }
    if design.values.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite value in design or outcome");
    }
    let qr = PivotedQr::new(&design.values);
    if !qr.is_full_column_rank() {
        let names: Vec<String> = qr.dependent_columns().iter().map(|&c| design.labels[c].to_string()).collect();
        return Err(Error::Numerical(format!(
            "design is rank deficient (rank {} of {p}); dependent columns: {}",
            qr.rank(),
            names.join(", ")
        )));
    }
    let beta = qr.solve(y);
    let residuals = y - &design.values * &beta;
    Ok(FitResult {
        design: design.clone(),
        beta,
        residuals,
        xtx_inv: qr.gram_inverse(),
        restriction: Restriction::empty(p),
        projector: DMatrix::identity(p, p),
    })
}

/// Restricted least squares through `θ̂_r = (I − M_r R)θ̂ + M_r r`.
pub fn rls_fit(design: &DesignMatrix, y: &DVector<f64>, restriction: &Restriction) -> Result<FitResult> {
    let p = design.ncols();
    if restriction.p() != p {
        return invalid(format!("restriction has {} columns, design has {p}", restriction.p()));
    }
    let mut fit = ols_fit(design, y)?;
    if restriction.is_empty() {
        fit.restriction = restriction.clone();
        return Ok(fit);
    }
    let r_mat = restriction.matrix();
    let middle = r_mat * &fit.xtx_inv * r_mat.transpose();
    let middle_inv = sym_inverse_checked(&middle, "R (χᵀχ)⁻¹ Rᵀ")?;
    let m_r = &fit.xtx_inv * r_mat.transpose() * middle_inv;
    let projector = DMatrix::identity(p, p) - &m_r * r_mat;
    let beta = &projector * &fit.beta + &m_r * restriction.rhs();
    fit.residuals = y - &design.values * &beta;
    fit.beta = beta;
    fit.projector = projector;
    fit.restriction = restriction.clone();
    Ok(fit)
}

/// `(χᵀχ)⁻¹ χᵀ diag(ε̂²) χ (χᵀχ)⁻¹` before symmetrization.
pub fn sandwich_raw(fit: &FitResult) -> DMatrix<f64> {
    let mut xw = fit.design.values.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row.scale_mut(fit.residuals[i]);
    }
    let meat = xw.tr_mul(&xw);
    &fit.xtx_inv * meat * &fit.xtx_inv
}

/// HC0 sandwich covariance.
pub fn ehw_cov(fit: &FitResult) -> DMatrix<f64> {
    symmetrize(&sandwich_raw(fit))
}

/// `(I − M_r R) Σ̂ (I − M_r R)ᵀ` with `Σ̂` built from the restricted residuals.
pub fn ddt_cov(fit: &FitResult) -> DMatrix<f64> {
    if fit.restriction.is_empty() {
        return ehw_cov(fit);
    }
    symmetrize(&(&fit.projector * sandwich_raw(fit) * fit.projector.transpose()))
}

/// Rows `start..start + len` of [`ddt_cov`] (or [`ehw_cov`] for OLS), without the full `p×p` products.
pub fn cov_block(fit: &FitResult, start: usize, len: usize) -> DMatrix<f64> {
    let a = fit.projector.rows(start, len) * &fit.xtx_inv; // len×p
    let mut m = &fit.design.values * a.transpose(); // N×len
    for (i, mut row) in m.row_iter_mut().enumerate() {
        row.scale_mut(fit.residuals[i]);
    }
    symmetrize(&m.tr_mul(&m))
}

/// `χΓ` with relabeled columns.
pub fn transform_regressors(design: &DesignMatrix, gamma: &DMatrix<f64>) -> Result<DesignMatrix> {
    let p = design.ncols();
    if gamma.shape() != (p, p) {
        return invalid(format!("transform must be {p}×{p}"));
    }
    let rk = rank(gamma);
    if rk < p {
        return Err(Error::Numerical(format!("transform is singular (rank {rk} of {p})")));
    }
    Ok(DesignMatrix { values: &design.values * gamma, labels: (0..p).map(ColumnLabel::Transformed).collect() })
}
