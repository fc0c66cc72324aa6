//! Dense linear-algebra helpers shared by the estimation modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a matrix is treated as singular.
pub const RANK_TOL: f64 = 1e-10;

/// Householder QR with column-norm pivoting (Businger–Golub).
///
/// nalgebra's `ColPivQR` pivots on the largest single entry, which does not
/// reveal rank reliably, so the factorization is done here. `Q` is kept as
/// reflectors below the diagonal and never formed.
pub struct PivotedQr {
    /// `R` on and above the diagonal, reflector tails below it.
    packed: DMatrix<f64>,
    tau: Vec<f64>,
    /// `order[k]` is the original column sitting at pivot position `k`.
    order: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (n, p) = a.shape();
        let steps = n.min(p);
        let mut m = a.clone();
        let mut order: Vec<usize> = (0..p).collect();
        let mut tau = vec![0.0; steps];
        let mut norms: Vec<f64> = (0..p).map(|j| m.column(j).norm()).collect();
        let mut reference = norms.clone();
        let eps_sqrt = f64::EPSILON.sqrt();
        for k in 0..steps {
            let piv = (k..p).fold(k, |best, j| if norms[j] > norms[best] { j } else { best });
            if piv != k {
                m.swap_columns(k, piv);
                order.swap(k, piv);
                norms.swap(k, piv);
                reference.swap(k, piv);
            }
            let (t, beta) = {
                let col = &mut m.as_mut_slice()[k * n..(k + 1) * n];
                householder(&mut col[k..])
            };
            tau[k] = t;
            let (head, tail) = m.as_mut_slice().split_at_mut((k + 1) * n);
            let v = &head[k * n + k..(k + 1) * n];
            if t != 0.0 {
                for col in tail.chunks_exact_mut(n) {
                    let x = &mut col[k..];
                    let w = x[0] + dot(&v[1..], &x[1..]);
                    let s = t * w;
                    x[0] -= s;
                    for (xi, vi) in x[1..].iter_mut().zip(&v[1..]) {
                        *xi -= s * vi;
                    }
                }
            }
            m[(k, k)] = beta;
            for j in k + 1..p {
                if norms[j] == 0.0 {
                    continue;
                }
                let ratio = m[(k, j)].abs() / norms[j];
                let left = (1.0 - ratio * ratio).max(0.0);
                let drift = left * (norms[j] / reference[j]).powi(2);
                if drift <= eps_sqrt {
                    norms[j] = m.view((k + 1, j), (n - k - 1, 1)).norm();
                    reference[j] = norms[j];
                } else {
                    norms[j] *= left.sqrt();
                }
            }
        }
        let top = if steps > 0 { m[(0, 0)].abs() } else { 0.0 };
        let rank = (0..steps).take_while(|&i| top > 0.0 && m[(i, i)].abs() > RANK_TOL * top).count();
        PivotedQr { packed: m, tau, order, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Original indices of columns found linearly dependent on earlier pivots.
    pub fn dependent_columns(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = self.order[self.rank..].to_vec();
        cols.sort_unstable();
        cols
    }

    pub fn is_full_column_rank(&self) -> bool {
        self.rank == self.order.len()
    }

    fn r_square(&self) -> DMatrix<f64> {
        let p = self.order.len();
        self.packed.view((0, 0), (p, p)).upper_triangle()
    }

    /// `Qᵀ y`.
    fn q_tr_mul(&self, y: &mut DVector<f64>) {
        let n = self.packed.nrows();
        for (k, &t) in self.tau.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            let v = &self.packed.as_slice()[k * n + k..(k + 1) * n];
            let x = &mut y.as_mut_slice()[k..];
            let w = x[0] + dot(&v[1..], &x[1..]);
            let s = t * w;
            x[0] -= s;
            for (xi, vi) in x[1..].iter_mut().zip(&v[1..]) {
                *xi -= s * vi;
            }
        }
    }

    /// Least-squares solution; requires full column rank.
    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let p = self.order.len();
        let mut qty = y.clone();
        self.q_tr_mul(&mut qty);
        let rhs = qty.rows(0, p).into_owned();
        let z = self.r_square().solve_upper_triangular(&rhs).expect("full-rank R has a nonzero diagonal");
        let mut beta = DVector::zeros(p);
        for (k, &col) in self.order.iter().enumerate() {
            beta[col] = z[k];
        }
        beta
    }

    /// `(AᵀA)⁻¹` assembled from the triangular factor; requires full column rank.
    pub fn gram_inverse(&self) -> DMatrix<f64> {
        let p = self.order.len();
        let r_inv = self
            .r_square()
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .expect("full-rank R has a nonzero diagonal");
        let w = &r_inv * r_inv.transpose();
        let mut out = DMatrix::zeros(p, p);
        for (i, &ci) in self.order.iter().enumerate() {
            for (j, &cj) in self.order.iter().enumerate() {
                out[(ci, cj)] = w[(i, j)];
            }
        }
        symmetrize(&out)
    }
}

/// Dot product with four partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Reflector `H = I − τ v vᵀ` with `v[0] = 1` mapping `x` to `β e₁`.
///
/// Overwrites `x[1..]` with the tail of `v`; returns `(τ, β)`.
fn householder(x: &mut [f64]) -> (f64, f64) {
    let alpha = x[0];
    let tail = x[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if tail == 0.0 {
        return (0.0, alpha);
    }
    let beta = -alpha.signum() * alpha.hypot(tail);
    let scale = 1.0 / (alpha - beta);
    for v in &mut x[1..] {
        *v *= scale;
    }
    ((beta - alpha) / beta, beta)
}

/// Numerical rank under [`RANK_TOL`].
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    if a.nrows() < a.ncols() {
        PivotedQr::new(&a.transpose()).rank()
    } else {
        PivotedQr::new(a).rank()
    }
}

/// Inverse of a square matrix, rejecting it when rank-deficient.
pub fn inverse_checked(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Numerical(format!("{what}: matrix is not square")));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let qr = PivotedQr::new(a);
    if !qr.is_full_column_rank() {
        return Err(Error::Numerical(format!("{what}: singular (rank {} of {n})", qr.rank())));
    }
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        out.set_column(i, &qr.solve(&e));
    }
    Ok(out)
}

/// Inverse of a symmetric matrix, symmetrized on return.
pub fn sym_inverse_checked(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    inverse_checked(a, what).map(|m| symmetrize(&m))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest `|a_ij − a_ji|` relative to the largest `|a_ij|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).amax() / scale
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Block-diagonal matrix from two blocks.
pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), a.ncols()), b.shape()).copy_from(b);
    out
}

/// Stack rows of two matrices with equal column counts.
pub fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols(), "vstack: column mismatch");
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

/// Square root factor `F` with `F Fᵀ = A` for a symmetric PSD matrix.
///
/// Eigenvalues below zero are clipped; clipping more than `1e-8` of the
/// largest eigenvalue is rejected. Columns are sorted by decreasing
/// eigenvalue.
pub fn psd_factor(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = symmetrize(a).symmetric_eigen();
    let top = eig.eigenvalues.max().max(0.0);
    let floor = eig.eigenvalues.min();
    if floor < 0.0 && -floor > 1e-8 * top {
        return Err(Error::Numerical(format!(
            "{what}: not positive semidefinite (eigenvalue {floor:e}, largest {top:e})"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut f = DMatrix::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        let s = eig.eigenvalues[i].max(0.0).sqrt();
        f.column_mut(k).copy_from(&(eig.eigenvectors.column(i) * s));
    }
    Ok(f)
}

/// Minimum eigenvalue of the symmetrized matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a).symmetric_eigen().eigenvalues.min()
}

/// Kahan-compensated accumulator for a vector of sums.
#[derive(Clone, Debug)]
pub struct KahanVec {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl KahanVec {
    pub fn new(n: usize) -> Self {
        KahanVec { sum: vec![0.0; n], comp: vec![0.0; n] }
    }

    pub fn add_slice(&mut self, v: &[f64]) {
        for ((s, c), &x) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(v) {
            let y = x - *c;
            let t = *s + y;
            *c = (t - *s) - y;
            *s = t;
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.sum
    }
}
