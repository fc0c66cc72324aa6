//! Finite-population quantities and exact randomization moments.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::design::{center_columns, covariate_cov, enumerate_assignments, Assignment, TreatmentStructure};
use crate::error::{invalid, Result};
use crate::estimators::{fmt_f64, ExperimentData};
use crate::linalg::{sym_inverse_checked, symmetrize, KahanVec};
use crate::lsq::Restriction;
use crate::special::chi2_cdf;

/// Complete `N×Q` potential outcomes with centered covariates.
#[derive(Clone, Debug)]
pub struct PotentialTable {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    structure: TreatmentStructure,
}

impl PotentialTable {
    /// Centers `x`; `structure` fixes the group sizes used for assignments.
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>, structure: TreatmentStructure) -> Result<Self> {
        if y.nrows() != structure.n() || x.nrows() != structure.n() {
            return invalid(format!(
                "table has {} outcome rows and {} covariate rows, design has {} units",
                y.nrows(),
                x.nrows(),
                structure.n()
            ));
        }
        if y.ncols() != structure.q() {
            return invalid(format!("table has {} outcome columns, design has {} levels", y.ncols(), structure.q()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return invalid("table contains a non-finite value");
        }
        let (x, _) = center_columns(&x);
        Ok(PotentialTable { y, x, structure })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn structure(&self) -> &TreatmentStructure {
        &self.structure
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn j(&self) -> usize {
        self.x.ncols()
    }

    /// Same units under a different arm layout and a subset of columns.
    pub fn with_levels(&self, columns: &[usize], structure: TreatmentStructure) -> Result<Self> {
        if columns.iter().any(|&c| c >= self.q()) {
            return invalid("column index outside the table");
        }
        let y = DMatrix::from_fn(self.n(), columns.len(), |i, k| self.y[(i, columns[k])]);
        Self::new(y, self.x.clone(), structure)
    }

    /// Observed data under `assignment`.
    pub fn reveal(&self, assignment: &Assignment) -> ExperimentData {
        let z = assignment.levels();
        let y = DVector::from_fn(self.n(), |i, _| self.y[(i, z[i])]);
        ExperimentData::from_centered(y, assignment.clone(), self.x.clone(), self.structure.clone())
    }

    /// Columns `y1..yQ, x1..xJ`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header: Vec<String> = (1..=self.q()).map(|q| format!("y{q}")).collect();
        header.extend((1..=self.j()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let rec: Vec<String> = self.y.row(i).iter().chain(self.x.row(i).iter()).map(|v| fmt_f64(*v)).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, structure: TreatmentStructure) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let headers = rd.headers()?.clone();
        let ycols: Vec<usize> = (1..=structure.q())
            .map(|q| {
                headers
                    .iter()
                    .position(|h| h.trim() == format!("y{q}"))
                    .ok_or_else(|| crate::Error::Validation(format!("missing column y{q}")))
            })
            .collect::<Result<_>>()?;
        let mut xcols = Vec::new();
        while let Some(p) = headers.iter().position(|h| h.trim() == format!("x{}", xcols.len() + 1)) {
            xcols.push(p);
        }
        let mut yv = Vec::new();
        let mut xv = Vec::new();
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            let parse = |c: usize| -> Result<f64> {
                rec.get(c).and_then(|s| s.trim().parse::<f64>().ok()).ok_or_else(|| {
                    crate::Error::Validation(format!("row {}: column {} is not a number", row + 1, &headers[c]))
                })
            };
            for &c in &ycols {
                yv.push(parse(c)?);
            }
            for &c in &xcols {
                xv.push(parse(c)?);
            }
        }
        let n = yv.len() / structure.q().max(1);
        let y = DMatrix::from_row_slice(n, structure.q(), &yv);
        let x = DMatrix::from_row_slice(n, xcols.len(), &xv);
        Self::new(y, x, structure)
    }
}

/// `Ȳ(q) = N⁻¹ Σ_i Y_i(q)`.
pub fn pop_means(table: &PotentialTable) -> DVector<f64> {
    let n = table.n() as f64;
    DVector::from_fn(table.q(), |q, _| table.y.column(q).sum() / n)
}

/// `S` with entries `S_{qq′} = (N−1)⁻¹ Σ (Y_i(q) − Ȳ(q))(Y_i(q′) − Ȳ(q′))`.
pub fn pop_cov(table: &PotentialTable) -> DMatrix<f64> {
    cov_columns(&table.y)
}

fn cov_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (c, _) = center_columns(m);
    c.tr_mul(&c) / (m.nrows() as f64 - 1.0)
}

/// `S_x²`.
pub fn pop_sx2(table: &PotentialTable) -> DMatrix<f64> {
    covariate_cov(&table.x)
}

/// `J×Q` matrix whose column `q` is `S_{xY(q)}`.
pub fn pop_sxy(table: &PotentialTable) -> DMatrix<f64> {
    let (yc, _) = center_columns(&table.y);
    table.x.tr_mul(&yc) / (table.n() as f64 - 1.0)
}

/// Stacked `γ_q = (S_x²)⁻¹ S_{xY(q)}`.
pub fn pop_gamma(table: &PotentialTable) -> Result<DVector<f64>> {
    let (q, j) = (table.q(), table.j());
    if j == 0 {
        return Ok(DVector::zeros(0));
    }
    let sx_inv = sym_inverse_checked(&pop_sx2(table), "covariate covariance")?;
    let g = sx_inv * pop_sxy(table); // J×Q
    Ok(DVector::from_fn(q * j, |k, _| g[(k % j, k / j)]))
}

/// `γ̄̄ = Σ_q e_q γ_q`.
pub fn pooled_gamma(table: &PotentialTable) -> Result<DVector<f64>> {
    let g = pop_gamma(table)?;
    let e = table.structure.proportions();
    let j = table.j();
    Ok(DVector::from_fn(j, |jj, _| (0..table.q()).map(|q| e[q] * g[q * j + jj]).sum()))
}

/// Covariance `S_b` of the adjusted outcomes `Y_i(q) − b_qᵀ x_i`.
pub fn adjusted_cov(table: &PotentialTable, b: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (q, j) = (table.q(), table.j());
    if b.len() != q * j {
        return invalid(format!("adjustment vector has length {}, expected {}", b.len(), q * j));
    }
    let adj = DMatrix::from_fn(table.n(), q, |i, qq| {
        table.y[(i, qq)] - (0..j).map(|jj| b[qq * j + jj] * table.x[(i, jj)]).sum::<f64>()
    });
    Ok(cov_columns(&adj))
}

/// `V_b = diag(S_{b,qq} / e_q) − S_b`.
pub fn v_matrix(table: &PotentialTable, b: &DVector<f64>) -> Result<DMatrix<f64>> {
    let s = adjusted_cov(table, b)?;
    let e = table.structure.proportions();
    let mut v = -s.clone();
    for q in 0..table.q() {
        v[(q, q)] += s[(q, q)] / e[q];
    }
    Ok(v)
}

pub fn v_n(table: &PotentialTable) -> DMatrix<f64> {
    v_matrix(table, &DVector::zeros(table.q() * table.j())).expect("zero vector has the right length")
}

pub fn v_f(table: &PotentialTable) -> Result<DMatrix<f64>> {
    let gbar = pooled_gamma(table)?;
    let b = DVector::from_fn(table.q() * table.j(), |k, _| gbar[k % table.j()]);
    v_matrix(table, &b)
}

pub fn v_l(table: &PotentialTable) -> Result<DMatrix<f64>> {
    v_matrix(table, &pop_gamma(table)?)
}

/// `U = I − Π⁻¹ρᵀ(ρΠ⁻¹ρᵀ)⁻¹ρ` and `μ = −Π⁻¹ρᵀ(ρΠ⁻¹ρᵀ)⁻¹(ρȲ − r)`.
pub fn u_mu(
    rho_y: &DMatrix<f64>,
    r_y: &DVector<f64>,
    e: &[f64],
    ybar: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let q = e.len();
    if rho_y.ncols() != q || ybar.len() != q || r_y.len() != rho_y.nrows() {
        return invalid("dimension mismatch in U/μ inputs");
    }
    if rho_y.nrows() == 0 {
        return Ok((DMatrix::identity(q, q), DVector::zeros(q)));
    }
    let pi_inv = DMatrix::from_diagonal(&DVector::from_iterator(q, e.iter().map(|v| 1.0 / v)));
    let mid = sym_inverse_checked(&(rho_y * &pi_inv * rho_y.transpose()), "ρ Π⁻¹ ρᵀ")?;
    let k = &pi_inv * rho_y.transpose() * mid;
    let u = DMatrix::identity(q, q) - &k * rho_y;
    let mu = -(&k * (rho_y * ybar - r_y));
    Ok((u, mu))
}

/// `ν_{JH,a} = P(χ²_{JH+2} < a) / P(χ²_{JH} < a)`.
pub fn nu_factor(jh: usize, a: f64) -> f64 {
    assert!(a > 0.0, "nu_factor: threshold must be positive");
    if a.is_infinite() {
        return 1.0;
    }
    let df = jh as f64;
    let den = chi2_cdf(a, df);
    if den == 0.0 {
        return 0.0;
    }
    chi2_cdf(a, df + 2.0) / den
}

/// Exact mean and covariance of `estimator` over every complete randomization.
///
/// Estimator calls run in parallel; the reduction is serial and compensated,
/// so the result does not depend on the thread count.
pub fn exact_randomization_moments<F>(table: &PotentialTable, estimator: F) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(&ExperimentData) -> Result<DVector<f64>> + Sync,
{
    let all = enumerate_assignments(&table.structure)?;
    let values: Vec<DVector<f64>> = all.par_iter().map(|a| estimator(&table.reveal(a))).collect::<Result<_>>()?;
    Ok(moments(&values))
}

/// Compensated mean and population (divide-by-count) covariance.
pub fn moments(values: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = values.first().map_or(0, |v| v.len());
    let count = values.len() as f64;
    let mut sum = KahanVec::new(d);
    for v in values {
        sum.add_slice(v.as_slice());
    }
    let mean = DVector::from_iterator(d, sum.values().iter().map(|s| s / count));
    let mut acc = KahanVec::new(d * d);
    let mut buf = vec![0.0; d * d];
    for v in values {
        let c = v - &mean;
        for a in 0..d {
            for b in 0..d {
                buf[a * d + b] = c[a] * c[b];
            }
        }
        acc.add_slice(&buf);
    }
    let cov = DMatrix::from_row_iterator(d, d, acc.values().iter().map(|s| s / count));
    (mean, symmetrize(&cov))
}

/// Population limits under a restriction on the fully interacted coefficients.
#[derive(Clone, Debug)]
pub struct TheoryQuantities {
    pub gamma_r_limit: DVector<f64>,
    pub v_r: DMatrix<f64>,
    pub s_r: DMatrix<f64>,
}

/// `γ_r = γ − (Π⊗S_x²)⁻¹ R_γᵀ Δ₀ (Rθ_L − r)` with `Δ₀ = [R diag{Π⁻¹, (Π⊗S_x²)⁻¹} Rᵀ]⁻¹`.
pub fn theory_quantities(table: &PotentialTable, restriction: &Restriction) -> Result<TheoryQuantities> {
    let (q, j) = (table.q(), table.j());
    let p = q + q * j;
    if restriction.p() != p {
        return invalid(format!("restriction has {} columns, expected Q + JQ = {p}", restriction.p()));
    }
    let gamma = pop_gamma(table)?;
    let gamma_r_limit = if restriction.is_empty() || j == 0 {
        gamma
    } else {
        let e = table.structure.proportions();
        let sx_inv = sym_inverse_checked(&pop_sx2(table), "covariate covariance")?;
        let mut w = DMatrix::zeros(p, p);
        for qq in 0..q {
            w[(qq, qq)] = 1.0 / e[qq];
            w.view_mut((q + qq * j, q + qq * j), (j, j)).copy_from(&(&sx_inv / e[qq]));
        }
        let r_mat = restriction.matrix();
        let delta0 = sym_inverse_checked(&(r_mat * &w * r_mat.transpose()), "R W Rᵀ")?;
        let mut theta = DVector::zeros(p);
        theta.rows_mut(0, q).copy_from(&pop_means(table));
        theta.rows_mut(q, q * j).copy_from(&gamma);
        let gap = r_mat * &theta - restriction.rhs();
        let r_gamma = r_mat.columns(q, q * j);
        let w_gamma = w.view((q, q), (q * j, q * j));
        gamma - w_gamma * r_gamma.transpose() * delta0 * gap
    };
    let s_r = adjusted_cov(table, &gamma_r_limit)?;
    let v_r = v_matrix(table, &gamma_r_limit)?;
    Ok(TheoryQuantities { gamma_r_limit, v_r, s_r })
}

fn scale_tol(m: impl Iterator<Item = f64>) -> f64 {
    1e-10 * m.fold(1.0f64, |acc, v| acc.max(v.abs()))
}

/// Condition: every `γ_q` is zero.
pub fn is_zero_correlation(table: &PotentialTable) -> Result<bool> {
    let g = pop_gamma(table)?;
    let tol = scale_tol(table.y.iter().copied());
    Ok(g.iter().all(|v| v.abs() <= tol))
}

/// Condition: `γ_1 = ⋯ = γ_Q`.
pub fn is_equal_correlation(table: &PotentialTable) -> Result<bool> {
    let g = pop_gamma(table)?;
    let j = table.j();
    let tol = scale_tol(g.iter().copied());
    Ok((1..table.q()).all(|q| (0..j).all(|jj| (g[q * j + jj] - g[jj]).abs() <= tol)))
}

/// Condition: `Y_i(q) − Y_i(1)` is the same for every unit.
pub fn is_constant_effects(table: &PotentialTable) -> bool {
    let tol = scale_tol(table.y.iter().copied());
    (1..table.q()).all(|q| {
        let d0 = table.y[(0, q)] - table.y[(0, 0)];
        (0..table.n()).all(|i| (table.y[(i, q)] - table.y[(i, 0)] - d0).abs() <= tol)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use rand::Rng;

    fn random_table(sizes: Vec<usize>, j: usize, seed: u64) -> PotentialTable {
        let s = TreatmentStructure::new(sizes).unwrap();
        let n = s.n();
        let q = s.q();
        let mut r = crate::rng::stream(seed, 9);
        let x = DMatrix::from_fn(n, j, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let y = DMatrix::from_fn(n, q, |i, qq| {
            (0..j).map(|jj| x[(i, jj)] * (qq as f64 - jj as f64)).sum::<f64>() + r.random::<f64>() + qq as f64
        });
        PotentialTable::new(y, x, s).unwrap()
    }

    #[test]
    fn means_of_constant_and_small_tables() {
        let s = TreatmentStructure::new(vec![1, 2]).unwrap();
        let t = PotentialTable::new(DMatrix::from_element(3, 2, 4.5), DMatrix::zeros(3, 0), s.clone()).unwrap();
        assert_eq!(pop_means(&t).as_slice(), &[4.5, 4.5]);
        let y = DMatrix::from_row_slice(3, 2, &[1., 2., 3., 5., 8., 11.]);
        let t = PotentialTable::new(y, DMatrix::zeros(3, 0), s).unwrap();
        assert_eq!(pop_means(&t).as_slice(), &[4.0, 6.0]);
    }

    #[test]
    fn gamma_cases() {
        let s = TreatmentStructure::new(vec![2, 2]).unwrap();
        let x = DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let y = DMatrix::from_fn(4, 2, |i, _| 2.0 * x[(i, 0)]);
        let t = PotentialTable::new(y, x.clone(), s.clone()).unwrap();
        assert!((pop_gamma(&t).unwrap() - DVector::from_vec(vec![2.0, 2.0])).amax() < 1e-14);
        assert!(is_equal_correlation(&t).unwrap());
        // orthogonal outcome: (1, −1, −1, 1) ⟂ x
        let y0 = DMatrix::from_fn(4, 2, |i, _| [1.0, -1.0, -1.0, 1.0][i]);
        let t0 = PotentialTable::new(y0, x, s).unwrap();
        assert!(is_zero_correlation(&t0).unwrap());
    }

    #[test]
    fn gamma_matches_population_regression_slope() {
        let t = random_table(vec![5, 6, 7], 2, 3);
        let g = pop_gamma(&t).unwrap();
        for q in 0..3 {
            let v = DMatrix::from_fn(t.n(), 3, |i, c| if c == 0 { 1.0 } else { t.x()[(i, c - 1)] });
            let y = t.y().column(q).into_owned();
            let beta = (v.transpose() * &v).lu().solve(&(v.transpose() * y)).unwrap();
            assert!((beta.rows(1, 2) - g.rows(q * 2, 2)).amax() < 1e-10);
        }
    }

    #[test]
    fn v_orderings_on_random_tables() {
        for seed in 0..20 {
            let t = random_table(vec![6, 8, 9], 2, seed);
            let vl = v_l(&t).unwrap();
            assert!(min_eigenvalue(&(v_n(&t) - &vl)) > -1e-10);
            assert!(min_eigenvalue(&(v_f(&t).unwrap() - &vl)) > -1e-10);
            let r = crate::estimators::restriction_equal_correlation(3, 2);
            let th = theory_quantities(&t, &r).unwrap();
            assert!(min_eigenvalue(&(th.v_r - &vl)) > -1e-10);
        }
    }

    #[test]
    fn constant_effect_table_gives_scaled_v_l() {
        let s = TreatmentStructure::new(vec![3, 4, 5]).unwrap();
        let mut r = crate::rng::stream(1, 1);
        let x = DMatrix::from_fn(12, 1, |_, _| r.random::<f64>());
        let base: Vec<f64> = (0..12).map(|_| r.random::<f64>()).collect();
        let y = DMatrix::from_fn(12, 3, |i, q| base[i] + 2.0 * x[(i, 0)] + q as f64);
        let t = PotentialTable::new(y, x, s).unwrap();
        assert!(is_constant_effects(&t));
        assert!(is_equal_correlation(&t).unwrap());
        let vl = v_l(&t).unwrap();
        let s0 = adjusted_cov(&t, &pop_gamma(&t).unwrap()).unwrap()[(0, 0)];
        let e = t.structure().proportions();
        let want = DMatrix::from_fn(3, 3, |a, b| s0 * (if a == b { 1.0 / e[a] } else { 0.0 } - 1.0));
        assert!((vl - want).amax() < 1e-12);
    }

    #[test]
    fn v_matrix_hand_table() {
        // Q=2, N=4, no covariates, e = (½, ½)
        let s = TreatmentStructure::new(vec![2, 2]).unwrap();
        let y = DMatrix::from_row_slice(4, 2, &[1., 2., 2., 2., 3., 5., 6., 7.]);
        let t = PotentialTable::new(y, DMatrix::zeros(4, 0), s).unwrap();
        // S11 = 14/3, S22 = 6, S12 = 5
        let v = v_n(&t);
        let want = DMatrix::from_row_slice(2, 2, &[14.0 / 3.0, -5.0, -5.0, 6.0]);
        assert!((v - want).amax() < 1e-12);
    }

    #[test]
    fn u_mu_identities() {
        let e = [0.5, 0.5];
        let rho = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let ybar = DVector::from_vec(vec![2.0, 2.0]);
        let (u, mu) = u_mu(&rho, &DVector::zeros(1), &e, &ybar).unwrap();
        assert!((&u - DMatrix::from_element(2, 2, 0.5)).amax() < 1e-15);
        assert_eq!(mu.amax(), 0.0);
        let e3 = [0.2, 0.3, 0.5];
        let rho3 = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 1.0]);
        let (u3, mu3) =
            u_mu(&rho3, &DVector::from_vec(vec![0.4]), &e3, &DVector::from_vec(vec![1.0, 0.0, 2.0])).unwrap();
        assert!((&u3 * &u3 - &u3).amax() < 1e-14);
        assert!((&rho3 * &u3).amax() < 1e-14);
        // restriction holds for Ȳ + μ
        let shifted = DVector::from_vec(vec![1.0, 0.0, 2.0]) + mu3;
        assert!(((&rho3 * shifted)[0] - 0.4).abs() < 1e-14);
    }

    #[test]
    fn nu_factor_values() {
        let want = (1.0 - 2.0 * (-1.0f64).exp()) / (1.0 - (-1.0f64).exp());
        assert!((nu_factor(2, 2.0) - want).abs() < 1e-12);
        assert!((nu_factor(2, 2.0) - 0.418_023).abs() < 1e-6);
        assert_eq!(nu_factor(3, f64::INFINITY), 1.0);
        assert!(nu_factor(4, 1e-6) < 1e-6);
        assert!((nu_factor(4, 1e4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn theory_special_cases() {
        let t = random_table(vec![6, 7, 8], 2, 5);
        let zero = crate::estimators::restriction_zero_correlation(3, 2);
        let th = theory_quantities(&t, &zero).unwrap();
        assert!(th.gamma_r_limit.amax() < 1e-12);
        assert!((th.v_r - v_n(&t)).amax() < 1e-10);
        // correctly specified: pin γ to its own value
        let g = pop_gamma(&t).unwrap();
        let mut r = DMatrix::zeros(6, 9);
        r.view_mut((0, 3), (6, 6)).fill_with_identity();
        let pinned = Restriction::new(r, g.clone(), Some(3)).unwrap();
        let th2 = theory_quantities(&t, &pinned).unwrap();
        assert!((th2.gamma_r_limit - g).amax() < 1e-12);
        assert!((th2.v_r - v_l(&t).unwrap()).amax() < 1e-10);
    }

    #[test]
    fn csv_round_trip() {
        let t = random_table(vec![2, 3], 2, 1);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = PotentialTable::read_csv(buf.as_slice(), t.structure().clone()).unwrap();
        assert_eq!(back.y(), t.y());
        assert!((back.x() - t.x()).amax() < 1e-15);
    }
}
