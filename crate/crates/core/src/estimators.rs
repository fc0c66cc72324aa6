//! Treatment-based estimators of `τ = C Ȳ`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::design::{center_columns, covariate_cov, group_means, Assignment, TreatmentStructure};
use crate::error::{invalid, Error, Result};
use crate::linalg::{block_diag, kron, psd_factor, rank, sym_inverse_checked, symmetrize};
use crate::lsq::{cov_block, ehw_cov, ols_fit, rls_fit, ColumnLabel, DesignMatrix, Restriction, RestrictionKind};
use crate::rng;
use crate::special::{chi2_cdf, chi2_quantile, chi2_sf};

/// Regression specification: unadjusted, additive, or fully interacted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SpecKind {
    N,
    F,
    L,
}

impl fmt::Display for SpecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpecKind::N => "N",
            SpecKind::F => "F",
            SpecKind::L => "L",
        };
        f.write_str(s)
    }
}

impl FromStr for SpecKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "N" | "n" => Ok(SpecKind::N),
            "F" | "f" => Ok(SpecKind::F),
            "L" | "l" => Ok(SpecKind::L),
            other => invalid(format!("unknown spec '{other}' (expected N, F or L)")),
        }
    }
}

/// Observed outcomes, assignment and centered covariates.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    y: DVector<f64>,
    assignment: Assignment,
    x: DMatrix<f64>,
    shift: Vec<f64>,
    structure: TreatmentStructure,
}

impl ExperimentData {
    /// Centers `x` and checks the assignment against the structure.
    pub fn new(y: DVector<f64>, levels: Vec<usize>, x: DMatrix<f64>, structure: TreatmentStructure) -> Result<Self> {
        let n = structure.n();
        if y.len() != n {
            return invalid(format!("{} outcomes for {n} units", y.len()));
        }
        if x.nrows() != n {
            return invalid(format!("{} covariate rows for {n} units", x.nrows()));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return invalid(format!("row {}: outcome is not finite", i + 1));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("covariates contain a non-finite value");
        }
        let assignment = Assignment::new(levels, &structure)?;
        let (x, shift) = center_columns(&x);
        Ok(ExperimentData { y, assignment, x, shift, structure })
    }

    /// Builds from already-centered covariates without re-centering.
    pub(crate) fn from_centered(
        y: DVector<f64>,
        assignment: Assignment,
        x: DMatrix<f64>,
        structure: TreatmentStructure,
    ) -> Self {
        let shift = vec![0.0; x.ncols()];
        ExperimentData { y, assignment, x, shift, structure }
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Column means removed from the raw covariates.
    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn structure(&self) -> &TreatmentStructure {
        &self.structure
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.structure.q()
    }

    pub fn j(&self) -> usize {
        self.x.ncols()
    }

    /// Group means `Ŷ(q)`.
    pub fn outcome_means(&self) -> DVector<f64> {
        let ym = DMatrix::from_column_slice(self.n(), 1, self.y.as_slice());
        group_means(&self.assignment, &ym, self.q()).column(0).into_owned()
    }

    /// Group covariate means `x̂(q)` as rows.
    pub fn covariate_means(&self) -> DMatrix<f64> {
        group_means(&self.assignment, &self.x, self.q())
    }

    /// Stacked `x̂ = (x̂(1); …; x̂(Q))`.
    pub fn covariate_means_stacked(&self) -> DVector<f64> {
        let m = self.covariate_means();
        DVector::from_iterator(m.len(), m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()))
    }

    fn check_group_sizes_for_slopes(&self) -> Result<()> {
        let need = self.j() + 2;
        for (q, &nq) in self.structure.sizes().iter().enumerate() {
            if nq < need {
                return invalid(format!(
                    "level {} has {nq} units; per-level covariate slopes need at least J+2 = {need}",
                    q + 1
                ));
            }
        }
        Ok(())
    }
}

/// Contrast rows `C` with labels.
#[derive(Clone, Debug)]
pub struct ContrastMatrix {
    c: DMatrix<f64>,
    names: Vec<String>,
}

impl ContrastMatrix {
    /// Every row must sum to zero.
    pub fn new(c: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != c.nrows() {
            return invalid(format!("{} names for {} contrast rows", names.len(), c.nrows()));
        }
        for (h, row) in c.row_iter().enumerate() {
            let scale = row.amax().max(1e-300);
            if row.sum().abs() > 1e-10 * scale * c.ncols() as f64 {
                return invalid(format!("contrast row '{}' does not sum to zero", names[h]));
            }
        }
        Ok(ContrastMatrix { c, names })
    }

    /// Rows named `c1, c2, …`.
    pub fn unnamed(c: DMatrix<f64>) -> Result<Self> {
        let names = (1..=c.nrows()).map(|h| format!("c{h}")).collect();
        Self::new(c, names)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn h(&self) -> usize {
        self.c.nrows()
    }

    pub fn q(&self) -> usize {
        self.c.ncols()
    }
}

/// Column layout for one of the three treatment-based regressions.
///
/// `[Q indicators | F: J covariates | L: JQ interactions, level-major]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecBuilder {
    pub kind: SpecKind,
    pub q: usize,
    pub j: usize,
}

pub fn build_spec(kind: SpecKind, q: usize, j: usize) -> SpecBuilder {
    let kind = if j == 0 { SpecKind::N } else { kind };
    SpecBuilder { kind, q, j }
}

impl SpecBuilder {
    pub fn ncols(&self) -> usize {
        match self.kind {
            SpecKind::N => self.q,
            SpecKind::F => self.q + self.j,
            SpecKind::L => self.q + self.q * self.j,
        }
    }

    pub fn labels(&self) -> Vec<ColumnLabel> {
        let mut out: Vec<ColumnLabel> = (0..self.q).map(ColumnLabel::Treatment).collect();
        match self.kind {
            SpecKind::N => {}
            SpecKind::F => out.extend((0..self.j).map(ColumnLabel::Covariate)),
            SpecKind::L => {
                for level in 0..self.q {
                    out.extend((0..self.j).map(|covariate| ColumnLabel::Interaction { level, covariate }));
                }
            }
        }
        out
    }

    pub fn build(&self, data: &ExperimentData) -> Result<DesignMatrix> {
        if data.q() != self.q || data.j() != self.j {
            return invalid(format!(
                "spec built for Q={}, J={} but data has Q={}, J={}",
                self.q,
                self.j,
                data.q(),
                data.j()
            ));
        }
        let n = data.n();
        let z = data.assignment().levels();
        let x = data.x();
        let mut v = DMatrix::zeros(n, self.ncols());
        for i in 0..n {
            v[(i, z[i])] = 1.0;
            match self.kind {
                SpecKind::N => {}
                SpecKind::F => {
                    for jj in 0..self.j {
                        v[(i, self.q + jj)] = x[(i, jj)];
                    }
                }
                SpecKind::L => {
                    for jj in 0..self.j {
                        v[(i, self.q + z[i] * self.j + jj)] = x[(i, jj)];
                    }
                }
            }
        }
        DesignMatrix::new(v, self.labels())
    }
}

/// `γ = 0`: `R = (0_{JQ×Q}, I_{JQ})`.
pub fn restriction_zero_correlation(q: usize, j: usize) -> Restriction {
    let jq = j * q;
    let mut r = DMatrix::zeros(jq, q + jq);
    r.view_mut((0, q), (jq, jq)).fill_with_identity();
    Restriction::new(r, DVector::zeros(jq), Some(q)).expect("identity block has full rank")
}

/// `γ_1 = ⋯ = γ_Q`: `R = (0, (−1_{Q−1}, I_{Q−1}) ⊗ I_J)`.
pub fn restriction_equal_correlation(q: usize, j: usize) -> Restriction {
    if q < 2 || j == 0 {
        return Restriction::empty(q + q * j);
    }
    let mut d = DMatrix::zeros(q - 1, q);
    for k in 0..q - 1 {
        d[(k, 0)] = -1.0;
        d[(k, k + 1)] = 1.0;
    }
    let block = kron(&d, &DMatrix::identity(j, j));
    let m = block.nrows();
    let mut r = DMatrix::zeros(m, q + q * j);
    r.view_mut((0, q), block.shape()).copy_from(&block);
    Restriction::new(r, DVector::zeros(m), Some(q)).expect("difference operator has full rank")
}

/// Block-diagonal `diag(ρ_Y, ρ_γ)` with right-hand side `(r_Y, r_γ)`.
///
/// `rho_y` is `m_Y×Q` and `rho_g` is `m_γ×JQ`; either may have zero rows.
pub fn restriction_separable(
    rho_y: &DMatrix<f64>,
    r_y: &DVector<f64>,
    rho_g: &DMatrix<f64>,
    r_g: &DVector<f64>,
) -> Result<Restriction> {
    if rho_y.nrows() != r_y.len() || rho_g.nrows() != r_g.len() {
        return invalid("restriction blocks and right-hand sides disagree in length");
    }
    if rho_y.nrows() > 0 && rank(rho_y) < rho_y.nrows() {
        return Err(Error::Numerical("mean-block restriction rows are linearly dependent".into()));
    }
    if rho_g.nrows() > 0 && rank(rho_g) < rho_g.nrows() {
        return Err(Error::Numerical("interaction-block restriction rows are linearly dependent".into()));
    }
    let r_mat = block_diag(rho_y, rho_g);
    let mut r = DVector::zeros(r_y.len() + r_g.len());
    r.rows_mut(0, r_y.len()).copy_from(r_y);
    r.rows_mut(r_y.len(), r_g.len()).copy_from(r_g);
    Restriction::new(r_mat, r, Some(rho_y.ncols()))
}

/// Point estimates and covariances for one specification.
#[derive(Clone, Debug)]
pub struct EstimationResult {
    pub tau_hat: DVector<f64>,
    pub tau_cov: DMatrix<f64>,
    pub y_hat: DVector<f64>,
    /// Upper-left `Q×Q` block of the EHW or double-decker-taco covariance.
    pub y_cov: DMatrix<f64>,
    /// Per-level adjustment coefficients, level-major; zero for kind N.
    pub gamma_hat: DVector<f64>,
    pub kind: SpecKind,
    pub restriction_kind: RestrictionKind,
    pub contrast_names: Vec<String>,
    pub x_shift: Vec<f64>,
}

impl EstimationResult {
    pub fn std_errors(&self) -> DVector<f64> {
        self.tau_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// One row per contrast: name, estimate, std_error, then the covariance row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let h = self.tau_hat.len();
        let mut header = vec!["contrast".to_string(), "estimate".into(), "std_error".into()];
        header.extend(self.contrast_names.iter().map(|n| format!("cov_{n}")));
        w.write_record(&header)?;
        let se = self.std_errors();
        for k in 0..h {
            let mut rec = vec![self.contrast_names[k].clone(), fmt_f64(self.tau_hat[k]), fmt_f64(se[k])];
            rec.extend((0..h).map(|l| fmt_f64(self.tau_cov[(k, l)])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "spec": self.kind.to_string(),
            "restriction_kind": self.restriction_kind,
            "consistency_claim": !matches!(self.restriction_kind, RestrictionKind::General),
            "contrasts": self.contrast_names,
            "tau_hat": self.tau_hat.as_slice(),
            "std_error": self.std_errors().as_slice(),
            "tau_cov": rows(&self.tau_cov),
            "y_hat": self.y_hat.as_slice(),
            "y_cov": rows(&self.y_cov),
            "gamma_hat": self.gamma_hat.as_slice(),
            "covariate_shift": self.x_shift,
        })
    }
}

/// Shortest round-trip decimal representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// OLS path for an empty restriction, RLS with the double-decker-taco covariance otherwise.
pub fn estimate(
    data: &ExperimentData,
    kind: SpecKind,
    restriction: &Restriction,
    contrast: &ContrastMatrix,
) -> Result<EstimationResult> {
    let q = data.q();
    let j = data.j();
    if contrast.q() != q {
        return invalid(format!("contrast has {} columns, data has {q} levels", contrast.q()));
    }
    let spec = build_spec(kind, q, j);
    if !restriction.is_empty() && spec.kind != SpecKind::L {
        return invalid("restrictions apply to the fully interacted specification (kind L)");
    }
    if spec.kind == SpecKind::L {
        data.check_group_sizes_for_slopes()?;
    }
    let design = spec.build(data)?;
    let restriction = if restriction.is_empty() { Restriction::empty(spec.ncols()) } else { restriction.clone() };
    let fit = rls_fit(&design, data.y(), &restriction)?;
    let y_hat = fit.beta.rows(0, q).into_owned();
    let y_cov = cov_block(&fit, 0, q);
    let gamma_hat = match spec.kind {
        SpecKind::N => DVector::zeros(q * j),
        SpecKind::F => {
            let b = fit.beta.rows(q, j).into_owned();
            DVector::from_iterator(q * j, (0..q).flat_map(|_| b.iter().copied().collect::<Vec<_>>()))
        }
        SpecKind::L => fit.beta.rows(q, q * j).into_owned(),
    };
    let c = contrast.matrix();
    Ok(EstimationResult {
        tau_hat: c * &y_hat,
        tau_cov: symmetrize(&(c * &y_cov * c.transpose())),
        y_hat,
        y_cov,
        gamma_hat,
        kind: spec.kind,
        restriction_kind: restriction.kind().clone(),
        contrast_names: contrast.names().to_vec(),
        x_shift: data.shift().to_vec(),
    })
}

/// `Ŷ(q; b_q) = Ŷ(q) − x̂(q)ᵀ b_q`.
pub fn adjusted_means(data: &ExperimentData, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (q, j) = (data.q(), data.j());
    if b.len() != q * j {
        return invalid(format!("adjustment vector has length {}, expected JQ = {}", b.len(), q * j));
    }
    let ybar = data.outcome_means();
    let xbar = data.covariate_means();
    Ok(DVector::from_fn(q, |qq, _| ybar[qq] - (0..j).map(|jj| xbar[(qq, jj)] * b[qq * j + jj]).sum::<f64>()))
}

/// Within-level OLS slopes of `Y` on `(1, x)`, stacked level-major.
pub fn within_group_slopes(data: &ExperimentData) -> Result<DVector<f64>> {
    let (q, j) = (data.q(), data.j());
    data.check_group_sizes_for_slopes()?;
    let mut out = DVector::zeros(q * j);
    let z = data.assignment().levels();
    for qq in 0..q {
        let idx: Vec<usize> = (0..data.n()).filter(|&i| z[i] == qq).collect();
        let v = DMatrix::from_fn(idx.len(), j + 1, |r, c| if c == 0 { 1.0 } else { data.x()[(idx[r], c - 1)] });
        let mut labels = vec![ColumnLabel::Intercept];
        labels.extend((0..j).map(|covariate| ColumnLabel::Interaction { level: qq, covariate }));
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| data.y()[i]));
        let fit = ols_fit(&DesignMatrix::new(v, labels)?, &y)?;
        out.rows_mut(qq * j, j).copy_from(&fit.beta.rows(1, j));
    }
    Ok(out)
}

/// Wald statistic, degrees of freedom and upper-tail χ² p-value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WaldResult {
    pub w: f64,
    pub df: usize,
    pub p_value: f64,
}

/// `W = (Rθ̂ − r)ᵀ (R Σ̂ Rᵀ)⁻¹ (Rθ̂ − r)` on the fully interacted OLS fit.
pub fn wald_restriction_test(data: &ExperimentData, restriction: &Restriction) -> Result<WaldResult> {
    let spec = build_spec(SpecKind::L, data.q(), data.j());
    if restriction.p() != spec.ncols() {
        return invalid(format!(
            "restriction has {} columns, fully interacted spec has {}",
            restriction.p(),
            spec.ncols()
        ));
    }
    if restriction.is_empty() {
        return invalid("cannot test an empty restriction");
    }
    if spec.kind == SpecKind::L {
        data.check_group_sizes_for_slopes()?;
    }
    let fit = ols_fit(&spec.build(data)?, data.y())?;
    let sigma = ehw_cov(&fit);
    let r_mat = restriction.matrix();
    let d = r_mat * &fit.beta - restriction.rhs();
    let middle = r_mat * sigma * r_mat.transpose();
    let inv = sym_inverse_checked(&middle, "R Σ̂ Rᵀ")?;
    let w = (d.transpose() * inv * &d)[(0, 0)].max(0.0);
    let df = rank(r_mat);
    Ok(WaldResult { w, df, p_value: chi2_sf(w, df as f64) })
}

/// ReM plug-in pieces; all three are `N`-scaled.
#[derive(Clone, Debug)]
pub struct RemPlugin {
    pub v_perp: DMatrix<f64>,
    pub v_par: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
}

/// `Φ = Π⁻¹Gᵀ(GΠ⁻¹Gᵀ)⁻¹GΠ⁻¹`.
pub fn phi_matrix(g: &DMatrix<f64>, proportions: &[f64]) -> Result<DMatrix<f64>> {
    let pi_inv =
        DMatrix::from_diagonal(&DVector::from_iterator(proportions.len(), proportions.iter().map(|e| 1.0 / e)));
    let mid = sym_inverse_checked(&(g * &pi_inv * g.transpose()), "G Π⁻¹ Gᵀ")?;
    Ok(symmetrize(&(&pi_inv * g.transpose() * mid * g * &pi_inv)))
}

/// `V̂∥ = D̂(Φ⊗S_x²)D̂ᵀ` and `V̂⊥ = V̂ − V̂∥`.
pub fn rem_plugin_cov(data: &ExperimentData, b: &DVector<f64>, g: &DMatrix<f64>) -> Result<RemPlugin> {
    let (q, j) = (data.q(), data.j());
    if b.len() != q * j {
        return invalid(format!("adjustment vector has length {}, expected JQ = {}", b.len(), q * j));
    }
    if g.ncols() != q {
        return invalid(format!("G has {} columns, data has {q} levels", g.ncols()));
    }
    let gamma = within_group_slopes(data)?;
    let e = data.structure().proportions();
    let mut d = DMatrix::zeros(q, q * j);
    for qq in 0..q {
        for jj in 0..j {
            d[(qq, qq * j + jj)] = b[qq * j + jj] - gamma[qq * j + jj];
        }
    }
    let phi = phi_matrix(g, &e)?;
    let sx = covariate_cov(data.x());
    let v_par = symmetrize(&(&d * kron(&phi, &sx) * d.transpose()));
    let z = data.assignment().levels();
    let mut v_hat = DMatrix::zeros(q, q);
    for qq in 0..q {
        let vals: Vec<f64> = (0..data.n())
            .filter(|&i| z[i] == qq)
            .map(|i| data.y()[i] - (0..j).map(|jj| b[qq * j + jj] * data.x()[(i, jj)]).sum::<f64>())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let s = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0);
        v_hat[(qq, qq)] = s / e[qq];
    }
    Ok(RemPlugin { v_perp: &v_hat - &v_par, v_par, v_hat })
}

/// Draws from `V⊥^{1/2} ε + (V∥)^{1/2}_{JH} 𝓛` with `𝓛 ~ N(0, I_JH) | ‖·‖² ≤ a`.
///
/// The truncated part is drawn exactly: a uniform direction times a radius
/// whose square follows the χ²_JH law truncated to `[0, a]`.
pub fn rem_reference_sample(
    v_perp: &DMatrix<f64>,
    v_par: &DMatrix<f64>,
    a: f64,
    jh: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let q = v_perp.nrows();
    if v_par.shape() != (q, q) || v_perp.ncols() != q {
        return invalid("plug-in covariances must be square and of equal size");
    }
    if jh == 0 {
        return invalid("JH must be at least 1");
    }
    if a.is_nan() || a <= 0.0 {
        return invalid(format!("threshold {a} must be positive"));
    }
    let f_perp = psd_factor(v_perp, "V⊥")?;
    let full = psd_factor(v_par, "V∥")?;
    let mut f_par = DMatrix::zeros(q, jh);
    let keep = jh.min(q);
    f_par.view_mut((0, 0), (q, keep)).copy_from(&full.view((0, 0), (q, keep)));
    let df = jh as f64;
    let mass = if a.is_finite() { chi2_cdf(a, df) } else { 1.0 };
    let out = (0..draws)
        .map(|k| {
            let mut rng = rng::stream(seed, k as u64);
            let eps = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
            let mut dir = DVector::from_fn(jh, |_, _| StandardNormal.sample(&mut rng));
            while dir.norm() == 0.0 {
                dir = DVector::from_fn(jh, |_, _| StandardNormal.sample(&mut rng));
            }
            let u: f64 = rand::Rng::random(&mut rng);
            let r2 = if a.is_finite() { chi2_quantile(u * mass, df) } else { chi2_quantile(u, df) };
            let l = dir.normalize() * r2.sqrt();
            &f_perp * eps + &f_par * l
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::nu_factor;
    use rand::Rng;

    pub(crate) fn random_data(sizes: Vec<usize>, j: usize, seed: u64) -> ExperimentData {
        let s = TreatmentStructure::new(sizes).unwrap();
        let n = s.n();
        let mut r = rng::stream(seed, 0);
        let x = DMatrix::from_fn(n, j, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let z = crate::design::complete_randomize(&s, seed);
        let y = DVector::from_fn(n, |i, _| {
            let lvl = z.levels()[i] as f64;
            lvl + (0..j).map(|jj| x[(i, jj)] * (1.0 + lvl * 0.5 * jj as f64)).sum::<f64>() + r.random::<f64>()
        });
        ExperimentData::new(y, z.levels().to_vec(), x, s).unwrap()
    }

    #[test]
    fn column_counts() {
        assert_eq!(build_spec(SpecKind::N, 3, 2).ncols(), 3);
        assert_eq!(build_spec(SpecKind::F, 3, 2).ncols(), 5);
        assert_eq!(build_spec(SpecKind::L, 3, 2).ncols(), 9);
        assert_eq!(build_spec(SpecKind::L, 3, 0).kind, SpecKind::N);
    }

    #[test]
    fn zero_and_equal_correlation_layouts() {
        let z = restriction_zero_correlation(2, 1);
        assert_eq!(z.matrix(), &DMatrix::from_row_slice(2, 4, &[0., 0., 1., 0., 0., 0., 0., 1.]));
        assert_eq!(z.kind(), &RestrictionKind::CorrelationOnly);
        assert_eq!(rank(z.matrix()), 2);
        let e = restriction_equal_correlation(2, 1);
        assert_eq!(e.matrix(), &DMatrix::from_row_slice(1, 4, &[0., 0., -1., 1.]));
        assert_eq!(rank(restriction_equal_correlation(4, 3).matrix()), 9);
    }

    #[test]
    fn separable_kinds() {
        let c_ab = DMatrix::from_row_slice(1, 4, &[0.5, -0.5, -0.5, 0.5]);
        let j = 2;
        let rg = kron(&c_ab, &DMatrix::identity(j, j));
        let r = restriction_separable(&c_ab, &DVector::zeros(1), &rg, &DVector::zeros(j)).unwrap();
        assert_eq!(r.kind(), &RestrictionKind::Separable { rows_y: 1 });
        assert_eq!(r.m(), 3);
        let empty_y = DMatrix::zeros(0, 4);
        let r2 = restriction_separable(&empty_y, &DVector::zeros(0), &rg, &DVector::zeros(j)).unwrap();
        assert_eq!(r2.kind(), &RestrictionKind::CorrelationOnly);
        let r3 =
            restriction_separable(&empty_y, &DVector::zeros(0), &DMatrix::zeros(0, 8), &DVector::zeros(0)).unwrap();
        assert_eq!(r3.kind(), &RestrictionKind::Empty);
        let dup = DMatrix::from_row_slice(2, 4, &[1., -1., 0., 0., 2., -2., 0., 0.]);
        assert!(restriction_separable(&dup, &DVector::zeros(2), &DMatrix::zeros(0, 8), &DVector::zeros(0)).is_err());
    }

    #[test]
    fn difference_in_means() {
        let d = random_data(vec![7, 9], 1, 11);
        let c = ContrastMatrix::unnamed(DMatrix::from_row_slice(1, 2, &[-1., 1.])).unwrap();
        let res = estimate(&d, SpecKind::N, &Restriction::empty(2), &c).unwrap();
        let m = d.outcome_means();
        assert!((res.tau_hat[0] - (m[1] - m[0])).abs() < 1e-12);
    }

    #[test]
    fn lin_estimate_matches_per_group_slopes() {
        let d = random_data(vec![14, 16], 1, 5);
        let c = ContrastMatrix::unnamed(DMatrix::from_row_slice(1, 2, &[-1., 1.])).unwrap();
        let res = estimate(&d, SpecKind::L, &Restriction::empty(4), &c).unwrap();
        // simple-regression slope oracle per level
        let z = d.assignment().levels();
        for q in 0..2 {
            let idx: Vec<usize> = (0..d.n()).filter(|&i| z[i] == q).collect();
            let k = idx.len() as f64;
            let xm = idx.iter().map(|&i| d.x()[(i, 0)]).sum::<f64>() / k;
            let ym = idx.iter().map(|&i| d.y()[i]).sum::<f64>() / k;
            let sxy: f64 = idx.iter().map(|&i| (d.x()[(i, 0)] - xm) * (d.y()[i] - ym)).sum();
            let sxx: f64 = idx.iter().map(|&i| (d.x()[(i, 0)] - xm).powi(2)).sum();
            let slope = sxy / sxx;
            assert!((res.gamma_hat[q] - slope).abs() < 1e-10);
            assert!((res.y_hat[q] - (ym - xm * slope)).abs() < 1e-10);
        }
    }

    #[test]
    fn restriction_requires_kind_l() {
        let d = random_data(vec![10, 10], 1, 2);
        let c = ContrastMatrix::unnamed(DMatrix::from_row_slice(1, 2, &[-1., 1.])).unwrap();
        let r = restriction_zero_correlation(2, 1);
        assert!(estimate(&d, SpecKind::F, &r, &c).is_err());
    }

    #[test]
    fn small_groups_rejected_for_kind_l() {
        let d = random_data(vec![3, 10], 2, 2);
        let c = ContrastMatrix::unnamed(DMatrix::from_row_slice(1, 2, &[-1., 1.])).unwrap();
        let err = estimate(&d, SpecKind::L, &Restriction::empty(6), &c).unwrap_err();
        assert!(err.to_string().contains("level 1"));
    }

    #[test]
    fn adjusted_means_special_cases() {
        let d = random_data(vec![8, 9, 10], 2, 9);
        let c = ContrastMatrix::unnamed(DMatrix::from_row_slice(2, 3, &[-1., 1., 0., -1., 0., 1.])).unwrap();
        let zero = adjusted_means(&d, &DVector::zeros(6)).unwrap();
        assert!((zero - d.outcome_means()).amax() < 1e-14);
        let lin = estimate(&d, SpecKind::L, &Restriction::empty(9), &c).unwrap();
        let slopes = within_group_slopes(&d).unwrap();
        assert!((adjusted_means(&d, &slopes).unwrap() - &lin.y_hat).amax() < 1e-10);
        let add = estimate(&d, SpecKind::F, &Restriction::empty(5), &c).unwrap();
        assert!((adjusted_means(&d, &add.gamma_hat).unwrap() - &add.y_hat).amax() < 1e-10);
    }

    #[test]
    fn wald_zero_at_fitted_value_and_scalar_case() {
        let d = random_data(vec![10, 12], 1, 4);
        let spec = build_spec(SpecKind::L, 2, 1);
        let fit = ols_fit(&spec.build(&d).unwrap(), d.y()).unwrap();
        let r_mat = DMatrix::from_row_slice(1, 4, &[0., 0., -1., 1.]);
        let at = Restriction::new(r_mat.clone(), &r_mat * &fit.beta, Some(2)).unwrap();
        let w0 = wald_restriction_test(&d, &at).unwrap();
        assert!(w0.w < 1e-20 && (w0.p_value - 1.0).abs() < 1e-12 && w0.df == 1);
        let r = Restriction::new(r_mat.clone(), DVector::zeros(1), Some(2)).unwrap();
        let w = wald_restriction_test(&d, &r).unwrap();
        let sigma = ehw_cov(&fit);
        let num = (&r_mat * &fit.beta)[0];
        let den = (&r_mat * sigma * r_mat.transpose())[(0, 0)];
        assert!((w.w - num * num / den).abs() < 1e-10 * w.w.max(1.0));
    }

    #[test]
    fn rem_plugin_parts() {
        let d = random_data(vec![12, 15], 1, 8);
        let g = DMatrix::from_row_slice(1, 2, &[-1., 1.]);
        let slopes = within_group_slopes(&d).unwrap();
        let at_slopes = rem_plugin_cov(&d, &slopes, &g).unwrap();
        assert_eq!(at_slopes.v_par.amax(), 0.0);
        let b = DVector::from_vec(vec![0.3, -0.2]);
        let p = rem_plugin_cov(&d, &b, &g).unwrap();
        assert!((&p.v_perp + &p.v_par - &p.v_hat).amax() < 1e-14);
        // H = Q−1: Φ = Π⁻¹ − 1 1ᵀ, so V∥ = S_x² · D (Π⁻¹ − 11ᵀ) Dᵀ with D = diag(b − γ̂)
        let e = d.structure().proportions();
        let sx = covariate_cov(d.x())[(0, 0)];
        let dv = [b[0] - slopes[0], b[1] - slopes[1]];
        for r in 0..2 {
            for c in 0..2 {
                let phi = if r == c { 1.0 / e[r] - 1.0 } else { -1.0 };
                let want = dv[r] * phi * sx * dv[c];
                assert!((p.v_par[(r, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_sample_untruncated_and_truncated() {
        let v_perp = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let v_par = DMatrix::from_row_slice(2, 2, &[0.8, -0.3, -0.3, 0.6]);
        let draws = 50_000;
        let sample_cov = |s: &[DVector<f64>]| {
            let n = s.len() as f64;
            let mean = s.iter().fold(DVector::zeros(2), |acc, v| acc + v) / n;
            s.iter().fold(DMatrix::zeros(2, 2), |acc, v| acc + (v - &mean) * (v - &mean).transpose()) / (n - 1.0)
        };
        let zero = DMatrix::zeros(2, 2);
        let only_par = rem_reference_sample(&zero, &v_par, 2.0, 2, draws, 1).unwrap();
        let nu = nu_factor(2, 2.0);
        let cov = sample_cov(&only_par);
        for (r, c) in [(0, 0), (1, 1), (0, 1)] {
            // variance of a sample covariance entry is bounded by (σ_rr σ_cc + σ_rc²)/n
            let sd = ((v_par[(r, r)] * v_par[(c, c)] + v_par[(r, c)].powi(2)) / draws as f64).sqrt();
            assert!((cov[(r, c)] - nu * v_par[(r, c)]).abs() < 3.0 * sd, "entry ({r},{c})");
        }
        let open = rem_reference_sample(&v_perp, &v_par, f64::INFINITY, 2, draws, 2).unwrap();
        let total = &v_perp + &v_par;
        let cov = sample_cov(&open);
        assert!((cov - &total).amax() < 0.05);
        let plain = rem_reference_sample(&v_perp, &zero, 1.0, 2, draws, 3).unwrap();
        assert!((sample_cov(&plain) - &v_perp).amax() < 0.03);
    }

    #[test]
    fn csv_and_json_serialization() {
        let d = random_data(vec![8, 9, 10], 1, 3);
        let c = ContrastMatrix::new(
            DMatrix::from_row_slice(2, 3, &[-1., 1., 0., -1., 0., 1.]),
            vec!["b-a".into(), "c-a".into()],
        )
        .unwrap();
        let res = estimate(&d, SpecKind::F, &Restriction::empty(4), &c).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("contrast,estimate,std_error,cov_b-a,cov_c-a\nb-a,"));
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let first = rd.records().next().unwrap().unwrap();
        assert_eq!(first[1].parse::<f64>().unwrap(), res.tau_hat[0]);
        let js = res.to_json();
        assert_eq!(js["spec"], "F");
        assert_eq!(js["tau_cov"].as_array().unwrap().len(), 2);
    }
}
