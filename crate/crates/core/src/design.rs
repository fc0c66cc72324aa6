//! Treatment structures and assignment generation.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::linalg::{rank, sym_inverse_checked, PivotedQr};
use crate::rng;

/// Upper bound on the number of assignments [`enumerate_assignments`] will list.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Arm layout of an experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreatmentStructure {
    sizes: Vec<usize>,
    factors: Option<usize>,
}

impl TreatmentStructure {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return invalid("treatment structure needs at least one level");
        }
        if let Some(q) = sizes.iter().position(|&n| n == 0) {
            return invalid(format!("level {} has zero units", q + 1));
        }
        Ok(TreatmentStructure { sizes, factors: None })
    }

    /// `2^k` levels ordered lexicographically over `{−1,+1}^k`.
    pub fn factorial(k: usize, sizes: Vec<usize>) -> Result<Self> {
        if k == 0 || k > 20 {
            return invalid(format!("factor count {k} outside 1..=20"));
        }
        if sizes.len() != 1 << k {
            return invalid(format!("{} group sizes given for a 2^{k} design ({} levels)", sizes.len(), 1usize << k));
        }
        let mut s = Self::new(sizes)?;
        s.factors = Some(k);
        Ok(s)
    }

    pub fn q(&self) -> usize {
        self.sizes.len()
    }

    pub fn n(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn factors(&self) -> Option<usize> {
        self.factors
    }

    /// Proportions `e_q = N_q / N`.
    pub fn proportions(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.sizes.iter().map(|&s| s as f64 / n).collect()
    }

    /// Factor levels of treatment `q`; the first factor varies slowest.
    pub fn level_tuple(&self, q: usize) -> Option<Vec<i8>> {
        self.factors.map(|k| level_tuple(k, q))
    }

    /// Inverse of [`Self::level_tuple`].
    pub fn level_of(&self, tuple: &[i8]) -> Option<usize> {
        let k = self.factors?;
        if tuple.len() != k || tuple.iter().any(|&v| v != 1 && v != -1) {
            return None;
        }
        Some(level_index(tuple))
    }
}

/// Factor tuple of level `q` in a `2^k` design.
pub fn level_tuple(k: usize, q: usize) -> Vec<i8> {
    (0..k).map(|f| if (q >> (k - 1 - f)) & 1 == 1 { 1 } else { -1 }).collect()
}

/// Level index of a `{−1,+1}` tuple.
pub fn level_index(tuple: &[i8]) -> usize {
    tuple.iter().fold(0, |acc, &v| (acc << 1) | usize::from(v > 0))
}

/// Treatment labels for `N` units, stored zero-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Assignment {
    levels: Vec<usize>,
}

impl Assignment {
    /// Checks the labels against the structure's group sizes.
    pub fn new(levels: Vec<usize>, structure: &TreatmentStructure) -> Result<Self> {
        if levels.len() != structure.n() {
            return invalid(format!("assignment has {} units, structure expects {}", levels.len(), structure.n()));
        }
        let mut counts = vec![0usize; structure.q()];
        for (i, &z) in levels.iter().enumerate() {
            if z >= structure.q() {
                return invalid(format!("unit {}: level {} outside 1..={}", i + 1, z + 1, structure.q()));
            }
            counts[z] += 1;
        }
        for (q, (&got, &want)) in counts.iter().zip(structure.sizes()).enumerate() {
            if got != want {
                return invalid(format!("level {} has {got} units, expected {want}", q + 1));
            }
        }
        Ok(Assignment { levels })
    }

    /// Wraps labels without checking group sizes.
    pub fn from_levels_unchecked(levels: Vec<usize>) -> Self {
        Assignment { levels }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn counts(&self, q: usize) -> Vec<usize> {
        let mut c = vec![0; q];
        for &z in &self.levels {
            c[z] += 1;
        }
        c
    }

    /// Indicator vector `t_i`.
    pub fn indicator(&self, i: usize, q: usize) -> DVector<f64> {
        let mut t = DVector::zeros(q);
        t[self.levels[i]] = 1.0;
        t
    }

    /// Writes `z` (1-based) or, for factorial structures, `f1..fK` in ±1.
    pub fn write_csv<W: Write>(&self, structure: &TreatmentStructure, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        match structure.factors() {
            Some(k) => {
                w.write_record((1..=k).map(|f| format!("f{f}")))?;
                for &z in &self.levels {
                    w.write_record(level_tuple(k, z).iter().map(|v| v.to_string()))?;
                }
            }
            None => {
                w.write_record(["z"])?;
                for &z in &self.levels {
                    w.write_record([(z + 1).to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn fill_base(structure: &TreatmentStructure) -> Vec<usize> {
    structure.sizes().iter().enumerate().flat_map(|(q, &n)| std::iter::repeat_n(q, n)).collect()
}

fn draw(structure: &TreatmentStructure, seed: u64, attempt: u64) -> Assignment {
    let mut z = fill_base(structure);
    z.shuffle(&mut rng::stream(seed, attempt));
    Assignment { levels: z }
}

/// Uniform draw over all assignments with the prescribed group sizes.
pub fn complete_randomize(structure: &TreatmentStructure, seed: u64) -> Assignment {
    draw(structure, seed, 0)
}

/// `N! / Π N_q!`, saturating at `u128::MAX`.
pub fn assignment_count(structure: &TreatmentStructure) -> u128 {
    let mut total: u128 = 1;
    let mut placed: u128 = 0;
    for &nq in structure.sizes() {
        // multiply by C(placed + nq, nq) one factor at a time; stays integral
        for k in 1..=nq as u128 {
            placed += 1;
            total = match total.checked_mul(placed) {
                Some(v) => v / k,
                None => return u128::MAX,
            };
        }
    }
    total
}

/// Every distinct assignment once, in lexicographic order of the label vector.
pub fn enumerate_assignments(structure: &TreatmentStructure) -> Result<Vec<Assignment>> {
    let count = assignment_count(structure);
    if count > ENUMERATION_LIMIT {
        return invalid(format!("{count} assignments exceed the enumeration limit of {ENUMERATION_LIMIT}"));
    }
    let mut z = fill_base(structure);
    let mut out = Vec::with_capacity(count as usize);
    loop {
        out.push(Assignment { levels: z.clone() });
        if !next_permutation(&mut z) {
            break;
        }
    }
    Ok(out)
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Subtracts column means; returns the centered matrix and the means removed.
pub fn center_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let shift: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-shift[j]);
    }
    (out, shift)
}

/// Column means vanish relative to column scale.
pub fn is_centered(x: &DMatrix<f64>) -> bool {
    let n = x.nrows().max(1) as f64;
    x.column_iter().all(|c| {
        let scale = c.amax().max(1.0);
        (c.sum() / n).abs() <= 1e-10 * scale
    })
}

/// Sample covariance `S_x² = (N−1)⁻¹ Σ x_i x_iᵀ` of centered covariates.
pub fn covariate_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    x.tr_mul(x) / (n - 1.0)
}

/// Group means `x̂(q)` as rows of a `Q×J` matrix.
pub fn group_means(assignment: &Assignment, x: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let mut sums = DMatrix::zeros(q, x.ncols());
    let mut counts = vec![0usize; q];
    for (i, &z) in assignment.levels().iter().enumerate() {
        counts[z] += 1;
        for j in 0..x.ncols() {
            sums[(z, j)] += x[(i, j)];
        }
    }
    for (qq, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums.row_mut(qq).scale_mut(1.0 / c as f64);
        }
    }
    sums
}

/// Contrast rows `G` and acceptance threshold `a` for rerandomization.
#[derive(Clone, Debug)]
pub struct BalanceFilter {
    g: DMatrix<f64>,
    threshold: f64,
}

impl BalanceFilter {
    /// Rows must sum to zero and be linearly independent.
    pub fn new(g: DMatrix<f64>, threshold: f64) -> Result<Self> {
        if threshold.is_nan() || threshold < 0.0 {
            return invalid(format!("balance threshold {threshold} must be nonnegative"));
        }
        let (h, q) = g.shape();
        if h == 0 {
            return invalid("balance filter needs at least one contrast row");
        }
        if h > q.saturating_sub(1) {
            return invalid(format!("{h} contrast rows exceed Q−1 = {}", q.saturating_sub(1)));
        }
        for (r, row) in g.row_iter().enumerate() {
            let scale = row.amax().max(1e-300);
            if row.sum().abs() > 1e-10 * scale * q as f64 {
                return invalid(format!("contrast row {} does not sum to zero", r + 1));
            }
        }
        let rk = rank(&g);
        if rk < h {
            return Err(Error::Validation(format!("contrast rows are linearly dependent (rank {rk} of {h})")));
        }
        Ok(BalanceFilter { g, threshold })
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn h(&self) -> usize {
        self.g.nrows()
    }
}

/// Precomputed pieces of the Mahalanobis imbalance for fixed `(Π, X, G)`.
#[derive(Clone, Debug)]
pub struct BalanceChecker {
    g: DMatrix<f64>,
    x: DMatrix<f64>,
    /// `(GΠ⁻¹Gᵀ)⁻¹`
    a_inv: DMatrix<f64>,
    /// `(S_x²)⁻¹`
    sx_inv: DMatrix<f64>,
}

impl BalanceChecker {
    /// `x` must already be centered; `proportions` are the `e_q`.
    pub fn new(g: &DMatrix<f64>, x: &DMatrix<f64>, proportions: &[f64]) -> Result<Self> {
        if x.ncols() == 0 {
            return invalid("Mahalanobis balance needs at least one covariate");
        }
        if g.ncols() != proportions.len() {
            return invalid(format!(
                "contrast matrix has {} columns, design has {} levels",
                g.ncols(),
                proportions.len()
            ));
        }
        if !is_centered(x) {
            return invalid("covariates are not centered (column mean beyond tolerance)");
        }
        if let Some(q) = proportions.iter().position(|&e| e <= 0.0) {
            return invalid(format!("level {} is empty", q + 1));
        }
        let sx = covariate_cov(x);
        let qr = PivotedQr::new(&sx);
        if !qr.is_full_column_rank() {
            return Err(Error::Numerical(format!(
                "covariate covariance is singular (rank {} of {})",
                qr.rank(),
                sx.nrows()
            )));
        }
        let sx_inv = sym_inverse_checked(&sx, "covariate covariance")?;
        let pi_inv =
            DMatrix::from_diagonal(&DVector::from_iterator(proportions.len(), proportions.iter().map(|e| 1.0 / e)));
        let a_inv = sym_inverse_checked(&(g * pi_inv * g.transpose()), "G Π⁻¹ Gᵀ")?;
        Ok(BalanceChecker { g: g.clone(), x: x.clone(), a_inv, sx_inv })
    }

    /// `δ̂ᵀ cov(δ̂)⁻¹ δ̂` with `cov(δ̂) = N⁻¹ (GΠ⁻¹Gᵀ) ⊗ S_x²`.
    pub fn imbalance(&self, assignment: &Assignment) -> f64 {
        let xhat = group_means(assignment, &self.x, self.g.ncols());
        let d = &self.g * xhat; // H×J, row h is δ̂_h
        let inner = &d * &self.sx_inv * d.transpose();
        let n = self.x.nrows() as f64;
        n * (&self.a_inv * inner).trace()
    }
}

/// Mahalanobis imbalance of `assignment` for centered covariates `x`.
pub fn mahalanobis_imbalance(assignment: &Assignment, x: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    if assignment.len() != x.nrows() {
        return invalid(format!("assignment has {} units, covariates have {} rows", assignment.len(), x.nrows()));
    }
    let q = g.ncols();
    if let Some(&z) = assignment.levels().iter().find(|&&z| z >= q) {
        return invalid(format!("level {} outside 1..={q}", z + 1));
    }
    let n = assignment.len() as f64;
    let e: Vec<f64> = assignment.counts(q).iter().map(|&c| c as f64 / n).collect();
    Ok(BalanceChecker::new(g, x, &e)?.imbalance(assignment))
}

/// Draws complete randomizations until the imbalance is at most the threshold.
///
/// Covariates are centered internally. Attempt `k` uses stream `k` of
/// `seed`, so the first attempt coincides with [`complete_randomize`].
pub fn rerandomize(
    structure: &TreatmentStructure,
    x: &DMatrix<f64>,
    filter: &BalanceFilter,
    seed: u64,
    max_tries: u64,
) -> Result<(Assignment, u64)> {
    if max_tries == 0 {
        return invalid("max_tries must be at least 1");
    }
    if x.nrows() != structure.n() {
        return invalid(format!("covariates have {} rows, design has {} units", x.nrows(), structure.n()));
    }
    if filter.g().ncols() != structure.q() {
        return invalid(format!(
            "contrast matrix has {} columns, design has {} levels",
            filter.g().ncols(),
            structure.q()
        ));
    }
    let (xc, _) = center_columns(x);
    let checker = BalanceChecker::new(filter.g(), &xc, &structure.proportions())?;
    for attempt in 0..max_tries {
        let z = draw(structure, seed, attempt);
        if filter.threshold().is_infinite() || checker.imbalance(&z) <= filter.threshold() {
            return Ok((z, attempt + 1));
        }
    }
    Err(Error::Exhausted { tries: max_tries, threshold: filter.threshold() })
}

/// Defining relation: factor `target` equals the product of `generators` (0-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DefiningRelation {
    pub target: usize,
    pub generators: Vec<usize>,
}

/// Treatment combinations of a regular `2^{K−p}` fraction, in lexicographic order.
pub fn fractional_subset(k: usize, relations: &[DefiningRelation]) -> Result<Vec<Vec<i8>>> {
    if k == 0 || k > 20 {
        return invalid(format!("factor count {k} outside 1..=20"));
    }
    let mut targets = std::collections::BTreeSet::new();
    for rel in relations {
        if rel.target >= k || rel.generators.iter().any(|&g| g >= k) {
            return invalid("defining relation names a factor outside the design");
        }
        if rel.generators.is_empty() || rel.generators.contains(&rel.target) {
            return invalid(format!("relation for factor {} is degenerate", rel.target + 1));
        }
        if !targets.insert(rel.target) {
            return invalid(format!("factor {} is defined twice", rel.target + 1));
        }
    }
    let keep: Vec<Vec<i8>> = (0..1usize << k)
        .map(|q| level_tuple(k, q))
        .filter(|t| relations.iter().all(|rel| t[rel.target] == rel.generators.iter().map(|&g| t[g]).product::<i8>()))
        .collect();
    let expected = 1usize << (k - relations.len().min(k));
    let constant_factor = (0..k).any(|f| keep.iter().all(|t| t[f] == keep[0][f]));
    if relations.len() >= k || keep.len() != expected || constant_factor {
        return invalid("defining relations are contradictory or alias a factor with the mean");
    }
    Ok(keep)
}
