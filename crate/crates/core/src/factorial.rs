//! `2^K` factorial effects under ±1 and {0,1} coding.
//!
//! Factor subsets are bitmasks: bit `k` stands for factor `k` (`A` is bit 0).
//! Keyed outputs list subsets by size, then lexicographically (`A, B, C, AB,
//! AC, BC, ABC`).

use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::design::level_tuple;
use crate::error::{invalid, Error, Result};
use crate::estimators::{build_spec, fmt_f64, restriction_separable, ExperimentData, SpecKind};
use crate::linalg::{kron, symmetrize};
use crate::lsq::{cov_block, rls_fit, subset_name, Restriction};

/// Effect parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorCoding {
    /// Standard effects `τ_S`.
    PlusMinusOne,
    /// Baseline effects `τ₀`, other factors held at their low level.
    ZeroOne,
}

impl FromStr for FactorCoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pm1" => Ok(FactorCoding::PlusMinusOne),
            "01" => Ok(FactorCoding::ZeroOne),
            other => invalid(format!("unknown coding '{other}' (expected pm1 or 01)")),
        }
    }
}

/// Non-empty subsets of `K` factors in the global order.
pub fn all_subsets(k: usize) -> Vec<u32> {
    let mut v: Vec<u32> = (1..1u32 << k).collect();
    v.sort_by_key(|&s| (s.count_ones(), lex_key(s)));
    v
}

fn lex_key(s: u32) -> Vec<u32> {
    (0..32).filter(|b| s >> b & 1 == 1).collect()
}

/// Parses `A`, `AB`, … into a bitmask; `1` is the empty set.
pub fn parse_subset(name: &str, k: usize) -> Result<u32> {
    let name = name.trim();
    if name == "1" {
        return Ok(0);
    }
    if name.is_empty() {
        return invalid("empty factor subset name");
    }
    let mut mask = 0u32;
    for ch in name.chars() {
        let c = ch.to_ascii_uppercase();
        if !c.is_ascii_uppercase() || (c as u8 - b'A') as usize >= k {
            return invalid(format!("'{name}' names a factor outside A..{}", char::from(b'A' + k as u8 - 1)));
        }
        let bit = 1u32 << (c as u8 - b'A');
        if mask & bit != 0 {
            return invalid(format!("'{name}' repeats a factor"));
        }
        mask |= bit;
    }
    Ok(mask)
}

fn order_index(s: u32) -> (u32, Vec<u32>) {
    (s.count_ones(), lex_key(s))
}

/// `c_𝒦` with entries `2^{−(K−1)} Π_{k∈𝒦} z_k`; the empty set gives `2^{−(K−1)} 1`.
pub fn standard_row(k: usize, subset: u32) -> DVector<f64> {
    let scale = 0.5f64.powi(k as i32 - 1);
    DVector::from_fn(1 << k, |q, _| {
        let t = level_tuple(k, q);
        let sign: i32 = (0..k).filter(|&f| subset >> f & 1 == 1).map(|f| t[f] as i32).product();
        scale * sign as f64
    })
}

/// Row of `Γ₀` for `subset`: entries `Π_k M[s_k][z_k]`, `M = ((1,0),(−1,1))`.
pub fn baseline_row(k: usize, subset: u32) -> DVector<f64> {
    DVector::from_fn(1 << k, |q, _| {
        let t = level_tuple(k, q);
        (0..k)
            .map(|f| {
                let high = t[f] > 0;
                if subset >> f & 1 == 1 {
                    if high {
                        1.0
                    } else {
                        -1.0
                    }
                } else if high {
                    0.0
                } else {
                    1.0
                }
            })
            .product()
    })
}

/// `C_S`: one row per non-empty subset in the global order.
pub fn standard_contrasts(k: usize) -> DMatrix<f64> {
    stack_rows(&all_subsets(k).iter().map(|&s| standard_row(k, s)).collect::<Vec<_>>(), 1 << k)
}

/// `(Γ₀, C₀)` with `Γ₀ = ⊗_k ((1,0),(−1,1))` and `C₀` its rows after the first.
///
/// Rows of `Γ₀` follow the binary order of `(s_1, …, s_K)`, `s_1` most significant.
pub fn baseline_contrasts(k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 1.0]);
    let mut g = DMatrix::from_element(1, 1, 1.0);
    for _ in 0..k {
        g = kron(&g, &m);
    }
    let q = 1 << k;
    let c0 = g.view((1, 0), (q - 1, q)).into_owned();
    (g, c0)
}

/// Row under the chosen coding; the empty subset gives `c_∅` or `c_0`.
pub fn effect_contrast(k: usize, subset: u32, coding: FactorCoding) -> DVector<f64> {
    match coding {
        FactorCoding::PlusMinusOne => standard_row(k, subset),
        FactorCoding::ZeroOne => baseline_row(k, subset),
    }
}

fn stack_rows(rows: &[DVector<f64>], q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j])
}

/// Mean-model terms `ℱ₊` and covariate-interaction terms `ℱ₊′` (may hold `∅ = 0`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EffectSet {
    k: usize,
    plus: Vec<u32>,
    adjust: Vec<u32>,
}

impl EffectSet {
    pub fn new(k: usize, plus: Vec<u32>, adjust: Vec<u32>) -> Result<Self> {
        if k == 0 || k > 20 {
            return invalid(format!("factor count {k} outside 1..=20"));
        }
        let full = (1u32 << k) - 1;
        if plus.is_empty() {
            return invalid("effect set needs at least one mean-model term");
        }
        if plus.iter().any(|&s| s == 0 || s & !full != 0) {
            return invalid("mean-model terms must be non-empty subsets of the factors");
        }
        if adjust.iter().any(|&s| s & !full != 0) {
            return invalid("interaction terms must be subsets of the factors");
        }
        let sort = |v: &mut Vec<u32>| v.sort_by_key(|&s| order_index(s));
        let (mut plus, mut adjust) = (plus, adjust);
        sort(&mut plus);
        sort(&mut adjust);
        if plus.windows(2).any(|w| w[0] == w[1]) || adjust.windows(2).any(|w| w[0] == w[1]) {
            return invalid("effect set repeats a term");
        }
        Ok(EffectSet { k, plus, adjust })
    }

    /// All `2^K − 1` mean terms.
    pub fn saturated(k: usize, adjust: Vec<u32>) -> Result<Self> {
        Self::new(k, all_subsets(k), adjust)
    }

    /// `{∅} ∪ 𝒫_K`.
    pub fn all_adjust(k: usize) -> Vec<u32> {
        let mut v = vec![0];
        v.extend(all_subsets(k));
        v
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `ℱ₊` in the global order.
    pub fn plus(&self) -> &[u32] {
        &self.plus
    }

    /// `ℱ₊′`, empty set first.
    pub fn adjust(&self) -> &[u32] {
        &self.adjust
    }

    /// `ℱ₋ = 𝒫_K ∖ ℱ₊`.
    pub fn minus(&self) -> Vec<u32> {
        all_subsets(self.k).into_iter().filter(|s| !self.plus.contains(s)).collect()
    }

    /// `ℱ₋′ = ({∅} ∪ 𝒫_K) ∖ ℱ₊′`.
    pub fn adjust_minus(&self) -> Vec<u32> {
        Self::all_adjust(self.k).into_iter().filter(|s| !self.adjust.contains(s)).collect()
    }
}

/// Separable restriction `C_{·,−} Ȳ = 0`, `(C′_{·,−} ⊗ I_J) γ = 0` on the fully interacted layout.
pub fn unsaturated_restriction(effects: &EffectSet, coding: FactorCoding, j: usize) -> Result<Restriction> {
    let k = effects.k();
    let q = 1 << k;
    let rho_y = stack_rows(&effects.minus().iter().map(|&s| effect_contrast(k, s, coding)).collect::<Vec<_>>(), q);
    let rho_g_rows = if j == 0 { Vec::new() } else { effects.adjust_minus() };
    let base = stack_rows(&rho_g_rows.iter().map(|&s| effect_contrast(k, s, coding)).collect::<Vec<_>>(), q);
    let rho_g = if j == 0 { DMatrix::zeros(0, 0) } else { kron(&base, &DMatrix::identity(j, j)) };
    let rho_g = if rho_g.nrows() == 0 { DMatrix::zeros(0, q * j) } else { rho_g };
    restriction_separable(&rho_y, &DVector::zeros(rho_y.nrows()), &rho_g, &DVector::zeros(rho_g.nrows()))
}

/// Effect estimates keyed by subset.
#[derive(Clone, Debug)]
pub struct FactorEffects {
    pub subsets: Vec<u32>,
    pub estimates: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Restricted `Ŷ_r` and its covariance block.
    pub y_hat: DVector<f64>,
    pub y_cov: DMatrix<f64>,
    /// Treatment-based regression actually fitted.
    pub base_kind: SpecKind,
    pub restriction: Restriction,
}

impl FactorEffects {
    pub fn names(&self) -> Vec<String> {
        self.subsets.iter().map(|&s| subset_name(s)).collect()
    }

    pub fn std_errors(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Columns `subset, estimate, std_error`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["subset", "estimate", "std_error"])?;
        let se = self.std_errors();
        for (i, name) in self.names().into_iter().enumerate() {
            w.write_record([name, fmt_f64(self.estimates[i]), fmt_f64(se[i])])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "subsets": self.names(),
            "estimate": self.estimates.as_slice(),
            "std_error": self.std_errors().as_slice(),
            "cov": crate::estimators::rows(&self.cov),
            "y_hat": self.y_hat.as_slice(),
            "base_spec": self.base_kind.to_string(),
            "restriction_rows": self.restriction.m(),
        })
    }
}

/// Factor-based regression through its treatment-based restricted counterpart.
///
/// `ℱ₊′ = ∅` fits the unadjusted regression and `ℱ₊′ = {∅}` the additive
/// one, each restricted on the mean block only; any other `ℱ₊′` fits the
/// fully interacted regression under [`unsaturated_restriction`].
pub fn factor_regress(data: &ExperimentData, effects: &EffectSet, coding: FactorCoding) -> Result<FactorEffects> {
    let k = effects.k();
    match data.structure().factors() {
        Some(kk) if kk == k => {}
        _ => return invalid(format!("data do not carry a 2^{k} factor structure")),
    }
    let (q, j) = (data.q(), data.j());
    let adjust = effects.adjust();
    let kind = if j == 0 || adjust.is_empty() {
        SpecKind::N
    } else if adjust == [0] {
        SpecKind::F
    } else {
        SpecKind::L
    };
    let full = unsaturated_restriction(effects, coding, j)?;
    let restriction = match kind {
        SpecKind::L => full,
        _ => {
            let ncols = build_spec(kind, q, j).ncols();
            let rows_y = effects.minus().len();
            let mut r = DMatrix::zeros(rows_y, ncols);
            r.view_mut((0, 0), (rows_y, q)).copy_from(&full.matrix().view((0, 0), (rows_y, q)));
            Restriction::new(r, DVector::zeros(rows_y), Some(q))?
        }
    };
    if kind == SpecKind::L {
        let need = j + 2;
        if let Some(qq) = data.structure().sizes().iter().position(|&n| n < need) {
            return invalid(format!("level {} has fewer than J+2 = {need} units", qq + 1));
        }
    }
    let design = build_spec(kind, q, j).build(data)?;
    let fit = rls_fit(&design, data.y(), &restriction)?;
    let y_hat = fit.beta.rows(0, q).into_owned();
    let y_cov = cov_block(&fit, 0, q);
    let c_plus = stack_rows(&effects.plus().iter().map(|&s| effect_contrast(k, s, coding)).collect::<Vec<_>>(), q);
    Ok(FactorEffects {
        subsets: effects.plus().to_vec(),
        estimates: &c_plus * &y_hat,
        cov: symmetrize(&(&c_plus * &y_cov * c_plus.transpose())),
        y_hat,
        y_cov,
        base_kind: kind,
        restriction,
    })
}
