//! Monte Carlo harness: data generators, the replication loop and summaries.
//!
//! Replication `r` draws its assignment from `derive_seed(seed, r)`, so a
//! study gives the same numbers whatever the thread count.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{
    complete_randomize, enumerate_assignments, level_index, level_tuple, rerandomize, Assignment, BalanceFilter,
    TreatmentStructure,
};
use crate::error::{invalid, Error, Result};
use crate::estimators::{estimate, ContrastMatrix, ExperimentData, SpecKind};
use crate::factorial::{factor_regress, standard_row, EffectSet, FactorCoding};
use crate::linalg::KahanVec;
use crate::lsq::{subset_name, Restriction};
use crate::oracle::{pop_means, PotentialTable};
use crate::rng::{derive_seed, stream};

/// Slope pattern across the levels `(−+, +−, ++)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaVariant {
    /// `(1_J, 0_J, −1_J)`.
    Heterogeneous,
    /// `1_J` for every level.
    Equal,
}

/// Knobs for the two-factor generator.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoFactorOptions {
    pub sizes: Vec<usize>,
    pub j: usize,
    /// Project the noise off `(1, x)` so that `γ_q = β_q` holds exactly.
    pub orthogonal_noise: bool,
}

impl Default for TwoFactorOptions {
    fn default() -> Self {
        TwoFactorOptions { sizes: vec![22, 23, 24, 31], j: 20, orthogonal_noise: false }
    }
}

/// Two-factor table with zero individual interaction effects.
pub fn dgp_two_factor(seed: u64, variant: BetaVariant) -> PotentialTable {
    dgp_two_factor_with(seed, variant, &TwoFactorOptions::default()).expect("default options are valid")
}

pub fn dgp_two_factor_with(seed: u64, variant: BetaVariant, opts: &TwoFactorOptions) -> Result<PotentialTable> {
    let structure = TreatmentStructure::factorial(2, opts.sizes.clone())?;
    let (n, j) = (structure.n(), opts.j);
    if opts.orthogonal_noise && n <= j + 1 {
        return invalid("orthogonal noise needs more units than covariates plus one");
    }
    let mut rng = stream(seed, 0);
    let x = DMatrix::from_fn(n, j, |_, _| rng.sample::<f64, _>(StandardNormal));
    let (x, _) = crate::design::center_columns(&x);
    let mut noise = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    if opts.orthogonal_noise {
        let v = DMatrix::from_fn(n, j + 1, |i, c| if c == 0 { 1.0 } else { x[(i, c - 1)] });
        let qr = crate::linalg::PivotedQr::new(&v);
        for c in 0..3 {
            let e = noise.column(c).into_owned();
            let fitted = &v * qr.solve(&e);
            noise.set_column(c, &(e - fitted));
        }
    }
    let beta = match variant {
        BetaVariant::Heterogeneous => [1.0, 0.0, -1.0],
        BetaVariant::Equal => [1.0, 1.0, 1.0],
    };
    let mut y = DMatrix::zeros(n, 4);
    for i in 0..n {
        let xs: f64 = x.row(i).sum();
        for c in 0..3 {
            y[(i, c + 1)] = xs * beta[c] + noise[(i, c)];
        }
        // Y(−−) = Y(+−) + Y(−+) − Y(++)
        y[(i, 0)] = y[(i, 2)] + y[(i, 1)] - y[(i, 3)];
    }
    PotentialTable::new(y, x, structure)
}

/// Three-factor outcome models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Main effects only.
    I,
    /// Adds `ac + bc + abc/2`.
    II,
}

/// Structural mean of level `(a, b, c)`.
fn fractional_mean(scenario: Scenario, t: &[i8]) -> f64 {
    let (a, b, c) = (t[0] as f64, t[1] as f64, t[2] as f64);
    let base = 4.0 + 2.0 * a + 2.0 * b + 2.0 * c;
    match scenario {
        Scenario::I => base,
        Scenario::II => base + a * c + b * c + 0.5 * a * b * c,
    }
}

/// True effects in the order `A, B, C, AB, AC, BC, ABC`.
pub fn fractional_effects(scenario: Scenario) -> [f64; 7] {
    match scenario {
        Scenario::I => [4.0, 4.0, 4.0, 0.0, 0.0, 0.0, 0.0],
        Scenario::II => [4.0, 4.0, 4.0, 0.0, 2.0, 2.0, 1.0],
    }
}

/// `2³` table with `N = 80` and ten units per level.
pub fn dgp_fractional(seed: u64, scenario: Scenario) -> PotentialTable {
    dgp_fractional_with(seed, scenario, &[10; 8]).expect("equal sizes are valid")
}

/// `Y_i(abc) = μ(abc) + a·x_i + ε_i`, each column recentered onto `μ(abc)`.
pub fn dgp_fractional_with(seed: u64, scenario: Scenario, sizes: &[usize]) -> Result<PotentialTable> {
    let structure = TreatmentStructure::factorial(3, sizes.to_vec())?;
    let n = structure.n();
    let mut rng = stream(seed, 1);
    let x: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let xbar = x.iter().sum::<f64>() / n as f64;
    let mut y = DMatrix::zeros(n, 8);
    for q in 0..8 {
        let t = level_tuple(3, q);
        let a = t[0] as f64;
        let raw: Vec<f64> = (0..n).map(|i| a * (x[i] - xbar) + eps[i]).collect();
        let m = raw.iter().sum::<f64>() / n as f64;
        let mu = fractional_mean(scenario, &t);
        for i in 0..n {
            y[(i, q)] = raw[i] - m + mu;
        }
    }
    PotentialTable::new(y, DMatrix::from_column_slice(n, 1, &x), structure)
}

/// Half fraction `C = AB` of a `2³` table as a `2²` table with the given sizes.
pub fn half_fraction(table: &PotentialTable, sizes: Vec<usize>) -> Result<PotentialTable> {
    if table.structure().factors() != Some(3) {
        return invalid("half fraction needs a 2^3 table");
    }
    let columns: Vec<usize> = (0..4)
        .map(|q| {
            let t = level_tuple(2, q);
            level_index(&[t[0], t[1], t[0] * t[1]])
        })
        .collect();
    table.with_levels(&columns, TreatmentStructure::factorial(2, sizes)?)
}

/// How an estimator turns data into `Ŷ` and its covariance.
#[derive(Clone, Debug)]
pub enum Method {
    Treatment {
        kind: SpecKind,
        restriction: Restriction,
    },
    /// Contrasts are applied to the restricted `Ŷ_r` of the factor-based fit.
    Factorial {
        effects: EffectSet,
        coding: FactorCoding,
    },
}

#[derive(Clone, Debug)]
pub struct EstimatorSpec {
    pub name: String,
    pub method: Method,
    pub contrast: ContrastMatrix,
    /// Replaces `C·Ȳ` of the study table as the target.
    pub truth: Option<DVector<f64>>,
}

impl EstimatorSpec {
    /// Estimates and standard errors for every contrast row.
    pub fn evaluate(&self, data: &ExperimentData) -> Result<(DVector<f64>, DVector<f64>)> {
        match &self.method {
            Method::Treatment { kind, restriction } => {
                let res = estimate(data, *kind, restriction, &self.contrast)?;
                let se = res.std_errors();
                Ok((res.tau_hat, se))
            }
            Method::Factorial { effects, coding } => {
                let fe = factor_regress(data, effects, *coding)?;
                let c = self.contrast.matrix();
                let est = c * &fe.y_hat;
                let cov = c * &fe.y_cov * c.transpose();
                Ok((est, cov.diagonal().map(|v| v.max(0.0).sqrt())))
            }
        }
    }
}

/// Source of assignments.
#[derive(Clone, Debug)]
pub enum Sampling {
    Complete,
    Rerandomized {
        filter: BalanceFilter,
        max_tries: u64,
    },
    /// Every complete randomization once; the replication count is ignored.
    Enumerate,
}

#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub table: PotentialTable,
    pub specs: Vec<EstimatorSpec>,
    pub replications: usize,
    pub seed: u64,
    pub sampling: Sampling,
}

/// One line of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub spec: String,
    pub contrast: String,
    pub truth: f64,
    pub mc_mean: f64,
    pub bias: f64,
    pub mc_sd: f64,
    pub mean_se: f64,
    pub coverage95: f64,
    #[serde(rename = "R")]
    pub replications: usize,
}

/// Per-replication estimates of one spec, `R × H`.
#[derive(Clone, Debug)]
pub struct SpecDraws {
    pub spec: String,
    pub contrasts: Vec<String>,
    pub estimates: DMatrix<f64>,
    pub std_errors: DMatrix<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct StudySummary {
    pub rows: Vec<SummaryRow>,
    pub draws: Vec<SpecDraws>,
}

impl StudySummary {
    pub fn row(&self, spec: &str, contrast: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.spec == spec && r.contrast == contrast)
    }

    pub fn draws(&self, spec: &str) -> Option<&SpecDraws> {
        self.draws.iter().find(|d| d.spec == spec)
    }

    /// Mean of the squared standard errors.
    pub fn mean_estimated_variance(&self, spec: &str, contrast: &str) -> Option<f64> {
        let d = self.draws(spec)?;
        let h = d.contrasts.iter().position(|c| c == contrast)?;
        let col = d.std_errors.column(h);
        let mut acc = KahanVec::new(1);
        for v in col.iter() {
            acc.add_slice(&[v * v]);
        }
        Some(acc.values()[0] / col.len() as f64)
    }

    /// Appends another study's rows; spec names must stay distinct.
    pub fn extend(&mut self, other: StudySummary) -> Result<()> {
        for d in &other.draws {
            if self.draws(&d.spec).is_some() {
                return invalid(format!("spec name {} appears in two studies", d.spec));
            }
        }
        self.rows.extend(other.rows);
        self.draws.extend(other.draws);
        Ok(())
    }
}

fn validate(config: &StudyConfig) -> Result<()> {
    if config.specs.is_empty() {
        return invalid("study has no estimator specs");
    }
    if !matches!(config.sampling, Sampling::Enumerate) && config.replications == 0 {
        return invalid("replication count must be at least 1");
    }
    let q = config.table.q();
    for (i, s) in config.specs.iter().enumerate() {
        if s.contrast.q() != q {
            return invalid(format!("spec {}: contrast has {} columns, table has {q} levels", s.name, s.contrast.q()));
        }
        if let Some(t) = &s.truth {
            if t.len() != s.contrast.h() {
                return invalid(format!(
                    "spec {}: truth has {} entries, contrast has {}",
                    s.name,
                    t.len(),
                    s.contrast.h()
                ));
            }
        }
        if config.specs[..i].iter().any(|o| o.name == s.name) {
            return invalid(format!("spec name {} is repeated", s.name));
        }
    }
    Ok(())
}

/// Runs `f` once per replication in parallel and returns the results in replication order.
///
/// Errors are reported for the lowest failing replication.
pub fn replicate<T, F>(
    table: &PotentialTable,
    sampling: &Sampling,
    replications: usize,
    seed: u64,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &Assignment, &ExperimentData) -> Result<T> + Sync,
{
    let structure = table.structure();
    let enumerated = match sampling {
        Sampling::Enumerate => Some(enumerate_assignments(structure)?),
        _ => None,
    };
    let count = enumerated.as_ref().map_or(replications, Vec::len);
    let draw = |r: usize| -> Result<Assignment> {
        match (sampling, &enumerated) {
            (_, Some(all)) => Ok(all[r].clone()),
            (Sampling::Rerandomized { filter, max_tries }, _) => {
                Ok(rerandomize(structure, table.x(), filter, derive_seed(seed, r as u64), *max_tries)?.0)
            }
            _ => Ok(complete_randomize(structure, derive_seed(seed, r as u64))),
        }
    };
    let results: Vec<Result<T>> = (0..count)
        .into_par_iter()
        .map(|r| {
            let z = draw(r).map_err(|e| e.context(format!("replication {r}")))?;
            let data = table.reveal(&z);
            f(r, &z, &data)
        })
        .collect();
    results.into_iter().collect()
}

/// Draws, estimates and aggregates.
pub fn run_study(config: &StudyConfig) -> Result<StudySummary> {
    validate(config)?;
    let per_rep = replicate(&config.table, &config.sampling, config.replications, config.seed, |r, _, data| {
        config
            .specs
            .iter()
            .map(|s| s.evaluate(data).map_err(|e| e.context(format!("replication {r}, spec {}", s.name))))
            .collect::<Result<Vec<_>>>()
    })?;
    let reps = per_rep.len();
    let ybar = pop_means(&config.table);
    let mut summary = StudySummary::default();
    for (k, spec) in config.specs.iter().enumerate() {
        let h = spec.contrast.h();
        let est = DMatrix::from_fn(reps, h, |r, c| per_rep[r][k].0[c]);
        let se = DMatrix::from_fn(reps, h, |r, c| per_rep[r][k].1[c]);
        let truth = spec.truth.clone().unwrap_or_else(|| spec.contrast.matrix() * &ybar);
        for c in 0..h {
            summary.rows.push(summarize(
                &spec.name,
                &spec.contrast.names()[c],
                truth[c],
                est.column(c).as_slice(),
                se.column(c).as_slice(),
            ));
        }
        summary.draws.push(SpecDraws {
            spec: spec.name.clone(),
            contrasts: spec.contrast.names().to_vec(),
            estimates: est,
            std_errors: se,
        });
    }
    Ok(summary)
}

fn summarize(spec: &str, contrast: &str, truth: f64, est: &[f64], se: &[f64]) -> SummaryRow {
    let r = est.len();
    let mut sums = KahanVec::new(2);
    for (e, s) in est.iter().zip(se) {
        sums.add_slice(&[*e, *s]);
    }
    let mc_mean = sums.values()[0] / r as f64;
    let mean_se = sums.values()[1] / r as f64;
    let mut dev = KahanVec::new(1);
    let mut covered = 0usize;
    for (e, s) in est.iter().zip(se) {
        dev.add_slice(&[(e - mc_mean) * (e - mc_mean)]);
        if (e - truth).abs() <= 1.96 * s {
            covered += 1;
        }
    }
    let mc_sd = if r > 1 { (dev.values()[0] / (r as f64 - 1.0)).sqrt() } else { 0.0 };
    SummaryRow {
        spec: spec.to_string(),
        contrast: contrast.to_string(),
        truth,
        mc_mean,
        bias: mc_mean - truth,
        mc_sd,
        mean_se,
        coverage95: covered as f64 / r as f64,
        replications: r,
    }
}

/// Writes `summary.csv` and `raw.csv` into `dir` and returns both paths.
pub fn export_results(summary: &StudySummary, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let summary_path = dir.join("summary.csv");
    let raw_path = dir.join("raw.csv");
    let mut w = csv_writer(fs::File::create(&summary_path)?);
    for row in &summary.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv_writer(fs::File::create(&raw_path)?);
    w.write_record(["replication", "spec", "contrast", "estimate", "std_error"])?;
    for d in &summary.draws {
        for r in 0..d.estimates.nrows() {
            for (c, name) in d.contrasts.iter().enumerate() {
                w.write_record([
                    (r + 1).to_string(),
                    d.spec.clone(),
                    name.clone(),
                    crate::estimators::fmt_f64(d.estimates[(r, c)]),
                    crate::estimators::fmt_f64(d.std_errors[(r, c)]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok((summary_path, raw_path))
}

fn csv_writer<W: std::io::Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn named_contrasts(k: usize, subsets: &[u32]) -> ContrastMatrix {
    let q = 1 << k;
    let c = DMatrix::from_fn(subsets.len(), q, |r, col| standard_row(k, subsets[r])[col]);
    ContrastMatrix::new(c, subsets.iter().map(|&s| subset_name(s)).collect()).expect("standard rows are valid")
}

fn factorial_spec(name: &str, effects: EffectSet, report: &[u32]) -> EstimatorSpec {
    let k = effects.k();
    EstimatorSpec {
        name: name.to_string(),
        method: Method::Factorial { effects, coding: FactorCoding::PlusMinusOne },
        contrast: named_contrasts(k, report),
        truth: None,
    }
}

/// The six two-factor regressions, each reporting `A, B, AB`.
pub fn two_factor_specs() -> Vec<EstimatorSpec> {
    let (a, b, ab) = (1u32, 2u32, 3u32);
    let sat = vec![a, b, ab];
    let us = vec![a, b];
    let report = [a, b, ab];
    let mk = |name: &str, plus: &Vec<u32>, adjust: Vec<u32>| {
        factorial_spec(name, EffectSet::new(2, plus.clone(), adjust).expect("valid effect set"), &report)
    };
    vec![
        mk("N", &sat, vec![]),
        mk("F", &sat, vec![0]),
        mk("L", &sat, EffectSet::all_adjust(2)),
        mk("N_us", &us, vec![]),
        mk("F_us", &us, vec![0]),
        mk("L_us", &us, vec![0, a, b]),
    ]
}

/// Full-design specs `m1`–`m3` reporting `A, B, C`.
pub fn fractional_full_specs() -> Vec<EstimatorSpec> {
    let report = [1u32, 2, 4];
    let eff = |plus: Vec<u32>| EffectSet::new(3, plus, vec![0]).expect("valid effect set");
    vec![
        factorial_spec("m1", eff(vec![1, 2, 4]), &report),
        factorial_spec("m2", eff(vec![1, 2, 4, 5, 6, 7]), &report),
        factorial_spec("m3", eff(vec![1, 2, 3, 4, 5, 6, 7]), &report),
    ]
}

/// Half-fraction spec `m4` reporting `A, B` against the full-design targets.
pub fn fractional_half_spec(truth_a: f64, truth_b: f64) -> EstimatorSpec {
    let mut s = factorial_spec("m4", EffectSet::saturated(2, vec![0]).expect("valid effect set"), &[1, 2]);
    s.truth = Some(DVector::from_vec(vec![truth_a, truth_b]));
    s
}

/// Built-in data generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgpName {
    TwoFactor(BetaVariant),
    Fractional(Scenario),
}

impl FromStr for DgpName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "section6:hetero" => Ok(DgpName::TwoFactor(BetaVariant::Heterogeneous)),
            "section6:equal" => Ok(DgpName::TwoFactor(BetaVariant::Equal)),
            "fractional:I" => Ok(DgpName::Fractional(Scenario::I)),
            "fractional:II" => Ok(DgpName::Fractional(Scenario::II)),
            other => invalid(format!(
                "unknown dgp {other:?}; expected section6:hetero, section6:equal, fractional:I or fractional:II"
            )),
        }
    }
}

impl fmt::Display for DgpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DgpName::TwoFactor(BetaVariant::Heterogeneous) => "section6:hetero",
            DgpName::TwoFactor(BetaVariant::Equal) => "section6:equal",
            DgpName::Fractional(Scenario::I) => "fractional:I",
            DgpName::Fractional(Scenario::II) => "fractional:II",
        })
    }
}

/// A built-in study described by `key=value` settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationPlan {
    pub dgp: DgpName,
    pub replications: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Group sizes of the generated table; defaults depend on the generator.
    pub sizes: Option<Vec<usize>>,
    pub orthogonal_noise: bool,
}

impl Default for SimulationPlan {
    fn default() -> Self {
        SimulationPlan {
            dgp: DgpName::TwoFactor(BetaVariant::Heterogeneous),
            replications: 5000,
            seed: 1,
            out: None,
            sizes: None,
            orthogonal_noise: false,
        }
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return invalid(format!("config line {}: expected key=value", n + 1));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl SimulationPlan {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Validation(format!("config key {key}: {value:?} is not {what}"));
        match key {
            "dgp" => self.dgp = value.parse()?,
            "reps" | "replications" => self.replications = value.parse().map_err(|_| bad("a count"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "out" => self.out = Some(PathBuf::from(value)),
            "sizes" => {
                let sizes = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("a comma-separated list of sizes"))?;
                self.sizes = Some(sizes);
            }
            "orthogonal_noise" => self.orthogonal_noise = value.parse().map_err(|_| bad("true or false"))?,
            other => return invalid(format!("unknown config key {other}")),
        }
        Ok(())
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut plan = SimulationPlan::default();
        for (k, v) in pairs {
            plan.set(k, v)?;
        }
        Ok(plan)
    }

    /// Studies to run; the fractional generators give a full-design and a half-fraction study.
    pub fn studies(&self) -> Result<Vec<StudyConfig>> {
        if self.replications == 0 {
            return invalid("replication count must be at least 1");
        }
        let table_seed = derive_seed(self.seed, u64::MAX);
        let study = |table, specs| StudyConfig {
            table,
            specs,
            replications: self.replications,
            seed: self.seed,
            sampling: Sampling::Complete,
        };
        match self.dgp {
            DgpName::TwoFactor(variant) => {
                let mut opts = TwoFactorOptions { orthogonal_noise: self.orthogonal_noise, ..Default::default() };
                if let Some(s) = &self.sizes {
                    opts.sizes = s.clone();
                }
                Ok(vec![study(dgp_two_factor_with(table_seed, variant, &opts)?, two_factor_specs())])
            }
            DgpName::Fractional(scenario) => {
                let sizes = self.sizes.clone().unwrap_or_else(|| vec![10; 8]);
                let full = dgp_fractional_with(table_seed, scenario, &sizes)?;
                let n = full.n();
                if n % 4 != 0 {
                    return invalid("half fraction needs a unit count divisible by 4");
                }
                let half = half_fraction(&full, vec![n / 4; 4])?;
                let truth = fractional_effects(scenario);
                Ok(vec![
                    study(full, fractional_full_specs()),
                    study(half, vec![fractional_half_spec(truth[0], truth[1])]),
                ])
            }
        }
    }

    pub fn run(&self) -> Result<StudySummary> {
        let mut summary = StudySummary::default();
        for s in self.studies()? {
            summary.extend(run_study(&s)?)?;
        }
        Ok(summary)
    }
}
