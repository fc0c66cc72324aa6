//! `desreg`: randomize, analyze, simulate and test from the command line.
//!
//! Exit codes: 0 success, 1 input validation, 2 numerical failure,
//! 3 rerandomization exhaustion.

mod input;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use desreg::design::{complete_randomize, rerandomize};
use desreg::estimators::{
    estimate, restriction_equal_correlation, restriction_zero_correlation, wald_restriction_test,
};
use desreg::factorial::{all_subsets, effect_contrast, factor_regress, parse_subset};
use desreg::harness::{export_results, parse_config, SimulationPlan};
use desreg::lsq::subset_name;
use desreg::{
    BalanceFilter, ContrastMatrix, DMatrix, EffectSet, Error, ExperimentData, FactorCoding, Restriction, Result,
    SpecKind, TreatmentStructure,
};

use input::{read_data, read_matrix, read_named_rows};

#[derive(Parser)]
#[command(name = "desreg", version, about = "Regression adjustment for multi-armed and factorial experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a complete randomization, optionally rerandomized for balance.
    Randomize(RandomizeArgs),
    /// Estimate contrasts from a data file.
    Analyze(AnalyzeArgs),
    /// Run a built-in simulation study.
    Simulate(SimulateArgs),
    /// Wald test of a restriction on the fully interacted regression.
    Test(TestArgs),
}

#[derive(Args)]
struct RandomizeArgs {
    /// Number of units; must equal the sum of --sizes.
    #[arg(long)]
    n: Option<usize>,
    /// Group sizes q1,q2,...
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Covariate CSV (one row per unit) for rerandomization.
    #[arg(long)]
    rem_covariates: Option<PathBuf>,
    /// Contrast rows G (H x Q) for rerandomization.
    #[arg(long)]
    rem_contrasts: Option<PathBuf>,
    /// Acceptance threshold; `inf` accepts the first draw.
    #[arg(long)]
    rem_threshold: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    max_tries: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Coding {
    Pm1,
    #[value(name = "01")]
    ZeroOne,
}

impl From<Coding> for FactorCoding {
    fn from(c: Coding) -> Self {
        match c {
            Coding::Pm1 => FactorCoding::PlusMinusOne,
            Coding::ZeroOne => FactorCoding::ZeroOne,
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    /// N, F or L.
    #[arg(long, default_value = "L")]
    spec: String,
    /// none, zero, equal or file=PATH.
    #[arg(long, default_value = "none")]
    restriction: String,
    /// file=PATH, factorial:saturated or factorial:A,B,AB,...
    #[arg(long)]
    contrast: Option<String>,
    #[arg(long, value_enum, default_value = "pm1")]
    coding: Coding,
    /// Number of treatment levels Q for z files.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct SimulateArgs {
    /// key=value file with dgp, reps, seed, out, sizes, orthogonal_noise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// section6:hetero, section6:equal, fractional:I or fractional:II.
    #[arg(long)]
    dgp: Option<String>,
    /// Output directory for summary.csv and raw.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    data: PathBuf,
    /// zero, equal or file=PATH.
    #[arg(long)]
    restriction: String,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_json(out: &Option<PathBuf>, value: &serde_json::Value) -> Result<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn randomize(args: RandomizeArgs) -> Result<()> {
    let structure = TreatmentStructure::new(args.sizes.clone())?;
    if let Some(n) = args.n {
        if n != structure.n() {
            return invalid(format!("--n {n} does not match the sizes, which sum to {}", structure.n()));
        }
    }
    let assignment = match (&args.rem_covariates, &args.rem_contrasts, args.rem_threshold) {
        (None, None, None) => complete_randomize(&structure, args.seed),
        (Some(xp), Some(gp), Some(a)) => {
            let x = read_matrix(xp).map_err(|e| e.context("--rem-covariates"))?;
            let g = read_matrix(gp).map_err(|e| e.context("--rem-contrasts"))?;
            let filter = BalanceFilter::new(g, a)?;
            let (z, tries) = rerandomize(&structure, &x, &filter, args.seed, args.max_tries)?;
            eprintln!("accepted after {tries} draw(s)");
            z
        }
        _ => return invalid("rerandomization needs --rem-covariates, --rem-contrasts and --rem-threshold together"),
    };
    let mut w = sink(&args.out)?;
    assignment.write_csv(&structure, &mut w)?;
    w.flush()?;
    Ok(())
}

fn restriction_from(arg: &str, q: usize, j: usize) -> Result<Restriction> {
    match arg.trim() {
        "none" => Ok(Restriction::empty(q + q * j)),
        "zero" => Ok(restriction_zero_correlation(q, j)),
        "equal" => Ok(restriction_equal_correlation(q, j)),
        other => {
            let Some(path) = other.strip_prefix("file=") else {
                return invalid(format!("unknown restriction '{other}' (expected none, zero, equal or file=PATH)"));
            };
            let m = read_matrix(Path::new(path)).map_err(|e| e.context("restriction file"))?;
            let p = q + q * j;
            if m.ncols() != p + 1 {
                return invalid(format!(
                    "restriction file has {} columns; expected Q + JQ = {p} coefficients plus r",
                    m.ncols()
                ));
            }
            let r_mat = m.columns(0, p).into_owned();
            let r = m.column(p).into_owned();
            Restriction::new(r_mat, r, Some(q))
        }
    }
}

/// `Q` implied by a contrast file, read before the data so `z` can be checked.
fn declared_levels(
    contrast: &Option<String>,
    levels: Option<usize>,
) -> Result<(Option<usize>, Option<ContrastMatrix>)> {
    let Some(path) = contrast.as_deref().and_then(|c| c.strip_prefix("file=")) else {
        return Ok((levels, None));
    };
    let (names, m) = read_named_rows(Path::new(path), true).map_err(|e| e.context("contrast file"))?;
    if let Some(q) = levels {
        if q != m.ncols() {
            return invalid(format!("contrast file has {} columns but --levels is {q}", m.ncols()));
        }
    }
    Ok((Some(m.ncols()), Some(ContrastMatrix::new(m, names)?)))
}

fn factorial_rows(k: usize, subsets: &[u32], coding: FactorCoding) -> Result<ContrastMatrix> {
    let q = 1 << k;
    let c = DMatrix::from_fn(subsets.len(), q, |r, col| effect_contrast(k, subsets[r], coding)[col]);
    ContrastMatrix::new(c, subsets.iter().map(|&s| subset_name(s)).collect())
}

/// Contrasts of levels `2..Q` against level 1.
fn baseline_differences(q: usize) -> Result<ContrastMatrix> {
    let c = DMatrix::from_fn(q - 1, q, |r, col| match col {
        0 => -1.0,
        c if c == r + 1 => 1.0,
        _ => 0.0,
    });
    ContrastMatrix::new(c, (2..=q).map(|l| format!("{l}-1")).collect())
}

enum Report {
    Treatment(desreg::EstimationResult),
    Factorial(desreg::factorial::FactorEffects, Vec<f64>),
}

fn run_analysis(args: &AnalyzeArgs) -> Result<Report> {
    let kind: SpecKind = args.spec.parse()?;
    let coding: FactorCoding = args.coding.into();
    let (levels, file_contrast) = declared_levels(&args.contrast, args.levels)?;
    let file = read_data(&args.data, levels).map_err(|e| e.context(args.data.display()))?;
    let data: &ExperimentData = &file.data;
    let (q, j) = (data.q(), data.j());
    let restriction = restriction_from(&args.restriction, q, j)?;
    let need_k =
        || file.factors.ok_or_else(|| Error::Validation(format!("factorial contrasts need 2^K levels, data have {q}")));
    let contrast = match args.contrast.as_deref().map(str::trim) {
        Some(c) if c.starts_with("file=") => file_contrast.expect("read with the levels"),
        Some("factorial:saturated") => factorial_rows(need_k()?, &all_subsets(need_k()?), coding)?,
        Some(c) if c.starts_with("factorial:") => {
            let k = need_k()?;
            if !restriction.is_empty() {
                return invalid("factorial:SUBSETS already fixes the restriction; use --restriction none");
            }
            let plus = c["factorial:".len()..].split(',').map(|s| parse_subset(s, k)).collect::<Result<Vec<_>>>()?;
            let adjust = match kind {
                SpecKind::N => vec![],
                SpecKind::F => vec![0],
                SpecKind::L => EffectSet::all_adjust(k),
            };
            let effects = EffectSet::new(k, plus, adjust)?;
            let fe = factor_regress(data, &effects, coding)?;
            return Ok(Report::Factorial(fe, data.shift().to_vec()));
        }
        Some(other) => {
            return invalid(format!(
                "unknown contrast '{other}' (expected file=PATH, factorial:saturated or factorial:SUBSETS)"
            ))
        }
        None if file.factor_columns => factorial_rows(need_k()?, &all_subsets(need_k()?), coding)?,
        None => baseline_differences(q)?,
    };
    Ok(Report::Treatment(estimate(data, kind, &restriction, &contrast)?))
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let report = run_analysis(&args)?;
    match (report, args.format) {
        (Report::Treatment(r), Format::Csv) => {
            let mut w = sink(&args.out)?;
            r.write_csv(&mut w)?;
            w.flush()?;
        }
        (Report::Treatment(r), Format::Json) => write_json(&args.out, &r.to_json())?,
        (Report::Factorial(fe, _), Format::Csv) => {
            let mut w = sink(&args.out)?;
            fe.write_csv(&mut w)?;
            w.flush()?;
        }
        (Report::Factorial(fe, shift), Format::Json) => {
            let mut v = fe.to_json();
            v["covariate_shift"] = serde_json::json!(shift);
            write_json(&args.out, &v)?;
        }
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut pairs = match &args.config {
        Some(p) => {
            parse_config(&std::fs::read_to_string(p).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?)?
        }
        None => Vec::new(),
    };
    // flags come last so they win
    for (key, value) in [("dgp", &args.dgp), ("reps", &args.reps), ("seed", &args.seed)] {
        if let Some(v) = value {
            pairs.push((key.to_string(), v.clone()));
        }
    }
    if let Some(out) = &args.out {
        pairs.push(("out".into(), out.display().to_string()));
    }
    let plan = SimulationPlan::from_pairs(&pairs)?;
    let dir = plan.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let summary = plan.run()?;
    let (s, r) = export_results(&summary, &dir)?;
    println!("{}", s.display());
    println!("{}", r.display());
    Ok(())
}

fn test(args: TestArgs) -> Result<()> {
    let file = read_data(&args.data, args.levels).map_err(|e| e.context(args.data.display()))?;
    let (q, j) = (file.data.q(), file.data.j());
    if args.restriction.trim() == "none" {
        return invalid("the test needs a restriction: zero, equal or file=PATH");
    }
    let restriction = restriction_from(&args.restriction, q, j)?;
    let res = wald_restriction_test(&file.data, &restriction)?;
    match args.format {
        Format::Json => {
            write_json(&args.out, &serde_json::json!({ "W": res.w, "df": res.df, "p_value": res.p_value }))?
        }
        Format::Csv => {
            let mut w = sink(&args.out)?;
            writeln!(w, "W,df,p_value")?;
            writeln!(
                w,
                "{},{},{}",
                desreg::estimators::fmt_f64(res.w),
                res.df,
                desreg::estimators::fmt_f64(res.p_value)
            )?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Randomize(a) => randomize(a),
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
        Command::Test(a) => test(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
