use desreg::design::complete_randomize;
use desreg::estimators::{adjusted_means, restriction_equal_correlation, wald_restriction_test};
use desreg::harness::{
    dgp_two_factor_with, export_results, read_summary, replicate, run_study, two_factor_specs, BetaVariant, DgpName,
    Sampling, SimulationPlan, StudyConfig, TwoFactorOptions,
};
use desreg::oracle::{exact_randomization_moments, v_matrix};
use desreg::rng::stream;
use desreg::{DMatrix, DVector, PotentialTable, TreatmentStructure};
use rand::Rng;
use rand_distr::StandardNormal;

fn small_study(seed: u64) -> StudyConfig {
    let plan = SimulationPlan { replications: 60, seed, ..Default::default() };
    plan.studies().unwrap().remove(0)
}

#[test]
fn export_round_trips_and_lists_every_draw() {
    let summary = run_study(&small_study(11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (s, raw) = export_results(&summary, dir.path()).unwrap();
    assert_eq!(read_summary(&s).unwrap(), summary.rows);
    let lines = std::fs::read_to_string(raw).unwrap().lines().count();
    // header plus 60 replications × 6 specs × 3 contrasts
    assert_eq!(lines, 1 + 60 * 6 * 3);
}

#[test]
fn summary_does_not_depend_on_thread_count() {
    let config = small_study(12);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_study(&config).unwrap())
    };
    let (one, three) = (run(1), run(3));
    assert_eq!(one.rows, three.rows);
    for (a, b) in one.draws.iter().zip(&three.draws) {
        assert_eq!(a.estimates, b.estimates);
        assert_eq!(a.std_errors, b.std_errors);
    }
}

#[test]
fn fixed_adjustment_has_closed_form_randomization_covariance() {
    let s = TreatmentStructure::new(vec![3, 3, 3]).unwrap();
    let mut r = stream(5, 0);
    let x = DMatrix::from_fn(9, 2, |_, _| r.sample::<f64, _>(StandardNormal));
    let y = DMatrix::from_fn(9, 3, |i, q| q as f64 + x[(i, 0)] * (q as f64 - 1.0) + r.sample::<f64, _>(StandardNormal));
    let table = PotentialTable::new(y, x, s).unwrap();
    let b = DVector::from_fn(6, |k, _| 0.3 * k as f64 - 0.7);
    let (mean, cov) = exact_randomization_moments(&table, |d| adjusted_means(d, &b)).unwrap();
    let expected = v_matrix(&table, &b).unwrap() / 9.0;
    let ybar = DVector::from_fn(3, |q, _| table.y().column(q).mean());
    assert!((mean - ybar).amax() < 1e-10);
    assert!((cov - expected).amax() < 1e-10);
}

#[test]
fn equal_slope_test_has_power_against_heterogeneous_slopes() {
    let mut rates = Vec::new();
    for seed in [21u64, 22, 23] {
        let table = dgp_two_factor_with(seed, BetaVariant::Heterogeneous, &TwoFactorOptions::default()).unwrap();
        let restriction = restriction_equal_correlation(4, 20);
        let p = replicate(&table, &Sampling::Complete, 200, seed, |_, _, d| {
            Ok(wald_restriction_test(d, &restriction)?.p_value)
        })
        .unwrap();
        rates.push(p.iter().filter(|&&v| v < 0.05).count() as f64 / p.len() as f64);
    }
    assert!(rates.iter().all(|&r| r > 0.5), "rejection rates {rates:?}");
}

#[test]
fn built_in_plans_produce_their_specs() {
    let plan = SimulationPlan {
        dgp: DgpName::Fractional(desreg::harness::Scenario::I),
        replications: 10,
        ..Default::default()
    };
    let summary = plan.run().unwrap();
    for spec in ["m1", "m2", "m3", "m4"] {
        assert!(summary.row(spec, "A").is_some(), "{spec} missing");
    }
    assert_eq!(two_factor_specs().len(), 6);
    let z = complete_randomize(&TreatmentStructure::new(vec![2, 2]).unwrap(), 0);
    assert_eq!(z.len(), 4);
}
