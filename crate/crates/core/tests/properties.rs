use desreg::design::{assignment_count, complete_randomize, enumerate_assignments, mahalanobis_imbalance, rerandomize};
use desreg::estimators::{adjusted_means, build_spec, estimate, restriction_equal_correlation, within_group_slopes};
use desreg::factorial::{all_subsets, baseline_contrasts, standard_contrasts};
use desreg::linalg::{asymmetry, min_eigenvalue, rank};
use desreg::lsq::{ddt_cov, rls_fit, sandwich_raw, transform_regressors, ColumnLabel};
use desreg::oracle::{is_constant_effects, is_equal_correlation, theory_quantities, v_f, v_l, v_n};
use desreg::rng::stream;
use desreg::{
    BalanceFilter, ContrastMatrix, DMatrix, DVector, DesignMatrix, ExperimentData, PotentialTable, Restriction,
    SpecKind, TreatmentStructure,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normal(r: &mut impl Rng) -> f64 {
    r.sample::<f64, _>(StandardNormal)
}

fn table(sizes: Vec<usize>, j: usize, seed: u64) -> PotentialTable {
    let s = TreatmentStructure::new(sizes).unwrap();
    let (n, q) = (s.n(), s.q());
    let mut r = stream(seed, 1);
    let x = DMatrix::from_fn(n, j, |_, _| normal(&mut r));
    let slopes = DMatrix::from_fn(q, j, |_, _| normal(&mut r));
    let y = DMatrix::from_fn(n, q, |i, qq| {
        qq as f64 + (0..j).map(|jj| slopes[(qq, jj)] * x[(i, jj)]).sum::<f64>() + normal(&mut r)
    });
    PotentialTable::new(y, x, s).unwrap()
}

fn data(sizes: Vec<usize>, j: usize, seed: u64) -> ExperimentData {
    let t = table(sizes, j, seed);
    t.reveal(&complete_randomize(t.structure(), seed))
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

fn sizes_strategy(min: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(min..min + 6, 2..5)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn generators_keep_group_counts(sizes in sizes_strategy(1), seed in any::<u64>()) {
        let s = TreatmentStructure::new(sizes.clone()).unwrap();
        let z = complete_randomize(&s, seed);
        prop_assert_eq!(z.counts(s.q()), sizes.clone());
        let x = DMatrix::from_fn(s.n(), 1, |i, _| (i as f64).sin());
        let g = DMatrix::from_fn(1, s.q(), |_, c| if c == 0 { -1.0 } else if c == 1 { 1.0 } else { 0.0 });
        let filter = BalanceFilter::new(g, f64::INFINITY).unwrap();
        let (zr, tries) = rerandomize(&s, &x, &filter, seed, 5).unwrap();
        prop_assert_eq!(tries, 1);
        prop_assert_eq!(zr.levels(), z.levels());
    }

    #[test]
    fn enumeration_size_is_multinomial(sizes in prop::collection::vec(1usize..4, 2..4)) {
        let s = TreatmentStructure::new(sizes.clone()).unwrap();
        let all = enumerate_assignments(&s).unwrap();
        let fact = |k: usize| (1..=k as u128).product::<u128>();
        let expected = fact(s.n()) / sizes.iter().map(|&k| fact(k)).product::<u128>();
        prop_assert_eq!(all.len() as u128, expected);
        prop_assert_eq!(assignment_count(&s), expected);
        for z in &all {
            prop_assert_eq!(z.counts(s.q()), sizes.clone());
        }
    }

    #[test]
    fn imbalance_ignores_covariate_recoding(sizes in sizes_strategy(4), j in 1usize..4, seed in any::<u64>()) {
        let t = table(sizes, j, seed);
        let q = t.q();
        let z = complete_randomize(t.structure(), seed ^ 1);
        let mut r = stream(seed, 2);
        let a = DMatrix::from_fn(j, j, |i, k| if i == k { 3.0 } else { 0.0 } + normal(&mut r) * 0.5);
        prop_assume!(rank(&a) == j);
        let g = DMatrix::from_fn(q - 1, q, |h, c| if c == 0 { -1.0 } else if c == h + 1 { 1.0 } else { 0.0 });
        let m0 = mahalanobis_imbalance(&z, t.x(), &g).unwrap();
        let m1 = mahalanobis_imbalance(&z, &(t.x() * &a), &g).unwrap();
        prop_assert!((m0 - m1).abs() <= 1e-8 * m0.abs().max(1.0), "{} vs {}", m0, m1);
    }

    #[test]
    fn restricted_fit_satisfies_constraints(
        n in 15usize..40, p in 2usize..7, m_frac in 0.0f64..1.0, seed in any::<u64>(),
    ) {
        let m = 1 + ((p - 1) as f64 * m_frac) as usize;
        let mut r = stream(seed, 3);
        let x = DMatrix::from_fn(n, p, |_, _| normal(&mut r));
        let y = DVector::from_fn(n, |_, _| normal(&mut r) * 2.0);
        let design = DesignMatrix::new(x, (0..p).map(ColumnLabel::Transformed).collect()).unwrap();
        let r_mat = DMatrix::from_fn(m, p, |_, _| normal(&mut r));
        let rhs = DVector::from_fn(m, |_, _| normal(&mut r) * 3.0);
        prop_assume!(rank(&r_mat) == m);
        let restriction = Restriction::new(r_mat.clone(), rhs.clone(), None).unwrap();
        let fit = rls_fit(&design, &y, &restriction).unwrap();
        let gap = (&r_mat * &fit.beta - &rhs).amax();
        prop_assert!(gap <= 1e-8 * (1.0 + rhs.amax()), "gap {}", gap);

        // covariances come out symmetric, and are nearly so before symmetrization
        let cov = ddt_cov(&fit);
        prop_assert_eq!(asymmetry(&cov), 0.0);
        let raw = sandwich_raw(&fit);
        prop_assert!(asymmetry(&raw) <= 1e-10 * raw.amax().max(1e-300));

        // invariance under χ ↦ χΓ, R ↦ RΓ
        let gamma = DMatrix::from_fn(p, p, |a, b| if a == b { 2.0 } else { 0.0 } + normal(&mut r) * 0.3);
        prop_assume!(rank(&gamma) == p);
        let t_fit = rls_fit(&transform_regressors(&design, &gamma).unwrap(), &y, &restriction.transformed(&gamma)).unwrap();
        let scale = fit.beta.amax().max(1.0);
        prop_assert!((&gamma * &t_fit.beta - &fit.beta).amax() <= 1e-8 * scale);
        prop_assert!((&t_fit.residuals - &fit.residuals).amax() <= 1e-8 * fit.residuals.amax().max(1.0));
        prop_assert!(rel_err(&(&gamma * ddt_cov(&t_fit) * gamma.transpose()), &cov) <= 1e-8);
    }

    #[test]
    fn estimates_are_linear_in_the_contrast(sizes in sizes_strategy(6), seed in any::<u64>(), kind in 0usize..3) {
        let kind = [SpecKind::N, SpecKind::F, SpecKind::L][kind];
        let d = data(sizes, 2, seed);
        let q = d.q();
        let mut r = stream(seed, 4);
        let mut c = DMatrix::from_fn(q - 1, q, |_, _| normal(&mut r));
        for mut row in c.row_iter_mut() {
            let mean = row.sum() / q as f64;
            row.add_scalar_mut(-mean);
        }
        let a = DMatrix::from_fn(2, q - 1, |_, _| normal(&mut r));
        let none = Restriction::empty(build_spec(kind, q, 2).ncols());
        let res = estimate(&d, kind, &none, &ContrastMatrix::unnamed(c.clone()).unwrap()).unwrap();
        prop_assert_eq!(&res.tau_hat, &(&c * &res.y_hat));
        let combined = estimate(&d, kind, &none, &ContrastMatrix::unnamed(&a * &c).unwrap()).unwrap();
        let tol = 1e-10 * res.tau_hat.amax().max(1.0) * a.amax().max(1.0);
        prop_assert!((&a * &res.tau_hat - &combined.tau_hat).amax() <= tol);
        let cov = &a * &res.tau_cov * a.transpose();
        prop_assert!(rel_err(&cov, &combined.tau_cov) <= 1e-10);
    }

    #[test]
    fn regression_estimators_are_adjusted_means(sizes in sizes_strategy(6), seed in any::<u64>()) {
        let d = data(sizes, 2, seed);
        let q = d.q();
        let c = ContrastMatrix::unnamed(DMatrix::from_fn(1, q, |_, k| if k == 0 { -1.0 } else if k == 1 { 1.0 } else { 0.0 })).unwrap();
        let n = estimate(&d, SpecKind::N, &Restriction::empty(q), &c).unwrap();
        let plain = adjusted_means(&d, &DVector::zeros(2 * q)).unwrap();
        prop_assert!((&n.y_hat - &plain).amax() <= 1e-10 * plain.amax().max(1.0));
        let l = estimate(&d, SpecKind::L, &Restriction::empty(q + 2 * q), &c).unwrap();
        let slopes = within_group_slopes(&d).unwrap();
        prop_assert!((&l.gamma_hat - &slopes).amax() <= 1e-10 * slopes.amax().max(1.0));
        let adj = adjusted_means(&d, &slopes).unwrap();
        prop_assert!((&l.y_hat - &adj).amax() <= 1e-10 * adj.amax().max(1.0));
        let f = estimate(&d, SpecKind::F, &Restriction::empty(q + 2), &c).unwrap();
        let adj = adjusted_means(&d, &f.gamma_hat).unwrap();
        prop_assert!((&f.y_hat - &adj).amax() <= 1e-10 * adj.amax().max(1.0));
    }

    #[test]
    fn fully_interacted_limit_has_smallest_variance(sizes in sizes_strategy(5), j in 1usize..3, seed in any::<u64>()) {
        let t = table(sizes, j, seed);
        let vl = v_l(&t).unwrap();
        let restricted = theory_quantities(&t, &restriction_equal_correlation(t.q(), j)).unwrap();
        for other in [v_n(&t), v_f(&t).unwrap(), restricted.v_r] {
            let floor = -1e-10 * other.amax().max(1.0);
            prop_assert!(min_eigenvalue(&(&other - &vl)) >= floor);
        }
    }

    #[test]
    fn constant_effects_imply_equal_slopes(n in 8usize..20, q in 2usize..5, j in 1usize..3, seed in any::<u64>()) {
        let mut r = stream(seed, 5);
        let x = DMatrix::from_fn(n, j, |_, _| normal(&mut r));
        let base = DVector::from_fn(n, |i, _| x.row(i).sum() * 1.5 + normal(&mut r));
        let shifts: Vec<f64> = (0..q).map(|_| normal(&mut r) * 4.0).collect();
        let y = DMatrix::from_fn(n, q, |i, qq| base[i] + shifts[qq]);
        let mut sizes = vec![n / q; q];
        sizes[0] += n - sizes.iter().sum::<usize>();
        prop_assume!(sizes.iter().all(|&s| s > 0));
        let t = PotentialTable::new(y, x, TreatmentStructure::new(sizes).unwrap()).unwrap();
        prop_assert!(is_constant_effects(&t));
        prop_assert!(is_equal_correlation(&t).unwrap());
    }

    #[test]
    fn generated_contrasts_have_the_dyadic_structure(k in 1usize..7) {
        let c = standard_contrasts(k);
        let q = 1usize << k;
        let entry = 0.5f64.powi(k as i32 - 1);
        prop_assert_eq!(c.nrows(), q - 1);
        for (a, row) in c.row_iter().enumerate() {
            prop_assert!(row.iter().all(|v| v.abs() == entry));
            prop_assert_eq!(row.sum(), 0.0);
            for b in a + 1..q - 1 {
                prop_assert_eq!(row.dot(&c.row(b)), 0.0);
            }
        }
        prop_assert_eq!(all_subsets(k).len(), q - 1);
        let (g0, c0) = baseline_contrasts(k);
        prop_assert_eq!(g0.clone().lu().determinant(), 1.0);
        prop_assert!(c0.row_iter().all(|r| r.sum() == 0.0));
    }
}
