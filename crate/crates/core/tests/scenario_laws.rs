use dipricer::dataset::{load_dataset, save_dataset};
use dipricer::scenario::{empirical_ranks, Law};
use dipricer::{Error, RankMode, Scenario};
use proptest::prelude::*;

fn lognormal_pdf(x: f64, mu: f64, s: f64) -> f64 {
    let z = (x.ln() - mu) / s;
    (-0.5 * z * z).exp() / (x * s * (2.0 * std::f64::consts::PI).sqrt())
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn posterior_at_five_matches_density_ratio() {
    let sc = Scenario::single_binary();
    let post = sc.posterior_protected(&[5.0]).unwrap();
    let f = 0.4 * lognormal_pdf(5.0, 2.0, 1.0 / 3.0);
    let m = 0.6 * lognormal_pdf(5.0, 1.5, 0.5);
    let female = post.iter().find(|a| a.d == [-1.0]).unwrap().prob;
    assert!((female - f / (f + m)).abs() < 1e-12);
    assert!((female - 0.340_184_746_288_825_83).abs() < 1e-12);
}

#[test]
fn posterior_sums_to_one_on_grid() {
    let sc = Scenario::single_binary();
    for k in 0..100 {
        let x = 0.2 + 0.4 * k as f64;
        let s: f64 = sc.posterior_protected(&[x]).unwrap().iter().map(|a| a.prob).sum();
        assert!((s - 1.0).abs() < 1e-12, "x = {x}");
    }
    let cs = Scenario::case_study();
    for x1 in [-1.0, 0.0, 1.0] {
        for k in 0..100 {
            let x2 = 1.6 + k as f64;
            let s: f64 = cs.posterior_protected(&[x1, x2]).unwrap().iter().map(|a| a.prob).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn posterior_outside_support_is_domain_error() {
    let cs = Scenario::case_study();
    assert!(matches!(cs.posterior_protected(&[-1.0, 150.0]), Err(Error::Domain(_))));
    assert!(matches!(cs.posterior_protected(&[0.5, 20.0]), Err(Error::Domain(_))));
}

#[test]
fn conditional_cdf_limits_and_value() {
    let sc = Scenario::single_binary();
    assert!(sc.conditional_cdf_y(&[5.0], 1e3).unwrap() == 1.0);
    assert!(sc.conditional_cdf_y(&[5.0], -1e3).unwrap() == 0.0);
    let v = sc.conditional_cdf_y(&[5.0], 2.75).unwrap();
    assert!((v - 0.616_120_275_838_350_9).abs() < 1e-12);
}

#[test]
fn conditional_cdf_matches_monte_carlo() {
    let sc = Scenario::single_binary();
    let s = sc.sample_conditional(&[5.0], 1_000_000, 11, RankMode::Empirical).unwrap();
    let below = s.y.iter().filter(|&&y| y <= 2.75).count() as f64 / s.len() as f64;
    let exact = sc.conditional_cdf_y(&[5.0], 2.75).unwrap();
    assert!((below - exact).abs() <= 2e-3, "{below} vs {exact}");
}

#[test]
fn analytic_cdf_needs_noise() {
    let sc = Scenario::nonexistence();
    assert!(matches!(sc.conditional_cdf_y(&[2.0], 5.0), Err(Error::UnsupportedAnalytic(_))));
}

fn ks_uniform(u: &[f64]) -> f64 {
    let mut v = u.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(j, &x)| (x - j as f64 / n).abs().max(((j + 1) as f64 / n - x).abs())).fold(0.0, f64::max)
}

#[test]
fn analytic_ranks_pass_ks() {
    let sc = Scenario::single_binary();
    for (x, seed) in [(2.0, 1), (5.0, 2), (12.0, 3)] {
        let s = sc.sample_conditional(&[x], 100_000, seed, RankMode::Analytic).unwrap();
        let d = ks_uniform(&s.u);
        assert!(d <= 1.63 / (s.len() as f64).sqrt(), "x = {x}: KS {d}");
        assert!(s.u.iter().all(|&u| u > 0.0 && u < 1.0));
    }
}

#[test]
fn midrank_examples() {
    assert_eq!(empirical_ranks(&[3.0, 1.0, 2.0]), vec![5.0 / 6.0, 1.0 / 6.0, 0.5]);
    assert_eq!(empirical_ranks(&[1.0; 4]), vec![0.125, 0.375, 0.625, 0.875]);
}

#[test]
fn sample_mean_within_clt_band() {
    let sc = Scenario::single_binary();
    let x = [5.0];
    let s = sc.sample_conditional(&x, 100_000, 5, RankMode::Empirical).unwrap();
    let post = sc.posterior_protected(&x).unwrap();
    let exact: f64 = post.iter().map(|a| a.prob * sc.model.h(&x, &a.d)).sum();
    let mean = s.y.iter().sum::<f64>() / s.len() as f64;
    let sd = (s.y.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt();
    assert!((mean - exact).abs() <= 3.0 * sd / (s.len() as f64).sqrt());
    assert!((sc.conditional_mean_y(&x).unwrap() - exact).abs() < 1e-12);
}

#[test]
fn sampling_is_deterministic_and_sized() {
    let sc = Scenario::case_study();
    let a = sc.sample_conditional(&[1.0, 40.0], 1000, 9, RankMode::Empirical).unwrap();
    let b = sc.sample_conditional(&[1.0, 40.0], 1000, 9, RankMode::Empirical).unwrap();
    assert_eq!(a, b);
    assert!(sc.sample_conditional(&[1.0, 40.0], 1, 9, RankMode::Empirical).is_err());
}

#[test]
fn degenerate_loss_has_equal_samples() {
    let mut sc = Scenario::nonexistence();
    sc.covariates[0].law = Some(Law::Categorical { values: vec![1.0], probs: vec![1.0] });
    let s = sc.sample_conditional(&[2.0], 10, 1, RankMode::Empirical).unwrap();
    assert!(s.y.iter().all(|&y| y == s.y[0]));
    assert_eq!(s.u, (0..10).map(|j| (j as f64 + 0.5) / 10.0).collect::<Vec<_>>());
}

#[test]
fn case_study_conditional_frequencies() {
    let sc = Scenario::case_study();
    let n = 100_000;
    let t = sc.generate_dataset(n, 21).unwrap();
    let men: Vec<usize> = (0..n).filter(|&j| t.d[j][0] == 1.0).collect();
    let p = men.iter().filter(|&&j| t.x[j][0] == 1.0).count() as f64 / men.len() as f64;
    assert!((p - 0.5).abs() <= 3.0 * (0.25 / men.len() as f64).sqrt());

    // chi-square on the marginals of D1, D2 and X1, 1% critical values
    let chi2 = |obs: &[f64], probs: &[f64]| -> f64 {
        obs.iter().zip(probs).map(|(o, p)| (o - n as f64 * p).powi(2) / (n as f64 * p)).sum()
    };
    let count = |col: &dyn Fn(usize) -> f64, vals: &[f64]| -> Vec<f64> {
        vals.iter().map(|v| (0..n).filter(|&j| col(j) == *v).count() as f64).collect()
    };
    let d1 = count(&|j| t.d[j][0], &[-1.0, 1.0]);
    assert!(chi2(&d1, &[0.6, 0.4]) < 6.635);
    let d2 = count(&|j| t.d[j][1], &[-1.0, 0.0, 1.0]);
    assert!(chi2(&d2, &[0.375, 0.125, 0.5]) < 9.210);
    let x1 = count(&|j| t.x[j][0], &[-1.0, 0.0, 1.0]);
    assert!(chi2(&x1, &[0.4, 0.25, 0.35]) < 9.210);
}

#[test]
fn truncated_exponential_mean_by_quadrature() {
    let rate = 1.0 / 35.0;
    let z = 1.0 - (-rate * 120.0f64).exp();
    let oracle = simpson(|t| t * rate * (-rate * t).exp() / z, 0.0, 120.0, 2000);
    assert!((oracle - 30.977_550_002_880_69).abs() < 1e-9);
    let law = Law::TruncatedExponential { rate, upper: 120.0 };
    assert!((law.mean() - oracle).abs() < 1e-9);

    let sc = Scenario::case_study();
    let n = 100_000;
    let t = sc.generate_dataset(n, 4).unwrap();
    let xs: Vec<f64> = (0..n).filter(|&j| t.d[j][1] == -1.0).map(|j| t.x[j][1]).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    assert!((mean - oracle).abs() <= 3.0 * (var / xs.len() as f64).sqrt());
}

#[test]
fn truncated_normal_density_integrates_to_one() {
    let law = Law::TruncatedNormal { mean: 50.0, sd: 15.0, lower: 1.5, upper: 100.0 };
    let total = simpson(|t| law.density(t), 1.5, 100.0, 2000);
    assert!((total - 1.0).abs() < 1e-10);
    let m = simpson(|t| t * law.density(t), 1.5, 100.0, 2000);
    assert!((law.mean() - m).abs() < 1e-8);
}

#[test]
fn single_row_dataset() {
    let t = Scenario::case_study().generate_dataset(1, 3).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t.d[0].len(), 2);
    assert_eq!(t.x[0].len(), 2);
}

#[test]
fn dataset_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let t = Scenario::case_study().generate_dataset(500, 8).unwrap();
    save_dataset(&t, &path).unwrap();
    let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "d1,d2,x1,x2,y");
    let back = load_dataset(&path).unwrap();
    assert_eq!(
        back.y.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        t.y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(back.x, t.x);
    assert_eq!(back.d, t.d);
}

#[test]
fn dataset_errors_name_column_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "d1,x1\n1,2\n").unwrap();
    match load_dataset(&p) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "y"),
        other => panic!("{other:?}"),
    }
    std::fs::write(&p, "d1,x1,y\n1,2,3\n1,oops,3\n").unwrap();
    match load_dataset(&p) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn conditional_cdf_is_monotone(x in 0.5f64..30.0, y in -5.0f64..20.0, dy in 0.0f64..5.0) {
        let sc = Scenario::single_binary();
        let a = sc.conditional_cdf_y(&[x], y).unwrap();
        let b = sc.conditional_cdf_y(&[x], y + dy).unwrap();
        prop_assert!(b >= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn posterior_is_a_distribution(x1 in prop::sample::select(vec![-1.0, 0.0, 1.0]), x2 in 1.6f64..89.0) {
        let post = Scenario::case_study().posterior_protected(&[x1, x2]).unwrap();
        prop_assert_eq!(post.len(), 6);
        prop_assert!(post.iter().all(|a| a.prob >= 0.0));
        prop_assert!((post.iter().map(|a| a.prob).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
