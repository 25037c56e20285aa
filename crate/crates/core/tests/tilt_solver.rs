use dipricer::oracle::{kl_discrete, project_kl, DiscreteSpace, DiscreteState};
use dipricer::scenario::empirical_ranks;
use dipricer::solver::{
    replicate, solve_constrained, solve_insensitive, solve_insensitive_no_expectation, solve_marginal, ReplicateOutput,
};
use dipricer::tilt::{bin_means, compute_weights, kl_divergence, weighted_ks_uniform, TiltSystem};
use dipricer::{
    BinScheme, ConditionalSampleSet, DistortionWeight, Error, PhiMatrix, RankMode, Scenario, SolverOptions,
    TiltParameters,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn es() -> DistortionWeight {
    DistortionWeight::EsLoad { alpha: 0.9, c: 0.2 }
}

fn tight() -> SolverOptions {
    SolverOptions { tol: 1e-12, ..SolverOptions::default() }
}

/// k equally likely states with random (Φ, y), bins by midrank of y.
fn instance(seed: u64, k: usize, m: usize) -> (ConditionalSampleSet, PhiMatrix) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..10.0)).collect();
    let phi: Vec<f64> = (0..k * m).map(|_| r.gen_range(-2.0..2.0)).collect();
    let u = empirical_ranks(&y);
    let s = ConditionalSampleSet { x: vec![], m, d: phi.clone(), y, u, seed };
    (s, PhiMatrix::from_values(phi, m).unwrap())
}

fn oracle_space(s: &ConditionalSampleSet, phi: &PhiMatrix, bins: &BinScheme) -> DiscreteSpace {
    let k = s.len();
    let states = (0..k)
        .map(|j| DiscreteState { d: (0..phi.m).map(|i| phi.get(j, i)).collect(), y: s.y[j], u: s.u[j] })
        .collect();
    let labels: Vec<usize> = s.u.iter().map(|&u| bins.bin(u)).collect();
    DiscreteSpace::new(states, vec![1.0 / k as f64; k], labels).unwrap()
}

#[test]
fn two_point_tilt_example() {
    let s =
        ConditionalSampleSet { x: vec![], m: 1, d: vec![1.0, -1.0], y: vec![0.0, 0.0], u: vec![0.25, 0.75], seed: 0 };
    let phi = PhiMatrix::from_values(vec![1.0, -1.0], 1).unwrap();
    let p = TiltParameters { eta: vec![3f64.ln() / 2.0], eta_expectation: 0.0, lambda: None };
    let w = compute_weights(&s, &phi, &p, &BinScheme::global()).unwrap();
    assert!((w.r[0] - 0.5).abs() < 1e-15 && (w.r[1] - 1.5).abs() < 1e-15);
    assert!((kl_divergence(&w).unwrap() - 0.130_812_035_941_137_9).abs() < 1e-15);
}

#[test]
fn eight_state_toy_matches_oracle() {
    let (s, phi) = instance(8, 8, 1);
    let bins = BinScheme::new(2).unwrap();
    let q = solve_insensitive(&s, &phi, &bins, &tight()).unwrap();
    let space = oracle_space(&s, &phi, &bins);
    let (mut rows, mut targets) = space.bin_mass_rows();
    rows.push(phi.column(0));
    targets.push(0.0);
    let ybar = s.mean_y();
    rows.push(s.y.clone());
    targets.push(ybar);
    let o = project_kl(&space, &rows, &targets).unwrap();
    for j in 0..8 {
        assert!((q.weights.r[j] - 8.0 * o[j]).abs() < 1e-6, "state {j}");
    }
    let kl_o = kl_discrete(&o, &space.p);
    assert!((kl_o - q.kl).abs() < 1e-9);
}

#[test]
fn kl_equals_discrete_kl() {
    let (s, phi) = instance(2, 16, 2);
    let bins = BinScheme::new(4).unwrap();
    let p = TiltParameters { eta: vec![0.4, -0.3], eta_expectation: 0.1, lambda: None };
    let w = compute_weights(&s, &phi, &p, &bins).unwrap();
    let q: Vec<f64> = w.r.iter().map(|v| v / 16.0).collect();
    assert!((kl_divergence(&w).unwrap() - kl_discrete(&q, &[1.0 / 16.0; 16])).abs() < 1e-12);
}

#[test]
fn solved_measure_invariants() {
    let sc = Scenario::single_binary();
    let s = sc.sample_conditional(&[6.0], 100_000, 31, RankMode::Empirical).unwrap();
    let phi = PhiMatrix::new(&s, &sc.model, &es()).unwrap();
    let bins = BinScheme::default();
    let q = solve_insensitive(&s, &phi, &bins, &SolverOptions::default()).unwrap();
    assert!(q.converged);
    assert!(bin_means(&q.weights.r, &s.u, &bins).iter().all(|m| (m - 1.0).abs() < 1e-12));
    assert!(weighted_ks_uniform(&s.u, &q.weights.r) <= 1.0 / 100.0 + 1e-12);
    assert!(q.max_residual() <= 1e-6);
    let ey: f64 = q.weights.r.iter().zip(&s.y).map(|(r, y)| r * y).sum::<f64>() / s.len() as f64;
    assert!(((ey - s.mean_y()) / s.mean_y()).abs() <= 1e-5);
    let sens = phi.weighted_means(Some(&q.weights.r));
    assert!(sens[0].abs() <= 1e-6 * dipricer::stats::sd(&phi.column(0)));
}

#[test]
fn restarts_find_the_same_root() {
    let sc = Scenario::single_binary();
    let s = sc.sample_conditional(&[5.0], 50_000, 8, RankMode::Empirical).unwrap();
    let phi = PhiMatrix::new(&s, &sc.model, &es()).unwrap();
    let bins = BinScheme::default();
    let opts = SolverOptions::default();
    let base = solve_insensitive(&s, &phi, &bins, &opts).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..5 {
        let init =
            TiltParameters { eta: vec![r.gen_range(-2.0..2.0)], eta_expectation: r.gen_range(-1.0..1.0), lambda: None };
        let q = solve_constrained(&s, &phi, &[0], true, &bins, &opts, Some(&init)).unwrap();
        assert!(q.converged);
        assert!((q.params.eta[0] - base.params.eta[0]).abs() <= 1e-4);
        assert!((q.params.eta_expectation - base.params.eta_expectation).abs() <= 1e-4);
    }
}

#[test]
fn jacobian_is_symmetric() {
    let sc = Scenario::case_study();
    let s = sc.sample_conditional(&[0.0, 30.0], 20_000, 3, RankMode::Empirical).unwrap();
    let phi = PhiMatrix::new(&s, &sc.model, &es()).unwrap();
    let bins = BinScheme::new(20).unwrap();
    let labels = bins.assign(&s.u).unwrap();
    let mut feats = Vec::with_capacity(s.len() * 3);
    for j in 0..s.len() {
        feats.extend([phi.get(j, 0) / 5.0, phi.get(j, 1) / 3.0, (s.y[j] - s.mean_y()) / 5.0]);
    }
    let sys = TiltSystem::new(feats, 3, &labels, 20, None).unwrap();
    let ev = sys.evaluate(&[0.3, -0.2, 0.1]).unwrap();
    for a in 0..3 {
        assert!(ev.cov[a * 3 + a] >= 0.0);
        for b in 0..3 {
            assert!((ev.cov[a * 3 + b] - ev.cov[b * 3 + a]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_covariate_no_expectation_equals_marginal() {
    let sc = Scenario::single_binary();
    let s = sc.sample_conditional(&[4.0], 50_000, 5, RankMode::Empirical).unwrap();
    let phi = PhiMatrix::new(&s, &sc.model, &es()).unwrap();
    let bins = BinScheme::default();
    let opts = SolverOptions::default();
    let a = solve_insensitive_no_expectation(&s, &phi, &bins, &opts).unwrap();
    let b = solve_marginal(&s, &phi, 0, &bins, &opts).unwrap();
    assert!((a.params.eta[0] - b.params.eta[0]).abs() <= 1e-10);
    let gap = a.weights.r.iter().zip(&b.weights.r).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap <= 1e-10);
}

#[test]
fn insensitive_samples_give_zero_multipliers() {
    // Φ = ±1 in equal numbers inside every bin, y symmetric
    let n = 400;
    let y: Vec<f64> = (0..n).map(|j| j as f64).collect();
    let u = empirical_ranks(&y);
    let vals: Vec<f64> = (0..n).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let s = ConditionalSampleSet { x: vec![], m: 1, d: vals.clone(), y, u, seed: 0 };
    let phi = PhiMatrix::from_values(vals, 1).unwrap();
    let q = solve_marginal(&s, &phi, 0, &BinScheme::new(4).unwrap(), &SolverOptions::default()).unwrap();
    assert!(q.params.eta[0].abs() < 1e-12);
    assert!(q.weights.r.iter().all(|r| (r - 1.0).abs() < 1e-12));
}

#[test]
fn one_signed_feature_diverges() {
    let n = 100;
    let y: Vec<f64> = (0..n).map(|j| j as f64).collect();
    let u = empirical_ranks(&y);
    let vals: Vec<f64> = (0..n).map(|j| 1.0 + (j % 3) as f64).collect();
    let s = ConditionalSampleSet { x: vec![], m: 1, d: vals.clone(), y, u, seed: 0 };
    let phi = PhiMatrix::from_values(vals, 1).unwrap();
    let e = solve_marginal(&s, &phi, 0, &BinScheme::global(), &SolverOptions::default()).unwrap_err();
    assert!(e.is_divergence(), "{e}");
}

#[test]
fn replicate_rejects_and_averages() {
    let opts = SolverOptions::default();
    let rep = replicate(
        |seed| {
            if seed % 2 == 0 {
                Ok(ReplicateOutput {
                    measure: None,
                    premium: seed as f64,
                    sensitivities: vec![0.0],
                    kl: 0.0,
                    residual: 0.0,
                    converged: true,
                })
            } else {
                Err(Error::NotConverged { iterations: 1, residual: 1.0 })
            }
        },
        &opts,
        &[0, 1, 2, 3],
    )
    .unwrap();
    assert_eq!((rep.accepted, rep.attempted), (2, 4));
    assert_eq!(rep.premium, 1.0);
    assert!(replicate(|_| Err(Error::Domain("x".into())), &opts, &[1, 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_are_normalized_in_every_bin(seed in 0u64..10_000, e1 in -3.0f64..3.0, e2 in -3.0f64..3.0, t in -1.0f64..1.0) {
        let (s, phi) = instance(seed, 48, 2);
        let bins = BinScheme::new(4).unwrap();
        let p = TiltParameters { eta: vec![e1, e2], eta_expectation: t, lambda: None };
        let w = compute_weights(&s, &phi, &p, &bins).unwrap();
        for m in bin_means(&w.r, &s.u, &bins) {
            prop_assert!((m - 1.0).abs() < 1e-12);
        }
        prop_assert!(weighted_ks_uniform(&s.u, &w.r) <= 0.25 + 1e-12);
        prop_assert!(kl_divergence(&w).unwrap() >= 0.0);
    }

    #[test]
    fn raising_eta_lowers_the_tilted_mean(seed in 0u64..10_000, e in -2.0f64..2.0, de in 0.01f64..1.0) {
        let (s, phi) = instance(seed, 32, 1);
        let bins = BinScheme::new(2).unwrap();
        let mean_at = |eta: f64| {
            let w = compute_weights(&s, &phi, &TiltParameters { eta: vec![eta], eta_expectation: 0.0, lambda: None }, &bins).unwrap();
            phi.weighted_means(Some(&w.r))[0]
        };
        prop_assert!(mean_at(e + de) < mean_at(e));
    }

    #[test]
    fn kl_is_permutation_invariant(seed in 0u64..10_000) {
        let (s, phi) = instance(seed, 24, 1);
        let w = compute_weights(&s, &phi, &TiltParameters { eta: vec![0.7], eta_expectation: 0.0, lambda: None }, &BinScheme::new(3).unwrap()).unwrap();
        let mut rev = w.clone();
        rev.r.reverse();
        prop_assert!((kl_divergence(&w).unwrap() - kl_divergence(&rev).unwrap()).abs() < 1e-14);
    }
}
