use dipricer::barycentre::{constrained_barycentre, jensen_constant, kl_between, pure_barycentre, BarycentreWeights};
use dipricer::engine::{run_grid, BarycentreSweep};
use dipricer::metrics::{comparison_premia, read_node_csv, write_node_csv, write_summary_csv};
use dipricer::oracle::{project_barycentre, DiscreteSpace, DiscreteState};
use dipricer::{
    build_xgrid, EngineConfig, MeasureSpec, MeasureWeights, Normalization, RankMode, Scenario, SolverOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_weights(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..3.0)).collect();
    let m = raw.iter().sum::<f64>() / n as f64;
    raw.iter().map(|v| v / m).collect()
}

fn mw(r: Vec<f64>) -> MeasureWeights {
    MeasureWeights { r, normalization: Normalization::Global }
}

#[test]
fn barycentre_identity_constant() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let members = vec![mw(random_weights(&mut r, 40)), mw(random_weights(&mut r, 40))];
    let pi = BarycentreWeights::pair(0.3).unwrap();
    let b = pure_barycentre(&members, &pi).unwrap();
    let c = jensen_constant(&members, &pi).unwrap();
    assert!(c > 0.0);
    for _ in 0..50 {
        let q = random_weights(&mut r, 40);
        let lhs = 0.3 * kl_between(&q, &members[0].r) + 0.7 * kl_between(&q, &members[1].r) - kl_between(&q, &b.r);
        assert!((lhs - c).abs() < 1e-10, "{lhs} vs {c}");
    }
}

#[test]
fn barycentre_matches_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let k = 20;
    let members = [random_weights(&mut r, k), random_weights(&mut r, k)];
    let states: Vec<DiscreteState> = (0..k).map(|j| DiscreteState { d: vec![], y: j as f64, u: 0.5 }).collect();
    let space = DiscreteSpace::new(states, vec![1.0 / k as f64; k], vec![0; k]).unwrap();
    let probs: Vec<Vec<f64>> = members.iter().map(|m| m.iter().map(|v| v / k as f64).collect()).collect();
    let pi = BarycentreWeights::pair(0.6).unwrap();
    let o = project_barycentre(&space, &probs, &pi.pi, false).unwrap();
    let b = pure_barycentre(&members.iter().cloned().map(mw).collect::<Vec<_>>(), &pi).unwrap();
    for j in 0..k {
        assert!((b.r[j] / k as f64 - o[j]).abs() < 1e-8);
    }
}

#[test]
fn constrained_barycentre_restores_mean() {
    let sc = Scenario::single_binary();
    let s = sc.sample_conditional(&[5.0], 20_000, 3, RankMode::Empirical).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let members = vec![mw(random_weights(&mut r, s.len())), mw(random_weights(&mut r, s.len()))];
    let res = constrained_barycentre(&members, &BarycentreWeights::pair(0.5).unwrap(), &s, &SolverOptions::default())
        .unwrap();
    assert!(res.converged);
    let ey: f64 = res.weights.r.iter().zip(&s.y).map(|(a, b)| a * b).sum::<f64>() / s.len() as f64;
    assert!(((ey - s.mean_y()) / s.mean_y()).abs() < 1e-5);
    assert!(res.jensen_c > 0.0);
}

#[test]
fn case_study_grid_marginals() {
    let sc = Scenario::case_study();
    let g = build_xgrid(&sc, 25).unwrap();
    assert_eq!(g.len(), 75);
    let mass = |x1: f64| g.nodes.iter().zip(&g.weights).filter(|(x, _)| x[0] == x1).map(|(_, w)| w).sum::<f64>();
    assert!((mass(-1.0) - 0.4).abs() < 1e-12);
    assert!((mass(0.0) - 0.25).abs() < 1e-12);
    assert!((mass(1.0) - 0.35).abs() < 1e-12);
    assert!(g.nodes.iter().all(|x| x[1] > 0.0 && x[1] < 120.0));
}

#[test]
fn single_binary_grid_nodes_are_quantiles() {
    let sc = Scenario::single_binary();
    let g = build_xgrid(&sc, 4).unwrap();
    for (k, x) in g.nodes.iter().enumerate() {
        let target = (k as f64 + 0.5) / 4.0;
        let f: f64 = sc.covariates[1].given.iter().zip([0.4, 0.6]).map(|(gl, p)| p * gl.law.cdf(x[0])).sum();
        assert!((f - target).abs() < 1e-9);
    }
}

fn small_config() -> EngineConfig {
    let mut cfg = EngineConfig { n: 20_000, seed: 5, ..EngineConfig::default() };
    cfg.solver.replications = 2;
    cfg
}

#[test]
fn engine_reports_every_measure() {
    let sc = Scenario::single_binary();
    let g = build_xgrid(&sc, 3).unwrap();
    let measures: Vec<MeasureSpec> = ["P", "insensitive", "marginal:1", "barycentre:1", "constrained_barycentre:1"]
        .iter()
        .map(|s| s.parse::<MeasureSpec>().unwrap().resolve(1))
        .collect();
    let cfg = small_config();
    let reports = run_grid(&sc, &g, &measures, &cfg).unwrap();
    assert_eq!(reports.len(), 5);
    assert!(reports[0].xi_total > 0.0);
    assert!(reports[1].xi_total.abs() < 1e-5);
    assert!(reports[1].coverage > 0.0);
    // a one-member barycentre collapses onto the marginal measure
    let q1 = &reports[2].per_node[1];
    let qb = &reports[3].per_node[1];
    assert!((q1.sensitivities[0] - qb.sensitivities[0]).abs() < 1e-3);

    let mut node_csv = Vec::new();
    write_node_csv(&mut node_csv, &sc.permitted_names(), 1, &reports).unwrap();
    let text = String::from_utf8(node_csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 5 * 3);
    let back = read_node_csv(text.as_bytes(), 1, 1).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in back.iter().zip(&reports) {
        assert_eq!(a.measure_label, b.measure_label);
        assert!((a.xi_total - b.xi_total).abs() <= 1e-12 || (a.xi_total.is_nan() && b.xi_total.is_nan()));
        assert_eq!(a.coverage, b.coverage);
    }
    let mut summary = Vec::new();
    write_summary_csv(&mut summary, 1, &reports).unwrap();
    assert!(String::from_utf8(summary).unwrap().starts_with("measure,xi_1,xi,coverage"));

    let again = run_grid(&sc, &g, &measures, &cfg).unwrap();
    assert_eq!(again, reports);
}

#[test]
fn sweep_matches_direct_constrained_barycentre() {
    let sc = Scenario::case_study();
    let g = dipricer::XGrid {
        nodes: vec![vec![0.0, 20.0], vec![1.0, 10.0], vec![-1.0, 30.0]],
        weights: vec![0.4, 0.3, 0.3],
    };
    let cfg = small_config();
    let spec = MeasureSpec::ConstrainedBarycentre { pi: vec![0.5, 0.5] };
    let direct = run_grid(&sc, &g, &[spec], &cfg).unwrap().remove(0);
    let sweep = BarycentreSweep::new(&sc, &g, &cfg).unwrap();
    let via = sweep.evaluate(&[0.5, 0.5]).unwrap();
    assert!(direct.per_node.iter().any(|n| n.converged));
    for (a, b) in direct.per_node.iter().zip(&via.per_node) {
        assert_eq!(a.accepted, b.accepted);
        if a.converged {
            assert!((a.premium - b.premium).abs() < 1e-9);
        }
    }
}

#[test]
fn comparison_premia_order() {
    let sc = Scenario::single_binary();
    let w = dipricer::DistortionWeight::EsLoad { alpha: 0.9, c: 0.2 };
    let c = comparison_premia(&sc, &[5.0], Some(&[1.0]), &w, 100_000, 4, false).unwrap();
    let female = c.best_estimates.iter().find(|(d, _)| d == &[-1.0]).unwrap().1;
    let male = c.best_estimate.unwrap();
    assert!(female < male);
    assert!(c.discrimination_free > female && c.discrimination_free < male);
    assert!(c.unaware > female && c.unaware < male);
}
