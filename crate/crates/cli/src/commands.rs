use std::collections::BTreeMap;
use std::path::Path;

use dipricer::barycentre::optimal_weights;
use dipricer::dataset::save_dataset;
use dipricer::engine::{draw_replicate, run_grid};
use dipricer::metrics::{comparison_premia, read_node_csv, write_node_csv, write_summary_csv};
use dipricer::oracle::cross_check;
use dipricer::{build_xgrid, BarycentreSweep, MeasureSpec, Scenario, SensitivityReport, XGrid};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{
    default_measures, describe_distortion, parse_measures, parse_pi, pick, resolve_common, resolve_engine, EngineSetup,
    FileConfig, Resolved,
};
use crate::failure::Failure;
use crate::output::{num, opt_num, Manifest, OutDir, Table, SEED_RULE};
use crate::{ReportArgs, SimulateArgs, SolveArgs, WeightsArgs};

/// Largest closed-form vs direct-projection gap tolerated by `--oracle-check`.
const ORACLE_TOL: f64 = 1e-6;
/// Recomputed ξ must match the stored summary to this.
const XI_CONSISTENCY_TOL: f64 = 1e-12;

fn manifest(command: &'static str, r: &Resolved, parameters: BTreeMap<String, Value>) -> Manifest {
    Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        scenario: r.scenario_source.clone(),
        scenario_name: r.scenario.name.clone(),
        scenario_hash: r.scenario.hash(),
        seed: r.seed,
        seed_rule: SEED_RULE,
        parameters,
    }
}

fn engine_parameters(e: &EngineSetup) -> BTreeMap<String, Value> {
    let c = &e.cfg;
    BTreeMap::from([
        ("n".to_string(), json!(c.n)),
        ("reps".to_string(), json!(c.solver.replications)),
        ("bins".to_string(), json!(c.bins)),
        ("tol".to_string(), json!(c.solver.tol)),
        ("tol_accept".to_string(), json!(c.solver.tol_accept)),
        ("max_iter".to_string(), json!(c.solver.max_iter)),
        ("eta_bound".to_string(), json!(c.solver.eta_bound)),
        ("grid_q".to_string(), json!(e.grid_q)),
        ("distortion".to_string(), json!(describe_distortion(&c.distortion))),
        ("rank_mode".to_string(), json!(format!("{:?}", c.rank_mode).to_lowercase())),
    ])
}

pub fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let (file, base) = FileConfig::load(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &file, base.as_deref(), 500_000)?;
    if r.n == 0 {
        return Err(Failure::config("--n must be at least 1"));
    }
    let data = r.scenario.generate_dataset(r.n, r.seed)?;
    let mut out = OutDir::create(&r.out)?;
    save_dataset(&data, &out.file("dataset.csv"))?;
    out.register("dataset.csv")?;
    info!("wrote {} rows to {}", data.len(), out.file("dataset.csv").display());
    let params = BTreeMap::from([("n".to_string(), json!(r.n))]);
    out.finish(manifest("simulate", &r, params))
}

fn x_header(sc: &Scenario) -> Vec<String> {
    sc.permitted_names()
}

fn x_cells(x: &[f64]) -> Vec<String> {
    x.iter().map(|v| num(*v)).collect()
}

fn atom_label(sc: &Scenario, d: &[f64]) -> String {
    let parts: Vec<String> = sc.protected_names().iter().zip(d).map(|(n, v)| format!("{n}={v}")).collect();
    format!("best[{}]", parts.join(";"))
}

fn comparison_table(sc: &Scenario, grid: &XGrid, setup: &EngineSetup, unconditional: bool) -> Result<Vec<u8>, Failure> {
    let cfg = &setup.cfg;
    let atoms = sc.protected_atoms()?;
    let rows: Vec<_> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let x = &grid.nodes[k];
            comparison_premia(sc, x, None, &cfg.distortion, cfg.n, cfg.replicate_seed(k, 0), unconditional)
        })
        .collect::<Result<_, _>>()?;
    let mut header = x_header(sc);
    header.push("unaware".into());
    header.extend(atoms.iter().map(|a| atom_label(sc, &a.d)));
    header.push("discrimination_free".into());
    let mut t = Table::new(&header);
    for (x, c) in grid.nodes.iter().zip(&rows) {
        let mut cells = x_cells(x);
        cells.push(num(c.unaware));
        for a in &atoms {
            cells.push(opt_num(c.best_estimates.iter().find(|(d, _)| *d == a.d).map(|(_, v)| *v)));
        }
        cells.push(num(c.discrimination_free));
        t.row(&cells);
    }
    Ok(t.into_bytes())
}

/// Closed-form measures of the first replicate against the direct solver.
fn oracle_table(
    sc: &Scenario,
    grid: &XGrid,
    measures: &[MeasureSpec],
    setup: &EngineSetup,
) -> Result<(Vec<u8>, f64), Failure> {
    let cfg = &setup.cfg;
    let m = sc.m();
    let bins = cfg.bin_scheme()?;
    let targets: Vec<(String, Vec<usize>, bool)> = measures
        .iter()
        .filter_map(|s| match s {
            MeasureSpec::Insensitive { subset, expectation } => Some((s.label(m), subset.clone(), *expectation)),
            MeasureSpec::Marginal { i } => Some((s.label(m), vec![*i], false)),
            _ => None,
        })
        .collect();
    let per_node: Vec<Vec<Vec<String>>> = (0..grid.len())
        .into_par_iter()
        .map(|k| -> Result<Vec<Vec<String>>, Failure> {
            let x = &grid.nodes[k];
            let rep = draw_replicate(sc, x, cfg, cfg.replicate_seed(k, 0))?;
            Ok(targets
                .iter()
                .map(|(label, cols, expectation)| {
                    let mut cells = x_cells(x);
                    cells.push(label.clone());
                    match cross_check(&rep.samples, &rep.phi, cols, *expectation, &bins, &cfg.solver) {
                        Ok(c) => {
                            cells.extend([num(c.sup_diff), num(c.kl_closed), num(c.kl_oracle), "ok".into()]);
                        }
                        Err(e) => cells.extend([String::new(), String::new(), String::new(), e.to_string()]),
                    }
                    cells
                })
                .collect())
        })
        .collect::<Result<_, _>>()?;
    let mut header = x_header(sc);
    header.extend(["measure", "sup_diff", "kl_closed", "kl_oracle", "status"].map(String::from));
    let mut t = Table::new(&header);
    let mut worst = 0.0f64;
    for row in per_node.iter().flatten() {
        if let Ok(v) = row[row.len() - 4].parse::<f64>() {
            worst = worst.max(v);
        }
        t.row(row);
    }
    Ok((t.into_bytes(), worst))
}

fn rejections_table(sc: &Scenario, reports: &[SensitivityReport]) -> Vec<u8> {
    let mut header = x_header(sc);
    header.extend(["measure", "message"].map(String::from));
    let mut t = Table::new(&header);
    for r in reports {
        for n in &r.per_node {
            for msg in &n.log {
                let mut cells = x_cells(&n.x);
                cells.push(r.measure_label.clone());
                cells.push(msg.clone());
                t.row(&cells);
            }
        }
    }
    t.into_bytes()
}

pub fn solve(a: &SolveArgs) -> Result<(), Failure> {
    let (file, base) = FileConfig::load(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &file, base.as_deref(), 100_000)?;
    let setup = resolve_engine(&a.engine, &file, &r, 10)?;
    let sc = &r.scenario;
    let m = sc.m();
    let flag_pi = a.pi.as_deref().map(parse_pi).transpose()?;
    let pi = file.pi.clone().or(flag_pi);
    let names = match &file.measures {
        Some(v) => v.clone(),
        None if !a.measures.is_empty() => a.measures.clone(),
        None => default_measures(m),
    };
    let measures = parse_measures(&names, pi.as_deref(), m)?;
    let unconditional = pick(file.unconditional, Some(a.unconditional), false);
    let compare = pick(file.compare, Some(!a.no_compare), true);
    if a.oracle_check && setup.cfg.n > dipricer::oracle::MAX_STATES {
        return Err(Failure::config(format!(
            "--oracle-check needs --n <= {} (got {})",
            dipricer::oracle::MAX_STATES,
            setup.cfg.n
        )));
    }
    let grid = build_xgrid(sc, setup.grid_q)?;
    info!("{} nodes, {} measures, {} replicates each", grid.len(), measures.len(), setup.cfg.solver.replications);

    let reports = run_grid(sc, &grid, &measures, &setup.cfg)?;
    let mut out = OutDir::create(&r.out)?;
    let mut buf = Vec::new();
    write_node_csv(&mut buf, &sc.permitted_names(), m, &reports)?;
    out.write("nodes.csv", &buf)?;
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, m, &reports)?;
    out.write("summary.csv", &buf)?;
    out.write("rejections.csv", &rejections_table(sc, &reports))?;
    out.write("scenario.toml", sc.to_toml_string().as_bytes())?;
    if compare {
        out.write("comparison.csv", &comparison_table(sc, &grid, &setup, unconditional)?)?;
    }
    let mut oracle_worst = None;
    if a.oracle_check {
        let (bytes, worst) = oracle_table(sc, &grid, &measures, &setup)?;
        out.write("oracle_check.csv", &bytes)?;
        oracle_worst = Some(worst);
    }

    let mut params = engine_parameters(&setup);
    params.insert("measures".into(), json!(measures.iter().map(|s| s.label(m)).collect::<Vec<_>>()));
    params.insert("compare".into(), json!(compare));
    params.insert("unconditional".into(), json!(unconditional));
    params.insert("nodes".into(), json!(grid.len()));
    out.finish(manifest("solve", &r, params))?;

    if let Some(w) = oracle_worst {
        println!("oracle check: max |closed form - direct| = {w:.3e}");
        if w > ORACLE_TOL {
            return Err(Failure { code: 1, message: format!("oracle check failed: {w:.3e} > {ORACLE_TOL:e}") });
        }
    }
    let mut diverged = Vec::new();
    for rep in &reports {
        println!("{:<24} xi = {:>12.6} coverage = {:.3}", rep.measure_label, rep.xi_total, rep.coverage);
        if rep.measure_label == "P" || rep.per_node.is_empty() {
            continue;
        }
        if rep.coverage == 0.0 {
            let first = rep.per_node.iter().find_map(|n| n.log.first().map(|l| (n.x.clone(), l.clone())));
            let detail = first.map_or_else(String::new, |(x, l)| format!(" (x = {x:?}: {l})"));
            diverged.push(format!("{}: no node admits a solution{detail}", rep.measure_label));
        } else if rep.coverage < 1.0 {
            warn!("{}: solved on {:.1}% of the grid mass; see rejections.csv", rep.measure_label, 100.0 * rep.coverage);
        }
    }
    if !diverged.is_empty() {
        return Err(Failure::divergence(format!("solver divergence\n  {}", diverged.join("\n  "))));
    }
    Ok(())
}

/// Leading permitted-covariate columns and protected count of a node file.
fn node_file_shape(header: &[String]) -> Result<(usize, usize), Failure> {
    let n_permitted = header
        .iter()
        .position(|h| h == "measure")
        .ok_or_else(|| Failure::config("node file has no `measure` column"))?;
    let m = header.iter().filter(|h| h.starts_with("sens_")).count();
    Ok((n_permitted, m))
}

fn read_summary(path: &Path) -> Result<Vec<(String, Vec<f64>)>, Failure> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Failure::io(format!("cannot read {}", path.display()), e))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        out.push((rec.get(0).unwrap_or("").to_string(), vals));
    }
    Ok(out)
}

fn same(a: f64, b: f64, tol: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol
}

pub fn report(a: &ReportArgs) -> Result<(), Failure> {
    let (file, _) = FileConfig::load(a.common.config.as_deref())?;
    let out_path = pick(file.out.clone(), a.common.out.clone(), "out".into());
    let input = a.input.clone().unwrap_or_else(|| out_path.clone());
    let nodes_path = input.join("nodes.csv");
    if !nodes_path.exists() {
        return Err(Failure::io(
            format!("{} not found", nodes_path.display()),
            format!("run `dipricer solve --out {}` first", input.display()),
        ));
    }
    let bytes =
        std::fs::read(&nodes_path).map_err(|e| Failure::io(format!("cannot read {}", nodes_path.display()), e))?;
    let header: Vec<String> = csv::Reader::from_reader(bytes.as_slice())
        .headers()
        .map_err(|e| Failure::config(format!("{}: {e}", nodes_path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let (n_permitted, m) = node_file_shape(&header)?;
    let x_names = header[..n_permitted].to_vec();
    let reports = read_node_csv(bytes.as_slice(), n_permitted, m)?;

    let summary_path = input.join("summary.csv");
    if summary_path.exists() {
        let stored = read_summary(&summary_path)?;
        let mut worst = 0.0f64;
        for r in &reports {
            let row = stored.iter().find(|(l, _)| *l == r.measure_label).ok_or_else(|| {
                Failure::config(format!("{} has no row for {}", summary_path.display(), r.measure_label))
            })?;
            let mine: Vec<f64> = r.xi_marginal.iter().copied().chain([r.xi_total, r.coverage]).collect();
            if row.1.len() != mine.len() || !row.1.iter().zip(&mine).all(|(a, b)| same(*a, *b, XI_CONSISTENCY_TOL)) {
                return Err(Failure::config(format!(
                    "{}: stored xi for {} disagrees with {}",
                    summary_path.display(),
                    r.measure_label,
                    nodes_path.display()
                )));
            }
            for (a, b) in row.1.iter().zip(&mine) {
                if a.is_finite() && b.is_finite() {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        println!("xi consistency: max |summary - recomputed| = {worst:.3e}");
    }

    let mut out = OutDir::create(&out_path)?;
    out.register_input(&nodes_path, &bytes);

    // ξ₁..ξ_m and ξ down the rows, one column per measure
    let mut head = vec!["quantity".to_string()];
    head.extend(reports.iter().map(|r| r.measure_label.clone()));
    let mut t = Table::new(&head);
    if !reports.is_empty() {
        for i in 0..=m {
            let name = if i < m { format!("xi_{}", i + 1) } else { "xi".into() };
            let mut cells = vec![name];
            cells.extend(reports.iter().map(|r| num(if i < m { r.xi_marginal[i] } else { r.xi_total })));
            t.row(&cells);
        }
    }
    out.write("xi_table.csv", &t.into_bytes())?;

    let with = |extra: &[&str]| -> Vec<String> {
        let mut h = x_names.clone();
        h.extend(extra.iter().map(|s| s.to_string()));
        h
    };
    let sens_cols: Vec<String> = (1..=m).map(|i| format!("sens_{i}")).collect();
    let eta_cols: Vec<String> = (1..=m).map(|i| format!("eta_{i}")).collect();

    let mut premia = Table::new(&with(&["curve", "premium", "premium_se", "converged"]));
    let mut sens = {
        let mut h = with(&["measure"]);
        h.extend(sens_cols.iter().cloned());
        h.push("converged".into());
        Table::new(&h)
    };
    let mut mult = {
        let mut h = with(&["measure"]);
        h.extend(eta_cols.iter().cloned());
        h.extend(["eta_expectation", "lambda", "converged"].map(String::from));
        Table::new(&h)
    };
    let mut kl = Table::new(&with(&["measure", "kl", "converged"]));
    for r in &reports {
        for n in &r.per_node {
            let base = x_cells(&n.x);
            let conv = n.converged.to_string();
            let mut c = base.clone();
            c.extend([r.measure_label.clone(), num(n.premium), num(n.premium_se), conv.clone()]);
            premia.row(&c);
            let mut c = base.clone();
            c.push(r.measure_label.clone());
            c.extend(n.sensitivities.iter().map(|v| num(*v)));
            c.push(conv.clone());
            sens.row(&c);
            let mut c = base.clone();
            c.push(r.measure_label.clone());
            if n.eta.len() == m {
                c.extend(n.eta.iter().map(|v| num(*v)));
                c.push(num(n.eta_expectation));
            } else {
                c.extend(std::iter::repeat_n(String::new(), m + 1));
            }
            c.push(opt_num(n.lambda));
            c.push(conv.clone());
            mult.row(&c);
            let mut c = base;
            c.extend([r.measure_label.clone(), num(n.kl), conv]);
            kl.row(&c);
        }
    }
    let cmp_path = input.join("comparison.csv");
    if cmp_path.exists() {
        let mut rd = csv::Reader::from_path(&cmp_path)
            .map_err(|e| Failure::io(format!("cannot read {}", cmp_path.display()), e))?;
        let h: Vec<String> = rd
            .headers()
            .map_err(|e| Failure::config(format!("{}: {e}", cmp_path.display())))?
            .iter()
            .map(String::from)
            .collect();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Failure::config(format!("{}: {e}", cmp_path.display())))?;
            let x: Vec<String> = rec.iter().take(n_permitted).map(String::from).collect();
            for (j, v) in rec.iter().enumerate().skip(n_permitted) {
                if v.is_empty() {
                    continue;
                }
                let mut c = x.clone();
                c.extend([h[j].clone(), v.to_string(), String::new(), "true".into()]);
                premia.row(&c);
            }
        }
    }
    out.write("premia.csv", &premia.into_bytes())?;
    out.write("sensitivities.csv", &sens.into_bytes())?;
    out.write("multipliers.csv", &mult.into_bytes())?;
    out.write("kl.csv", &kl.into_bytes())?;
    out.finish_plain("report")
}

pub fn weights(a: &WeightsArgs) -> Result<(), Failure> {
    let (file, base) = FileConfig::load(a.common.config.as_deref())?;
    let r = resolve_common(&a.common, &file, base.as_deref(), 100_000)?;
    let setup = resolve_engine(&a.engine, &file, &r, 10)?;
    let sc = &r.scenario;
    if sc.m() != 2 {
        return Err(Failure::config(format!(
            "weight selection needs two protected covariates, scenario has {}",
            sc.m()
        )));
    }
    let width = pick(file.width, a.width, 0.01);
    if !(width > 0.0 && width < 1.0) {
        return Err(Failure::config("--width must lie in (0, 1)"));
    }
    let mut extra: Vec<Vec<f64>> = match &file.pi_list {
        Some(v) => v.clone(),
        None => a.pi_list.iter().map(|s| parse_pi(s)).collect::<Result<_, _>>()?,
    };
    for pi in &extra {
        if pi.len() != 2 {
            return Err(Failure::config(format!("weights {pi:?}: need two entries")));
        }
        dipricer::barycentre::BarycentreWeights::new(pi.clone())?;
    }
    if let Some(k) = file.scan.or(a.scan).filter(|&k| k > 0) {
        extra.extend((0..=k).map(|j| {
            let p = j as f64 / k as f64;
            vec![p, 1.0 - p]
        }));
    }
    let grid = build_xgrid(sc, setup.grid_q)?;
    let cfg = &setup.cfg;
    let reference = run_grid(sc, &grid, &[MeasureSpec::Reference], cfg)?.remove(0);
    info!("xi(P) = {:?}", reference.xi_marginal);
    let sweep = BarycentreSweep::new(sc, &grid, cfg)?;
    let xi_ref = reference.xi_marginal.clone();
    let search = optimal_weights(&xi_ref, |p| sweep.evaluate(&[p, 1.0 - p]).map(|r| r.xi_marginal), width)?;
    let p_star = search.pi.pi[0];
    println!("pi* = ({:.4}, {:.4}), objective = {:.3e}", p_star, 1.0 - p_star, search.objective);

    let mut out = OutDir::create(&r.out)?;
    let mut trace = Table::new(&["step", "pi_1", "objective"]);
    for (k, (p, v)) in search.trace.iter().enumerate() {
        trace.row(&[k.to_string(), num(*p), num(*v)]);
    }
    out.write("weights_trace.csv", &trace.into_bytes())?;

    let mut table = Table::new(&["pi_1", "pi_2", "xi_1", "xi_2", "xi", "coverage", "objective"]);
    let mut rows = vec![vec![p_star, 1.0 - p_star]];
    rows.extend(extra);
    for pi in &rows {
        let cells = match sweep.evaluate(pi) {
            Ok(rep) => {
                let obj = dipricer::barycentre::proportional_reduction_gap(&xi_ref, &rep.xi_marginal);
                vec![
                    num(pi[0]),
                    num(pi[1]),
                    num(rep.xi_marginal[0]),
                    num(rep.xi_marginal[1]),
                    num(rep.xi_total),
                    num(rep.coverage),
                    num(obj),
                ]
            }
            Err(e) => {
                warn!("pi = {pi:?}: {e}");
                vec![num(pi[0]), num(pi[1]), "NaN".into(), "NaN".into(), "NaN".into(), "0".into(), "inf".into()]
            }
        };
        table.row(&cells);
    }
    out.write("weights_table.csv", &table.into_bytes())?;
    let summary = json!({
        "pi_star": [p_star, 1.0 - p_star],
        "objective": search.objective,
        "xi_reference": xi_ref,
        "evaluations": search.trace.len(),
    });
    out.write("weights.json", format!("{}\n", serde_json::to_string_pretty(&summary).expect("json")).as_bytes())?;
    let mut params = engine_parameters(&setup);
    params.insert("width".into(), json!(width));
    out.finish(manifest("weights", &r, params))
}
