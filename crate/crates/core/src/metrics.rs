//! Integration over the permitted covariates: x-grids, marginal and total
//! sensitivities ξ, KL curves, comparison premia and CSV emission.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distortion::{premium, DistortionWeight};
use crate::error::{arg, Error, Result};
use crate::scenario::{ProtectedAtom, RankMode, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XGrid {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl XGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.len() != self.weights.len() || self.nodes.is_empty() {
            return Err(arg("grid needs one weight per node"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(arg("grid weights must be a probability vector"));
        }
        Ok(())
    }
}

/// Inverts an increasing cdf by bracket expansion and bisection.
fn invert_cdf(cdf: impl Fn(f64) -> Result<f64>, p: f64) -> Result<f64> {
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while cdf(lo)? > p {
        lo = 2.0 * lo - 1.0;
        if lo < -1e12 {
            return Err(Error::Domain("quantile bracket not found".into()));
        }
    }
    while cdf(hi)? < p {
        hi = 2.0 * hi + 1.0;
        if hi > 1e12 {
            return Err(Error::Domain("quantile bracket not found".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Category levels × `q` conditional quantile nodes at (k − ½)/q of the
/// continuous permitted covariate; node weight = P(levels)/q.
pub fn build_xgrid(scenario: &Scenario, q: usize) -> Result<XGrid> {
    let perm = scenario.permitted();
    let cont: Vec<usize> = perm.iter().copied().filter(|&i| scenario.covariates[i].levels().is_none()).collect();
    if cont.len() > 1 {
        return Err(arg("grids support at most one continuous permitted covariate"));
    }
    if !cont.is_empty() && q < 2 {
        return Err(arg("need at least two quantile nodes"));
    }
    let atoms = scenario.categorical_permitted_atoms()?;
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for (levels, prob, post) in atoms {
        let assemble = |c: Option<f64>| -> Vec<f64> {
            let mut it = levels.iter();
            perm.iter().map(|i| if cont.contains(i) { c.unwrap() } else { *it.next().unwrap() }).collect()
        };
        match cont.first() {
            None => {
                nodes.push(assemble(None));
                weights.push(prob);
            }
            Some(&j) => {
                let cdf = |t: f64| scenario.permitted_mixture_cdf(j, &post, t);
                for k in 0..q {
                    let p = (k as f64 + 0.5) / q as f64;
                    nodes.push(assemble(Some(invert_cdf(cdf, p)?)));
                    weights.push(prob / q as f64);
                }
            }
        }
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    Ok(XGrid { nodes, weights })
}

/// Replicate-averaged outcome of one measure at one grid node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeResult {
    pub x: Vec<f64>,
    pub weight: f64,
    pub premium: f64,
    pub premium_se: f64,
    pub sensitivities: Vec<f64>,
    pub kl: f64,
    pub converged: bool,
    pub accepted: usize,
    pub attempted: usize,
    /// Multipliers of the first accepted replicate (η₁..η_m, η_{m+1}, λ).
    pub eta: Vec<f64>,
    pub eta_expectation: f64,
    pub lambda: Option<f64>,
    pub residual: f64,
    pub log: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub measure_label: String,
    pub per_node: Vec<NodeResult>,
    pub xi_marginal: Vec<f64>,
    pub xi_total: f64,
    /// Grid mass of the converged nodes.
    pub coverage: f64,
}

/// Σ weight·|sensitivityᵢ| over converged nodes, weights renormalized to
/// the converged mass.
pub fn xi_marginal(nodes: &[NodeResult], i: usize) -> Result<f64> {
    let mass: f64 = nodes.iter().filter(|n| n.converged).map(|n| n.weight).sum();
    if !(mass > 0.0) {
        return Err(Error::Domain("no converged node".into()));
    }
    Ok(nodes.iter().filter(|n| n.converged).map(|n| n.weight * n.sensitivities[i].abs()).sum::<f64>() / mass)
}

impl SensitivityReport {
    pub fn from_nodes(label: &str, per_node: Vec<NodeResult>, m: usize) -> Result<Self> {
        let total_mass: f64 = per_node.iter().map(|n| n.weight).sum();
        let coverage = per_node.iter().filter(|n| n.converged).map(|n| n.weight).sum::<f64>() / total_mass;
        let xi = (0..m).map(|i| xi_marginal(&per_node, i)).collect::<Result<Vec<_>>>()?;
        let xi_total = xi.iter().sum();
        Ok(SensitivityReport { measure_label: label.into(), per_node, xi_marginal: xi, xi_total, coverage })
    }

    /// As `from_nodes`, with NaN ξ and zero coverage when no node converged.
    pub fn from_nodes_lenient(label: &str, per_node: Vec<NodeResult>, m: usize) -> Self {
        match Self::from_nodes(label, per_node.clone(), m) {
            Ok(r) => r,
            Err(_) => SensitivityReport {
                measure_label: label.into(),
                per_node,
                xi_marginal: vec![f64::NAN; m],
                xi_total: f64::NAN,
                coverage: 0.0,
            },
        }
    }
}

pub fn kl_curve(report: &SensitivityReport) -> Vec<(Vec<f64>, f64)> {
    report.per_node.iter().filter(|n| n.converged).map(|n| (n.x.clone(), n.kl)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonPremia {
    pub unaware: f64,
    pub best_estimate: Option<f64>,
    /// Best estimates for every protected value, in posterior order.
    pub best_estimates: Vec<(Vec<f64>, f64)>,
    pub discrimination_free: f64,
}

/// Unaware ρ(Y|x), best-estimate ρ(Y|x,d) (D pinned, own ranks) and
/// ρ_df = Σ_w P(D=w | X=x) ρ(Y|x,w); `unconditional` swaps in P(D=w).
pub fn comparison_premia(
    scenario: &Scenario,
    x: &[f64],
    d: Option<&[f64]>,
    w: &DistortionWeight,
    n: usize,
    seed: u64,
    unconditional: bool,
) -> Result<ComparisonPremia> {
    let post = scenario.posterior_protected(x)?;
    let unaware_samples = scenario.sample_from_posterior(x, &post, n, seed, RankMode::Empirical, None)?;
    let unaware = premium(&unaware_samples, w, None)?;
    let weights: Vec<ProtectedAtom> = if unconditional { scenario.protected_atoms()? } else { post.clone() };
    let mut best_estimates = Vec::new();
    let mut df = 0.0;
    for a in &weights {
        let pinned = [ProtectedAtom { d: a.d.clone(), prob: 1.0 }];
        let s = scenario.sample_from_posterior(x, &pinned, n, seed, RankMode::Empirical, None)?;
        let be = premium(&s, w, None)?;
        df += a.prob * be;
        best_estimates.push((a.d.clone(), be));
    }
    let best_estimate = match d {
        None => None,
        Some(d) => {
            let (_, v) = best_estimates
                .iter()
                .zip(&post)
                .find(|((dv, _), p)| dv.as_slice() == d && p.prob > 0.0)
                .map(|(b, _)| b)
                .ok_or_else(|| arg(format!("protected value {d:?} outside the support given x")))?;
            Some(*v)
        }
    };
    Ok(ComparisonPremia { unaware, best_estimate, best_estimates, discrimination_free: df })
}

pub fn node_csv_header(x_names: &[String], m: usize) -> Vec<String> {
    let mut h: Vec<String> = x_names.to_vec();
    h.extend(["measure", "weight", "premium", "premium_se"].map(String::from));
    h.extend((1..=m).map(|i| format!("sens_{i}")));
    h.extend(["kl", "converged", "accepted", "attempted", "residual"].map(String::from));
    h.extend((1..=m).map(|i| format!("eta_{i}")));
    h.extend(["eta_expectation", "lambda"].map(String::from));
    h
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// One row per (measure, node); multiplier cells are empty where a measure
/// has none. Floats use the shortest round-trip representation.
pub fn write_node_csv<W: Write>(out: W, x_names: &[String], m: usize, reports: &[SensitivityReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(node_csv_header(x_names, m)).map_err(csv_io)?;
    for r in reports {
        for n in &r.per_node {
            let mut row: Vec<String> = n.x.iter().map(|v| v.to_string()).collect();
            row.push(r.measure_label.clone());
            row.push(n.weight.to_string());
            row.push(n.premium.to_string());
            row.push(n.premium_se.to_string());
            row.extend(n.sensitivities.iter().map(|v| v.to_string()));
            row.push(n.kl.to_string());
            row.push(n.converged.to_string());
            row.push(n.accepted.to_string());
            row.push(n.attempted.to_string());
            row.push(n.residual.to_string());
            if n.eta.len() == m {
                row.extend(n.eta.iter().map(|v| v.to_string()));
                row.push(n.eta_expectation.to_string());
            } else {
                row.extend(std::iter::repeat_n(String::new(), m + 1));
            }
            row.push(opt(n.lambda));
            w.write_record(row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by `write_node_csv` back into per-measure reports,
/// measures in order of first appearance.
pub fn read_node_csv<R: std::io::Read>(input: R, n_permitted: usize, m: usize) -> Result<Vec<SensitivityReport>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers().map_err(csv_io)?.iter().map(String::from).collect();
    let expected_tail = node_csv_header(&[], m);
    if header.len() != n_permitted + expected_tail.len() || header[n_permitted..] != expected_tail[..] {
        return Err(Error::Parse { line: 1, msg: "unexpected node file header".into() });
    }
    let mut groups: Vec<(String, Vec<NodeResult>)> = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(csv_io)?;
        let cell = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> Result<f64> {
            cell(j)
                .parse::<f64>()
                .map_err(|_| Error::Parse { line, msg: format!("bad number `{}` in column {}", cell(j), header[j]) })
        };
        let count = |j: usize| -> Result<usize> {
            cell(j)
                .parse::<usize>()
                .map_err(|_| Error::Parse { line, msg: format!("bad count in column {}", header[j]) })
        };
        let mut c = 0;
        let x = (0..n_permitted).map(&num).collect::<Result<Vec<_>>>()?;
        c += n_permitted;
        let label = cell(c).to_string();
        let weight = num(c + 1)?;
        let premium = num(c + 2)?;
        let premium_se = num(c + 3)?;
        c += 4;
        let sensitivities = (0..m).map(|i| num(c + i)).collect::<Result<Vec<_>>>()?;
        c += m;
        let kl = num(c)?;
        let converged = match cell(c + 1) {
            "true" => true,
            "false" => false,
            other => return Err(Error::Parse { line, msg: format!("bad flag `{other}`") }),
        };
        let accepted = count(c + 2)?;
        let attempted = count(c + 3)?;
        let residual = num(c + 4)?;
        c += 5;
        let (eta, eta_expectation) = if cell(c).is_empty() {
            (vec![], f64::NAN)
        } else {
            ((0..m).map(|i| num(c + i)).collect::<Result<Vec<_>>>()?, num(c + m)?)
        };
        c += m + 1;
        let lambda = if cell(c).is_empty() { None } else { Some(num(c)?) };
        let node = NodeResult {
            x,
            weight,
            premium,
            premium_se,
            sensitivities,
            kl,
            converged,
            accepted,
            attempted,
            eta,
            eta_expectation,
            lambda,
            residual,
            log: vec![],
        };
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(node),
            None => groups.push((label, vec![node])),
        }
    }
    Ok(groups.into_iter().map(|(label, nodes)| SensitivityReport::from_nodes_lenient(&label, nodes, m)).collect())
}

pub fn summary_csv_header(m: usize) -> Vec<String> {
    let mut h = vec!["measure".to_string()];
    h.extend((1..=m).map(|i| format!("xi_{i}")));
    h.push("xi".into());
    h.push("coverage".into());
    h
}

/// One row per measure: measure, ξ₁..ξ_m, ξ, coverage.
pub fn write_summary_csv<W: Write>(out: W, m: usize, reports: &[SensitivityReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(summary_csv_header(m)).map_err(csv_io)?;
    for r in reports {
        let mut row = vec![r.measure_label.clone()];
        row.extend(r.xi_marginal.iter().map(|v| v.to_string()));
        row.push(r.xi_total.to_string());
        row.push(r.coverage.to_string());
        w.write_record(row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        k => Error::Parse { line: 0, msg: format!("{k:?}") },
    }
}
