//! Per-node evaluation of several pricing measures on shared replicate
//! sample sets, and their aggregation into sensitivity reports.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycentre::{constrained_barycentre, pure_barycentre, BarycentreWeights};
use crate::distortion::{premium, reranked_premium, weighted_ranks, DistortionWeight, MeasureWeights};
use crate::error::{arg, Error, Result};
use crate::metrics::{NodeResult, SensitivityReport, XGrid};
use crate::rng::sub_seed;
use crate::scenario::{ConditionalSampleSet, RankMode, Scenario};
use crate::sensitivity::PhiMatrix;
use crate::solver::{solve_constrained, ReplicateOutput, SolverOptions};
use crate::stats;
use crate::tilt::{compute_weights, BinScheme, TiltParameters, TiltedMeasure};

/// A pricing measure; covariate indices are zero-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureSpec {
    Reference,
    /// Kill the sensitivities in `subset`; `expectation` also preserves E[Y|x].
    Insensitive {
        subset: Vec<usize>,
        expectation: bool,
    },
    Marginal {
        i: usize,
    },
    Barycentre {
        pi: Vec<f64>,
    },
    ConstrainedBarycentre {
        pi: Vec<f64>,
    },
}

impl MeasureSpec {
    pub fn insensitive(m: usize) -> Self {
        MeasureSpec::Insensitive { subset: (0..m).collect(), expectation: true }
    }

    pub fn label(&self, m: usize) -> String {
        let pis = |pi: &[f64]| pi.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",");
        match self {
            MeasureSpec::Reference => "P".into(),
            MeasureSpec::Insensitive { subset, expectation } => {
                let base = if subset.len() == m {
                    "Q*".to_string()
                } else {
                    format!("Q*_{}", subset.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(","))
                };
                if *expectation {
                    base
                } else {
                    format!("{base}_noexp")
                }
            }
            MeasureSpec::Marginal { i } => format!("Q_{}", i + 1),
            MeasureSpec::Barycentre { pi } => format!("Qb({})", pis(pi)),
            MeasureSpec::ConstrainedBarycentre { pi } => format!("Qdagger({})", pis(pi)),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        match self {
            MeasureSpec::Reference => Ok(()),
            MeasureSpec::Insensitive { subset, .. } => {
                if subset.is_empty() || subset.iter().any(|&i| i >= m) {
                    return Err(arg(format!("insensitive subset must name covariates 1..={m}")));
                }
                Ok(())
            }
            MeasureSpec::Marginal { i } => {
                if *i >= m {
                    return Err(arg(format!("marginal index must lie in 1..={m}")));
                }
                Ok(())
            }
            MeasureSpec::Barycentre { pi } | MeasureSpec::ConstrainedBarycentre { pi } => {
                if pi.len() != m {
                    return Err(arg(format!("barycentre needs {m} weights")));
                }
                BarycentreWeights::new(pi.clone()).map(|_| ())
            }
        }
    }

    fn needs_marginals(&self) -> bool {
        matches!(self, MeasureSpec::Barycentre { .. } | MeasureSpec::ConstrainedBarycentre { .. })
    }
}

/// Parses `P`, `insensitive[:i,j][:noexp]`, `marginal:i`, `barycentre:p1,p2`,
/// `constrained_barycentre:p1,p2` (covariate indices one-based).
impl FromStr for MeasureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let head = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let ints = |t: &str| -> Result<Vec<usize>> {
            t.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&i| i >= 1)
                        .map(|i| i - 1)
                        .ok_or_else(|| Error::Config(format!("bad covariate index `{v}` in `{s}`")))
                })
                .collect()
        };
        let floats = |t: &str| -> Result<Vec<f64>> {
            t.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad weight `{v}` in `{s}`"))))
                .collect()
        };
        match (head, rest.as_slice()) {
            ("P" | "p" | "reference", []) => Ok(MeasureSpec::Reference),
            ("insensitive", r) => {
                let noexp = r.last() == Some(&"noexp");
                let r = if noexp { &r[..r.len() - 1] } else { r };
                match r {
                    [] => Ok(MeasureSpec::Insensitive { subset: vec![], expectation: !noexp }),
                    [idx] => Ok(MeasureSpec::Insensitive { subset: ints(idx)?, expectation: !noexp }),
                    _ => Err(Error::Config(format!("cannot parse measure `{s}`"))),
                }
            }
            ("marginal", [i]) => {
                let v = ints(i)?;
                if v.len() != 1 {
                    return Err(Error::Config(format!("marginal takes one index: `{s}`")));
                }
                Ok(MeasureSpec::Marginal { i: v[0] })
            }
            ("barycentre", [p]) => Ok(MeasureSpec::Barycentre { pi: floats(p)? }),
            ("constrained_barycentre" | "dagger", [p]) => Ok(MeasureSpec::ConstrainedBarycentre { pi: floats(p)? }),
            _ => Err(Error::Config(format!("cannot parse measure `{s}`"))),
        }
    }
}

impl MeasureSpec {
    /// Fills an empty insensitive subset with every covariate.
    pub fn resolve(self, m: usize) -> Self {
        match self {
            MeasureSpec::Insensitive { subset, expectation } if subset.is_empty() => {
                MeasureSpec::Insensitive { subset: (0..m).collect(), expectation }
            }
            s => s,
        }
    }
}

impl fmt::Display for MeasureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub n: usize,
    pub bins: usize,
    pub seed: u64,
    pub rank_mode: RankMode,
    pub distortion: DistortionWeight,
    pub solver: SolverOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            n: 100_000,
            bins: 100,
            seed: 1,
            rank_mode: RankMode::Empirical,
            distortion: DistortionWeight::EsLoad { alpha: 0.9, c: 0.2 },
            solver: SolverOptions::default(),
        }
    }
}

impl EngineConfig {
    /// Mean premia use a single normalization group (γ ≡ 1 makes the
    /// conditioning on U vacuous).
    pub fn bin_scheme(&self) -> Result<BinScheme> {
        if self.distortion.is_mean() {
            Ok(BinScheme::global())
        } else {
            BinScheme::new(self.bins)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(arg("need n >= 2"));
        }
        self.distortion.validate()?;
        self.solver.validate()?;
        self.bin_scheme().map(|_| ())
    }

    pub fn replicate_seed(&self, node: usize, rep: usize) -> u64 {
        sub_seed(self.seed, &[node as u64, rep as u64])
    }
}

/// One replicate's data: samples and Φ at P-ranks.
pub struct Replicate {
    pub samples: ConditionalSampleSet,
    pub phi: PhiMatrix,
}

pub fn draw_replicate(scenario: &Scenario, x: &[f64], cfg: &EngineConfig, seed: u64) -> Result<Replicate> {
    let samples = scenario.sample_conditional(x, cfg.n, seed, cfg.rank_mode)?;
    let phi = PhiMatrix::new(&samples, &scenario.model, &cfg.distortion)?;
    Ok(Replicate { samples, phi })
}

fn tilted_output(rep: &Replicate, q: &TiltedMeasure, w: &DistortionWeight) -> Result<ReplicateOutput> {
    Ok(ReplicateOutput {
        measure: None,
        premium: premium(&rep.samples, w, Some(&q.weights))?,
        sensitivities: rep.phi.weighted_means(Some(&q.weights.r)),
        kl: q.kl,
        residual: q.max_residual(),
        converged: q.converged,
    })
}

/// Premium and sensitivities of a measure that does not keep U uniform:
/// both use the ranks of Y under the measure.
fn reranked_output(
    rep: &Replicate,
    scenario: &Scenario,
    weights: &MeasureWeights,
    w: &DistortionWeight,
) -> Result<(f64, Vec<f64>)> {
    let u = weighted_ranks(&rep.samples.y, &weights.r);
    let phi = PhiMatrix::with_ranks(&rep.samples, &u, &scenario.model, w)?;
    Ok((reranked_premium(&rep.samples, w, weights)?, phi.weighted_means(Some(&weights.r))))
}

fn tag_params(q: &TiltedMeasure) -> (Vec<f64>, f64) {
    (q.params.eta.clone(), q.params.eta_expectation)
}

/// Everything computed for one measure on one replicate.
pub struct MeasureOutcome {
    pub output: Result<ReplicateOutput>,
    pub eta: Vec<f64>,
    pub eta_expectation: f64,
    pub lambda: Option<f64>,
}

fn outcome(output: Result<ReplicateOutput>) -> MeasureOutcome {
    MeasureOutcome { output, eta: vec![], eta_expectation: 0.0, lambda: None }
}

/// Relative expectation residual |E^Q[Y] − Ȳ| / sd(Y).
fn expectation_residual(samples: &ConditionalSampleSet, r: &[f64]) -> f64 {
    let ybar = samples.mean_y();
    let sd = stats::sd(&samples.y);
    let eq = stats::weighted_mean(r, &samples.y);
    if sd > 0.0 {
        ((eq - ybar) / sd).abs()
    } else {
        0.0
    }
}

/// Evaluates every measure on one replicate; marginal measures are solved
/// once and shared by the barycentres.
pub fn evaluate_replicate(
    scenario: &Scenario,
    rep: &Replicate,
    measures: &[MeasureSpec],
    cfg: &EngineConfig,
) -> Result<Vec<MeasureOutcome>> {
    let m = scenario.m();
    let bins = cfg.bin_scheme()?;
    let w = &cfg.distortion;
    let opts = &cfg.solver;
    let marginals: Option<Vec<Result<TiltedMeasure>>> = if measures.iter().any(MeasureSpec::needs_marginals) {
        Some((0..m).map(|i| solve_constrained(&rep.samples, &rep.phi, &[i], false, &bins, opts, None)).collect())
    } else {
        None
    };
    let members = || -> Result<(Vec<MeasureWeights>, f64)> {
        let ms = marginals.as_ref().unwrap();
        let mut out = Vec::with_capacity(m);
        let mut worst = 0.0f64;
        for (i, q) in ms.iter().enumerate() {
            match q {
                Ok(q) if q.converged => {
                    worst = worst.max(q.max_residual());
                    out.push(q.weights.clone());
                }
                Ok(q) => return Err(Error::NotConverged { iterations: q.iterations, residual: q.max_residual() }),
                Err(e) => return Err(Error::Domain(format!("marginal measure {} failed: {e}", i + 1))),
            }
        }
        Ok((out, worst))
    };
    let mut out = Vec::with_capacity(measures.len());
    for spec in measures {
        let o = match spec {
            MeasureSpec::Reference => MeasureOutcome {
                output: Ok(ReplicateOutput {
                    measure: None,
                    premium: premium(&rep.samples, w, None)?,
                    sensitivities: rep.phi.weighted_means(None),
                    kl: 0.0,
                    residual: 0.0,
                    converged: true,
                }),
                eta: vec![0.0; m],
                eta_expectation: 0.0,
                lambda: None,
            },
            MeasureSpec::Insensitive { subset, expectation } => {
                match solve_constrained(&rep.samples, &rep.phi, subset, *expectation, &bins, opts, None) {
                    Ok(q) => {
                        let (eta, ee) = tag_params(&q);
                        MeasureOutcome { output: tilted_output(rep, &q, w), eta, eta_expectation: ee, lambda: None }
                    }
                    Err(e) => outcome(Err(e)),
                }
            }
            MeasureSpec::Marginal { i } => match &marginals {
                Some(ms) => match &ms[*i] {
                    Ok(q) => MeasureOutcome {
                        output: tilted_output(rep, q, w),
                        eta: q.params.eta.clone(),
                        eta_expectation: 0.0,
                        lambda: None,
                    },
                    Err(e) => outcome(Err(Error::Domain(e.to_string()))),
                },
                None => match solve_constrained(&rep.samples, &rep.phi, &[*i], false, &bins, opts, None) {
                    Ok(q) => MeasureOutcome {
                        output: tilted_output(rep, &q, w),
                        eta: q.params.eta.clone(),
                        eta_expectation: 0.0,
                        lambda: None,
                    },
                    Err(e) => outcome(Err(e)),
                },
            },
            MeasureSpec::Barycentre { pi } => {
                let res = (|| {
                    let (mem, worst) = members()?;
                    let pi = BarycentreWeights::new(pi.clone())?;
                    let b = pure_barycentre(&mem, &pi)?;
                    let (prem, sens) = reranked_output(rep, scenario, &b, w)?;
                    Ok(ReplicateOutput {
                        measure: None,
                        premium: prem,
                        sensitivities: sens,
                        kl: crate::tilt::kl_of(&b.r)?,
                        residual: worst,
                        converged: true,
                    })
                })();
                outcome(res)
            }
            MeasureSpec::ConstrainedBarycentre { pi } => {
                let mut lambda = None;
                let res = (|| {
                    let (mem, worst) = members()?;
                    let pi = BarycentreWeights::new(pi.clone())?;
                    let b = constrained_barycentre(&mem, &pi, &rep.samples, opts)?;
                    lambda = Some(b.lambda);
                    let (prem, sens) = reranked_output(rep, scenario, &b.weights, w)?;
                    Ok(ReplicateOutput {
                        measure: None,
                        premium: prem,
                        sensitivities: sens,
                        kl: crate::tilt::kl_of(&b.weights.r)?,
                        residual: worst.max(expectation_residual(&rep.samples, &b.weights.r)),
                        converged: b.converged,
                    })
                })();
                MeasureOutcome { output: res, eta: vec![], eta_expectation: 0.0, lambda }
            }
        };
        out.push(o);
    }
    Ok(out)
}

/// Accepts replicates that converged with residual ≤ tol_accept and
/// averages their outputs.
pub fn aggregate_node(
    x: &[f64],
    weight: f64,
    outcomes: Vec<MeasureOutcome>,
    opts: &SolverOptions,
    m: usize,
) -> NodeResult {
    let attempted = outcomes.len();
    let mut acc: Vec<ReplicateOutput> = Vec::new();
    let mut first: Option<(Vec<f64>, f64, Option<f64>)> = None;
    let mut log = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o.output {
            Ok(out) if out.converged && out.residual <= opts.tol_accept => {
                if first.is_none() {
                    first = Some((o.eta, o.eta_expectation, o.lambda));
                }
                acc.push(out);
            }
            Ok(out) => {
                log.push(format!("rep {r}: rejected (converged={}, residual={:.3e})", out.converged, out.residual))
            }
            Err(e) => log.push(format!("rep {r}: {e}")),
        }
    }
    let accepted = acc.len();
    let mean_of = |f: &dyn Fn(&ReplicateOutput) -> f64| -> f64 {
        if acc.is_empty() {
            f64::NAN
        } else {
            stats::mean(&acc.iter().map(f).collect::<Vec<_>>())
        }
    };
    let premia: Vec<f64> = acc.iter().map(|o| o.premium).collect();
    let (eta, eta_expectation, lambda) = first.unwrap_or((vec![], f64::NAN, None));
    NodeResult {
        x: x.to_vec(),
        weight,
        premium: mean_of(&|o| o.premium),
        premium_se: if premia.len() > 1 { stats::std_error(&premia) } else { 0.0 },
        sensitivities: (0..m).map(|i| mean_of(&|o| o.sensitivities[i])).collect(),
        kl: mean_of(&|o| o.kl),
        converged: accepted > 0,
        accepted,
        attempted,
        eta,
        eta_expectation,
        lambda,
        residual: acc.iter().fold(0.0f64, |a, o| a.max(o.residual)),
        log,
    }
}

/// Results of every measure at one node, replicates drawn from sub-seeds
/// of (node index, replicate index).
pub fn evaluate_node(
    scenario: &Scenario,
    x: &[f64],
    node: usize,
    weight: f64,
    measures: &[MeasureSpec],
    cfg: &EngineConfig,
) -> Result<Vec<NodeResult>> {
    let m = scenario.m();
    let mut per_measure: Vec<Vec<MeasureOutcome>> = (0..measures.len()).map(|_| Vec::new()).collect();
    for r in 0..cfg.solver.replications {
        let rep = draw_replicate(scenario, x, cfg, cfg.replicate_seed(node, r))?;
        for (k, o) in evaluate_replicate(scenario, &rep, measures, cfg)?.into_iter().enumerate() {
            per_measure[k].push(o);
        }
    }
    Ok(per_measure.into_iter().map(|o| aggregate_node(x, weight, o, &cfg.solver, m)).collect())
}

/// Evaluates every measure across the grid, nodes in parallel.
pub fn run_grid(
    scenario: &Scenario,
    grid: &XGrid,
    measures: &[MeasureSpec],
    cfg: &EngineConfig,
) -> Result<Vec<SensitivityReport>> {
    cfg.validate()?;
    grid.validate()?;
    let m = scenario.m();
    for s in measures {
        s.validate(m)?;
    }
    let per_node: Vec<Vec<NodeResult>> = (0..grid.len())
        .into_par_iter()
        .map(|k| evaluate_node(scenario, &grid.nodes[k], k, grid.weights[k], measures, cfg))
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(measures.len());
    for (k, spec) in measures.iter().enumerate() {
        let nodes: Vec<NodeResult> = per_node.iter().map(|v| v[k].clone()).collect();
        reports.push(SensitivityReport::from_nodes_lenient(&spec.label(m), nodes, m));
    }
    Ok(reports)
}

/// Constrained barycentres for many weight vectors on fixed replicates:
/// marginal multipliers are solved once and the sample sets regenerated
/// from their seeds on each evaluation.
pub struct BarycentreSweep<'a> {
    scenario: &'a Scenario,
    grid: &'a XGrid,
    cfg: &'a EngineConfig,
    /// Per node, per replicate: marginal multipliers or `None` when rejected.
    members: Vec<Vec<Option<Vec<TiltParameters>>>>,
}

impl<'a> BarycentreSweep<'a> {
    pub fn new(scenario: &'a Scenario, grid: &'a XGrid, cfg: &'a EngineConfig) -> Result<Self> {
        cfg.validate()?;
        grid.validate()?;
        let m = scenario.m();
        let bins = cfg.bin_scheme()?;
        let members = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                (0..cfg.solver.replications)
                    .map(|r| {
                        let rep = draw_replicate(scenario, &grid.nodes[k], cfg, cfg.replicate_seed(k, r))?;
                        let mut ps = Vec::with_capacity(m);
                        for i in 0..m {
                            match solve_constrained(&rep.samples, &rep.phi, &[i], false, &bins, &cfg.solver, None) {
                                Ok(q) if q.converged && q.max_residual() <= cfg.solver.tol_accept => ps.push(q.params),
                                _ => return Ok(None),
                            }
                        }
                        Ok(Some(ps))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BarycentreSweep { scenario, grid, cfg, members })
    }

    pub fn evaluate(&self, pi: &[f64]) -> Result<SensitivityReport> {
        let m = self.scenario.m();
        let spec = MeasureSpec::ConstrainedBarycentre { pi: pi.to_vec() };
        spec.validate(m)?;
        let bw = BarycentreWeights::new(pi.to_vec())?;
        let bins = self.cfg.bin_scheme()?;
        let w = &self.cfg.distortion;
        let nodes: Vec<NodeResult> = (0..self.grid.len())
            .into_par_iter()
            .map(|k| {
                let x = &self.grid.nodes[k];
                let outcomes: Vec<MeasureOutcome> = self.members[k]
                    .iter()
                    .enumerate()
                    .map(|(r, ps)| {
                        let res = (|| {
                            let ps = ps.as_ref().ok_or_else(|| Error::Domain("marginal measures rejected".into()))?;
                            let rep = draw_replicate(self.scenario, x, self.cfg, self.cfg.replicate_seed(k, r))?;
                            let mem = ps
                                .iter()
                                .map(|p| compute_weights(&rep.samples, &rep.phi, p, &bins))
                                .collect::<Result<Vec<_>>>()?;
                            let b = constrained_barycentre(&mem, &bw, &rep.samples, &self.cfg.solver)?;
                            let (prem, sens) = reranked_output(&rep, self.scenario, &b.weights, w)?;
                            Ok((
                                ReplicateOutput {
                                    measure: None,
                                    premium: prem,
                                    sensitivities: sens,
                                    kl: crate::tilt::kl_of(&b.weights.r)?,
                                    residual: expectation_residual(&rep.samples, &b.weights.r),
                                    converged: b.converged,
                                },
                                b.lambda,
                            ))
                        })();
                        match res {
                            Ok((o, l)) => {
                                MeasureOutcome { output: Ok(o), eta: vec![], eta_expectation: 0.0, lambda: Some(l) }
                            }
                            Err(e) => outcome(Err(e)),
                        }
                    })
                    .collect();
                aggregate_node(x, self.grid.weights[k], outcomes, &self.cfg.solver, m)
            })
            .collect();
        SensitivityReport::from_nodes(&spec.label(m), nodes, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_parsing() {
        assert_eq!("P".parse::<MeasureSpec>().unwrap(), MeasureSpec::Reference);
        assert_eq!(
            "insensitive".parse::<MeasureSpec>().unwrap().resolve(2),
            MeasureSpec::Insensitive { subset: vec![0, 1], expectation: true }
        );
        assert_eq!(
            "insensitive:2:noexp".parse::<MeasureSpec>().unwrap(),
            MeasureSpec::Insensitive { subset: vec![1], expectation: false }
        );
        assert_eq!("marginal:1".parse::<MeasureSpec>().unwrap(), MeasureSpec::Marginal { i: 0 });
        assert_eq!(
            "constrained_barycentre:0.5,0.5".parse::<MeasureSpec>().unwrap(),
            MeasureSpec::ConstrainedBarycentre { pi: vec![0.5, 0.5] }
        );
        assert!("marginal:0".parse::<MeasureSpec>().is_err());
        assert!("bogus".parse::<MeasureSpec>().is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(MeasureSpec::insensitive(2).label(2), "Q*");
        assert_eq!(MeasureSpec::Insensitive { subset: vec![0], expectation: true }.label(2), "Q*_1");
        assert_eq!(MeasureSpec::Marginal { i: 1 }.label(2), "Q_2");
        assert_eq!(MeasureSpec::ConstrainedBarycentre { pi: vec![0.5, 0.5] }.label(2), "Qdagger(0.5,0.5)");
    }
}
