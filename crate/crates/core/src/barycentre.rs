//! KL barycentres of measures given as weight vectors on one sample set.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::distortion::{MeasureWeights, Normalization};
use crate::error::{arg, Error, Result};
use crate::scenario::ConditionalSampleSet;
use crate::solver::{lambda_weights, SolverOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarycentreWeights {
    pub pi: Vec<f64>,
}

impl BarycentreWeights {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() || pi.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(arg("barycentre weights must lie in [0,1]"));
        }
        let s: f64 = pi.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(arg(format!("barycentre weights sum to {s}")));
        }
        Ok(BarycentreWeights { pi })
    }

    pub fn pair(pi1: f64) -> Result<Self> {
        Self::new(vec![pi1, 1.0 - pi1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarycentreResult {
    pub weights: MeasureWeights,
    pub lambda: f64,
    pub jensen_c: f64,
    /// D_KL(Q† ‖ Qᵢ) per member.
    pub member_kls: Vec<f64>,
    pub converged: bool,
}

fn check(members: &[MeasureWeights], pi: &BarycentreWeights) -> Result<usize> {
    if members.len() != pi.pi.len() || members.is_empty() {
        return Err(arg("one barycentre weight per member is required"));
    }
    let n = members[0].len();
    if members.iter().any(|m| m.len() != n) || n == 0 {
        return Err(arg("members must share one nonempty sample set"));
    }
    Ok(n)
}

/// Σᵢ πᵢ ln rᵢ per sample, −∞ where a member with πᵢ > 0 vanishes.
fn log_geometric(members: &[MeasureWeights], pi: &BarycentreWeights, n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n];
    for (m, &p) in members.iter().zip(&pi.pi) {
        if p == 0.0 {
            continue;
        }
        for (lj, &r) in l.iter_mut().zip(&m.r) {
            *lj += if r > 0.0 { p * r.ln() } else { f64::NEG_INFINITY };
        }
    }
    l
}

/// (max, ln mean exp(l − max)).
fn log_normalizer(l: &[f64]) -> Result<(f64, f64)> {
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Domain("barycentre normalizer is zero".into()));
    }
    let s: f64 = l.iter().map(|v| (v - max).exp()).sum::<f64>() / l.len() as f64;
    Ok((max, s.ln()))
}

/// r ∝ Πᵢ rᵢ^{πᵢ}, normalized to mean one.
pub fn pure_barycentre(members: &[MeasureWeights], pi: &BarycentreWeights) -> Result<MeasureWeights> {
    let n = check(members, pi)?;
    if let Some(k) = pi.pi.iter().position(|&p| p == 1.0) {
        return Ok(MeasureWeights { r: members[k].r.clone(), normalization: Normalization::Global });
    }
    let l = log_geometric(members, pi, n);
    let (max, _) = log_normalizer(&l)?;
    let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let mean = e.iter().sum::<f64>() / n as f64;
    Ok(MeasureWeights { r: e.iter().map(|v| v / mean).collect(), normalization: Normalization::Global })
}

/// c = −ln E[Πᵢ rᵢ^{πᵢ}].
pub fn jensen_constant(members: &[MeasureWeights], pi: &BarycentreWeights) -> Result<f64> {
    let n = check(members, pi)?;
    if members.iter().all(|m| m.r == members[0].r) {
        return Ok(0.0);
    }
    let l = log_geometric(members, pi, n);
    let (max, ls) = log_normalizer(&l)?;
    let c = -(max + ls);
    if !c.is_finite() {
        return Err(Error::Domain("non-finite barycentre normalizer".into()));
    }
    Ok(c.max(0.0))
}

/// (1/n) Σ r log(r / q).
pub fn kl_between(r: &[f64], q: &[f64]) -> f64 {
    let s: f64 = r
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum();
    (s / r.len() as f64).max(0.0)
}

/// Q† ∝ e^{−λY} Πᵢ rᵢ^{πᵢ} with λ restoring E^{Q†}[Y] = E^P[Y].
pub fn constrained_barycentre(
    members: &[MeasureWeights],
    pi: &BarycentreWeights,
    samples: &ConditionalSampleSet,
    opts: &SolverOptions,
) -> Result<BarycentreResult> {
    let base = pure_barycentre(members, pi)?;
    if base.len() != samples.len() {
        return Err(arg("members and samples differ in length"));
    }
    let jensen_c = jensen_constant(members, pi)?;
    let (lambda, r, converged) = lambda_weights(samples, &base, opts)?;
    let member_kls = members.iter().map(|m| kl_between(&r, &m.r)).collect();
    Ok(BarycentreResult {
        weights: MeasureWeights { r, normalization: Normalization::Global },
        lambda,
        jensen_c,
        member_kls,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSearch {
    pub pi: BarycentreWeights,
    pub objective: f64,
    /// Every evaluated (π₁, objective), in evaluation order; failures are +∞.
    pub trace: Vec<(f64, f64)>,
}

/// (|ξ₁(P) − ξ₁(Q)|/ξ₁(P) − |ξ₂(P) − ξ₂(Q)|/ξ₂(P))².
pub fn proportional_reduction_gap(xi_reference: &[f64], xi: &[f64]) -> f64 {
    let a = (xi_reference[0] - xi[0]).abs() / xi_reference[0];
    let b = (xi_reference[1] - xi[1]).abs() / xi_reference[1];
    (a - b).powi(2)
}

/// Golden-section search over π₁ ∈ [0,1] down to bracket width `width`.
pub fn optimal_weights<F>(xi_reference: &[f64], evaluator: F, width: f64) -> Result<WeightSearch>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    if xi_reference.len() != 2 {
        return Err(arg("weight selection is defined for two protected covariates"));
    }
    if xi_reference.iter().any(|&x| !(x > 0.0)) {
        return Err(arg("reference sensitivities must be positive"));
    }
    if !(width > 0.0) {
        return Err(arg("search width must be positive"));
    }
    let mut trace: Vec<(f64, f64)> = Vec::new();
    let mut eval = |p: f64| -> f64 {
        if let Some(&(_, v)) = trace.iter().find(|(q, _)| *q == p) {
            return v;
        }
        let v = match evaluator(p) {
            Ok(xi) if xi.len() == 2 => proportional_reduction_gap(xi_reference, &xi),
            Ok(_) => f64::INFINITY,
            Err(e) => {
                warn!("weight search: pi1 = {p} skipped: {e}");
                f64::INFINITY
            }
        };
        trace.push((p, v));
        v
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (eval(c), eval(d));
    while b - a > width {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d);
        }
    }
    let _ = (fc, fd);
    let (p, v) = trace
        .iter()
        .cloned()
        .filter(|(_, v)| v.is_finite())
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or_else(|| Error::Domain("every weight evaluation failed".into()))?;
    Ok(WeightSearch { pi: BarycentreWeights::pair(p)?, objective: v, trace })
}
