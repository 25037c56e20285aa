//! Lagrange multipliers of the KL projections: damped Newton on the cgf
//! system, univariate bracketed roots, and replicate averaging.

use log::debug;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortion::{MeasureWeights, Normalization};
use crate::error::{arg, Divergence, Error, Result};
use crate::scenario::ConditionalSampleSet;
use crate::sensitivity::PhiMatrix;
use crate::stats;
use crate::tilt::{kl_of, BinScheme, TiltEval, TiltParameters, TiltSystem, TiltedMeasure, MAX_EXPONENT_SPREAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Sup-norm of the scaled residuals.
    pub tol: f64,
    pub max_iter: usize,
    /// Line-search contraction factor.
    pub damping: f64,
    pub min_step: f64,
    /// Box |η| ≤ eta_bound on the multipliers.
    pub eta_bound: f64,
    pub replications: usize,
    /// Replicates whose residual exceeds this are rejected.
    pub tol_accept: f64,
    /// Extra Newton steps taken after the tolerance is met.
    pub polish_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            max_iter: 100,
            damping: 0.5,
            min_step: 2f64.powi(-20),
            eta_bound: 50.0,
            replications: 50,
            tol_accept: 1e-4,
            polish_steps: 2,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.eta_bound > 0.0) || self.replications == 0 {
            return Err(arg("solver options need tol > 0, eta_bound > 0, replications >= 1"));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) || !(self.min_step > 0.0) {
            return Err(arg("damping must lie in (0,1) and min_step be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Solution {
    theta: Vec<f64>,
    eval: TiltEval,
    iterations: usize,
    converged: bool,
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves C d = g on the range of C; a residual component along the null
/// space means no θ can remove it.
fn newton_direction(ev: &TiltEval, k: usize, tol: f64, theta: &[f64]) -> Result<Vec<f64>> {
    let c = DMatrix::from_row_slice(k, k, &ev.cov);
    let eig = SymmetricEigen::new(c);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l));
    let thr = 1e-12 * lmax.max(1e-300);
    let mut d = vec![0.0; k];
    for (idx, &l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(idx);
        let proj: f64 = (0..k).map(|p| v[p] * ev.g[p]).sum();
        if l > thr {
            for p in 0..k {
                d[p] += proj / l * v[p];
            }
        } else if proj.abs() > tol {
            let s = proj.signum();
            return Err(Error::Divergence(Divergence {
                eta: theta.to_vec(),
                direction: (0..k).map(|p| s * v[p]).collect(),
                reason: "constraints are linearly dependent and inconsistent".into(),
            }));
        }
    }
    Ok(d)
}

/// Largest t ≤ 1 keeping θ + t·d inside the box |θ_p / scale_p| ≤ bound.
fn box_step(theta: &[f64], d: &[f64], scale: &[f64], bound: f64) -> f64 {
    let mut t = 1.0f64;
    for p in 0..theta.len() {
        let lim = bound * scale[p];
        if d[p] > 0.0 {
            t = t.min((lim - theta[p]) / d[p]);
        } else if d[p] < 0.0 {
            t = t.min((-lim - theta[p]) / d[p]);
        }
    }
    t.max(0.0)
}

fn raw_direction(d: &[f64], scale: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = d.iter().zip(scale).map(|(d, s)| d / s).collect();
    let n = norm2(&raw).max(f64::MIN_POSITIVE);
    raw.iter().map(|v| v / n).collect()
}

/// Damped Newton from `theta0` on a system whose features are divided by
/// `scale`; η = θ / scale.
fn newton(sys: &TiltSystem, scale: &[f64], theta0: Vec<f64>, opts: &SolverOptions) -> Result<Solution> {
    let k = sys.k;
    let mut theta = theta0;
    let mut ev = sys.evaluate(&theta)?;
    let mut polish = 0usize;
    let mut converged = false;
    for it in 0..opts.max_iter {
        let res = sup(&ev.g);
        if res <= opts.tol {
            converged = true;
            if polish >= opts.polish_steps || res == 0.0 {
                return Ok(Solution { theta, eval: ev, iterations: it, converged });
            }
            polish += 1;
        }
        let d = match newton_direction(&ev, k, opts.tol, &theta) {
            Ok(d) => d,
            Err(e) if converged => {
                debug!("polish stopped: {e}");
                return Ok(Solution { theta, eval: ev, iterations: it, converged });
            }
            Err(Error::Divergence(mut dv)) => {
                dv.eta = theta.iter().zip(scale).map(|(t, s)| t / s).collect();
                dv.direction = raw_direction(&dv.direction, scale);
                return Err(Error::Divergence(dv));
            }
            Err(e) => return Err(e),
        };
        let tmax = box_step(&theta, &d, scale, opts.eta_bound);
        if tmax < opts.min_step {
            return Err(Error::Divergence(Divergence {
                eta: theta.iter().zip(scale).map(|(t, s)| t / s).collect(),
                direction: raw_direction(&d, scale),
                reason: format!("multipliers reached the bound {}", opts.eta_bound),
            }));
        }
        let current = norm2(&ev.g);
        let mut t = tmax;
        let mut accepted = None;
        let mut spread_failures = 0usize;
        while t >= opts.min_step {
            let trial: Vec<f64> = theta.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            match sys.evaluate(&trial) {
                Ok(tev) if tev.max_spread <= MAX_EXPONENT_SPREAD && norm2(&tev.g) < current => {
                    accepted = Some((trial, tev));
                    break;
                }
                Ok(tev) if tev.max_spread > MAX_EXPONENT_SPREAD => spread_failures += 1,
                Ok(_) => {}
                Err(Error::Divergence(_)) => spread_failures += 1,
                Err(e) => return Err(e),
            }
            t *= opts.damping;
        }
        match accepted {
            Some((th, tev)) => {
                theta = th;
                ev = tev;
            }
            None if converged => return Ok(Solution { theta, eval: ev, iterations: it, converged }),
            None if spread_failures > 0 => {
                return Err(Error::Divergence(Divergence {
                    eta: theta.iter().zip(scale).map(|(t, s)| t / s).collect(),
                    direction: raw_direction(&d, scale),
                    reason: format!("tilt exponent spread exceeds {MAX_EXPONENT_SPREAD} along the Newton direction"),
                }))
            }
            None => {
                debug!("line search stalled at residual {res:.3e}");
                return Ok(Solution { theta, eval: ev, iterations: it, converged: false });
            }
        }
    }
    let converged = sup(&ev.g) <= opts.tol;
    Ok(Solution { theta, eval: ev, iterations: opts.max_iter, converged })
}

/// Bracketed safeguarded Newton for a single decreasing residual g(θ).
fn univariate(sys: &TiltSystem, scale: f64, opts: &SolverOptions) -> Result<Solution> {
    let f = |t: f64| -> Result<TiltEval> {
        let ev = sys.evaluate(&[t])?;
        if ev.max_spread > MAX_EXPONENT_SPREAD {
            return Err(Error::Divergence(Divergence {
                eta: vec![t / scale],
                direction: vec![t.signum()],
                reason: format!("tilt exponent spread exceeds {MAX_EXPONENT_SPREAD} before a sign change"),
            }));
        }
        Ok(ev)
    };
    let ev0 = f(0.0)?;
    let g0 = ev0.g[0];
    if g0 == 0.0 {
        return Ok(Solution { theta: vec![0.0], eval: ev0, iterations: 0, converged: true });
    }
    let dir = g0.signum();
    let limit = opts.eta_bound * scale;
    let (mut lo, mut hi) = (0.0f64, f64::NAN);
    let mut best = (0.0f64, ev0);
    let mut step = 1.0f64;
    let mut iterations = 0;
    while hi.is_nan() {
        iterations += 1;
        let t = (dir * step).clamp(-limit, limit);
        let ev = f(t)?;
        if ev.g[0] * dir <= 0.0 {
            hi = t;
            if ev.g[0].abs() < best.1.g[0].abs() {
                best = (t, ev);
            }
        } else {
            lo = t;
            best = (t, ev);
            if t.abs() >= limit {
                return Err(Error::Divergence(Divergence {
                    eta: vec![t / scale],
                    direction: vec![dir],
                    reason: format!("no sign change of the residual within |eta| <= {}", opts.eta_bound),
                }));
            }
            step *= 2.0;
        }
    }
    // g is decreasing: g(a) > 0 ≥ g(b) with a < b.
    let (mut a, mut b) = if dir > 0.0 { (lo, hi) } else { (hi, lo) };
    let (mut t, mut ev) = best;
    let mut polish = 0;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let g = ev.g[0];
        if g.abs() <= opts.tol {
            converged = true;
            if polish >= opts.polish_steps || g == 0.0 {
                break;
            }
            polish += 1;
        }
        if g > 0.0 {
            a = a.max(t);
        } else {
            b = b.min(t);
        }
        let slope = ev.cov[0];
        let newton = t + g / slope;
        let next = if slope > 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
        if next == t {
            break;
        }
        let nev = f(next)?;
        if converged && nev.g[0].abs() >= g.abs() {
            break;
        }
        t = next;
        ev = nev;
    }
    let converged = converged || ev.g[0].abs() <= opts.tol;
    Ok(Solution { theta: vec![t], eval: ev, iterations, converged })
}

/// Scaled constraint features for Φ columns `cols` and optionally Y − Ȳ.
struct Features {
    system: TiltSystem,
    scale: Vec<f64>,
    /// Phi column of each feature (`None` for the expectation constraint).
    source: Vec<Option<usize>>,
}

fn features(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    cols: &[usize],
    expectation: bool,
    bins: &BinScheme,
    opts: &SolverOptions,
) -> Result<Features> {
    let n = samples.len();
    if phi.n() != n {
        return Err(arg("solver: phi and samples differ in length"));
    }
    let mut source: Vec<Option<usize>> = Vec::new();
    let mut scale = Vec::new();
    for &i in cols {
        if i >= phi.m {
            return Err(arg(format!("protected index {i} out of range")));
        }
        let col = phi.column(i);
        let sd = stats::sd(&col);
        if sd > 0.0 {
            source.push(Some(i));
            scale.push(sd);
        } else if stats::mean(&col).abs() > opts.tol {
            return Err(Error::Divergence(Divergence {
                eta: vec![],
                direction: vec![],
                reason: format!("phi column {} is a nonzero constant", i + 1),
            }));
        }
    }
    let ybar = samples.mean_y();
    if expectation {
        let sd = stats::sd(&samples.y);
        if sd > 0.0 {
            source.push(None);
            scale.push(sd);
        }
    }
    let k = source.len();
    let labels = bins.assign(&samples.u)?;
    if k == 0 {
        let system = TiltSystem::new(vec![0.0; n], 1, &labels, bins.n_bins, None)?;
        return Ok(Features { system, scale: vec![1.0], source: vec![] });
    }
    let mut w = Vec::with_capacity(n * k);
    for j in 0..n {
        for (src, s) in source.iter().zip(&scale) {
            w.push(match src {
                Some(i) => phi.get(j, *i) / s,
                None => (samples.y[j] - ybar) / s,
            });
        }
    }
    let system = TiltSystem::new(w, k, &labels, bins.n_bins, None)?;
    Ok(Features { system, scale, source })
}

fn measure_from(f: &Features, sol: Solution, m: usize, bins: &BinScheme) -> Result<TiltedMeasure> {
    let mut params = TiltParameters::zero(m);
    for ((src, th), s) in f.source.iter().zip(&sol.theta).zip(&f.scale) {
        match src {
            Some(i) => params.eta[*i] = th / s,
            None => params.eta_expectation = th / s,
        }
    }
    let r = f.system.weights(&sol.eval);
    let kl = kl_of(&r)?;
    let residuals = if f.source.is_empty() { vec![] } else { sol.eval.g.clone() };
    Ok(TiltedMeasure {
        params,
        weights: MeasureWeights { r, normalization: normalization(bins) },
        bins: *bins,
        kl,
        residuals,
        converged: sol.converged,
        iterations: sol.iterations,
    })
}

fn normalization(bins: &BinScheme) -> Normalization {
    if bins.n_bins == 1 {
        Normalization::Global
    } else {
        Normalization::PerBin(*bins)
    }
}

/// KL projection under E^Q[Φᵢ] = 0 for `cols` and, optionally,
/// E^Q[Y] = E^P[Y]; `init` gives the starting multipliers.
pub fn solve_constrained(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    cols: &[usize],
    expectation: bool,
    bins: &BinScheme,
    opts: &SolverOptions,
    init: Option<&TiltParameters>,
) -> Result<TiltedMeasure> {
    opts.validate()?;
    let f = features(samples, phi, cols, expectation, bins, opts)?;
    if f.source.is_empty() {
        let ev = f.system.evaluate(&[0.0])?;
        let sol = Solution { theta: vec![], eval: ev, iterations: 0, converged: true };
        return measure_from(&f, sol, phi.m, bins);
    }
    let theta0: Vec<f64> = match init {
        None => vec![0.0; f.source.len()],
        Some(p) => f
            .source
            .iter()
            .zip(&f.scale)
            .map(|(src, s)| match src {
                Some(i) => p.eta[*i] * s,
                None => p.eta_expectation * s,
            })
            .collect(),
    };
    let sol = if f.source.len() == 1 && init.is_none() {
        univariate(&f.system, f.scale[0], opts)?
    } else {
        newton(&f.system, &f.scale, theta0, opts)?
    };
    measure_from(&f, sol, phi.m, bins)
}

/// Q*: every sensitivity zero and the conditional mean preserved.
pub fn solve_insensitive(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    bins: &BinScheme,
    opts: &SolverOptions,
) -> Result<TiltedMeasure> {
    let cols: Vec<usize> = (0..phi.m).collect();
    solve_constrained(samples, phi, &cols, true, bins, opts, None)
}

/// Q* with the expectation multiplier pinned to zero.
pub fn solve_insensitive_no_expectation(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    bins: &BinScheme,
    opts: &SolverOptions,
) -> Result<TiltedMeasure> {
    let cols: Vec<usize> = (0..phi.m).collect();
    opts.validate()?;
    let f = features(samples, phi, &cols, false, bins, opts)?;
    if f.source.is_empty() {
        return solve_constrained(samples, phi, &cols, false, bins, opts, None);
    }
    let sol = newton(&f.system, &f.scale, vec![0.0; f.source.len()], opts)?;
    measure_from(&f, sol, phi.m, bins)
}

/// Qᵢ: only the i-th sensitivity is removed.
pub fn solve_marginal(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    i: usize,
    bins: &BinScheme,
    opts: &SolverOptions,
) -> Result<TiltedMeasure> {
    solve_constrained(samples, phi, &[i], false, bins, opts, None)
}

/// λ with E[r e^{−λY} (Y − Ȳ)] = 0, Ȳ the unweighted sample mean.
pub fn solve_lambda(samples: &ConditionalSampleSet, base: &MeasureWeights, opts: &SolverOptions) -> Result<f64> {
    Ok(lambda_weights(samples, base, opts)?.0)
}

/// λ and the globally normalized weights r e^{−λY} / E[r e^{−λY}].
pub(crate) fn lambda_weights(
    samples: &ConditionalSampleSet,
    base: &MeasureWeights,
    opts: &SolverOptions,
) -> Result<(f64, Vec<f64>, bool)> {
    opts.validate()?;
    let n = samples.len();
    if base.len() != n {
        return Err(arg("solve_lambda: weights and samples differ in length"));
    }
    let sd = stats::sd(&samples.y);
    let ybar = samples.mean_y();
    let labels = vec![0u32; n];
    if !(sd > 0.0) {
        let sys = TiltSystem::new(vec![0.0; n], 1, &labels, 1, Some(&base.r))?;
        let ev = sys.evaluate(&[0.0])?;
        return Ok((0.0, sys.weights(&ev), true));
    }
    let w: Vec<f64> = samples.y.iter().map(|y| (y - ybar) / sd).collect();
    let sys = TiltSystem::new(w, 1, &labels, 1, Some(&base.r))?;
    let sol = univariate(&sys, sd, opts)?;
    Ok((sol.theta[0] / sd, sys.weights(&sol.eval), sol.converged))
}

/// Outputs of one replicate solve.
#[derive(Clone, Debug)]
pub struct ReplicateOutput {
    pub measure: Option<TiltedMeasure>,
    pub premium: f64,
    pub sensitivities: Vec<f64>,
    pub kl: f64,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    /// Measure of the first accepted replicate.
    pub measure: Option<TiltedMeasure>,
    pub accepted: usize,
    pub attempted: usize,
    pub premium: f64,
    pub premium_se: f64,
    pub sensitivities: Vec<f64>,
    pub kl: f64,
    /// One line per rejected replicate.
    pub log: Vec<String>,
}

/// Runs `solve_fn` once per seed and averages outputs over the replicates
/// that converged with residual ≤ `tol_accept`.
pub fn replicate<F>(solve_fn: F, opts: &SolverOptions, seeds: &[u64]) -> Result<SolveReport>
where
    F: Fn(u64) -> Result<ReplicateOutput> + Sync,
{
    if seeds.is_empty() {
        return Err(arg("replicate needs at least one seed"));
    }
    let outs: Vec<Result<ReplicateOutput>> = seeds.par_iter().map(|&s| solve_fn(s)).collect();
    let mut acc: Vec<ReplicateOutput> = Vec::new();
    let mut log = Vec::new();
    for (s, o) in seeds.iter().zip(outs) {
        match o {
            Ok(o) if o.converged && o.residual <= opts.tol_accept => acc.push(o),
            Ok(o) => log.push(format!("seed {s}: rejected, converged={} residual={:.3e}", o.converged, o.residual)),
            Err(e) => log.push(format!("seed {s}: {e}")),
        }
    }
    if acc.is_empty() {
        return Err(Error::NoAccepted { attempted: seeds.len(), log: log.join("; ") });
    }
    let m = acc[0].sensitivities.len();
    let premia: Vec<f64> = acc.iter().map(|o| o.premium).collect();
    let sensitivities =
        (0..m).map(|i| stats::mean(&acc.iter().map(|o| o.sensitivities[i]).collect::<Vec<_>>())).collect();
    let kl = stats::mean(&acc.iter().map(|o| o.kl).collect::<Vec<_>>());
    Ok(SolveReport {
        measure: acc.iter_mut().find_map(|o| o.measure.take()),
        accepted: acc.len(),
        attempted: seeds.len(),
        premium: stats::mean(&premia),
        premium_se: if premia.len() > 1 { stats::std_error(&premia) } else { 0.0 },
        sensitivities,
        kl,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(phi: Vec<f64>, y: Vec<f64>) -> (ConditionalSampleSet, PhiMatrix) {
        let n = y.len();
        let u = crate::scenario::empirical_ranks(&(0..n).map(|j| j as f64).collect::<Vec<_>>());
        let s = ConditionalSampleSet { x: vec![], m: 1, d: phi.clone(), y, u, seed: 0 };
        (s, PhiMatrix::from_values(phi, 1).unwrap())
    }

    #[test]
    fn two_point_marginal_root() {
        let (s, phi) = set(vec![2.0, -1.0], vec![0.0, 0.0]);
        let q = solve_marginal(&s, &phi, 0, &BinScheme::global(), &SolverOptions::default()).unwrap();
        assert!((q.params.eta[0] - 2f64.ln() / 3.0).abs() < 1e-12);
        assert!(q.converged);
    }

    #[test]
    fn symmetric_two_point_is_zero() {
        let (s, phi) = set(vec![1.0, -1.0], vec![0.0, 0.0]);
        let q = solve_marginal(&s, &phi, 0, &BinScheme::global(), &SolverOptions::default()).unwrap();
        assert_eq!(q.params.eta[0], 0.0);
    }

    #[test]
    fn lambda_two_point() {
        let (s, _) = set(vec![0.0, 0.0], vec![0.0, 2.0]);
        let base = MeasureWeights { r: vec![0.5, 1.5], normalization: Normalization::Global };
        let l = solve_lambda(&s, &base, &SolverOptions::default()).unwrap();
        assert!((l - 3f64.ln() / 2.0).abs() < 1e-12);
        let l0 = solve_lambda(&s, &MeasureWeights::ones(2), &SolverOptions::default()).unwrap();
        assert_eq!(l0, 0.0);
    }

    #[test]
    fn constant_nonzero_phi_diverges() {
        let (s, phi) = set(vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]);
        let e = solve_marginal(&s, &phi, 0, &BinScheme::global(), &SolverOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Divergence(_)));
    }

    #[test]
    fn one_sided_phi_diverges() {
        let (s, phi) = set(vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 2.0]);
        let e = solve_marginal(&s, &phi, 0, &BinScheme::global(), &SolverOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Divergence(_)));
    }
}
