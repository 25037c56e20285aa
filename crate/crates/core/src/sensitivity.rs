//! Φᵢ(x, d, u) = dᵢ ∂ᵢh(x, d) γ(u), sensitivities E^Q[Φᵢ], the direct
//! perturbation check and the kernel mollifier for categorical covariates.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::distortion::{DistortionWeight, MeasureWeights};
use crate::error::{arg, Result};
use crate::rng::rng;
use crate::scenario::{empirical_ranks, ConditionalSampleSet, LossModel, ProtectedAtom, RankMode, Scenario};
use crate::special::{norm_cdf, norm_pdf};
use crate::stats;

/// Row-major `n × m` matrix of Φ values on a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiMatrix {
    pub m: usize,
    pub values: Vec<f64>,
    pub model: Option<LossModel>,
    pub weight: Option<DistortionWeight>,
}

impl PhiMatrix {
    pub fn new(samples: &ConditionalSampleSet, model: &LossModel, w: &DistortionWeight) -> Result<Self> {
        Self::with_ranks(samples, &samples.u, model, w)
    }

    /// Φ evaluated at ranks `u` instead of the sample set's own.
    pub fn with_ranks(
        samples: &ConditionalSampleSet,
        u: &[f64],
        model: &LossModel,
        w: &DistortionWeight,
    ) -> Result<Self> {
        let m = samples.m;
        if model.protected_coeffs.len() != m || u.len() != samples.len() {
            return Err(arg("phi: dimension mismatch"));
        }
        let mut values = Vec::with_capacity(samples.len() * m);
        for (j, &uj) in u.iter().enumerate() {
            let g = w.gamma_unchecked(uj);
            for (i, di) in samples.d_row(j).iter().enumerate() {
                values.push(di * model.dh(i) * g);
            }
        }
        Ok(PhiMatrix { m, values, model: Some(model.clone()), weight: Some(w.clone()) })
    }

    /// Wraps precomputed values (row-major `n × m`).
    pub fn from_values(values: Vec<f64>, m: usize) -> Result<Self> {
        if m == 0 || !values.len().is_multiple_of(m) {
            return Err(arg("phi: values not divisible into rows"));
        }
        Ok(PhiMatrix { m, values, model: None, weight: None })
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.m.max(1)
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.m + i]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n()).map(|j| self.get(j, i)).collect()
    }

    /// `(1/n) Σ r_j Φᵢ,j` for every i.
    pub fn weighted_means(&self, r: Option<&[f64]>) -> Vec<f64> {
        let mut s = vec![0.0; self.m];
        for j in 0..self.n() {
            let rj = r.map_or(1.0, |r| r[j]);
            for (i, si) in s.iter_mut().enumerate() {
                *si += rj * self.values[j * self.m + i];
            }
        }
        let n = self.n() as f64;
        s.iter().map(|v| v / n).collect()
    }
}

pub fn phi(model: &LossModel, d: &[f64], u: f64, i: usize, w: &DistortionWeight) -> Result<f64> {
    if i >= model.protected_coeffs.len() || d.len() != model.protected_coeffs.len() {
        return Err(arg(format!("protected index {i} out of range")));
    }
    Ok(d[i] * model.dh(i) * w.gamma(u)?)
}

/// `(1/n) Σ r_j Φᵢ,j`.
pub fn sensitivity(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    i: usize,
    mw: Option<&MeasureWeights>,
) -> Result<f64> {
    if phi.n() != samples.len() || mw.is_some_and(|m| m.len() != samples.len()) {
        return Err(arg("sensitivity: length mismatch"));
    }
    if i >= phi.m {
        return Err(arg(format!("protected index {i} out of range")));
    }
    let s: f64 = (0..phi.n()).map(|j| mw.map_or(1.0, |m| m.r[j]) * phi.get(j, i)).sum();
    Ok(s / phi.n() as f64)
}

/// Monte Carlo standard error of the unweighted sensitivity estimator.
pub fn sensitivity_std_error(phi: &PhiMatrix, i: usize) -> f64 {
    stats::std_error(&phi.column(i))
}

/// Premium of h(x, d with dᵢ(1+ε)) + noise given X = x, ranks recomputed
/// for the perturbed loss. The same seed gives common random numbers.
pub fn perturb_and_reprice(
    scenario: &Scenario,
    x: &[f64],
    i: usize,
    eps: f64,
    n: usize,
    seed: u64,
    w: &DistortionWeight,
    mode: RankMode,
) -> Result<f64> {
    if eps == -1.0 {
        return Err(arg("epsilon = -1 removes the covariate"));
    }
    let post = scenario.posterior_protected(x)?;
    let s = scenario.sample_from_posterior(x, &post, n, seed, RankMode::Empirical, Some((i, 1.0 + eps)))?;
    let u = match mode {
        RankMode::Empirical => s.u.clone(),
        RankMode::Analytic => {
            let scaled: Vec<ProtectedAtom> = post
                .iter()
                .map(|a| {
                    let mut d = a.d.clone();
                    d[i] *= 1.0 + eps;
                    ProtectedAtom { d, prob: a.prob }
                })
                .collect();
            let sd = scenario.model.noise.sd();
            let mu = scenario.model.noise.mean();
            s.y.iter()
                .map(|&y| {
                    scaled
                        .iter()
                        .map(|a| a.prob * norm_cdf((y - scenario.model.h(x, &a.d) - mu) / sd))
                        .sum::<f64>()
                        .clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
                })
                .collect()
        }
    };
    crate::distortion::premium_of(&s.y, &u, w, None)
}

/// Central difference `(f(ε) − f(−ε)) / 2ε` with common random numbers.
pub fn finite_difference_sensitivity(
    scenario: &Scenario,
    x: &[f64],
    i: usize,
    eps: f64,
    n: usize,
    seed: u64,
    w: &DistortionWeight,
) -> Result<f64> {
    let up = perturb_and_reprice(scenario, x, i, eps, n, seed, w, RankMode::Empirical)?;
    let dn = perturb_and_reprice(scenario, x, i, -eps, n, seed, w, RankMode::Empirical)?;
    Ok((up - dn) / (2.0 * eps))
}

/// Gaussian-kernel smoothing of a categorical law with atoms `t_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mollifier {
    pub atoms: Vec<f64>,
    pub probs: Vec<f64>,
    pub tau: f64,
}

pub fn mollify(atoms: &[f64], probs: &[f64], tau: f64) -> Result<Mollifier> {
    if !(tau > 0.0) {
        return Err(arg("bandwidth must be positive"));
    }
    if atoms.is_empty() || atoms.len() != probs.len() {
        return Err(arg("mollifier needs matching atoms and probabilities"));
    }
    if ((probs.iter().sum::<f64>()) - 1.0).abs() > 1e-12 || probs.iter().any(|&p| p < 0.0) {
        return Err(arg("mollifier probabilities must form a distribution"));
    }
    let mut idx: Vec<usize> = (0..atoms.len()).collect();
    idx.sort_by(|&a, &b| atoms[a].total_cmp(&atoms[b]));
    Ok(Mollifier {
        atoms: idx.iter().map(|&k| atoms[k]).collect(),
        probs: idx.iter().map(|&k| probs[k]).collect(),
        tau,
    })
}

impl Mollifier {
    /// Σ p_k φ((t − t_k)/τ)/τ.
    pub fn density(&self, t: f64) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(a, p)| p * norm_pdf((t - a) / self.tau) / self.tau).sum()
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(a, p)| p * norm_cdf((t - a) / self.tau)).sum()
    }

    /// Inverse of the smoothed cdf by safeguarded Newton.
    pub fn quantile(&self, v: f64) -> f64 {
        let span = 12.0 * self.tau;
        let (mut lo, mut hi) = (self.atoms[0] - span, *self.atoms.last().unwrap() + span);
        let mut t = self.discrete_quantile(v);
        for _ in 0..200 {
            let f = self.cdf(t) - v;
            if f.abs() < 1e-15 {
                break;
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let dens = self.density(t);
            let step = t - f / dens;
            t = if dens > 0.0 && step > lo && step < hi { step } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-14 * (1.0 + t.abs()) {
                break;
            }
        }
        t
    }

    /// Quantile of the underlying categorical law.
    pub fn discrete_quantile(&self, v: f64) -> f64 {
        let mut acc = 0.0;
        for (a, p) in self.atoms.iter().zip(&self.probs) {
            acc += p;
            if v <= acc {
                return *a;
            }
        }
        *self.atoms.last().unwrap()
    }

    /// Right-closed threshold intervals with thresholds s_k = (t_k + t_{k+1})/2:
    /// t ≤ s₁ ↦ t₁, s_{k−1} < t ≤ s_k ↦ t_k, t > s_{K−1} ↦ t_K.
    pub fn snap(&self, t: f64) -> f64 {
        let k = self.atoms.windows(2).take_while(|w| 0.5 * (w[0] + w[1]) < t).count();
        self.atoms[k]
    }
}

/// Comonotone pairs (D, D̂): one uniform drives both the category and the
/// smoothed value.
pub fn mollifier_sample(m: &Mollifier, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let v: f64 = r.gen_range(f64::EPSILON..1.0);
            (m.discrete_quantile(v), m.quantile(v))
        })
        .collect()
}

/// h̄(x, d) with dᵢ replaced by the category whose interval contains t.
pub fn step_extension(model: &LossModel, x: &[f64], d: &[f64], i: usize, m: &Mollifier, t: f64) -> f64 {
    let mut dd = d.to_vec();
    dd[i] = m.snap(t);
    model.h(x, &dd)
}

/// E[D̂ᵢ ∂ᵢh γ(U)] with D̂ᵢ comonotone to Dᵢ given X = x and Y = h̄(x, D, D̂ᵢ) + noise.
pub fn mollified_sensitivity(
    scenario: &Scenario,
    x: &[f64],
    i: usize,
    tau: f64,
    n: usize,
    seed: u64,
    w: &DistortionWeight,
) -> Result<f64> {
    let m = scenario.m();
    if i >= m {
        return Err(arg(format!("protected index {i} out of range")));
    }
    let mut post = scenario.posterior_protected(x)?;
    post.sort_by(|a, b| a.d[i].total_cmp(&b.d[i]));
    let mut levels: Vec<f64> = Vec::new();
    let mut probs: Vec<f64> = Vec::new();
    for a in &post {
        match levels.last() {
            Some(&l) if l == a.d[i] => *probs.last_mut().unwrap() += a.prob,
            _ => {
                levels.push(a.d[i]);
                probs.push(a.prob);
            }
        }
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let moll = mollify(&levels, &probs, tau)?;
    let mut cum = Vec::with_capacity(post.len());
    let mut acc = 0.0;
    for a in &post {
        acc += a.prob;
        cum.push(acc);
    }
    let (mu, sd) = (scenario.model.noise.mean(), scenario.model.noise.sd());
    let mut r = rng(seed);
    let mut y = Vec::with_capacity(n);
    let mut dhat = Vec::with_capacity(n);
    for _ in 0..n {
        let v: f64 = r.gen_range(f64::EPSILON..1.0) * acc;
        let k = cum.partition_point(|&c| c < v).min(post.len() - 1);
        let z: f64 = r.sample(StandardNormal);
        let t = moll.quantile(v / acc);
        y.push(step_extension(&scenario.model, x, &post[k].d, i, &moll, t) + mu + sd * z);
        dhat.push(t);
    }
    let u = empirical_ranks(&y);
    let beta = scenario.model.dh(i);
    Ok(dhat.iter().zip(&u).map(|(t, u)| t * beta * w.gamma_unchecked(*u)).sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_examples() {
        let sc = Scenario::single_binary();
        let w = DistortionWeight::EsLoad { alpha: 0.9, c: 0.2 };
        assert!((phi(&sc.model, &[1.0], 0.95, 0, &w).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(phi(&sc.model, &[0.0], 0.95, 0, &w).unwrap(), 0.0);
        assert!(phi(&sc.model, &[1.0], 0.95, 1, &w).is_err());
        let cs = Scenario::case_study();
        assert_eq!(phi(&cs.model, &[-1.0, 1.0], 0.5, 0, &DistortionWeight::Mean).unwrap(), -5.0);
    }

    #[test]
    fn snap_is_right_closed() {
        let m = mollify(&[-1.0, 0.0, 1.0], &[0.3, 0.3, 0.4], 0.1).unwrap();
        assert_eq!(m.snap(-5.0), -1.0);
        assert_eq!(m.snap(-1.0), -1.0);
        assert_eq!(m.snap(-0.5), -1.0);
        assert_eq!(m.snap(-0.499), 0.0);
        assert_eq!(m.snap(0.0), 0.0);
        assert_eq!(m.snap(0.5), 0.0);
        assert_eq!(m.snap(0.501), 1.0);
        assert_eq!(m.snap(7.0), 1.0);
    }

    #[test]
    fn mollifier_rejects_bad_bandwidth() {
        assert!(mollify(&[0.0, 1.0], &[0.5, 0.5], 0.0).is_err());
    }
}
