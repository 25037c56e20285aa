//! Exponentially tilted change-of-measure weights normalized within rank
//! bins, i.e. dQ/dP = e^{−η·Φ − η_{m+1} Y} / C_{x,u}, and KL divergence.

use serde::{Deserialize, Serialize};

use crate::distortion::{MeasureWeights, Normalization};
use crate::error::{arg, Divergence, Error, Result};
use crate::scenario::ConditionalSampleSet;
use crate::sensitivity::PhiMatrix;

/// Largest spread of tilt exponents tolerated inside one normalization
/// group; beyond it the smallest weights leave the f64 range.
pub const MAX_EXPONENT_SPREAD: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinScheme {
    pub n_bins: usize,
}

impl Default for BinScheme {
    fn default() -> Self {
        BinScheme { n_bins: 100 }
    }
}

impl BinScheme {
    pub fn new(n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(arg("need at least one bin"));
        }
        Ok(BinScheme { n_bins })
    }

    pub fn global() -> Self {
        BinScheme { n_bins: 1 }
    }

    pub fn bin(&self, u: f64) -> usize {
        let b = (u * self.n_bins as f64).floor();
        if b < 0.0 {
            0
        } else {
            (b as usize).min(self.n_bins - 1)
        }
    }

    /// Bin label per sample; errors if a bin is empty.
    pub fn assign(&self, u: &[f64]) -> Result<Vec<u32>> {
        let labels: Vec<u32> = u.iter().map(|&v| self.bin(v) as u32).collect();
        let mut counts = vec![0usize; self.n_bins];
        for &b in &labels {
            counts[b as usize] += 1;
        }
        if let Some(bin) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyBin { bin, n_bins: self.n_bins });
        }
        Ok(labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct TiltParameters {
    pub eta: Vec<f64>,
    pub eta_expectation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl TiltParameters {
    pub fn zero(m: usize) -> Self {
        TiltParameters { eta: vec![0.0; m], eta_expectation: 0.0, lambda: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiltedMeasure {
    pub params: TiltParameters,
    pub weights: MeasureWeights,
    pub bins: BinScheme,
    pub kl: f64,
    /// Constraint residuals on the scaled (unit standard deviation) scale.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl TiltedMeasure {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()))
    }
}

/// Constraint features arranged by normalization group, the workhorse of
/// the multiplier solvers. Weights are `r_j ∝ base_j · exp(−θ·W_j)`
/// normalized within each group.
#[derive(Clone, Debug)]
pub struct TiltSystem {
    pub k: usize,
    n: usize,
    /// Features, row-major `n × k`, rows grouped by bin.
    w: Vec<f64>,
    /// ln of base weights in grouped order (`None` means all zero).
    base_log: Option<Vec<f64>>,
    /// Original sample index of each grouped row.
    perm: Vec<usize>,
    /// Group boundaries into the grouped rows.
    starts: Vec<usize>,
}

/// Weighted moments of the features at one θ.
#[derive(Clone, Debug)]
pub struct TiltEval {
    /// `(1/n) Σ r_j W_j`.
    pub g: Vec<f64>,
    /// Mass-weighted average of the within-group covariances, row-major `k × k`.
    pub cov: Vec<f64>,
    /// Weights in grouped order.
    r: Vec<f64>,
    pub max_spread: f64,
}

impl TiltSystem {
    /// `features` is row-major `n × k`; `labels` the group of each sample.
    pub fn new(features: Vec<f64>, k: usize, labels: &[u32], n_groups: usize, base: Option<&[f64]>) -> Result<Self> {
        let n = labels.len();
        if k == 0 || features.len() != n * k || base.is_some_and(|b| b.len() != n) {
            return Err(arg("tilt system: dimension mismatch"));
        }
        let mut counts = vec![0usize; n_groups];
        for &b in labels {
            counts[b as usize] += 1;
        }
        if let Some(bin) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyBin { bin, n_bins: n_groups });
        }
        let mut starts = Vec::with_capacity(n_groups + 1);
        let mut acc = 0;
        for c in &counts {
            starts.push(acc);
            acc += c;
        }
        starts.push(n);
        let mut next = starts[..n_groups].to_vec();
        let mut perm = vec![0usize; n];
        for (j, &b) in labels.iter().enumerate() {
            perm[next[b as usize]] = j;
            next[b as usize] += 1;
        }
        let mut w = Vec::with_capacity(n * k);
        for &j in &perm {
            w.extend_from_slice(&features[j * k..(j + 1) * k]);
        }
        let base_log = match base {
            None => None,
            Some(b) => {
                if b.iter().any(|&v| !(v >= 0.0)) {
                    return Err(arg("base weights must be nonnegative"));
                }
                Some(perm.iter().map(|&j| b[j].ln()).collect())
            }
        };
        Ok(TiltSystem { k, n, w, base_log, perm, starts })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_groups(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<TiltEval> {
        let k = self.k;
        let n = self.n as f64;
        let mut g = vec![0.0; k];
        let mut cov = vec![0.0; k * k];
        let mut r = vec![0.0; self.n];
        let mut max_spread = 0.0f64;
        let mut s1 = vec![0.0; k];
        let mut s2 = vec![0.0; k * k];
        for b in 0..self.n_groups() {
            let (lo, hi) = (self.starts[b], self.starts[b + 1]);
            let mut amax = f64::NEG_INFINITY;
            let mut amin = f64::INFINITY;
            for j in lo..hi {
                let row = &self.w[j * k..(j + 1) * k];
                let mut a = -dot(theta, row);
                if let Some(bl) = &self.base_log {
                    a += bl[j];
                }
                r[j] = a;
                if a > amax {
                    amax = a;
                }
                if a < amin && a.is_finite() {
                    amin = a;
                }
            }
            if !amax.is_finite() {
                return Err(Error::Divergence(Divergence {
                    eta: theta.to_vec(),
                    direction: vec![0.0; k],
                    reason: format!("normalization group {b} carries no mass"),
                }));
            }
            max_spread = max_spread.max(amax - amin);
            let mut s0 = 0.0;
            s1.iter_mut().for_each(|v| *v = 0.0);
            s2.iter_mut().for_each(|v| *v = 0.0);
            for j in lo..hi {
                let e = (r[j] - amax).exp();
                r[j] = e;
                s0 += e;
                let row = &self.w[j * k..(j + 1) * k];
                for p in 0..k {
                    let ep = e * row[p];
                    s1[p] += ep;
                    for q in p..k {
                        s2[p * k + q] += ep * row[q];
                    }
                }
            }
            let nb = (hi - lo) as f64;
            let scale = nb / s0;
            for v in &mut r[lo..hi] {
                *v *= scale;
            }
            let mass = nb / n;
            for p in 0..k {
                let mp = s1[p] / s0;
                g[p] += mass * mp;
                for q in p..k {
                    let c = s2[p * k + q] / s0 - mp * s1[q] / s0;
                    cov[p * k + q] += mass * c;
                }
            }
        }
        for p in 0..k {
            for q in 0..p {
                cov[p * k + q] = cov[q * k + p];
            }
        }
        Ok(TiltEval { g, cov, r, max_spread })
    }

    /// Weights of an evaluation, in original sample order.
    pub fn weights(&self, ev: &TiltEval) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (pos, &j) in self.perm.iter().enumerate() {
            out[j] = ev.r[pos];
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn spread_error(theta: &[f64], spread: f64) -> Error {
    let norm = dot(theta, theta).sqrt().max(f64::MIN_POSITIVE);
    Error::Divergence(Divergence {
        eta: theta.to_vec(),
        direction: theta.iter().map(|t| t / norm).collect(),
        reason: format!("tilt exponent spread {spread:.1} exceeds {MAX_EXPONENT_SPREAD}"),
    })
}

fn tilt_features(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    params: &TiltParameters,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if phi.n() != samples.len() || params.eta.len() != phi.m {
        return Err(arg("compute_weights: dimension mismatch"));
    }
    let m = phi.m;
    let mut feats = Vec::with_capacity(samples.len() * (m + 1));
    for j in 0..samples.len() {
        feats.extend_from_slice(&phi.values[j * m..(j + 1) * m]);
        feats.push(samples.y[j]);
    }
    let mut theta = params.eta.clone();
    theta.push(params.eta_expectation);
    Ok((feats, theta))
}

fn weights_with(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    params: &TiltParameters,
    labels: &[u32],
    n_groups: usize,
) -> Result<Vec<f64>> {
    let (feats, theta) = tilt_features(samples, phi, params)?;
    let sys = TiltSystem::new(feats, phi.m + 1, labels, n_groups, None)?;
    let ev = sys.evaluate(&theta)?;
    if ev.max_spread > MAX_EXPONENT_SPREAD {
        return Err(spread_error(&theta, ev.max_spread));
    }
    Ok(sys.weights(&ev))
}

/// r_j = raw_j / mean(raw over bin(u_j)), raw_j = exp(−η·Φ_j − η_{m+1} y_j).
pub fn compute_weights(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    params: &TiltParameters,
    bins: &BinScheme,
) -> Result<MeasureWeights> {
    let labels = bins.assign(&samples.u)?;
    let r = weights_with(samples, phi, params, &labels, bins.n_bins)?;
    Ok(MeasureWeights { r, normalization: Normalization::PerBin(*bins) })
}

/// r_j = raw_j / mean(raw).
pub fn compute_weights_global(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    params: &TiltParameters,
) -> Result<MeasureWeights> {
    let labels = vec![0u32; samples.len()];
    let r = weights_with(samples, phi, params, &labels, 1)?;
    Ok(MeasureWeights { r, normalization: Normalization::Global })
}

/// (1/n) Σ r log r with 0·log 0 = 0.
pub fn kl_divergence(mw: &MeasureWeights) -> Result<f64> {
    kl_of(&mw.r)
}

pub fn kl_of(r: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for &v in r {
        if !(v >= 0.0) {
            return Err(arg("negative or NaN weight"));
        }
        if v > 0.0 {
            s += v * v.ln();
        }
    }
    Ok((s / r.len() as f64).max(0.0))
}

/// Mean of r inside each bin.
pub fn bin_means(r: &[f64], u: &[f64], bins: &BinScheme) -> Vec<f64> {
    let mut s = vec![0.0; bins.n_bins];
    let mut c = vec![0usize; bins.n_bins];
    for (&rv, &uv) in r.iter().zip(u) {
        let b = bins.bin(uv);
        s[b] += rv;
        c[b] += 1;
    }
    s.iter().zip(&c).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect()
}

/// sup_t |Σ_{u_j ≤ t} r_j/n − t| over sample points.
pub fn weighted_ks_uniform(u: &[f64], r: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
    let total: f64 = r.iter().sum();
    let mut acc = 0.0;
    let mut d = 0.0f64;
    for &j in &idx {
        d = d.max((acc / total - u[j]).abs());
        acc += r[j];
        d = d.max((acc / total - u[j]).abs());
    }
    d
}
