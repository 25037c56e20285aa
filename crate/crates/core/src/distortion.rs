//! Distortion weight functions γ and distortion premia E[Y γ(U) dQ/dP].

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::scenario::{sorted_order, ConditionalSampleSet};
use crate::tilt::BinScheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionWeight {
    Mean,
    /// γ(u) = 1 + c/(1−α)·1{u > α}.
    EsLoad {
        alpha: f64,
        c: f64,
    },
    /// γ(u) = levels[k] with k the number of breakpoints strictly below u.
    StepTable {
        breakpoints: Vec<f64>,
        levels: Vec<f64>,
    },
}

impl DistortionWeight {
    pub fn es_load(alpha: f64, c: f64) -> Result<Self> {
        let w = DistortionWeight::EsLoad { alpha, c };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistortionWeight::Mean => Ok(()),
            DistortionWeight::EsLoad { alpha, c } => {
                if !(0.0..1.0).contains(alpha) || !(*c >= 0.0) {
                    return Err(arg("es_load needs alpha in [0,1) and c >= 0"));
                }
                Ok(())
            }
            DistortionWeight::StepTable { breakpoints, levels } => {
                if levels.len() != breakpoints.len() + 1 {
                    return Err(arg("step table needs one more level than breakpoints"));
                }
                if levels.iter().any(|&l| !(l >= 0.0)) {
                    return Err(arg("step table levels must be nonnegative"));
                }
                if breakpoints.windows(2).any(|w| !(w[0] < w[1]))
                    || breakpoints.iter().any(|b| !(0.0..=1.0).contains(b))
                {
                    return Err(arg("step table breakpoints must increase within [0,1]"));
                }
                Ok(())
            }
        }
    }

    pub fn is_mean(&self) -> bool {
        matches!(self, DistortionWeight::Mean)
    }

    /// ∫₀¹ γ(u) du.
    pub fn total_mass(&self) -> f64 {
        match self {
            DistortionWeight::Mean => 1.0,
            DistortionWeight::EsLoad { c, .. } => 1.0 + c,
            DistortionWeight::StepTable { breakpoints, levels } => {
                let mut edges = vec![0.0];
                edges.extend_from_slice(breakpoints);
                edges.push(1.0);
                levels.iter().enumerate().map(|(k, l)| l * (edges[k + 1] - edges[k])).sum()
            }
        }
    }

    pub fn gamma(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(arg(format!("u = {u} outside [0,1]")));
        }
        Ok(self.gamma_unchecked(u))
    }

    pub(crate) fn gamma_unchecked(&self, u: f64) -> f64 {
        match self {
            DistortionWeight::Mean => 1.0,
            DistortionWeight::EsLoad { alpha, c } => {
                if u > *alpha {
                    1.0 + c / (1.0 - alpha)
                } else {
                    1.0
                }
            }
            DistortionWeight::StepTable { breakpoints, levels } => levels[breakpoints.partition_point(|&b| b < u)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Normalization {
    PerBin(BinScheme),
    Global,
}

/// Per-sample values of dQ/dP.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureWeights {
    pub r: Vec<f64>,
    pub normalization: Normalization,
}

impl MeasureWeights {
    pub fn ones(n: usize) -> Self {
        MeasureWeights { r: vec![1.0; n], normalization: Normalization::Global }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// `(1/n) Σ r_j y_j γ(u_j)`.
pub fn premium(samples: &ConditionalSampleSet, w: &DistortionWeight, mw: Option<&MeasureWeights>) -> Result<f64> {
    premium_of(&samples.y, &samples.u, w, mw.map(|m| m.r.as_slice()))
}

pub fn premium_of(y: &[f64], u: &[f64], w: &DistortionWeight, r: Option<&[f64]>) -> Result<f64> {
    if u.len() != y.len() || r.is_some_and(|r| r.len() != y.len()) {
        return Err(arg("premium: length mismatch"));
    }
    let s: f64 = match r {
        None => y.iter().zip(u).map(|(y, u)| y * w.gamma_unchecked(*u)).sum(),
        Some(r) => y.iter().zip(u).zip(r).map(|((y, u), r)| r * y * w.gamma_unchecked(*u)).sum(),
    };
    Ok(s / y.len() as f64)
}

/// Ranks of y under the weighted empirical law: along the stable sort order,
/// ũ_k = (Σ_{l<k} r_l + r_k/2)/n.
pub fn weighted_ranks(y: &[f64], r: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mut u = vec![0.0; y.len()];
    let mut acc = 0.0;
    for j in sorted_order(y) {
        u[j] = ((acc + 0.5 * r[j]) / n).clamp(0.0, 1.0);
        acc += r[j];
    }
    u
}

/// Premium under a measure that need not keep U uniform: ranks are
/// recomputed under the weights before applying γ.
pub fn reranked_premium(samples: &ConditionalSampleSet, w: &DistortionWeight, mw: &MeasureWeights) -> Result<f64> {
    if mw.len() != samples.len() {
        return Err(arg("reranked_premium: length mismatch"));
    }
    let u = weighted_ranks(&samples.y, &mw.r);
    premium_of(&samples.y, &u, w, Some(&mw.r))
}
