//! Generative loss models: covariate laws, the aggregation function, exact
//! conditional laws of the protected covariates, and conditional sampling.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg, Error, Result};
use crate::rng::{rng, Rng};
use crate::special::{norm_cdf, norm_pdf, norm_quantile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Law {
    Categorical {
        values: Vec<f64>,
        probs: Vec<f64>,
    },
    /// `mu` and `s` are the mean and standard deviation of `ln X`.
    Lognormal {
        mu: f64,
        s: f64,
    },
    /// Exponential with the given rate, truncated to `[0, upper]`.
    TruncatedExponential {
        rate: f64,
        upper: f64,
    },
    TruncatedNormal {
        mean: f64,
        sd: f64,
        lower: f64,
        upper: f64,
    },
}

impl Law {
    pub fn validate(&self) -> Result<()> {
        match self {
            Law::Categorical { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::Config("categorical law needs matching values/probs".into()));
                }
                if probs.iter().any(|&p| !(p >= 0.0)) {
                    return Err(Error::Config("categorical probabilities must be nonnegative".into()));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!("categorical probabilities sum to {s}")));
                }
                for (i, a) in values.iter().enumerate() {
                    if values[..i].contains(a) {
                        return Err(Error::Config(format!("duplicate categorical value {a}")));
                    }
                }
            }
            Law::Lognormal { mu, s } => {
                if !mu.is_finite() || !(*s > 0.0) {
                    return Err(Error::Config("lognormal needs finite mu and s > 0".into()));
                }
            }
            Law::TruncatedExponential { rate, upper } => {
                if !(*rate > 0.0) || !(*upper > 0.0) {
                    return Err(Error::Config("truncated exponential needs rate > 0 and upper > 0".into()));
                }
            }
            Law::TruncatedNormal { mean, sd, lower, upper } => {
                if !mean.is_finite() || !(*sd > 0.0) || !(lower < upper) {
                    return Err(Error::Config("truncated normal needs sd > 0 and lower < upper".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Law::Categorical { .. })
    }

    /// Probability mass (categorical) or density (continuous) at `x`.
    pub fn density(&self, x: f64) -> f64 {
        match self {
            Law::Categorical { values, probs } => values.iter().position(|&v| v == x).map_or(0.0, |k| probs[k]),
            Law::Lognormal { mu, s } => {
                if x <= 0.0 {
                    0.0
                } else {
                    norm_pdf((x.ln() - mu) / s) / (s * x)
                }
            }
            Law::TruncatedExponential { rate, upper } => {
                if x < 0.0 || x > *upper {
                    0.0
                } else {
                    rate * (-rate * x).exp() / (-(-rate * upper).exp_m1())
                }
            }
            Law::TruncatedNormal { mean, sd, lower, upper } => {
                if x < *lower || x > *upper {
                    0.0
                } else {
                    let z = norm_cdf((upper - mean) / sd) - norm_cdf((lower - mean) / sd);
                    norm_pdf((x - mean) / sd) / (sd * z)
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Law::Categorical { values, probs } => {
                values.iter().zip(probs).filter(|(v, _)| **v <= x).map(|(_, p)| p).sum()
            }
            Law::Lognormal { mu, s } => {
                if x <= 0.0 {
                    0.0
                } else {
                    norm_cdf((x.ln() - mu) / s)
                }
            }
            Law::TruncatedExponential { rate, upper } => {
                if x <= 0.0 {
                    0.0
                } else if x >= *upper {
                    1.0
                } else {
                    (-rate * x).exp_m1() / (-rate * upper).exp_m1()
                }
            }
            Law::TruncatedNormal { mean, sd, lower, upper } => {
                if x <= *lower {
                    0.0
                } else if x >= *upper {
                    1.0
                } else {
                    let a = norm_cdf((lower - mean) / sd);
                    let b = norm_cdf((upper - mean) / sd);
                    (norm_cdf((x - mean) / sd) - a) / (b - a)
                }
            }
        }
    }

    /// Inverse cdf; for categorical laws the smallest value with cdf ≥ p.
    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            Law::Categorical { values, probs } => {
                let mut idx: Vec<usize> = (0..values.len()).collect();
                idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
                let mut acc = 0.0;
                for &k in &idx {
                    acc += probs[k];
                    if p <= acc {
                        return values[k];
                    }
                }
                values[*idx.last().unwrap()]
            }
            Law::Lognormal { mu, s } => (mu + s * norm_quantile(p)).exp(),
            Law::TruncatedExponential { rate, upper } => -(p * (-rate * upper).exp_m1()).ln_1p() / rate,
            Law::TruncatedNormal { mean, sd, lower, upper } => {
                let a = norm_cdf((lower - mean) / sd);
                let b = norm_cdf((upper - mean) / sd);
                (mean + sd * norm_quantile(a + p * (b - a))).clamp(*lower, *upper)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Law::Categorical { values, probs } => values.iter().zip(probs).map(|(v, p)| v * p).sum(),
            Law::Lognormal { mu, s } => (mu + 0.5 * s * s).exp(),
            Law::TruncatedExponential { rate, upper } => {
                let e = (-rate * upper).exp();
                1.0 / rate - upper * e / (1.0 - e)
            }
            Law::TruncatedNormal { mean, sd, lower, upper } => {
                let (a, b) = ((lower - mean) / sd, (upper - mean) / sd);
                mean + sd * (norm_pdf(a) - norm_pdf(b)) / (norm_cdf(b) - norm_cdf(a))
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Law::Categorical { values, probs } => {
                let v: f64 = rng.gen();
                let mut acc = 0.0;
                for (x, p) in values.iter().zip(probs) {
                    acc += p;
                    if v < acc {
                        return *x;
                    }
                }
                *values.last().unwrap()
            }
            _ => {
                // Open interval keeps the inverse cdf finite.
                let v: f64 = rng.gen_range(f64::EPSILON..1.0);
                self.quantile(v)
            }
        }
    }

    pub fn support_values(&self) -> Option<&[f64]> {
        match self {
            Law::Categorical { values, .. } => Some(values),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Protected,
    Permitted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GivenLaw {
    pub parent_value: f64,
    pub law: Law,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<Law>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub given: Vec<GivenLaw>,
}

impl CovariateSpec {
    pub fn root(name: &str, role: Role, law: Law) -> Self {
        Self { name: name.into(), role, law: Some(law), parent: None, given: vec![] }
    }

    pub fn conditional(name: &str, role: Role, parent: &str, given: Vec<(f64, Law)>) -> Self {
        Self {
            name: name.into(),
            role,
            law: None,
            parent: Some(parent.into()),
            given: given.into_iter().map(|(parent_value, law)| GivenLaw { parent_value, law }).collect(),
        }
    }

    /// Law of this covariate when its parent takes `parent_value`.
    pub fn law_given(&self, parent_value: Option<f64>) -> Result<&Law> {
        match (&self.law, parent_value) {
            (Some(l), _) => Ok(l),
            (None, Some(v)) => self
                .given
                .iter()
                .find(|g| g.parent_value == v)
                .map(|g| &g.law)
                .ok_or_else(|| Error::Domain(format!("{}: no law for parent value {v}", self.name))),
            (None, None) => Err(Error::Config(format!("{}: conditional law without parent", self.name))),
        }
    }

    fn laws(&self) -> Vec<&Law> {
        match &self.law {
            Some(l) => vec![l],
            None => self.given.iter().map(|g| &g.law).collect(),
        }
    }

    fn is_discrete(&self) -> bool {
        self.laws().iter().all(|l| l.is_discrete())
    }

    /// Union of the support values over all conditional laws (categorical only).
    pub fn levels(&self) -> Option<Vec<f64>> {
        let mut out: Vec<f64> = Vec::new();
        for l in self.laws() {
            for &v in l.support_values()? {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        out.sort_by(f64::total_cmp);
        Some(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Noise {
    Normal { mean: f64, sd: f64 },
}

impl Noise {
    pub fn sd(&self) -> f64 {
        match self {
            Noise::Normal { sd, .. } => *sd,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Noise::Normal { mean, .. } => *mean,
        }
    }
}

/// Linear aggregation `h(x, d) = β₀ + β_x·x + β·d` plus additive noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub intercept: f64,
    pub permitted_coeffs: Vec<f64>,
    pub protected_coeffs: Vec<f64>,
    pub noise: Noise,
}

impl LossModel {
    pub fn h(&self, x: &[f64], d: &[f64]) -> f64 {
        self.intercept
            + self.permitted_coeffs.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
            + self.protected_coeffs.iter().zip(d).map(|(b, v)| b * v).sum::<f64>()
    }

    /// ∂h/∂dᵢ.
    pub fn dh(&self, i: usize) -> f64 {
        self.protected_coeffs[i]
    }

    pub fn validate(&self) -> Result<()> {
        if self.permitted_coeffs.iter().chain(&self.protected_coeffs).all(|&b| b == 0.0) {
            return Err(Error::Config("aggregation function must be non-constant".into()));
        }
        if !(self.noise.sd() >= 0.0) {
            return Err(Error::Config("noise sd must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub covariate: String,
    pub code: f64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub covariates: Vec<CovariateSpec>,
    pub model: LossModel,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<Label>,
}

/// One joint value of the protected covariates together with its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtectedAtom {
    pub d: Vec<f64>,
    pub prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    #[default]
    Empirical,
    Analytic,
}

/// Draws of (D, Y) given X = x, with ranks U of Y given x.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalSampleSet {
    pub x: Vec<f64>,
    pub m: usize,
    /// Row-major `n × m`.
    pub d: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub seed: u64,
}

impl ConditionalSampleSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d_row(&self, j: usize) -> &[f64] {
        &self.d[j * self.m..(j + 1) * self.m]
    }

    pub fn mean_y(&self) -> f64 {
        crate::stats::mean(&self.y)
    }
}

/// Joint table of `(d, x, y)` rows.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub d_names: Vec<String>,
    pub x_names: Vec<String>,
    pub d: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn protected(&self) -> Vec<usize> {
        self.indices(Role::Protected)
    }

    pub fn permitted(&self) -> Vec<usize> {
        self.indices(Role::Permitted)
    }

    pub fn m(&self) -> usize {
        self.protected().len()
    }

    pub fn n_permitted(&self) -> usize {
        self.permitted().len()
    }

    pub fn protected_names(&self) -> Vec<String> {
        self.protected().iter().map(|&i| self.covariates[i].name.clone()).collect()
    }

    pub fn permitted_names(&self) -> Vec<String> {
        self.permitted().iter().map(|&i| self.covariates[i].name.clone()).collect()
    }

    fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.covariates.len()).filter(|&i| self.covariates[i].role == role).collect()
    }

    fn parent_index(&self, i: usize) -> Option<usize> {
        let p = self.covariates[i].parent.as_ref()?;
        self.covariates.iter().position(|c| &c.name == p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.covariates.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate covariate names".into()));
        }
        for (i, c) in self.covariates.iter().enumerate() {
            match (&c.law, &c.parent) {
                (Some(_), None) => {}
                (None, Some(p)) => {
                    let pi =
                        self.parent_index(i).ok_or_else(|| Error::Config(format!("{}: unknown parent {p}", c.name)))?;
                    let levels = self.covariates[pi]
                        .levels()
                        .ok_or_else(|| Error::Config(format!("{}: parent {p} must be categorical", c.name)))?;
                    for v in levels {
                        if !c.given.iter().any(|g| g.parent_value == v) {
                            return Err(Error::Config(format!("{}: no law given {p} = {v}", c.name)));
                        }
                    }
                    if c.role == Role::Protected && self.covariates[pi].role != Role::Protected {
                        return Err(Error::Config(format!(
                            "{}: protected covariates may only depend on protected ones",
                            c.name
                        )));
                    }
                }
                _ => return Err(Error::Config(format!("{}: give either `law` or `parent` with `given` laws", c.name))),
            }
            for l in c.laws() {
                l.validate()?;
            }
            if c.role == Role::Protected && !c.is_discrete() {
                return Err(Error::Config(format!("{}: protected covariates must be categorical", c.name)));
            }
        }
        self.topological_order()?;
        let m = self.m();
        let n = self.n_permitted();
        if m == 0 {
            return Err(Error::Config("scenario needs at least one protected covariate".into()));
        }
        if self.model.protected_coeffs.len() != m || self.model.permitted_coeffs.len() != n {
            return Err(Error::Config(format!(
                "model has {} protected / {} permitted coefficients, scenario has {m} / {n}",
                self.model.protected_coeffs.len(),
                self.model.permitted_coeffs.len()
            )));
        }
        self.model.validate()
    }

    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let k = self.covariates.len();
        let mut state = vec![0u8; k];
        let mut order = Vec::with_capacity(k);
        fn visit(sc: &Scenario, i: usize, state: &mut [u8], order: &mut Vec<usize>) -> Result<()> {
            match state[i] {
                2 => return Ok(()),
                1 => return Err(Error::Config("covariate dependency graph has a cycle".into())),
                _ => {}
            }
            state[i] = 1;
            if let Some(p) = sc.parent_index(i) {
                visit(sc, p, state, order)?;
            }
            state[i] = 2;
            order.push(i);
            Ok(())
        }
        for i in 0..k {
            visit(self, i, &mut state, &mut order)?;
        }
        Ok(order)
    }

    fn law_at(&self, i: usize, values: &[f64]) -> Result<&Law> {
        self.covariates[i].law_given(self.parent_index(i).map(|p| values[p]))
    }

    /// Joint law of the protected covariates.
    pub fn protected_atoms(&self) -> Result<Vec<ProtectedAtom>> {
        let prot = self.protected();
        let order: Vec<usize> = self.topological_order()?.into_iter().filter(|i| prot.contains(i)).collect();
        let mut values = vec![0.0; self.covariates.len()];
        let mut out = Vec::new();
        self.enumerate(&order, 0, 1.0, &mut values, &prot, &mut out)?;
        Ok(out)
    }

    fn enumerate(
        &self,
        order: &[usize],
        depth: usize,
        prob: f64,
        values: &mut Vec<f64>,
        prot: &[usize],
        out: &mut Vec<ProtectedAtom>,
    ) -> Result<()> {
        if depth == order.len() {
            out.push(ProtectedAtom { d: prot.iter().map(|&i| values[i]).collect(), prob });
            return Ok(());
        }
        let i = order[depth];
        let law = self.law_at(i, values)?.clone();
        if let Law::Categorical { values: vs, probs } = law {
            for (v, p) in vs.iter().zip(&probs) {
                values[i] = *v;
                self.enumerate(order, depth + 1, prob * p, values, prot, out)?;
            }
        }
        Ok(())
    }

    fn assignment(&self, x: &[f64], d: &[f64]) -> Vec<f64> {
        let mut values = vec![0.0; self.covariates.len()];
        for (k, &i) in self.protected().iter().enumerate() {
            values[i] = d[k];
        }
        for (k, &i) in self.permitted().iter().enumerate() {
            values[i] = x[k];
        }
        values
    }

    /// Conditional law of D given X = x by Bayes' rule over the declared laws.
    pub fn posterior_protected(&self, x: &[f64]) -> Result<Vec<ProtectedAtom>> {
        let perm = self.permitted();
        if x.len() != perm.len() {
            return Err(arg(format!("x has {} components, expected {}", x.len(), perm.len())));
        }
        let mut atoms = self.protected_atoms()?;
        let mut total = 0.0;
        for a in &mut atoms {
            let values = self.assignment(x, &a.d);
            let mut w = a.prob;
            for &j in &perm {
                w *= self.law_at(j, &values)?.density(values[j]);
            }
            a.prob = w;
            total += w;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Domain(format!("x = {x:?} lies outside every conditional support")));
        }
        for a in &mut atoms {
            a.prob /= total;
        }
        Ok(atoms)
    }

    /// F_{Y|x}(y) for normal noise: a mixture of normal cdfs.
    pub fn conditional_cdf_y(&self, x: &[f64], y: f64) -> Result<f64> {
        let post = self.posterior_protected(x)?;
        self.mixture_cdf(x, &post, y)
    }

    fn mixture_cdf(&self, x: &[f64], post: &[ProtectedAtom], y: f64) -> Result<f64> {
        let Noise::Normal { mean, sd } = self.model.noise;
        if !(sd > 0.0) {
            return Err(Error::UnsupportedAnalytic("degenerate noise has no continuous cdf".into()));
        }
        Ok(post.iter().map(|a| a.prob * norm_cdf((y - self.model.h(x, &a.d) - mean) / sd)).sum::<f64>().clamp(0.0, 1.0))
    }

    /// E[Y | X = x].
    pub fn conditional_mean_y(&self, x: &[f64]) -> Result<f64> {
        let post = self.posterior_protected(x)?;
        Ok(post.iter().map(|a| a.prob * self.model.h(x, &a.d)).sum::<f64>() + self.model.noise.mean())
    }

    /// Draws D | X = x and Y = h(x, D) + noise, then ranks Y.
    pub fn sample_conditional(&self, x: &[f64], n: usize, seed: u64, mode: RankMode) -> Result<ConditionalSampleSet> {
        let post = self.posterior_protected(x)?;
        self.sample_from_posterior(x, &post, n, seed, mode, None)
    }

    /// As `sample_conditional` with the law of D replaced by `post`. With
    /// `scale = Some((i, s))` the i-th protected value is multiplied by `s`
    /// after drawing, keeping the random numbers common across `s`.
    pub fn sample_from_posterior(
        &self,
        x: &[f64],
        post: &[ProtectedAtom],
        n: usize,
        seed: u64,
        mode: RankMode,
        scale: Option<(usize, f64)>,
    ) -> Result<ConditionalSampleSet> {
        if n < 2 {
            return Err(arg("need at least two samples"));
        }
        let m = self.m();
        let mut atoms: Vec<Vec<f64>> = post.iter().map(|a| a.d.clone()).collect();
        if let Some((i, s)) = scale {
            if i >= m {
                return Err(arg(format!("protected index {i} out of range")));
            }
            for a in &mut atoms {
                a[i] *= s;
            }
        }
        let h: Vec<f64> = atoms.iter().map(|a| self.model.h(x, a)).collect();
        let mut cum = Vec::with_capacity(post.len());
        let mut acc = 0.0;
        for a in post {
            acc += a.prob;
            cum.push(acc);
        }
        let Noise::Normal { mean, sd } = self.model.noise;
        let mut r = rng(seed);
        let mut d = Vec::with_capacity(n * m);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let v: f64 = r.gen::<f64>() * acc;
            let k = cum.partition_point(|&c| c <= v).min(post.len() - 1);
            let z: f64 = r.sample(StandardNormal);
            d.extend_from_slice(&atoms[k]);
            y.push(h[k] + mean + sd * z);
        }
        let u = match mode {
            RankMode::Empirical => empirical_ranks(&y),
            RankMode::Analytic => {
                let mut scaled = post.to_vec();
                for (a, d) in scaled.iter_mut().zip(&atoms) {
                    a.d = d.clone();
                }
                let mut u = Vec::with_capacity(n);
                for &v in &y {
                    let f = self.mixture_cdf(x, &scaled, v)?;
                    u.push(f.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0));
                }
                u
            }
        };
        Ok(ConditionalSampleSet { x: x.to_vec(), m, d, y, u, seed })
    }

    pub fn assign_uniform_ranks(&self, x: &[f64], y: &[f64], mode: RankMode) -> Result<Vec<f64>> {
        match mode {
            RankMode::Empirical => Ok(empirical_ranks(y)),
            RankMode::Analytic => {
                let post = self.posterior_protected(x)?;
                y.iter()
                    .map(|&v| {
                        self.mixture_cdf(x, &post, v).map(|f| f.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
                    })
                    .collect()
            }
        }
    }

    /// Draws `n` rows from the joint law following the dependency graph.
    pub fn generate_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        let order = self.topological_order()?;
        let (prot, perm) = (self.protected(), self.permitted());
        let Noise::Normal { mean, sd } = self.model.noise;
        let mut r = rng(seed);
        let mut out =
            Dataset { d_names: self.protected_names(), x_names: self.permitted_names(), ..Default::default() };
        let mut values = vec![0.0; self.covariates.len()];
        for _ in 0..n {
            for &i in &order {
                values[i] = self.law_at(i, &values)?.sample(&mut r);
            }
            let d: Vec<f64> = prot.iter().map(|&i| values[i]).collect();
            let x: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
            let z: f64 = r.sample(StandardNormal);
            out.y.push(self.model.h(&x, &d) + mean + sd * z);
            out.d.push(d);
            out.x.push(x);
        }
        Ok(out)
    }

    /// Joint law of the categorical permitted covariates, each atom paired
    /// with the conditional law of the protected covariates given it.
    pub fn categorical_permitted_atoms(&self) -> Result<Vec<(Vec<f64>, f64, Vec<ProtectedAtom>)>> {
        let perm = self.permitted();
        let cat: Vec<usize> = perm.iter().copied().filter(|&i| self.covariates[i].is_discrete()).collect();
        let prot_atoms = self.protected_atoms()?;
        let level_sets: Vec<Vec<f64>> = cat.iter().map(|&i| self.covariates[i].levels().unwrap()).collect();
        let mut combos: Vec<Vec<f64>> = vec![vec![]];
        for ls in &level_sets {
            combos = combos.into_iter().flat_map(|c| ls.iter().map(move |&v| [c.clone(), vec![v]].concat())).collect();
        }
        let prot = self.protected();
        let mut out = Vec::new();
        for combo in combos {
            let mut total = 0.0;
            let mut post = Vec::new();
            for a in &prot_atoms {
                let mut values = vec![0.0; self.covariates.len()];
                for (k, &i) in prot.iter().enumerate() {
                    values[i] = a.d[k];
                }
                for (k, &i) in cat.iter().enumerate() {
                    values[i] = combo[k];
                }
                let mut w = a.prob;
                for (k, &i) in cat.iter().enumerate() {
                    let pi = self.parent_index(i);
                    if pi.is_some_and(|p| !prot.contains(&p) && !cat.contains(&p)) {
                        return Err(Error::Config(
                            "categorical permitted covariates may only depend on protected or categorical ones".into(),
                        ));
                    }
                    w *= self.law_at(i, &values)?.density(combo[k]);
                }
                total += w;
                post.push(ProtectedAtom { d: a.d.clone(), prob: w });
            }
            if total > 0.0 {
                for a in &mut post {
                    a.prob /= total;
                }
                out.push((combo, total, post));
            }
        }
        Ok(out)
    }

    /// Marginal cdf of a continuous permitted covariate `j` given the joint
    /// law `post` of the protected covariates (its parent must be protected
    /// or absent).
    pub fn permitted_mixture_cdf(&self, j: usize, post: &[ProtectedAtom], t: f64) -> Result<f64> {
        let prot = self.protected();
        let mut s = 0.0;
        for a in post {
            let mut values = vec![0.0; self.covariates.len()];
            for (k, &i) in prot.iter().enumerate() {
                values[i] = a.d[k];
            }
            if let Some(p) = self.parent_index(j) {
                if !prot.contains(&p) {
                    return Err(Error::Config(format!(
                        "{}: continuous covariates may only depend on protected ones",
                        self.covariates[j].name
                    )));
                }
            }
            s += a.prob * self.law_at(j, &values)?.cdf(t);
        }
        Ok(s)
    }

    pub fn label(&self, covariate: &str, code: f64) -> Option<&str> {
        self.labels.iter().find(|l| l.covariate == covariate && l.code == code).map(|l| l.name.as_str())
    }

    pub fn labels_map(&self) -> HashMap<(String, String), String> {
        self.labels.iter().map(|l| ((l.covariate.clone(), l.code.to_string()), l.name.clone())).collect()
    }

    /// Single protected binary covariate driving a lognormal permitted one.
    pub fn single_binary() -> Self {
        Scenario {
            name: "single_binary".into(),
            covariates: vec![
                CovariateSpec::root(
                    "d",
                    Role::Protected,
                    Law::Categorical { values: vec![-1.0, 1.0], probs: vec![0.4, 0.6] },
                ),
                CovariateSpec::conditional(
                    "x",
                    Role::Permitted,
                    "d",
                    vec![(-1.0, Law::Lognormal { mu: 2.0, s: 1.0 / 3.0 }), (1.0, Law::Lognormal { mu: 1.5, s: 0.5 })],
                ),
            ],
            model: LossModel {
                intercept: 0.0,
                permitted_coeffs: vec![0.5],
                protected_coeffs: vec![0.25],
                noise: Noise::Normal { mean: 0.0, sd: 0.5 },
            },
            labels: vec![
                Label { covariate: "d".into(), code: -1.0, name: "female".into() },
                Label { covariate: "d".into(), code: 1.0, name: "male".into() },
            ],
        }
    }

    /// Two protected covariates (gender, a three-level group), hours driven
    /// and vehicle value.
    pub fn case_study() -> Self {
        Scenario {
            name: "case_study".into(),
            covariates: vec![
                CovariateSpec::root(
                    "d1",
                    Role::Protected,
                    Law::Categorical { values: vec![-1.0, 1.0], probs: vec![0.6, 0.4] },
                ),
                CovariateSpec::root(
                    "d2",
                    Role::Protected,
                    Law::Categorical { values: vec![-1.0, 0.0, 1.0], probs: vec![0.375, 0.125, 0.5] },
                ),
                CovariateSpec::conditional(
                    "x1",
                    Role::Permitted,
                    "d1",
                    vec![
                        (-1.0, Law::Categorical { values: vec![-1.0, 0.0, 1.0], probs: vec![0.5, 0.25, 0.25] }),
                        (1.0, Law::Categorical { values: vec![-1.0, 0.0, 1.0], probs: vec![0.25, 0.25, 0.5] }),
                    ],
                ),
                CovariateSpec::conditional(
                    "x2",
                    Role::Permitted,
                    "d2",
                    vec![
                        (-1.0, Law::TruncatedExponential { rate: 1.0 / 35.0, upper: 120.0 }),
                        (0.0, Law::TruncatedExponential { rate: 1.0 / 50.0, upper: 90.0 }),
                        (1.0, Law::TruncatedNormal { mean: 50.0, sd: 15.0, lower: 1.5, upper: 100.0 }),
                    ],
                ),
            ],
            model: LossModel {
                intercept: 15.0,
                permitted_coeffs: vec![3.0, 0.25],
                protected_coeffs: vec![5.0, 3.0],
                noise: Noise::Normal { mean: 0.0, sd: 1.0 },
            },
            labels: vec![
                Label { covariate: "d1".into(), code: -1.0, name: "female".into() },
                Label { covariate: "d1".into(), code: 1.0, name: "male".into() },
                Label { covariate: "x1".into(), code: -1.0, name: "few".into() },
                Label { covariate: "x1".into(), code: 0.0, name: "moderate".into() },
                Label { covariate: "x1".into(), code: 1.0, name: "many".into() },
            ],
        }
    }

    /// Noise-free linear model with a mean premium: the protected term is an
    /// affine function of the loss, so sensitivity and expectation
    /// constraints cannot hold together.
    pub fn nonexistence() -> Self {
        Scenario {
            name: "nonexistence".into(),
            covariates: vec![
                CovariateSpec::root(
                    "d",
                    Role::Protected,
                    Law::Categorical { values: vec![-1.0, 1.0], probs: vec![0.4, 0.6] },
                ),
                CovariateSpec::root(
                    "x",
                    Role::Permitted,
                    Law::Categorical { values: vec![1.0, 2.0, 3.0], probs: vec![0.3, 0.4, 0.3] },
                ),
            ],
            model: LossModel {
                intercept: 1.0,
                permitted_coeffs: vec![2.0],
                protected_coeffs: vec![0.5],
                noise: Noise::Normal { mean: 0.0, sd: 0.0 },
            },
            labels: vec![],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "single_binary" => Some(Self::single_binary()),
            "case_study" => Some(Self::case_study()),
            "nonexistence" => Some(Self::nonexistence()),
            _ => None,
        }
    }
}

/// Midranks `(rank − ½)/n`, ties broken by a stable sort on `(y, index)`.
pub fn empirical_ranks(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let order = sorted_order(y);
    let mut u = vec![0.0; n];
    for (k, &j) in order.iter().enumerate() {
        u[j] = (k as f64 + 0.5) / n as f64;
    }
    u
}

/// Indices sorting `y` ascending, stable in the original index.
pub fn sorted_order(y: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn midranks_definition() {
        assert_eq!(empirical_ranks(&[3.0, 1.0, 2.0]), vec![5.0 / 6.0, 1.0 / 6.0, 0.5]);
        assert_eq!(empirical_ranks(&[2.0, 2.0, 2.0, 2.0]), vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn presets_validate() {
        for s in ["single_binary", "case_study", "nonexistence"] {
            Scenario::preset(s).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn toml_round_trip() {
        let sc = Scenario::case_study();
        let back = Scenario::from_toml_str(&sc.to_toml_string()).unwrap();
        assert_eq!(sc, back);
        assert_eq!(sc.hash(), back.hash());
    }

    #[test]
    fn cycle_rejected() {
        let mut sc = Scenario::single_binary();
        sc.covariates[0] = CovariateSpec::conditional(
            "d",
            Role::Protected,
            "x",
            vec![(1.0, Law::Categorical { values: vec![-1.0, 1.0], probs: vec![0.5, 0.5] })],
        );
        assert!(sc.validate().is_err());
    }

    #[test]
    fn bad_probabilities_rejected() {
        let l = Law::Categorical { values: vec![0.0, 1.0], probs: vec![0.5, 0.4] };
        assert!(l.validate().is_err());
    }

    #[test]
    fn independent_protected_keeps_prior() {
        let mut sc = Scenario::single_binary();
        sc.covariates[1] = CovariateSpec::root("x", Role::Permitted, Law::Lognormal { mu: 1.0, s: 0.5 });
        for x in [0.3, 2.0, 9.0] {
            let p = sc.posterior_protected(&[x]).unwrap();
            assert_relative_eq!(p[0].prob, 0.4, epsilon = 1e-15);
            assert_relative_eq!(p[1].prob, 0.6, epsilon = 1e-15);
        }
    }

    #[test]
    fn outside_support_is_domain_error() {
        let sc = Scenario::single_binary();
        assert!(matches!(sc.posterior_protected(&[-1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn truncated_quantile_inverts_cdf() {
        let laws = [
            Law::TruncatedExponential { rate: 1.0 / 35.0, upper: 120.0 },
            Law::TruncatedNormal { mean: 50.0, sd: 15.0, lower: 1.5, upper: 100.0 },
            Law::Lognormal { mu: 2.0, s: 1.0 / 3.0 },
        ];
        for l in &laws {
            for p in [0.01, 0.3, 0.5, 0.77, 0.99] {
                assert_relative_eq!(l.cdf(l.quantile(p)), p, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_sample_all_equal() {
        let mut sc = Scenario::nonexistence();
        sc.covariates[0] =
            CovariateSpec::root("d", Role::Protected, Law::Categorical { values: vec![1.0], probs: vec![1.0] });
        let s = sc.sample_conditional(&[2.0], 4, 1, RankMode::Empirical).unwrap();
        assert!(s.y.iter().all(|&v| v == s.y[0]));
        assert_eq!(s.u, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(sc.sample_conditional(&[2.0], 1, 1, RankMode::Empirical).is_err());
    }

    #[test]
    fn analytic_cdf_needs_noise() {
        let sc = Scenario::nonexistence();
        assert!(matches!(sc.conditional_cdf_y(&[2.0], 1.0), Err(Error::UnsupportedAnalytic(_))));
    }
}
