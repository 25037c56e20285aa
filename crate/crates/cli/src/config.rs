//! Flag and config-file resolution. A value set in the `--config` TOML file
//! wins over the same flag on the command line.

use std::path::{Path, PathBuf};

use clap::Args;
use dipricer::{DistortionWeight, EngineConfig, MeasureSpec, RankMode, Scenario};
use serde::Deserialize;

use crate::failure::Failure;

#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML file whose keys override the corresponding flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset name (single_binary, case_study, nonexistence) or scenario TOML path.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per node (simulate: dataset rows).
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct EngineArgs {
    /// Replicates attempted per node.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Rank bins for the per-level normalization.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Solver tolerance on the scaled residuals.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Residual above which a replicate is rejected.
    #[arg(long)]
    pub tol_accept: Option<f64>,
    /// Conditional quantile nodes per categorical level.
    #[arg(long)]
    pub grid_q: Option<usize>,
    /// `mean` or `es_load:ALPHA,C`.
    #[arg(long)]
    pub distortion: Option<String>,
    /// `empirical` (midranks) or `analytic`.
    #[arg(long)]
    pub rank_mode: Option<String>,
}

/// Keys accepted in a `--config` file.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub out: Option<PathBuf>,
    pub reps: Option<usize>,
    pub bins: Option<usize>,
    pub tol: Option<f64>,
    pub tol_accept: Option<f64>,
    pub grid_q: Option<usize>,
    pub distortion: Option<String>,
    pub rank_mode: Option<String>,
    pub measures: Option<Vec<String>>,
    pub pi: Option<Vec<f64>>,
    pub unconditional: Option<bool>,
    pub compare: Option<bool>,
    pub width: Option<f64>,
    pub pi_list: Option<Vec<Vec<f64>>>,
    pub scan: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<(Self, Option<PathBuf>), Failure> {
        let Some(path) = path else { return Ok((Self::default(), None)) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: FileConfig =
            toml::from_str(&text).map_err(|e| Failure::config(format!("config {}: {e}", path.display())))?;
        Ok((cfg, path.parent().map(Path::to_path_buf)))
    }
}

pub fn pick<T>(file: Option<T>, flag: Option<T>, default: T) -> T {
    file.or(flag).unwrap_or(default)
}

pub struct Resolved {
    pub scenario: Scenario,
    /// Preset name or the scenario file path as given.
    pub scenario_source: String,
    pub out: PathBuf,
    pub seed: u64,
    pub n: usize,
}

pub fn load_scenario(spec: &str, base: Option<&Path>) -> Result<Scenario, Failure> {
    if let Some(s) = Scenario::preset(spec) {
        return Ok(s);
    }
    let mut path = PathBuf::from(spec);
    if path.is_relative() {
        if let Some(b) = base {
            let candidate = b.join(&path);
            if candidate.exists() {
                path = candidate;
            }
        }
    }
    if !path.exists() {
        return Err(Failure::config(format!(
            "scenario `{spec}` is neither a preset (single_binary, case_study, nonexistence) nor an existing file"
        )));
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::config(format!("cannot read scenario {}: {e}", path.display())))?;
    Ok(Scenario::from_toml_str(&text)?)
}

pub fn resolve_common(
    args: &CommonArgs,
    file: &FileConfig,
    base: Option<&Path>,
    default_n: usize,
) -> Result<Resolved, Failure> {
    let scenario_source =
        file.scenario.clone().or_else(|| args.scenario.clone()).ok_or_else(|| {
            Failure::config("no scenario given; pass --scenario or set `scenario` in the config file")
        })?;
    let scenario = load_scenario(&scenario_source, base)?;
    let out = pick(file.out.clone(), args.out.clone(), PathBuf::from("out"));
    let seed = pick(file.seed, args.seed, 1);
    let n = pick(file.n, args.n, default_n);
    Ok(Resolved { scenario, scenario_source, out, seed, n })
}

pub fn parse_distortion(s: &str) -> Result<DistortionWeight, Failure> {
    let bad = || Failure::config(format!("distortion `{s}`: expected `mean` or `es_load:ALPHA,C`"));
    let w = match s.split_once(':') {
        None if s == "mean" => DistortionWeight::Mean,
        Some(("es_load", args)) => {
            let v: Vec<f64> =
                args.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
            match v.as_slice() {
                [alpha, c] => DistortionWeight::EsLoad { alpha: *alpha, c: *c },
                _ => return Err(bad()),
            }
        }
        _ => return Err(bad()),
    };
    w.validate()?;
    Ok(w)
}

pub fn describe_distortion(w: &DistortionWeight) -> String {
    match w {
        DistortionWeight::Mean => "mean".into(),
        DistortionWeight::EsLoad { alpha, c } => format!("es_load:{alpha},{c}"),
        DistortionWeight::StepTable { breakpoints, levels } => format!("step_table:{breakpoints:?}/{levels:?}"),
    }
}

pub fn parse_rank_mode(s: &str) -> Result<RankMode, Failure> {
    match s {
        "empirical" => Ok(RankMode::Empirical),
        "analytic" => Ok(RankMode::Analytic),
        _ => Err(Failure::config(format!("rank mode `{s}`: expected `empirical` or `analytic`"))),
    }
}

pub fn parse_pi(s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::config(format!("weights `{s}`: expected comma-separated numbers")))
}

pub struct EngineSetup {
    pub cfg: EngineConfig,
    pub grid_q: usize,
}

pub fn resolve_engine(
    args: &EngineArgs,
    file: &FileConfig,
    r: &Resolved,
    default_reps: usize,
) -> Result<EngineSetup, Failure> {
    let mut cfg = EngineConfig { n: r.n, seed: r.seed, ..EngineConfig::default() };
    cfg.bins = pick(file.bins, args.bins, cfg.bins);
    cfg.solver.replications = pick(file.reps, args.reps, default_reps);
    cfg.solver.tol = pick(file.tol, args.tol, cfg.solver.tol);
    cfg.solver.tol_accept = pick(file.tol_accept, args.tol_accept, cfg.solver.tol_accept);
    if let Some(d) = file.distortion.as_ref().or(args.distortion.as_ref()) {
        cfg.distortion = parse_distortion(d)?;
    }
    if let Some(m) = file.rank_mode.as_ref().or(args.rank_mode.as_ref()) {
        cfg.rank_mode = parse_rank_mode(m)?;
    }
    cfg.validate()?;
    let grid_q = pick(file.grid_q, args.grid_q, 25);
    if grid_q < 2 {
        return Err(Failure::config("--grid-q must be at least 2"));
    }
    Ok(EngineSetup { cfg, grid_q })
}

/// Table layout: P, Q*_i for each i (when m > 1), Q*, Q_i for each i, Q†(1/m, ..).
pub fn default_measures(m: usize) -> Vec<String> {
    let mut v = vec!["P".to_string()];
    if m > 1 {
        v.extend((1..=m).map(|i| format!("insensitive:{i}")));
    }
    v.push("insensitive".into());
    v.extend((1..=m).map(|i| format!("marginal:{i}")));
    let even = vec![format!("{}", 1.0 / m as f64); m].join(",");
    v.push(format!("constrained_barycentre:{even}"));
    v
}

/// Parses measure names; a bare `barycentre`/`constrained_barycentre` takes
/// its weights from `pi`.
pub fn parse_measures(names: &[String], pi: Option<&[f64]>, m: usize) -> Result<Vec<MeasureSpec>, Failure> {
    let specs: Vec<MeasureSpec> = names
        .iter()
        .map(|name| {
            let bare = matches!(name.as_str(), "barycentre" | "constrained_barycentre" | "dagger");
            let full = match (bare, pi) {
                (true, Some(pi)) => {
                    format!("{name}:{}", pi.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
                }
                (true, None) => return Err(Failure::config(format!("measure `{name}` needs --pi"))),
                _ => name.clone(),
            };
            let spec = full.parse::<MeasureSpec>()?.resolve(m);
            spec.validate(m)?;
            Ok(spec)
        })
        .collect::<Result<_, Failure>>()?;
    let mut labels = std::collections::BTreeSet::new();
    for s in &specs {
        if !labels.insert(s.label(m)) {
            return Err(Failure::config(format!("measure {} requested twice", s.label(m))));
        }
    }
    Ok(specs)
}
