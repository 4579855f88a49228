//! The four subcommands. Each writes its artifacts through an [`OutputDir`]
//! and finishes with a manifest, also when a chain aborts.

use std::fmt;
use std::path::Path;

use anyhow::Result;
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use nhmc_core::oracle::{chain_metrics, conjugate_posterior, expected_residual, grid_posterior, ChainMetrics};
use nhmc_core::rng::{stream_rng, Stream};
use nhmc_core::sampler::{
    map_descent, run_mala, run_ula, standard_normal_point, Chain, ChainOutput, InitialDiagnostics, Sample,
};
use nhmc_core::{Error as CoreError, GmmPrior, HmcConfig, LikelihoodMode, Potential, PosteriorOracle};

use crate::artifacts::{samples_csv, trace_jsonl, OutputDir};
use crate::config::{ConfigError, DecoderSpec, Experiment, ExperimentConfig, OracleKind};

/// At least one chain stopped with an error. Artifacts, including
/// `error.json` and the partial trace, were written before this is returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainAbort(pub String);

impl fmt::Display for ChainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "chain aborted: {}", self.0)
    }
}

impl std::error::Error for ChainAbort {}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub chains: Option<u32>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(chains) = overrides.chains {
        cfg.chains = chains;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct ChainError {
    chain: u32,
    iteration: usize,
    error: String,
}

/// Drives one chain to completion, keeping whatever history exists if it fails.
fn drive_chain(cfg: &HmcConfig, exp: &Experiment, chain: u32) -> (ChainOutput, Option<ChainError>) {
    let mut rng = stream_rng(cfg.seed, Stream::Chain(chain));
    let x = standard_normal_point(&mut rng, exp.decoder.dim());
    let mut c = match Chain::from_point(cfg, &exp.problem, &exp.decoder, rng, x.clone()) {
        Ok(c) => c,
        Err(e) => {
            let empty = ChainOutput {
                initial: InitialDiagnostics { x_t: x.clone(), x0: Vec::new(), sigma_hat: f64::NAN },
                samples: Vec::new(),
                records: Vec::new(),
                final_state: Sample { x_t: x, x0: Vec::new() },
            };
            return (empty, Some(ChainError { chain, iteration: 0, error: e.to_string() }));
        }
    };
    while !c.is_done() {
        let k = c.state().iteration;
        if let Err(e) = c.step() {
            warn!("chain {chain} stopped at iteration {k}: {e}");
            return (c.into_output(), Some(ChainError { chain, iteration: k, error: e.to_string() }));
        }
    }
    (c.into_output(), None)
}

#[derive(Debug, Serialize)]
pub struct OracleSummary {
    pub kind: &'static str,
    /// Whether the oracle is the exact target of the sampler.
    pub exact: bool,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub total_mass: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualSummary>,
}

#[derive(Debug, Serialize)]
pub struct ResidualSummary {
    pub sigma_y: f64,
    pub sigma0: f64,
    pub expected_residual: f64,
    /// `expected_residual / (m sigma_y^2)`.
    pub normalized: f64,
}

fn target_potential(exp: &Experiment) -> Result<Potential<'_>> {
    Ok(Potential::new(exp.config.sampler.mode, &exp.problem, &exp.decoder)?)
}

fn grid_oracle(exp: &Experiment) -> Result<PosteriorOracle> {
    let n = exp.decoder.dim();
    let bounds: Vec<(f64, f64)> = match &exp.config.oracle.bounds {
        Some(b) if b.len() == n => b.iter().map(|[lo, hi]| (*lo, *hi)).collect(),
        Some(b) => {
            return Err(ConfigError(format!("oracle.bounds: expected {n} axes, got {}", b.len())).into());
        }
        None => vec![(-8.0, 8.0); n],
    };
    let pot = target_potential(exp)?;
    match grid_posterior(&pot, &bounds, exp.config.oracle.resolution) {
        Err(CoreError::Unsupported(msg)) => Err(ConfigError(format!("oracle: {msg}")).into()),
        other => Ok(other?),
    }
}

/// Conjugate oracle in signal space. Exact only with an identity decoder,
/// where the noise-space prior `N(0, I)` is also the signal prior.
fn conjugate_oracle(exp: &Experiment) -> Result<(PosteriorOracle, bool)> {
    let sigma = exp
        .config
        .known_sigma()
        .ok_or_else(|| ConfigError("oracle: conjugate oracle needs a known Gaussian noise level".into()))?;
    let a = exp
        .problem
        .operator
        .matrix()
        .ok_or_else(|| ConfigError(format!("oracle: operator `{}` is nonlinear", exp.problem.operator.name())))?;
    let exact = exp.decoder.is_identity() && matches!(exp.config.sampler.mode, LikelihoodMode::KnownSigma { .. });
    let prior = if exp.decoder.is_identity() { GmmPrior::standard_normal(exp.decoder.dim())? } else { exp.prior.clone() };
    Ok((conjugate_posterior(&prior, &a, sigma, &exp.problem.y)?, exact))
}

/// Oracle used to score chains: the exact conjugate posterior when it exists,
/// otherwise a grid over noise space in one or two dimensions.
fn metrics_oracle(exp: &Experiment) -> Result<Option<(PosteriorOracle, bool)>> {
    let linear = exp.problem.operator.is_linear();
    let exact_conjugate = exp.decoder.is_identity() && linear && matches!(exp.config.sampler.mode, LikelihoodMode::KnownSigma { .. });
    match exp.config.oracle.kind {
        OracleKind::None => Ok(None),
        OracleKind::Conjugate => conjugate_oracle(exp).map(Some),
        OracleKind::Grid => Ok(Some((grid_oracle(exp)?, true))),
        OracleKind::Auto if exact_conjugate => conjugate_oracle(exp).map(Some),
        OracleKind::Auto if exp.decoder.dim() <= 2 => Ok(Some((grid_oracle(exp)?, true))),
        OracleKind::Auto => Ok(None),
    }
}

fn summarize(oracle: &PosteriorOracle, exact: bool) -> OracleSummary {
    OracleSummary {
        kind: match oracle {
            PosteriorOracle::Conjugate { .. } => "conjugate",
            PosteriorOracle::Grid { .. } => "grid",
        },
        exact,
        dim: oracle.dim(),
        mean: oracle.mean(),
        variance: oracle.variance(),
        total_mass: oracle.total_mass(),
        residual: None,
    }
}

fn measurement_json(exp: &Experiment) -> serde_json::Value {
    serde_json::json!({
        "operator": exp.problem.operator.name(),
        "noise": exp.problem.noise,
        "y": exp.problem.y,
        "x_true": exp.problem.x_true,
    })
}

#[derive(Debug, Serialize)]
struct ChainReport {
    chain: u32,
    metrics: ChainMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Outcome of one run, used by `sweep` to build its table.
#[derive(Debug)]
pub struct RunSummary {
    pub metrics: Vec<ChainMetrics>,
    pub abort: Option<String>,
}

/// Runs all chains of `exp` and writes the run artifacts under `prefix`.
pub fn execute_run(exp: &Experiment, out: &mut OutputDir, prefix: &str) -> Result<RunSummary> {
    let cfg = exp.hmc_config();
    let oracle = metrics_oracle(exp)?;
    info!("running {} chain(s) of {} iterations", exp.config.chains, cfg.iterations);
    let results: Vec<(ChainOutput, Option<ChainError>)> =
        (0..exp.config.chains).into_par_iter().map(|i| drive_chain(&cfg, exp, i)).collect();

    let outputs: Vec<(u32, &ChainOutput)> = results.iter().enumerate().map(|(i, (o, _))| (i as u32, o)).collect();
    out.write(&format!("{prefix}measurement.json"), format!("{:#}\n", measurement_json(exp)).as_bytes())?;
    out.write(&format!("{prefix}samples.csv"), samples_csv(&outputs).as_bytes())?;
    out.write(&format!("{prefix}trace.jsonl"), trace_jsonl(&outputs).as_bytes())?;

    let reports: Vec<ChainReport> = results
        .iter()
        .enumerate()
        .map(|(i, (o, err))| ChainReport {
            chain: i as u32,
            metrics: chain_metrics(o, oracle.as_ref().map(|(p, _)| p), exp.x_true(), exp.config.peak),
            error: err.as_ref().map(|e| e.error.clone()),
        })
        .collect();
    let oracle_summary = oracle.as_ref().map(|(p, exact)| summarize(p, *exact));
    out.write_json(
        &format!("{prefix}metrics.json"),
        &serde_json::json!({ "config_hash": exp.config.hash(), "oracle": oracle_summary, "chains": reports }),
    )?;
    if let Some((p, _)) = &oracle {
        out.write(&format!("{prefix}oracle.csv"), p.to_csv().as_bytes())?;
    }
    let errors: Vec<&ChainError> = results.iter().filter_map(|(_, e)| e.as_ref()).collect();
    let abort = if errors.is_empty() {
        None
    } else {
        out.write_json(&format!("{prefix}error.json"), &errors)?;
        Some(errors.iter().map(|e| format!("chain {} iteration {}: {}", e.chain, e.iteration, e.error)).collect::<Vec<_>>().join("; "))
    };
    Ok(RunSummary { metrics: reports.into_iter().map(|r| r.metrics).collect(), abort })
}

pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    let exp = cfg.build()?;
    let mut out = OutputDir::create(out_dir)?;
    let summary = execute_run(&exp, &mut out, "")?;
    let digest = out.finish("run", &cfg.hash(), cfg.seed)?;
    match summary.abort {
        Some(msg) => Err(ChainAbort(msg).into()),
        None => Ok(digest),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Delta,
    L,
    Gamma,
    DecoderSteps,
    K,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "delta" => Self::Delta,
            "L" => Self::L,
            "gamma" => Self::Gamma,
            "decoder_steps" => Self::DecoderSteps,
            "K" => Self::K,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Delta => "delta",
            Self::L => "L",
            Self::Gamma => "gamma",
            Self::DecoderSteps => "decoder_steps",
            Self::K => "K",
        }
    }

    fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, ConfigError> {
        let bad = |e: &dyn fmt::Display| ConfigError(format!("--values: `{value}` for axis {}: {e}", self.name()));
        let mut cfg = cfg.clone();
        match self {
            Self::Delta => cfg.sampler.step_size = value.parse().map_err(|e| bad(&e))?,
            Self::Gamma => cfg.sampler.decay = value.parse().map_err(|e| bad(&e))?,
            Self::L => cfg.sampler.leapfrog_steps = value.parse().map_err(|e| bad(&e))?,
            Self::K => cfg.sampler.iterations = value.parse().map_err(|e| bad(&e))?,
            Self::DecoderSteps => match &mut cfg.decoder {
                DecoderSpec::Ddim { steps, timesteps: None, .. } => *steps = value.parse().map_err(|e| bad(&e))?,
                _ => return Err(bad(&"decoder_steps needs a ddim decoder without an explicit timestep list")),
            },
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-run scalars reported by `sweep`, averaged over chains.
fn sweep_metrics(metrics: &[ChainMetrics]) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("acceptance_rate", mean(metrics.iter().map(|m| m.acceptance_rate))),
        ("total_retries", mean(metrics.iter().map(|m| m.total_retries as f64))),
        ("final_sigma_hat", mean(metrics.iter().filter_map(|m| m.final_sigma_hat))),
        ("mse", mean(metrics.iter().filter_map(|m| m.mse))),
        ("mean_mse", mean(metrics.iter().filter_map(|m| m.mean_mse))),
        ("min_ess", mean(metrics.iter().filter_map(|m| m.ess_x0.iter().copied().reduce(f64::min)))),
        (
            "min_ks_p_value",
            mean(metrics.iter().filter_map(|m| m.ks.as_ref().and_then(|k| k.iter().map(|r| r.p_value).reduce(f64::min)))),
        ),
    ]
}

pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], out_dir: &Path) -> Result<String> {
    let configs: Vec<ExperimentConfig> = values.iter().map(|v| axis.apply(cfg, v)).collect::<Result<_, _>>()?;
    let experiments: Vec<Experiment> = configs.iter().map(|c| c.build()).collect::<Result<_, _>>()?;
    let mut out = OutputDir::create(out_dir)?;
    let mut table = String::from("axis,value,metric,estimate\n");
    let mut aborts = Vec::new();
    let mut rows: Vec<(String, &'static str, Option<f64>)> = Vec::new();
    for (value, exp) in values.iter().zip(&experiments) {
        info!("sweep {}={value}", axis.name());
        let summary = execute_run(exp, &mut out, &format!("runs/{}={value}/", axis.name()))?;
        if let Some(msg) = summary.abort {
            aborts.push(format!("{}={value}: {msg}", axis.name()));
        }
        for (metric, est) in sweep_metrics(&summary.metrics) {
            rows.push((value.clone(), metric, est));
        }
    }
    // a metric appears only if every run produced it, so each has one row per value
    let complete = |metric: &str| rows.iter().filter(|r| r.1 == metric).all(|r| r.2.is_some());
    for (value, metric, est) in &rows {
        if complete(metric) {
            table.push_str(&format!("{},{value},{metric},{:?}\n", axis.name(), est.expect("complete metric")));
        }
    }
    out.write("sweep.csv", table.as_bytes())?;
    let digest = out.finish("sweep", &cfg.hash(), cfg.seed)?;
    if aborts.is_empty() {
        Ok(digest)
    } else {
        Err(ChainAbort(aborts.join("; ")).into())
    }
}

pub fn cmd_oracle(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    let exp = cfg.build()?;
    let mut out = OutputDir::create(out_dir)?;
    let n = exp.decoder.dim();
    let want_grid = matches!(cfg.oracle.kind, OracleKind::Grid) || (matches!(cfg.oracle.kind, OracleKind::Auto) && n <= 2);
    let want_conjugate = matches!(cfg.oracle.kind, OracleKind::Conjugate)
        || (matches!(cfg.oracle.kind, OracleKind::Auto) && exp.problem.operator.is_linear() && cfg.known_sigma().is_some());
    let mut summaries = serde_json::Map::new();
    if want_grid {
        let grid = grid_oracle(&exp)?;
        out.write("oracle.csv", grid.to_csv().as_bytes())?;
        summaries.insert("grid".into(), serde_json::to_value(summarize(&grid, true))?);
    }
    if want_conjugate {
        let (conj, exact) = conjugate_oracle(&exp)?;
        let mut summary = summarize(&conj, exact);
        let sigma_y = cfg.known_sigma().expect("checked by conjugate_oracle");
        let a = exp.problem.operator.matrix().expect("checked by conjugate_oracle");
        let sigma0 = cfg.oracle.sigma0.unwrap_or_else(|| {
            if exp.decoder.is_identity() {
                1.0
            } else {
                let v = exp.prior.variances();
                (v.iter().sum::<f64>() / v.len() as f64).sqrt()
            }
        });
        let value = expected_residual(&a, sigma_y, sigma0)?;
        let m = a.nrows() as f64;
        summary.residual =
            Some(ResidualSummary { sigma_y, sigma0, expected_residual: value, normalized: value / (m * sigma_y * sigma_y) });
        out.write("conjugate.csv", conj.to_csv().as_bytes())?;
        summaries.insert("conjugate".into(), serde_json::to_value(summary)?);
    }
    if summaries.is_empty() {
        return Err(ConfigError(format!(
            "oracle: no oracle applies (noise dimension {n}, operator `{}`)",
            exp.problem.operator.name()
        ))
        .into());
    }
    out.write_json("oracle.json", &summaries)?;
    out.finish("oracle", &cfg.hash(), cfg.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nhmc,
    Nanhmc,
    Ula,
    Mala,
    Map,
}

impl Method {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "nhmc" => Self::Nhmc,
            "nanhmc" => Self::Nanhmc,
            "ula" => Self::Ula,
            "mala" => Self::Mala,
            "map" => Self::Map,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Nhmc => "nhmc",
            Self::Nanhmc => "nanhmc",
            Self::Ula => "ula",
            Self::Mala => "mala",
            Self::Map => "map",
        }
    }

    fn needs_sigma(self) -> bool {
        self != Self::Nanhmc
    }
}

/// One method on one paired seed.
#[derive(Debug, Clone)]
struct MethodRun {
    final_x0: Vec<f64>,
    /// Posterior mean for samplers, final point for MAP.
    estimate: Vec<f64>,
    sigma_hat: Vec<f64>,
    error: Option<String>,
}

fn sample_mean(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    (0..dim).map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / rows.len().max(1) as f64).collect()
}

fn run_method(method: Method, exp: &Experiment, sigma: Option<f64>, chain: u32) -> Result<MethodRun> {
    let cfg = &exp.config;
    let n = exp.decoder.dim();
    let mut rng = stream_rng(cfg.seed, Stream::Chain(chain));
    let x_init = standard_normal_point(&mut rng, n);
    let known = |s: Option<f64>| LikelihoodMode::KnownSigma { sigma: s.expect("sigma resolved for known-sigma methods") };
    let failed = |e: CoreError, x0: Vec<f64>| MethodRun { final_x0: x0.clone(), estimate: x0, sigma_hat: Vec::new(), error: Some(e.to_string()) };
    let x0_init = exp.decoder.decode(&x_init)?;
    Ok(match method {
        Method::Nhmc | Method::Nanhmc => {
            let mut hmc = exp.hmc_config();
            hmc.mode = if method == Method::Nhmc { known(sigma) } else { LikelihoodMode::Jeffreys };
            let mut c = Chain::from_point(&hmc, &exp.problem, &exp.decoder, rng, x_init)?;
            let mut error = None;
            while !c.is_done() {
                if let Err(e) = c.step() {
                    error = Some(e.to_string());
                    break;
                }
            }
            let o = c.into_output();
            let rows: Vec<&[f64]> = o.samples.iter().map(|s| s.x0.as_slice()).collect();
            let estimate = if rows.is_empty() { o.final_state.x0.clone() } else { sample_mean(&rows, n) };
            MethodRun { final_x0: o.final_state.x0.clone(), estimate, sigma_hat: o.sigma_hat_trace(), error }
        }
        Method::Ula | Method::Mala => {
            let spec = if method == Method::Ula { &cfg.baselines.ula } else { &cfg.baselines.mala };
            let pot = Potential::new(known(sigma), &exp.problem, &exp.decoder)?;
            let res = if method == Method::Ula {
                run_ula(&pot, &x_init, spec.step, spec.iterations, &mut rng)
            } else {
                run_mala(&pot, &x_init, spec.step, spec.iterations, &mut rng)
            };
            match res {
                Err(e) => failed(e, x0_init),
                Ok(o) => {
                    let tail: Vec<&[f64]> = o.samples[o.samples.len() / 2..].iter().map(|s| s.x0.as_slice()).collect();
                    let final_x0 = o.samples.last().map_or(x0_init, |s| s.x0.clone());
                    let estimate = if tail.is_empty() { final_x0.clone() } else { sample_mean(&tail, n) };
                    MethodRun { final_x0, estimate, sigma_hat: o.sigma_hat, error: None }
                }
            }
        }
        Method::Map => {
            let s = cfg.baselines.map.sigma.or(sigma);
            let pot = Potential::new(known(s), &exp.problem, &exp.decoder)?;
            let iters = cfg.baselines.map.iterations.unwrap_or(cfg.sampler.iterations * cfg.sampler.leapfrog_steps);
            match map_descent(&pot, &x_init, cfg.baselines.map.lr, iters) {
                Err(e) => failed(e, x0_init),
                Ok(r) => MethodRun { final_x0: r.x0.clone(), estimate: r.x0, sigma_hat: r.sigma_hat, error: None },
            }
        }
    })
}

/// Linear-interpolation percentile of unsorted data.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

#[derive(Debug, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub chains: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub errors: usize,
    pub mean_estimate_mse: Option<f64>,
    pub median_final_sigma_hat: Option<f64>,
}

pub fn cmd_compare(cfg: &ExperimentConfig, methods: &[Method], out_dir: &Path) -> Result<Vec<MethodSummary>> {
    let exp = cfg.build()?;
    let sigma = cfg.known_sigma();
    if let Some(m) = methods.iter().find(|m| m.needs_sigma() && sigma.is_none() && !(**m == Method::Map && cfg.baselines.map.sigma.is_some())) {
        return Err(ConfigError(format!("baselines.sigma: method `{}` needs a known noise level", m.name())).into());
    }
    let basin = match cfg.success.component {
        Some(c) => Some(c),
        None => exp.x_true().map(|t| exp.prior.component_of(t)).transpose()?,
    };
    let mut out = OutputDir::create(out_dir)?;
    let mut success_csv = String::from("method,chains,successes,success_rate,errors\n");
    let mut per_chain_csv = String::from("method,chain,success,estimate_mse,final_sigma_hat,error\n");
    let mut sigma_csv = String::from("method,chain,iteration,sigma_hat\n");
    let mut bands_csv = String::from("method,quantity,iteration,p10,p50,p90\n");
    let mut summaries = Vec::new();
    let mut aborts = Vec::new();
    for &method in methods {
        info!("compare: {} over {} paired seeds", method.name(), cfg.chains);
        let runs: Vec<MethodRun> =
            (0..cfg.chains).into_par_iter().map(|i| run_method(method, &exp, sigma, i)).collect::<Result<_>>()?;
        let mut successes = 0;
        let mut mses = Vec::new();
        let mut finals = Vec::new();
        for (i, r) in runs.iter().enumerate() {
            let ok = r.error.is_none()
                && match basin {
                    Some(c) => exp.prior.component_of(&r.final_x0)? == c,
                    None => true,
                };
            successes += usize::from(ok);
            let mse = exp.x_true().map(|t| r.estimate.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64);
            mses.extend(mse);
            let last = r.sigma_hat.last().copied();
            finals.extend(last);
            per_chain_csv.push_str(&format!(
                "{},{i},{ok},{},{},{}\n",
                method.name(),
                mse.map_or(String::new(), |v| format!("{v:?}")),
                last.map_or(String::new(), |v| format!("{v:?}")),
                r.error.as_deref().unwrap_or("").replace(',', ";")
            ));
            for (k, s) in r.sigma_hat.iter().enumerate() {
                sigma_csv.push_str(&format!("{},{i},{k},{s:?}\n", method.name()));
            }
            if let Some(e) = &r.error {
                aborts.push(format!("{} chain {i}: {e}", method.name()));
            }
        }
        let len = runs.iter().map(|r| r.sigma_hat.len()).min().unwrap_or(0);
        for k in 0..len {
            let mut col: Vec<f64> = runs.iter().map(|r| r.sigma_hat[k]).collect();
            let (p10, p50, p90) = (percentile(&mut col, 0.1), percentile(&mut col, 0.5), percentile(&mut col, 0.9));
            bands_csv.push_str(&format!("{},sigma_hat,{k},{p10:?},{p50:?},{p90:?}\n", method.name()));
        }
        let chains = runs.len();
        success_csv.push_str(&format!(
            "{},{chains},{successes},{:?},{}\n",
            method.name(),
            successes as f64 / chains as f64,
            runs.iter().filter(|r| r.error.is_some()).count()
        ));
        summaries.push(MethodSummary {
            method,
            chains,
            successes,
            success_rate: successes as f64 / chains as f64,
            errors: runs.iter().filter(|r| r.error.is_some()).count(),
            mean_estimate_mse: mean(mses.into_iter()),
            median_final_sigma_hat: (!finals.is_empty()).then(|| percentile(&mut finals, 0.5)),
        });
    }
    out.write("measurement.json", format!("{:#}\n", measurement_json(&exp)).as_bytes())?;
    out.write("success.csv", success_csv.as_bytes())?;
    out.write("chains.csv", per_chain_csv.as_bytes())?;
    out.write("sigma_hat.csv", sigma_csv.as_bytes())?;
    out.write("bands.csv", bands_csv.as_bytes())?;
    out.write_json("compare.json", &summaries)?;
    if !aborts.is_empty() {
        out.write_json("error.json", &aborts)?;
    }
    out.finish("compare", &cfg.hash(), cfg.seed)?;
    if aborts.is_empty() {
        Ok(summaries)
    } else {
        Err(ChainAbort(aborts.join("; ")).into())
    }
}
