//! Noise-space samplers: HMC with rejection-driven step-size decay (known
//! noise level or Jeffreys-marginalized), plus ULA, MALA and gradient-descent
//! MAP baselines.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::DdimDecoder;
use crate::error::{Error, Result};
use crate::likelihood::{Evaluation, LikelihoodMode, Potential};
use crate::operators::ForwardProblem;
use crate::rng::{stream_rng, Stream};
use crate::schedules::{SigmaAnnealSchedule, SigmaLevel};

/// HMC hyperparameters. `mode` is the post-warmup target: a known noise
/// level, or the Jeffreys-marginalized likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub iterations: usize,
    pub leapfrog_steps: usize,
    pub step_size: f64,
    pub decay: f64,
    pub sigma_schedule: SigmaAnnealSchedule,
    pub mode: LikelihoodMode,
    pub max_retries: usize,
    /// Iterations discarded after warmup before samples are collected.
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            leapfrog_steps: 20,
            step_size: 0.05,
            decay: 0.95,
            sigma_schedule: SigmaAnnealSchedule::linear(0.5, 2.0, 10),
            mode: LikelihoodMode::Jeffreys,
            max_retries: 50,
            burn_in: 0,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.leapfrog_steps == 0 {
            return bad("leapfrog_steps must be >= 1".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if self.max_retries == 0 {
            return bad("max_retries must be >= 1".into());
        }
        if let LikelihoodMode::KnownSigma { sigma } = self.mode {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return bad(format!("known sigma must be positive, got {sigma}"));
            }
        }
        self.sigma_schedule.validate()
    }

    /// First iteration whose accepted state is kept as a sample.
    pub fn first_sample(&self) -> usize {
        self.sigma_schedule.warmup() + self.burn_in
    }

    /// Likelihood in force at iteration `k`.
    pub fn mode_at(&self, k: usize) -> LikelihoodMode {
        let target = match self.mode {
            LikelihoodMode::KnownSigma { sigma } => Some(sigma),
            LikelihoodMode::Jeffreys => None,
        };
        match self.sigma_schedule.value(k, target) {
            SigmaLevel::Fixed(sigma) => LikelihoodMode::KnownSigma { sigma },
            SigmaLevel::Adaptive => LikelihoodMode::Jeffreys,
        }
    }
}

/// Result of integrating Hamiltonian dynamics with unit mass.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub eval: Evaluation,
    pub grad: Vec<f64>,
    pub grad_evals: usize,
}

/// `steps` kick-drift-kick leapfrog steps of size `step_size`.
pub fn leapfrog(pot: &Potential, x: &[f64], p: &[f64], step_size: f64, steps: usize) -> Result<Trajectory> {
    let grad = pot.gradient(x)?;
    let mut traj = leapfrog_from(pot, x, p, &grad, step_size, steps)?;
    traj.grad_evals += 1;
    Ok(traj)
}

fn leapfrog_from(
    pot: &Potential,
    x: &[f64],
    p: &[f64],
    grad: &[f64],
    step_size: f64,
    steps: usize,
) -> Result<Trajectory> {
    if !(step_size > 0.0) || steps == 0 {
        return Err(Error::InvalidArgument("leapfrog needs step_size > 0 and steps >= 1".into()));
    }
    let half = 0.5 * step_size;
    let mut x = x.to_vec();
    let mut p = p.to_vec();
    let mut grad = grad.to_vec();
    let mut eval = None;
    for step in 0..steps {
        p.iter_mut().zip(&grad).for_each(|(pv, g)| *pv -= half * g);
        x.iter_mut().zip(&p).for_each(|(xv, pv)| *xv += step_size * pv);
        let (e, g) = pot.value_and_gradient(&x)?;
        grad = g;
        p.iter_mut().zip(&grad).for_each(|(pv, g)| *pv -= half * g);
        if !e.value.is_finite() || p.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        eval = Some(e);
    }
    Ok(Trajectory { x, p, eval: eval.expect("steps >= 1"), grad, grad_evals: steps })
}

/// Mutable state of one HMC chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub step_size: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub accepted: bool,
    pub retries: usize,
    /// `H1 - H0` of the accepted proposal.
    pub delta_h: f64,
    /// Step size after this iteration.
    pub step_size: f64,
    /// Noise level used, `None` when the Jeffreys likelihood was in force.
    pub sigma: Option<f64>,
    pub sigma_hat: f64,
    pub potential: f64,
    pub grad_evals: usize,
}

/// One HMC iteration: fresh momentum, leapfrog, Metropolis test. On rejection
/// the step size shrinks by `cfg.decay` and a new proposal is drawn, until one
/// is accepted or `cfg.max_retries` retries are spent.
pub fn hmc_iteration<R: Rng + ?Sized>(
    state: &mut ChainState,
    pot: &Potential,
    cfg: &HmcConfig,
    rng: &mut R,
) -> Result<(IterationRecord, Evaluation)> {
    let (eval0, grad0) = pot.value_and_gradient(&state.x)?;
    let mut rejected = Vec::new();
    let mut grad_evals = 1;
    loop {
        let p: Vec<f64> = (0..state.x.len()).map(|_| StandardNormal.sample(rng)).collect();
        let h0 = eval0.value + 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let outcome = match leapfrog_from(pot, &state.x, &p, &grad0, state.step_size, cfg.leapfrog_steps) {
            Ok(traj) => {
                grad_evals += traj.grad_evals;
                let h1 = traj.eval.value + 0.5 * traj.p.iter().map(|v| v * v).sum::<f64>();
                let dh = h1 - h0;
                Some((traj, if dh.is_nan() { f64::INFINITY } else { dh }))
            }
            Err(Error::Divergence { .. } | Error::NonFiniteState { .. } | Error::DegenerateFit | Error::NondifferentiablePoint { .. }) => {
                grad_evals += cfg.leapfrog_steps;
                None
            }
            Err(e) => return Err(e),
        };
        let u: f64 = rng.random();
        match outcome {
            Some((traj, dh)) if u < (-dh).exp() => {
                let record = IterationRecord {
                    iteration: state.iteration,
                    accepted: true,
                    retries: rejected.len(),
                    delta_h: dh,
                    step_size: state.step_size,
                    sigma: match pot.mode {
                        LikelihoodMode::KnownSigma { sigma } => Some(sigma),
                        LikelihoodMode::Jeffreys => None,
                    },
                    sigma_hat: traj.eval.sigma_hat(),
                    potential: traj.eval.value,
                    grad_evals,
                };
                state.x = traj.x;
                state.iteration += 1;
                return Ok((record, traj.eval));
            }
            other => {
                rejected.push(other.map_or(f64::INFINITY, |(_, dh)| dh));
                state.step_size *= cfg.decay;
                if rejected.len() > cfg.max_retries {
                    return Err(Error::RetriesExhausted {
                        iteration: state.iteration,
                        retries: cfg.max_retries,
                        step_size: state.step_size,
                        delta_h: rejected,
                    });
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x_t: Vec<f64>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDiagnostics {
    pub x_t: Vec<f64>,
    pub x0: Vec<f64>,
    pub sigma_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub initial: InitialDiagnostics,
    pub samples: Vec<Sample>,
    pub records: Vec<IterationRecord>,
    /// Last accepted state, warmup included.
    pub final_state: Sample,
}

impl ChainOutput {
    /// Accepted proposals over all proposals made.
    pub fn acceptance_rate(&self) -> f64 {
        let proposals: usize = self.records.iter().map(|r| r.retries + 1).sum();
        if proposals == 0 {
            return 1.0;
        }
        self.records.len() as f64 / proposals as f64
    }

    pub fn total_retries(&self) -> usize {
        self.records.iter().map(|r| r.retries).sum()
    }

    pub fn sigma_hat_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.sigma_hat).collect()
    }
}

/// `n` independent standard normal draws, the starting point every sampler uses.
pub fn standard_normal_point<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A chain that can be driven step by step, keeping its history if a step fails.
pub struct Chain<'a, R> {
    cfg: &'a HmcConfig,
    problem: &'a ForwardProblem,
    decoder: &'a DdimDecoder,
    rng: R,
    state: ChainState,
    output: ChainOutput,
}

impl<'a, R: Rng> Chain<'a, R> {
    /// Starts from `x_T ~ N(0, I)` drawn from `rng`.
    pub fn new(cfg: &'a HmcConfig, problem: &'a ForwardProblem, decoder: &'a DdimDecoder, mut rng: R) -> Result<Self> {
        let x = standard_normal_point(&mut rng, decoder.dim());
        Self::from_point(cfg, problem, decoder, rng, x)
    }

    pub fn from_point(
        cfg: &'a HmcConfig,
        problem: &'a ForwardProblem,
        decoder: &'a DdimDecoder,
        rng: R,
        x: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        let x0 = decoder.decode(&x)?;
        let sigma_hat = crate::oracle::sigma_hat(problem, &x0)?;
        let initial = InitialDiagnostics { x_t: x.clone(), x0: x0.clone(), sigma_hat };
        Ok(Self {
            cfg,
            problem,
            decoder,
            rng,
            state: ChainState { x: x.clone(), step_size: cfg.step_size, iteration: 0 },
            output: ChainOutput {
                initial,
                samples: Vec::new(),
                records: Vec::new(),
                final_state: Sample { x_t: x, x0 },
            },
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.iterations
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn step(&mut self) -> Result<&IterationRecord> {
        let k = self.state.iteration;
        let pot = Potential::new(self.cfg.mode_at(k), self.problem, self.decoder)?;
        let (record, eval) = hmc_iteration(&mut self.state, &pot, self.cfg, &mut self.rng)?;
        let sample = Sample { x_t: self.state.x.clone(), x0: eval.x0 };
        if k >= self.cfg.first_sample() {
            self.output.samples.push(sample.clone());
        }
        self.output.final_state = sample;
        self.output.records.push(record);
        Ok(self.output.records.last().expect("just pushed"))
    }

    pub fn run(mut self) -> Result<ChainOutput> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.output)
    }

    /// History so far, including after a failed step.
    pub fn into_output(self) -> ChainOutput {
        self.output
    }
}

/// Runs `cfg.iterations` HMC iterations from `x_T ~ N(0, I)`, annealing the
/// noise level during warmup and collecting samples afterwards.
pub fn run_chain<R: Rng>(
    cfg: &HmcConfig,
    problem: &ForwardProblem,
    decoder: &DdimDecoder,
    rng: R,
) -> Result<ChainOutput> {
    Chain::new(cfg, problem, decoder, rng)?.run()
}

/// Independent chains in parallel; chain `i` draws from stream `Chain(i)` of `cfg.seed`.
pub fn run_chains(
    cfg: &HmcConfig,
    problem: &ForwardProblem,
    decoder: &DdimDecoder,
    chains: u32,
) -> Vec<Result<ChainOutput>> {
    (0..chains)
        .into_par_iter()
        .map(|i| run_chain(cfg, problem, decoder, stream_rng(cfg.seed, Stream::Chain(i))))
        .collect()
}

/// `x - step grad U(x) + sqrt(2 step) z`, no correction.
pub fn ula_step<R: Rng + ?Sized>(pot: &Potential, x: &[f64], step: f64, rng: &mut R) -> Result<Vec<f64>> {
    let grad = pot.gradient(x)?;
    let noise = (2.0 * step).sqrt();
    Ok(x.iter()
        .zip(&grad)
        .map(|(xv, g)| {
            let z: f64 = StandardNormal.sample(rng);
            xv - step * g + noise * z
        })
        .collect())
}

/// Langevin proposal with the asymmetric Metropolis-Hastings correction.
pub fn mala_step<R: Rng + ?Sized>(pot: &Potential, x: &[f64], step: f64, rng: &mut R) -> Result<(Vec<f64>, bool)> {
    let (e0, g0) = pot.value_and_gradient(x)?;
    let noise = (2.0 * step).sqrt();
    let prop: Vec<f64> = x
        .iter()
        .zip(&g0)
        .map(|(xv, g)| {
            let z: f64 = StandardNormal.sample(rng);
            xv - step * g + noise * z
        })
        .collect();
    let u: f64 = rng.random();
    let (e1, g1) = match pot.value_and_gradient(&prop) {
        Ok(v) => v,
        Err(Error::NonFiniteState { .. } | Error::DegenerateFit | Error::NondifferentiablePoint { .. }) => {
            return Ok((x.to_vec(), false))
        }
        Err(e) => return Err(e),
    };
    // log q(a | b) = -||a - b + step grad(b)||^2 / (4 step) + const
    let log_q = |a: &[f64], b: &[f64], gb: &[f64]| -> f64 {
        if step == 0.0 {
            return 0.0;
        }
        -a.iter().zip(b).zip(gb).map(|((av, bv), g)| (av - bv + step * g).powi(2)).sum::<f64>() / (4.0 * step)
    };
    let log_alpha = e0.value - e1.value + log_q(x, &prop, &g1) - log_q(&prop, x, &g0);
    if log_alpha.is_finite() && u.ln() < log_alpha || log_alpha >= 0.0 {
        Ok((prop, true))
    } else {
        Ok((x.to_vec(), false))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinOutput {
    pub samples: Vec<Sample>,
    pub sigma_hat: Vec<f64>,
    pub acceptance_rate: f64,
}

fn run_langevin<R: Rng + ?Sized>(
    pot: &Potential,
    x_init: &[f64],
    step: f64,
    iterations: usize,
    adjusted: bool,
    rng: &mut R,
) -> Result<LangevinOutput> {
    let mut x = x_init.to_vec();
    let mut samples = Vec::with_capacity(iterations);
    let mut sigma_hat = Vec::with_capacity(iterations);
    let mut accepted = 0usize;
    for _ in 0..iterations {
        if adjusted {
            let (next, acc) = mala_step(pot, &x, step, rng)?;
            accepted += usize::from(acc);
            x = next;
        } else {
            x = ula_step(pot, &x, step, rng)?;
            accepted += 1;
        }
        let eval = pot.evaluate(&x)?;
        sigma_hat.push(eval.sigma_hat());
        samples.push(Sample { x_t: x.clone(), x0: eval.x0 });
    }
    let acceptance_rate = if iterations == 0 { 1.0 } else { accepted as f64 / iterations as f64 };
    Ok(LangevinOutput { samples, sigma_hat, acceptance_rate })
}

pub fn run_ula<R: Rng + ?Sized>(pot: &Potential, x_init: &[f64], step: f64, iterations: usize, rng: &mut R) -> Result<LangevinOutput> {
    run_langevin(pot, x_init, step, iterations, false, rng)
}

pub fn run_mala<R: Rng + ?Sized>(pot: &Potential, x_init: &[f64], step: f64, iterations: usize, rng: &mut R) -> Result<LangevinOutput> {
    run_langevin(pot, x_init, step, iterations, true, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub x_t: Vec<f64>,
    pub x0: Vec<f64>,
    /// Potential before each update, then at the final point.
    pub loss: Vec<f64>,
    pub sigma_hat: Vec<f64>,
}

/// Plain gradient descent on the potential from `x_init`.
pub fn map_descent(pot: &Potential, x_init: &[f64], lr: f64, iterations: usize) -> Result<MapResult> {
    let mut x = x_init.to_vec();
    let mut loss = Vec::with_capacity(iterations + 1);
    let mut sigma_hat = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let (eval, grad) = pot.value_and_gradient(&x)?;
        loss.push(eval.value);
        sigma_hat.push(eval.sigma_hat());
        x.iter_mut().zip(&grad).for_each(|(xv, g)| *xv -= lr * g);
    }
    let eval = pot.evaluate(&x)?;
    loss.push(eval.value);
    sigma_hat.push(eval.sigma_hat());
    Ok(MapResult { x_t: x, x0: eval.x0, loss, sigma_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{ForwardOperator, NoiseModel};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic(n: usize) -> (ForwardProblem, DdimDecoder) {
        let problem =
            ForwardProblem::from_measurement(ForwardOperator::identity(n), NoiseModel::Gaussian { sigma: 1.0 }, vec![0.0; n])
                .unwrap();
        (problem, DdimDecoder::identity(n))
    }

    #[test]
    fn hand_executed_leapfrog() {
        // y = 0, sigma = 1, identity decoder/op: U = x^2/2 + x^2/2 = x^2, grad 2x
        let (problem, dec) = quadratic(1);
        let pot = Potential::new(LikelihoodMode::KnownSigma { sigma: 1.0 }, &problem, &dec).unwrap();
        let t = leapfrog(&pot, &[1.0], &[0.0], 0.1, 1).unwrap();
        // p = 0 - 0.05*2 = -0.1; x = 1 - 0.01 = 0.99; p = -0.1 - 0.05*1.98 = -0.199
        assert_relative_eq!(t.x[0], 0.99, epsilon = 1e-15);
        assert_relative_eq!(t.p[0], -0.199, epsilon = 1e-15);
        assert_eq!(t.grad_evals, 2);
    }

    #[test]
    fn hand_executed_leapfrog_unit_quadratic() {
        // U = x^2/2 exactly: make the likelihood vanish with a huge sigma
        let (problem, dec) = quadratic(1);
        let pot = Potential::new(LikelihoodMode::KnownSigma { sigma: 1e154 }, &problem, &dec).unwrap();
        let t = leapfrog(&pot, &[1.0], &[0.0], 0.1, 1).unwrap();
        assert_relative_eq!(t.x[0], 0.995, epsilon = 1e-15);
        assert_relative_eq!(t.p[0], -0.09975, epsilon = 1e-15);
    }

    #[test]
    fn tiny_step_barely_moves() {
        let (problem, dec) = quadratic(2);
        let pot = Potential::new(LikelihoodMode::KnownSigma { sigma: 1.0 }, &problem, &dec).unwrap();
        let p = [0.6, -0.8];
        let t = leapfrog(&pot, &[0.3, 0.4], &p, 1e-8, 1).unwrap();
        let moved = ((t.x[0] - 0.3).powi(2) + (t.x[1] - 0.4).powi(2)).sqrt();
        assert!(moved < 1e-7);
    }

    #[test]
    fn zero_energy_error_always_accepts() {
        let (problem, dec) = quadratic(1);
        let mut cfg = HmcConfig { step_size: 1e-9, leapfrog_steps: 1, max_retries: 1, ..Default::default() };
        cfg.sigma_schedule = SigmaAnnealSchedule::none();
        cfg.mode = LikelihoodMode::KnownSigma { sigma: 1.0 };
        let pot = Potential::new(cfg.mode, &problem, &dec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = ChainState { x: vec![0.5], step_size: cfg.step_size, iteration: 0 };
        for _ in 0..200 {
            let (rec, _) = hmc_iteration(&mut state, &pot, &cfg, &mut rng).unwrap();
            assert_eq!(rec.retries, 0);
        }
        assert_eq!(state.step_size, 1e-9);
    }

    #[test]
    fn divergent_trajectory_is_rejected_and_shrinks_step() {
        // on U = x^2 the leapfrog is unstable for step > 1 and overflows with many steps
        let (problem, dec) = quadratic(1);
        let cfg = HmcConfig {
            step_size: 1e3,
            leapfrog_steps: 200,
            decay: 0.5,
            max_retries: 60,
            sigma_schedule: SigmaAnnealSchedule::none(),
            mode: LikelihoodMode::KnownSigma { sigma: 1.0 },
            ..Default::default()
        };
        let pot = Potential::new(cfg.mode, &problem, &dec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = ChainState { x: vec![0.5], step_size: cfg.step_size, iteration: 0 };
        let (rec, _) = hmc_iteration(&mut state, &pot, &cfg, &mut rng).unwrap();
        assert!(rec.retries > 0);
        assert_eq!(state.step_size, 1e3 * 0.5f64.powi(rec.retries as i32));
    }

    #[test]
    fn retries_exhausted_reports_trace() {
        let (problem, dec) = quadratic(1);
        let cfg = HmcConfig {
            step_size: 1e3,
            leapfrog_steps: 200,
            decay: 0.99,
            max_retries: 3,
            sigma_schedule: SigmaAnnealSchedule::none(),
            mode: LikelihoodMode::KnownSigma { sigma: 1.0 },
            ..Default::default()
        };
        let pot = Potential::new(cfg.mode, &problem, &dec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = ChainState { x: vec![0.5], step_size: cfg.step_size, iteration: 0 };
        match hmc_iteration(&mut state, &pot, &cfg, &mut rng) {
            Err(Error::RetriesExhausted { retries, delta_h, .. }) => {
                assert_eq!(retries, 3);
                assert_eq!(delta_h.len(), 4);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn zero_iterations_only_initial_diagnostics() {
        let (problem, dec) = quadratic(2);
        let cfg = HmcConfig { iterations: 0, ..Default::default() };
        let out = run_chain(&cfg, &problem, &dec, ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(out.samples.is_empty() && out.records.is_empty());
        assert_eq!(out.initial.x_t.len(), 2);
    }

    #[test]
    fn warmup_samples_are_excluded() {
        let (problem, dec) = quadratic(1);
        let cfg = HmcConfig {
            iterations: 30,
            sigma_schedule: SigmaAnnealSchedule::linear(0.5, 2.0, 10),
            mode: LikelihoodMode::KnownSigma { sigma: 1.0 },
            burn_in: 5,
            ..Default::default()
        };
        let out = run_chain(&cfg, &problem, &dec, ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.records.len(), 30);
        assert_eq!(out.samples.len(), 15);
        assert_eq!(out.records[0].sigma, Some(2.5));
        assert_eq!(out.records[12].sigma, Some(1.0));
    }

    #[test]
    fn step_size_never_increases() {
        let (problem, dec) = quadratic(3);
        let cfg = HmcConfig {
            iterations: 200,
            step_size: 0.9,
            leapfrog_steps: 5,
            mode: LikelihoodMode::KnownSigma { sigma: 0.5 },
            sigma_schedule: SigmaAnnealSchedule::none(),
            ..Default::default()
        };
        let out = run_chain(&cfg, &problem, &dec, ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(out.records.windows(2).all(|w| w[1].step_size <= w[0].step_size));
        assert!(out.total_retries() > 0);
    }

    #[test]
    fn seeded_chains_are_bitwise_reproducible() {
        let (problem, dec) = quadratic(2);
        let cfg = HmcConfig { iterations: 40, ..Default::default() };
        let a = run_chains(&cfg, &problem, &dec, 3);
        let b = run_chains(&cfg, &problem, &dec, 3);
        for (x, y) in a.into_iter().zip(b) {
            assert_eq!(x.unwrap(), y.unwrap());
        }
    }

    #[test]
    fn zero_step_langevin_is_identity() {
        let (problem, dec) = quadratic(2);
        let pot = Potential::new(LikelihoodMode::KnownSigma { sigma: 1.0 }, &problem, &dec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ula_step(&pot, &[0.3, -0.1], 0.0, &mut rng).unwrap(), vec![0.3, -0.1]);
        let (x, acc) = mala_step(&pot, &[0.3, -0.1], 0.0, &mut rng).unwrap();
        assert!(acc);
        assert_eq!(x, vec![0.3, -0.1]);
    }

    #[test]
    fn map_descent_converges_on_quadratic() {
        let problem =
            ForwardProblem::from_measurement(ForwardOperator::identity(2), NoiseModel::Gaussian { sigma: 1.0 }, vec![2.0, -1.0])
                .unwrap();
        let dec = DdimDecoder::identity(2);
        let pot = Potential::new(LikelihoodMode::KnownSigma { sigma: 1.0 }, &problem, &dec).unwrap();
        // U = |x|^2/2 + |y - x|^2/2, minimizer y/2, Hessian 2I, stable for lr < 1
        let res = map_descent(&pot, &[5.0, 5.0], 0.3, 200).unwrap();
        assert!((res.x_t[0] - 1.0).abs() < 1e-6 && (res.x_t[1] + 0.5).abs() < 1e-6);
        assert!(res.loss.windows(2).all(|w| w[1] <= w[0]));
        let still = map_descent(&pot, &[5.0, 5.0], 0.0, 10).unwrap();
        assert_eq!(still.x_t, vec![5.0, 5.0]);
    }
}
