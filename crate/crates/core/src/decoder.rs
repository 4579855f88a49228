//! Deterministic multi-step DDIM decoder mapping initial noise to a clean
//! estimate, with reverse-mode differentiation through the recorded steps.

use crate::error::{check_dim, Error, Result};
use crate::prior::{GmmPrior, MarginalGmm};
use crate::schedules::{AlphaBarSchedule, TimestepSchedule};

/// Smallest cumulative retention the decoder will visit.
pub const MIN_ALPHA_BAR: f64 = 1e-6;

#[derive(Debug, Clone)]
struct Step {
    timestep: usize,
    alpha_bar: f64,
    marginal: MarginalGmm,
}

/// `x_T -> x0_hat` by unconditional DDIM with the exact epsilon-prediction of
/// a Gaussian-mixture prior. An identity decoder has no steps.
#[derive(Debug, Clone)]
pub struct DdimDecoder {
    dim: usize,
    steps: Vec<Step>,
}

/// Per-step decoder inputs recorded during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
}

impl DdimDecoder {
    pub fn new(schedule: &AlphaBarSchedule, timesteps: &TimestepSchedule, prior: &GmmPrior) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::EmptyTimesteps);
        }
        let mut steps = Vec::with_capacity(timesteps.len());
        for &t in timesteps.indices().iter().rev() {
            let alpha_bar = schedule.alpha_bar(t).ok_or_else(|| {
                Error::InvalidSchedule(format!("timestep {t} outside the schedule"))
            })?;
            if alpha_bar < MIN_ALPHA_BAR {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar at timestep {t} is {alpha_bar:e}, below {MIN_ALPHA_BAR:e}"
                )));
            }
            steps.push(Step { timestep: t, alpha_bar, marginal: prior.marginal_at(alpha_bar)? });
        }
        if steps[0].alpha_bar >= 1.0 {
            return Err(Error::InvalidSchedule("first decoder timestep must have alpha_bar < 1".into()));
        }
        Ok(Self { dim: prior.dim(), steps })
    }

    /// The default two-step decoder at timesteps [375, 750] of the linear 1000-step schedule.
    pub fn two_step(prior: &GmmPrior) -> Result<Self> {
        let schedule = AlphaBarSchedule::default();
        let ts = TimestepSchedule::evenly_spaced(&schedule, 2, 750)?;
        Self::new(&schedule, &ts, prior)
    }

    pub fn identity(dim: usize) -> Self {
        Self { dim, steps: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Visited timesteps, largest first.
    pub fn timesteps(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.timestep).collect()
    }

    pub fn decode(&self, x_t: &[f64]) -> Result<Vec<f64>> {
        self.forward(x_t, None)
    }

    /// Forward pass that also records what [`DdimDecoder::vjp_with_tape`] needs.
    pub fn decode_with_tape(&self, x_t: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let mut tape = Tape { inputs: Vec::with_capacity(self.steps.len()) };
        let x0 = self.forward(x_t, Some(&mut tape))?;
        Ok((x0, tape))
    }

    fn forward(&self, x_t: &[f64], mut tape: Option<&mut Tape>) -> Result<Vec<f64>> {
        check_dim(self.dim, x_t.len())?;
        let mut x = x_t.to_vec();
        for (i, step) in self.steps.iter().enumerate() {
            if let Some(tape) = tape.as_deref_mut() {
                tape.inputs.push(x.clone());
            }
            let a = step.alpha_bar;
            let eps = step.marginal.eps_predict(&x)?;
            let (sa, s1a) = (a.sqrt(), (1.0 - a).sqrt());
            let x0: Vec<f64> = x.iter().zip(&eps).map(|(xv, e)| (xv - s1a * e) / sa).collect();
            x = match self.steps.get(i + 1) {
                Some(next) => {
                    let (sn, s1n) = (next.alpha_bar.sqrt(), (1.0 - next.alpha_bar).sqrt());
                    x0.iter().zip(&eps).map(|(x0v, e)| sn * x0v + s1n * e).collect()
                }
                None => x0,
            };
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { timestep: step.timestep });
            }
        }
        Ok(x)
    }

    /// `cotangent^T dD/dx_T` at `x_t`.
    pub fn vjp(&self, x_t: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let (_, tape) = self.decode_with_tape(x_t)?;
        self.vjp_with_tape(&tape, cotangent)
    }

    /// Reverse accumulation over a recorded tape. Each step is
    /// `x_out = c_x x + c_s score(x)`, so its transpose Jacobian is
    /// `c_x I + c_s J_score` with a symmetric `J_score`.
    pub fn vjp_with_tape(&self, tape: &Tape, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, cotangent.len())?;
        if tape.inputs.len() != self.steps.len() {
            return Err(Error::InvalidArgument("tape does not belong to this decoder".into()));
        }
        let mut g = cotangent.to_vec();
        for (i, (step, input)) in self.steps.iter().zip(&tape.inputs).enumerate().rev() {
            let (c_x, c_s) = step_coefficients(step.alpha_bar, self.steps.get(i + 1).map(|s| s.alpha_bar));
            let jg = step.marginal.score_vjp(input, &g)?;
            for (gv, j) in g.iter_mut().zip(&jg) {
                *gv = c_x * *gv + c_s * j;
            }
        }
        Ok(g)
    }
}

/// Coefficients of `x` and `score(x)` in one decoder step from retention `a`
/// to `next` (or to the Tweedie estimate when `next` is `None`).
fn step_coefficients(a: f64, next: Option<f64>) -> (f64, f64) {
    // x0 = (x + (1 - a) s) / sqrt(a);  eps = -sqrt(1 - a) s
    let sa = a.sqrt();
    match next {
        None => (1.0 / sa, (1.0 - a) / sa),
        Some(n) => {
            let r = n.sqrt() / sa;
            (r, r * (1.0 - a) - ((1.0 - n) * (1.0 - a)).sqrt())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gaussian_two_step() -> DdimDecoder {
        let schedule = AlphaBarSchedule::from_alpha_bar(vec![0.81, 0.25]).unwrap();
        let ts = TimestepSchedule::new(vec![0, 1], &schedule).unwrap();
        DdimDecoder::new(&schedule, &ts, &GmmPrior::standard_normal(2).unwrap()).unwrap()
    }

    // hand composition: Tweedie at 0.25 gives sqrt(0.25) x, the hop to 0.81 gives
    // c x with c = sqrt(a1 a2) + sqrt((1 - a1)(1 - a2)), the final Tweedie scales by sqrt(0.81)
    fn gaussian_factor() -> f64 {
        let c = (0.81f64 * 0.25).sqrt() + (0.19f64 * 0.75).sqrt();
        assert_relative_eq!(c, 0.45 + 0.1425f64.sqrt());
        0.9 * c
    }

    #[test]
    fn identity_decoder() {
        let d = DdimDecoder::identity(3);
        let x = [1.0, -2.0, 0.5];
        assert_eq!(d.decode(&x).unwrap(), x.to_vec());
        assert_eq!(d.vjp(&x, &[0.1, 0.2, 0.3]).unwrap(), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn gaussian_prior_decode_is_linear() {
        let d = gaussian_two_step();
        let k = gaussian_factor();
        let x = [1.3, -0.4];
        let out = d.decode(&x).unwrap();
        assert_relative_eq!(out[0], k * 1.3, max_relative = 1e-14);
        assert_relative_eq!(out[1], k * -0.4, max_relative = 1e-14);
        let v = d.vjp(&x, &[2.0, -1.0]).unwrap();
        assert_relative_eq!(v[0], 2.0 * k, max_relative = 1e-14);
        assert_relative_eq!(v[1], -k, max_relative = 1e-14);
    }

    #[test]
    fn rejects_empty_and_bad_timesteps() {
        let schedule = AlphaBarSchedule::default();
        let empty = TimestepSchedule::new(vec![], &schedule).unwrap();
        assert_eq!(
            DdimDecoder::new(&schedule, &empty, &GmmPrior::bimodal_1d()).unwrap_err(),
            Error::EmptyTimesteps
        );
        // alpha_bar at the last step of this schedule is about 1e-11
        let steep = AlphaBarSchedule::linear(1000, 1e-4, 0.05).unwrap();
        let late = TimestepSchedule::new(vec![999], &steep).unwrap();
        assert!(DdimDecoder::new(&steep, &late, &GmmPrior::bimodal_1d()).is_err());
        let ok = TimestepSchedule::new(vec![999], &schedule).unwrap();
        assert!(DdimDecoder::new(&schedule, &ok, &GmmPrior::bimodal_1d()).is_ok());
    }

    #[test]
    fn bimodal_basins() {
        let prior = GmmPrior::bimodal_1d();
        let d = DdimDecoder::two_step(&prior).unwrap();
        let sd = prior.variances()[0].sqrt();
        for x in [-3.0, -2.0, -1.0] {
            let v = d.decode(&[x]).unwrap()[0];
            assert!((v + 1.0).abs() < 3.0 * sd, "decode({x}) = {v}");
        }
        for x in [1.0, 2.0, 3.0] {
            let v = d.decode(&[x]).unwrap()[0];
            assert!((v - 1.0).abs() < 3.0 * sd, "decode({x}) = {v}");
        }
        // a dense sweep is monotone with one sign change
        let vals: Vec<f64> = (-400..=400).map(|i| d.decode(&[i as f64 / 100.0]).unwrap()[0]).collect();
        assert!(vals.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(vals.windows(2).filter(|w| w[0] < 0.0 && w[1] >= 0.0).count(), 1);
    }

    #[test]
    fn decode_is_bitwise_deterministic() {
        let prior = GmmPrior::random_k(3, 4, 11).unwrap();
        let d = DdimDecoder::two_step(&prior).unwrap();
        let x = [0.3, -1.0, 0.7, 2.2];
        let a = d.decode(&x).unwrap();
        let b = d.decode(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    proptest! {
        #[test]
        fn vjp_is_linear(
            x in prop::collection::vec(-2.0f64..2.0, 4),
            w1 in prop::collection::vec(-1.0f64..1.0, 4),
            w2 in prop::collection::vec(-1.0f64..1.0, 4),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let d = DdimDecoder::two_step(&GmmPrior::random_k(3, 4, 5).unwrap()).unwrap();
            let combo: Vec<f64> = w1.iter().zip(&w2).map(|(u, v)| a * u + b * v).collect();
            let lhs = d.vjp(&x, &combo).unwrap();
            let v1 = d.vjp(&x, &w1).unwrap();
            let v2 = d.vjp(&x, &w2).unwrap();
            for j in 0..4 {
                let rhs = a * v1[j] + b * v2[j];
                prop_assert!((lhs[j] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
