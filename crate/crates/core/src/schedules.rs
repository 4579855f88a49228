//! Diffusion variance schedules, decoder timestep selection and the
//! measurement-noise warmup schedules used by the samplers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete forward-diffusion schedule: per-step `beta` and the cumulative
/// signal retention `alpha_bar[t] = prod_{s <= t} (1 - beta[s])`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBarSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl AlphaBarSchedule {
    /// Betas linearly interpolated from `beta_min` to `beta_max` over `total_steps`.
    pub fn linear(total_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidSchedule("total_steps must be >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta = if total_steps == 1 {
            vec![beta_min]
        } else {
            let span = (total_steps - 1) as f64;
            (0..total_steps)
                .map(|t| beta_min + (beta_max - beta_min) * t as f64 / span)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("empty beta schedule".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bar = beta
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha_bar })
    }

    /// Builds a schedule directly from cumulative values, which must be
    /// strictly decreasing inside `(0, 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::InvalidSchedule("empty alpha_bar schedule".into()));
        }
        let mut prev = 1.0;
        let mut beta = Vec::with_capacity(alpha_bar.len());
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) || (t > 0 && a >= prev) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar[{t}] = {a} breaks strict decrease inside (0, 1]"
                )));
            }
            beta.push(1.0 - a / prev);
            prev = a;
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Option<f64> {
        self.alpha_bar.get(t).copied()
    }
}

impl Default for AlphaBarSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Timesteps visited by the decoder, stored in increasing order. Decoding
/// starts at the largest index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    indices: Vec<usize>,
}

impl TimestepSchedule {
    pub fn new(indices: Vec<usize>, schedule: &AlphaBarSchedule) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSchedule(format!(
                "timesteps {indices:?} are not strictly increasing"
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= schedule.total_steps() {
                return Err(Error::InvalidSchedule(format!(
                    "timestep {last} out of range for a {}-step schedule",
                    schedule.total_steps()
                )));
            }
        }
        Ok(Self { indices })
    }

    /// `count` timesteps spread evenly over `(0, t_max]`, i.e. `round(i * t_max / count)`
    /// for `i = 1..=count`, rounding halves up.
    pub fn evenly_spaced(schedule: &AlphaBarSchedule, count: usize, t_max: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidSchedule("timestep count must be >= 1".into()));
        }
        if t_max == 0 || t_max >= schedule.total_steps() {
            return Err(Error::InvalidSchedule(format!(
                "t_max {t_max} must lie in (0, {})",
                schedule.total_steps()
            )));
        }
        if count > t_max {
            return Err(Error::InvalidSchedule(format!(
                "cannot place {count} distinct timesteps in (0, {t_max}]"
            )));
        }
        let indices = (1..=count)
            .map(|i| (2 * i * t_max + count) / (2 * count))
            .collect();
        Self::new(indices, schedule)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealKind {
    Linear,
    Sqrt,
    None,
}

/// Warmup schedule for the measurement noise level used during the first
/// `warmup_iters` sampler iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaAnnealSchedule {
    pub kind: AnnealKind,
    #[serde(default)]
    pub warmup_iters: usize,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub scale: f64,
}

/// Noise level in force at a given iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaLevel {
    Fixed(f64),
    /// Warmup is over and no target is known: switch to the noise-adaptive potential.
    Adaptive,
}

impl SigmaAnnealSchedule {
    pub fn none() -> Self {
        Self { kind: AnnealKind::None, warmup_iters: 0, offset: 0.0, scale: 0.0 }
    }

    pub fn linear(offset: f64, scale: f64, warmup_iters: usize) -> Self {
        Self { kind: AnnealKind::Linear, warmup_iters, offset, scale }
    }

    pub fn sqrt(offset: f64, scale: f64, warmup_iters: usize) -> Self {
        Self { kind: AnnealKind::Sqrt, warmup_iters, offset, scale }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AnnealKind::None {
            return Ok(());
        }
        if !(self.offset > 0.0 && self.offset.is_finite() && self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidSchedule(format!(
                "anneal schedule needs offset > 0 and scale >= 0, got offset={} scale={}",
                self.offset, self.scale
            )));
        }
        Ok(())
    }

    /// Number of warmup iterations; zero for the `none` kind.
    pub fn warmup(&self) -> usize {
        match self.kind {
            AnnealKind::None => 0,
            _ => self.warmup_iters,
        }
    }

    /// Noise level for iteration `k`. During warmup the value never drops
    /// below `target` when one is known.
    pub fn value(&self, k: usize, target: Option<f64>) -> SigmaLevel {
        if k >= self.warmup() {
            return match target {
                Some(s) => SigmaLevel::Fixed(s),
                None => SigmaLevel::Adaptive,
            };
        }
        let frac = 1.0 - k as f64 / self.warmup_iters as f64;
        let raw = match self.kind {
            AnnealKind::Linear => self.offset + self.scale * frac,
            AnnealKind::Sqrt => self.offset + self.scale * frac.sqrt(),
            AnnealKind::None => unreachable!("none kind has no warmup"),
        };
        SigmaLevel::Fixed(target.map_or(raw, |t| raw.max(t)))
    }
}

impl Default for SigmaAnnealSchedule {
    fn default() -> Self {
        Self::none()
    }
}
