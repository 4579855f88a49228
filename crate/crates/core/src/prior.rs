//! Isotropic Gaussian-mixture data prior and its closed-form diffusion marginals.
//!
//! Under the forward process `x_t = sqrt(a) x_0 + sqrt(1 - a) z` a mixture of
//! isotropic Gaussians stays a mixture of isotropic Gaussians, so the score,
//! the exact epsilon-prediction and the score Jacobian are all available
//! analytically. The Jacobian is never formed; only its products with vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mixture of isotropic Gaussians `sum_i w_i N(mu_i, v_i I)` over clean signals.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if means.len() != k || variances.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{k} weights but {} means and {} variances",
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("component means must be nonempty".into()));
        }
        for m in &means {
            check_dim(dim, m.len())?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("component means must be finite".into()));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("component variances must be positive".into()));
        }
        Ok(Self { dim, weights, means, variances })
    }

    /// Standard normal prior `N(0, I_dim)`.
    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![1.0])
    }

    /// Two well separated modes at -1 and +1 on the real line.
    pub fn bimodal_1d() -> Self {
        Self::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![0.04, 0.04])
            .expect("valid preset")
    }

    /// 3x3 grid of modes at {-2, 0, 2}^2.
    pub fn grid_2d() -> Self {
        let coords = [-2.0, 0.0, 2.0];
        let means: Vec<Vec<f64>> = coords
            .iter()
            .flat_map(|&a| coords.iter().map(move |&b| vec![a, b]))
            .collect();
        let k = means.len();
        Self::new(normalized(vec![1.0; k]), means, vec![0.1; k]).expect("valid preset")
    }

    /// `k` random components in `dim` dimensions: means uniform in [-2, 2],
    /// variances uniform in [0.05, 0.3], weights uniform then normalized.
    pub fn random_k(k: usize, dim: usize, seed: u64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::InvalidArgument("random-k needs k >= 1 and dim >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let variances = (0..k).map(|_| rng.random_range(0.05..0.3)).collect();
        let weights = normalized((0..k).map(|_| rng.random_range(0.2..1.0)).collect());
        Self::new(weights, means, variances)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Marginal of `x_t` given cumulative retention `alpha_bar`.
    pub fn marginal_at(&self, alpha_bar: f64) -> Result<MarginalGmm> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar} outside (0, 1]")));
        }
        let scale = alpha_bar.sqrt();
        Ok(MarginalGmm {
            dim: self.dim,
            alpha_bar,
            log_weights: self.weights.iter().map(|w| w.ln()).collect(),
            means: self.means.iter().map(|m| m.iter().map(|v| scale * v).collect()).collect(),
            variances: self.variances.iter().map(|v| alpha_bar * v + (1.0 - alpha_bar)).collect(),
        })
    }

    /// Index of the component with the highest responsibility at `x`.
    pub fn component_of(&self, x: &[f64]) -> Result<usize> {
        let m = self.marginal_at(1.0)?;
        let r = m.responsibilities(x)?;
        Ok(argmax(&r))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let sd = self.variances[idx].sqrt();
        self.means[idx]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect()
    }
}

/// Time-`t` marginal of a [`GmmPrior`]: component `i` is
/// `N(sqrt(a) mu_i, (a v_i + 1 - a) I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalGmm {
    dim: usize,
    alpha_bar: f64,
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl MarginalGmm {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        self.means
            .iter()
            .zip(&self.variances)
            .zip(&self.log_weights)
            .map(|((m, &c), &lw)| {
                let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                lw - 0.5 * d * (LN_2PI + c.ln()) - 0.5 * sq / c
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(log_sum_exp(&self.component_log_densities(x)))
    }

    /// Posterior component probabilities at `x`, computed in log space.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let logs = self.component_log_densities(x);
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    /// `grad log p_t(x) = sum_i r_i(x) (m_i - x) / c_i`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(x)?;
        let mut out = vec![0.0; self.dim];
        for ((m, &c), &ri) in self.means.iter().zip(&self.variances).zip(&r) {
            if ri == 0.0 {
                continue;
            }
            for (o, (xv, mv)) in out.iter_mut().zip(x.iter().zip(m)) {
                *o += ri * (mv - xv) / c;
            }
        }
        Ok(out)
    }

    /// Exact noise prediction `-sqrt(1 - a) * score(x)`.
    pub fn eps_predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let k = -(1.0 - self.alpha_bar).sqrt();
        Ok(self.score(x)?.into_iter().map(|s| k * s).collect())
    }

    /// `cotangent^T J` for the score Jacobian
    /// `J = sum_i r_i g_i g_i^T - s s^T - (sum_i r_i / c_i) I` with `g_i = (m_i - x)/c_i`.
    pub fn score_vjp(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, cotangent.len())?;
        let r = self.responsibilities(x)?;
        let mut score = vec![0.0; self.dim];
        let mut out = vec![0.0; self.dim];
        let mut diag = 0.0;
        let mut g = vec![0.0; self.dim];
        for ((m, &c), &ri) in self.means.iter().zip(&self.variances).zip(&r) {
            if ri == 0.0 {
                continue;
            }
            for (gj, (xv, mv)) in g.iter_mut().zip(x.iter().zip(m)) {
                *gj = (mv - xv) / c;
            }
            let gw: f64 = g.iter().zip(cotangent).map(|(a, b)| a * b).sum();
            for j in 0..self.dim {
                out[j] += ri * gw * g[j];
                score[j] += ri * g[j];
            }
            diag += ri / c;
        }
        let sw: f64 = score.iter().zip(cotangent).map(|(a, b)| a * b).sum();
        for j in 0..self.dim {
            out[j] -= sw * score[j] + diag * cotangent[j];
        }
        Ok(out)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    // push rounding error into the last weight so the sum is 1 to within an ulp
    let rest: f64 = w[..w.len() - 1].iter().sum();
    if let Some(last) = w.last_mut() {
        *last = 1.0 - rest;
    }
    w
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
