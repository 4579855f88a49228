//! Ground truth for verification: conjugate Gaussian-mixture posteriors for
//! linear operators, brute-force grid posteriors over 1-D or 2-D noise space,
//! the expected residual of a linear-Gaussian fit, and chain summaries.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_dim, Error, Result};
use crate::likelihood::Potential;
use crate::operators::ForwardProblem;
use crate::prior::{log_sum_exp, GmmPrior};
use crate::sampler::ChainOutput;
use crate::stats::{effective_sample_size, ks_test, KsResult};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Which variable an oracle describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSpace {
    /// Clean signal `x0`.
    Signal,
    /// Initial noise `x_T`.
    Noise,
}

/// A Gaussian `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `N(x; a, A) N(x; b, B) = N(a; b, A + B) N(x; c, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProduct {
    pub product: Gaussian,
    /// `log N(a; b, A + B)`.
    pub log_scale: f64,
}

fn cholesky(m: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(m).ok_or(Error::NotPositiveDefinite)
}

fn solve_checked(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = chol.solve(b);
    let resid = (m * &x - b).norm();
    if !(resid <= 1e-10 * (1.0 + b.norm()) * (1.0 + m.norm())) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(x)
}

/// `log N(x; mean, cov)` through a Cholesky factor of `cov`.
fn log_normal_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: DMatrix<f64>) -> Result<f64> {
    let d = x.len() as f64;
    let chol = cholesky(cov)?;
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).ok_or(Error::NotPositiveDefinite)?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (d * LN_2PI + log_det + z.norm_squared()))
}

pub fn gaussian_product(a: &Gaussian, b: &Gaussian) -> Result<GaussianProduct> {
    let n = a.mean.len();
    check_dim(n, b.mean.len())?;
    let sum = &a.cov + &b.cov;
    let log_scale = log_normal_pdf(&a.mean, &b.mean, sum.clone())?;
    // C = A (A + B)^-1 B, c = B (A + B)^-1 a + A (A + B)^-1 b
    let chol = cholesky(sum.clone())?;
    let s_inv_b = solve_checked(&chol, &sum, &b.cov)?;
    let cov = &a.cov * &s_inv_b;
    let cov = (&cov + cov.transpose()) * 0.5;
    let s_inv_a = solve_checked(&chol, &sum, &a.cov)?;
    let mean = s_inv_b.transpose() * &a.mean + s_inv_a.transpose() * &b.mean;
    Ok(GaussianProduct { product: Gaussian { mean, cov }, log_scale })
}

/// Analytic or tabulated posterior used as ground truth.
#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorOracle {
    /// Gaussian mixture over `x0`.
    Conjugate { weights: Vec<f64>, components: Vec<Gaussian> },
    /// Normalized density over an axis-aligned grid in noise space, row-major
    /// with the last axis fastest.
    Grid { axes: Vec<Vec<f64>>, density: Vec<f64> },
}

/// Exact posterior of `x0` for `y = A x0 + N(0, sigma^2 I)` under a mixture prior:
/// per-component conjugate updates reweighted by each component's evidence.
pub fn conjugate_posterior(prior: &GmmPrior, a: &DMatrix<f64>, sigma: f64, y: &[f64]) -> Result<PosteriorOracle> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    check_dim(prior.dim(), a.ncols())?;
    check_dim(a.nrows(), y.len())?;
    let n = prior.dim();
    let m = a.nrows();
    let yv = DVector::from_column_slice(y);
    let s2 = sigma * sigma;
    let ata = a.transpose() * a / s2;
    let aty = a.transpose() * &yv / s2;
    let aat = a * a.transpose();
    let mut log_w = Vec::with_capacity(prior.num_components());
    let mut components = Vec::with_capacity(prior.num_components());
    for ((w, mu), &v) in prior.weights().iter().zip(prior.means()).zip(prior.variances()) {
        let mu = DVector::from_column_slice(mu);
        let precision = &ata + DMatrix::identity(n, n) / v;
        let chol = cholesky(precision.clone())?;
        let cov = solve_checked(&chol, &precision, &DMatrix::identity(n, n))?;
        let cov = (&cov + cov.transpose()) * 0.5;
        let mean = chol.solve(&(&aty + &mu / v));
        let evidence_cov = &aat * v + DMatrix::identity(m, m) * s2;
        log_w.push(w.ln() + log_normal_pdf(&yv, &(a * &mu), evidence_cov)?);
        components.push(Gaussian { mean, cov });
    }
    let lse = log_sum_exp(&log_w);
    let weights = log_w.iter().map(|l| (l - lse).exp()).collect();
    Ok(PosteriorOracle::Conjugate { weights, components })
}

/// Conjugate posterior for a problem with a linear operator and Gaussian noise level `sigma`.
pub fn conjugate_for_problem(prior: &GmmPrior, problem: &ForwardProblem, sigma: f64) -> Result<PosteriorOracle> {
    let a = problem.operator.matrix().ok_or(Error::NonlinearOperator(problem.operator.name()))?;
    conjugate_posterior(prior, &a, sigma, &problem.y)
}

/// Evaluates `exp(-U)` on a grid over noise space and normalizes it with the
/// trapezoid rule. `bounds` gives `(lo, hi)` per axis.
pub fn grid_posterior(pot: &Potential, bounds: &[(f64, f64)], resolution: usize) -> Result<PosteriorOracle> {
    let dim = pot.dim();
    if dim > 2 {
        return Err(Error::Unsupported(format!("grid posterior needs noise dimension <= 2, got {dim}")));
    }
    check_dim(dim, bounds.len())?;
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    if bounds.iter().any(|(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite())) {
        return Err(Error::InvalidArgument("grid bounds must be finite with lo < hi".into()));
    }
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(lo, hi)| (0..resolution).map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64).collect())
        .collect();
    let total = resolution.pow(dim as u32);
    let log_density: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let x: Vec<f64> = grid_point(&axes, flat);
            pot.value(&x).map(|u| -u)
        })
        .collect::<Result<_>>()?;
    let max = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut density: Vec<f64> = log_density.iter().map(|l| (l - max).exp()).collect();
    let mass = trapezoid_nd(&axes, &density);
    density.iter_mut().for_each(|d| *d /= mass);
    Ok(PosteriorOracle::Grid { axes, density })
}

fn grid_point(axes: &[Vec<f64>], mut flat: usize) -> Vec<f64> {
    let mut x = vec![0.0; axes.len()];
    for (d, axis) in axes.iter().enumerate().rev() {
        x[d] = axis[flat % axis.len()];
        flat /= axis.len();
    }
    x
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}

fn trapezoid_nd(axes: &[Vec<f64>], values: &[f64]) -> f64 {
    match axes {
        [x] => trapezoid(x, values),
        [x, y] => {
            let rows: Vec<f64> = values.chunks(y.len()).map(|row| trapezoid(y, row)).collect();
            trapezoid(x, &rows)
        }
        _ => unreachable!("grid dimension checked on construction"),
    }
}

impl PosteriorOracle {
    pub fn space(&self) -> OracleSpace {
        match self {
            Self::Conjugate { .. } => OracleSpace::Signal,
            Self::Grid { .. } => OracleSpace::Noise,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Conjugate { components, .. } => components[0].mean.len(),
            Self::Grid { axes, .. } => axes.len(),
        }
    }

    /// Integral of the stored density (1 for a normalized oracle).
    pub fn total_mass(&self) -> f64 {
        match self {
            Self::Conjugate { weights, .. } => weights.iter().sum(),
            Self::Grid { axes, density } => trapezoid_nd(axes, density),
        }
    }

    /// Marginal density of coordinate `coord` tabulated on its grid axis.
    fn grid_marginal(&self, coord: usize) -> (Vec<f64>, Vec<f64>) {
        let Self::Grid { axes, density } = self else { unreachable!("grid only") };
        match axes.len() {
            1 => (axes[0].clone(), density.clone()),
            _ => {
                let (nx, ny) = (axes[0].len(), axes[1].len());
                let marg = if coord == 0 {
                    density.chunks(ny).map(|row| trapezoid(&axes[1], row)).collect()
                } else {
                    (0..ny)
                        .map(|j| {
                            let col: Vec<f64> = (0..nx).map(|i| density[i * ny + j]).collect();
                            trapezoid(&axes[0], &col)
                        })
                        .collect()
                };
                (axes[coord].clone(), marg)
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Self::Conjugate { weights, components } => {
                let mut out = DVector::zeros(components[0].mean.len());
                for (w, c) in weights.iter().zip(components) {
                    out += &c.mean * *w;
                }
                out.iter().copied().collect()
            }
            Self::Grid { axes, .. } => (0..axes.len())
                .map(|d| {
                    let (xs, p) = self.grid_marginal(d);
                    let xp: Vec<f64> = xs.iter().zip(&p).map(|(x, v)| x * v).collect();
                    trapezoid(&xs, &xp)
                })
                .collect(),
        }
    }

    /// Marginal variance of each coordinate.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        match self {
            Self::Conjugate { weights, components } => (0..mean.len())
                .map(|d| {
                    weights
                        .iter()
                        .zip(components)
                        .map(|(w, c)| w * (c.cov[(d, d)] + (c.mean[d] - mean[d]).powi(2)))
                        .sum()
                })
                .collect(),
            Self::Grid { .. } => (0..mean.len())
                .map(|d| {
                    let (xs, p) = self.grid_marginal(d);
                    let v: Vec<f64> = xs.iter().zip(&p).map(|(x, q)| (x - mean[d]).powi(2) * q).collect();
                    trapezoid(&xs, &v)
                })
                .collect(),
        }
    }

    /// Marginal CDF of coordinate `coord`, as a closure.
    pub fn marginal_cdf(&self, coord: usize) -> Box<dyn Fn(f64) -> f64 + Send + Sync> {
        match self {
            Self::Conjugate { weights, components } => {
                let parts: Vec<(f64, Normal)> = weights
                    .iter()
                    .zip(components)
                    .filter(|(w, _)| **w > 0.0)
                    .map(|(w, c)| (*w, Normal::new(c.mean[coord], c.cov[(coord, coord)].sqrt()).expect("valid normal")))
                    .collect();
                Box::new(move |x| parts.iter().map(|(w, n)| w * n.cdf(x)).sum())
            }
            Self::Grid { .. } => {
                let (xs, p) = self.grid_marginal(coord);
                let mut cum = vec![0.0; xs.len()];
                for i in 1..xs.len() {
                    cum[i] = cum[i - 1] + 0.5 * (xs[i] - xs[i - 1]) * (p[i] + p[i - 1]);
                }
                let total = cum[cum.len() - 1];
                cum.iter_mut().for_each(|c| *c /= total);
                Box::new(move |x| {
                    if x <= xs[0] {
                        return 0.0;
                    }
                    if x >= xs[xs.len() - 1] {
                        return 1.0;
                    }
                    let i = xs.partition_point(|v| *v <= x) - 1;
                    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
                    cum[i] + t * (cum[i + 1] - cum[i])
                })
            }
        }
    }

    /// Draw from a conjugate oracle.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let Self::Conjugate { weights, components } = self else {
            return Err(Error::Unsupported("sampling is only implemented for conjugate oracles".into()));
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = components.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let c = &components[idx];
        let l = cholesky(c.cov.clone())?.l();
        let z = DVector::from_fn(c.mean.len(), |_, _| StandardNormal.sample(rng));
        Ok((&c.mean + l * z).iter().copied().collect())
    }

    /// CSV of the density (grid) or of component moments (conjugate).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            Self::Grid { axes, density } => {
                let header: Vec<String> = (0..axes.len()).map(|d| format!("x{d}")).collect();
                out.push_str(&format!("{},density\n", header.join(",")));
                for (flat, d) in density.iter().enumerate() {
                    let x = grid_point(axes, flat);
                    let coords: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
                    out.push_str(&format!("{},{d:e}\n", coords.join(",")));
                }
            }
            Self::Conjugate { weights, components } => {
                out.push_str("component,weight,coord,mean,variance\n");
                for (k, (w, c)) in weights.iter().zip(components).enumerate() {
                    for d in 0..c.mean.len() {
                        out.push_str(&format!("{k},{w:e},{d},{:e},{:e}\n", c.mean[d], c.cov[(d, d)]));
                    }
                }
            }
        }
        out
    }
}

/// Expected squared residual `E||y - A x0_hat||^2` of the linear-Gaussian model
/// with isotropic prior scale `sigma0`: `sigma_y^2 tr(B B^T) + tr(A S A^T)` where
/// `S = (A^T A / sigma_y^2 + I / sigma0^2)^-1` and `B = I - A S A^T / sigma_y^2`.
pub fn expected_residual(a: &DMatrix<f64>, sigma_y: f64, sigma0: f64) -> Result<f64> {
    if !(sigma_y > 0.0 && sigma0 > 0.0) {
        return Err(Error::InvalidArgument("sigma_y and sigma0 must be positive".into()));
    }
    let (m, n) = a.shape();
    let s2 = sigma_y * sigma_y;
    let precision = a.transpose() * a / s2 + DMatrix::identity(n, n) / (sigma0 * sigma0);
    let chol = cholesky(precision.clone())?;
    let s_at = solve_checked(&chol, &precision, &a.transpose())?;
    let a_s_at = a * s_at;
    let b = DMatrix::identity(m, m) - &a_s_at / s2;
    Ok(s2 * (&b * b.transpose()).trace() + a_s_at.trace())
}

/// `||y - A(x0)|| / sqrt(m)`.
pub fn sigma_hat(problem: &ForwardProblem, x0: &[f64]) -> Result<f64> {
    let r = problem.residual(x0)?;
    Ok((r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt())
}

fn serialize_db<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
        Some(x) => s.serialize_some(x),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainMetrics {
    pub samples: usize,
    pub mean_x0: Vec<f64>,
    pub cov_x0: Vec<Vec<f64>>,
    pub mean_x_t: Vec<f64>,
    /// Standard error of each `x0` mean coordinate, from the effective sample size.
    pub se_x0: Vec<f64>,
    pub ess_x0: Vec<f64>,
    /// MSE of each sample against `x_true`, averaged over samples, per coordinate.
    pub mse_per_coord: Option<Vec<f64>>,
    pub mse: Option<f64>,
    /// MSE of the posterior mean against `x_true`.
    pub mean_mse: Option<f64>,
    /// PSNR of the posterior mean in dB; serialized as `"inf"` for an exact match.
    #[serde(serialize_with = "serialize_db")]
    pub psnr: Option<f64>,
    pub ks: Option<Vec<KsResult>>,
    pub oracle_mean: Option<Vec<f64>>,
    pub acceptance_rate: f64,
    pub total_retries: usize,
    pub final_sigma_hat: Option<f64>,
}

/// Summary statistics of a chain. KS tests compare the sample coordinate in
/// the oracle's space (`x0` for conjugate, `x_T` for grid oracles).
pub fn chain_metrics(output: &ChainOutput, oracle: Option<&PosteriorOracle>, x_true: Option<&[f64]>, peak: f64) -> ChainMetrics {
    let n = output.samples.len();
    let dim = output.initial.x0.len();
    let column = |d: usize, noise: bool| -> Vec<f64> {
        output.samples.iter().map(|s| if noise { s.x_t[d] } else { s.x0[d] }).collect()
    };
    // shifted by the first value so a constant column averages to itself exactly
    let mean_of = |v: &[f64]| match v.first() {
        None => f64::NAN,
        Some(&x0) => x0 + v.iter().map(|x| x - x0).sum::<f64>() / v.len() as f64,
    };
    let mean_x0: Vec<f64> = (0..dim).map(|d| mean_of(&column(d, false))).collect();
    let mean_x_t: Vec<f64> = (0..output.initial.x_t.len()).map(|d| mean_of(&column(d, true))).collect();
    let cov_x0: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| {
                    if n < 2 {
                        return f64::NAN;
                    }
                    output.samples.iter().map(|s| (s.x0[i] - mean_x0[i]) * (s.x0[j] - mean_x0[j])).sum::<f64>()
                        / (n - 1) as f64
                })
                .collect()
        })
        .collect();
    let ess_x0: Vec<f64> = (0..dim).map(|d| effective_sample_size(&column(d, false))).collect();
    let se_x0: Vec<f64> = (0..dim).map(|d| (cov_x0[d][d] / ess_x0[d]).sqrt()).collect();
    let (mse_per_coord, mse, mean_mse, psnr) = match x_true {
        Some(t) if n > 0 => {
            let per: Vec<f64> = (0..dim)
                .map(|d| output.samples.iter().map(|s| (s.x0[d] - t[d]).powi(2)).sum::<f64>() / n as f64)
                .collect();
            let mse = per.iter().sum::<f64>() / dim as f64;
            let mean_mse = mean_x0.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / dim as f64;
            let psnr = if mean_mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mean_mse).log10() };
            (Some(per), Some(mse), Some(mean_mse), Some(psnr))
        }
        _ => (None, None, None, None),
    };
    let ks = oracle.filter(|_| n > 0).map(|o| {
        let noise = o.space() == OracleSpace::Noise;
        (0..o.dim()).map(|d| ks_test(&column(d, noise), o.marginal_cdf(d))).collect()
    });
    ChainMetrics {
        samples: n,
        mean_x0,
        cov_x0,
        mean_x_t,
        se_x0,
        ess_x0,
        mse_per_coord,
        mse,
        mean_mse,
        psnr,
        ks,
        oracle_mean: oracle.map(|o| o.mean()),
        acceptance_rate: output.acceptance_rate(),
        total_retries: output.total_retries(),
        final_sigma_hat: output.records.last().map(|r| r.sigma_hat),
    }
}
