//! Forward measurement operators, their vector-Jacobian products, and
//! measurement synthesis under Gaussian, impulse and speckle noise.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Row-major layout of a flat signal. One-dimensional signals have `rows == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn flat(n: usize) -> Self {
        Self { rows: 1, cols: n }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<[usize; 2]> for Shape {
    fn from(v: [usize; 2]) -> Self {
        Self { rows: v[0], cols: v[1] }
    }
}

impl From<Shape> for [usize; 2] {
    fn from(s: Shape) -> Self {
        [s.rows, s.cols]
    }
}

#[derive(Clone)]
enum Kind {
    Identity,
    Mask { keep: Vec<usize> },
    AvgPool { factor: usize },
    CircularBlur { kernel: Vec<f64> },
    DftMagnitude { fft: Arc<dyn Fft<f64>> },
    TonemapClip { scale: f64, lo: f64, hi: f64 },
}

/// Measurement operator `A: R^n -> R^m` acting on flat signals.
#[derive(Clone)]
pub struct ForwardOperator {
    shape: Shape,
    kind: Kind,
}

impl std::fmt::Debug for ForwardOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardOperator")
            .field("kind", &self.name())
            .field("shape", &self.shape)
            .field("output_dim", &self.output_dim())
            .finish()
    }
}

impl ForwardOperator {
    pub fn identity(n: usize) -> Self {
        Self { shape: Shape::flat(n), kind: Kind::Identity }
    }

    /// Keeps the listed coordinates, in the order given.
    pub fn mask(n: usize, keep: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("mask index {bad} out of range for n = {n}")));
        }
        Ok(Self { shape: Shape::flat(n), kind: Kind::Mask { keep } })
    }

    /// Random inpainting mask dropping `drop_fraction` of the coordinates.
    pub fn random_mask(n: usize, drop_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop_fraction) {
            return Err(Error::InvalidArgument(format!("drop fraction {drop_fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // partial Fisher-Yates
        let kept = n - (drop_fraction * n as f64).round() as usize;
        for i in 0..kept {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let mut keep = idx[..kept].to_vec();
        keep.sort_unstable();
        Self::mask(n, keep)
    }

    /// Block means over `factor`-sized blocks (`factor x factor` for 2-D shapes).
    pub fn avgpool(shape: Shape, factor: usize) -> Result<Self> {
        let rows_ok = shape.rows == 1 || shape.rows % factor == 0;
        if factor == 0 || shape.cols % factor != 0 || !rows_ok {
            return Err(Error::InvalidArgument(format!(
                "pool factor {factor} does not divide shape {}x{}",
                shape.rows, shape.cols
            )));
        }
        Ok(Self { shape, kind: Kind::AvgPool { factor } })
    }

    /// Circular convolution with a Gaussian of width `sigma`, truncated at
    /// `4 sigma` and renormalized. 2-D shapes blur along both axes.
    pub fn circular_blur(shape: Shape, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) || shape.is_empty() {
            return Err(Error::InvalidArgument(format!("blur sigma {sigma} must be positive")));
        }
        let radius = (4.0 * sigma).ceil() as i64;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|v| *v /= total);
        Ok(Self { shape, kind: Kind::CircularBlur { kernel } })
    }

    /// Modulus of the real-input DFT, non-redundant half spectrum (`n/2 + 1` bins).
    pub fn dft_magnitude(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("dft_magnitude needs n >= 1".into()));
        }
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self { shape: Shape::flat(n), kind: Kind::DftMagnitude { fft } })
    }

    /// `clamp(scale * x, lo, hi)`.
    pub fn tonemap_clip(n: usize, scale: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid clip range [{lo}, {hi}]")));
        }
        Ok(Self { shape: Shape::flat(n), kind: Kind::TonemapClip { scale, lo, hi } })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            Kind::Identity => "identity",
            Kind::Mask { .. } => "mask",
            Kind::AvgPool { .. } => "avgpool",
            Kind::CircularBlur { .. } => "circular_blur",
            Kind::DftMagnitude { .. } => "dft_magnitude",
            Kind::TonemapClip { .. } => "tonemap_clip",
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn input_dim(&self) -> usize {
        self.shape.len()
    }

    pub fn output_dim(&self) -> usize {
        let n = self.input_dim();
        match &self.kind {
            Kind::Identity | Kind::CircularBlur { .. } | Kind::TonemapClip { .. } => n,
            Kind::Mask { keep } => keep.len(),
            Kind::AvgPool { factor } => n / factor / if self.shape.rows == 1 { 1 } else { *factor },
            Kind::DftMagnitude { .. } => n / 2 + 1,
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.kind, Kind::DftMagnitude { .. } | Kind::TonemapClip { .. })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        Ok(match &self.kind {
            Kind::Identity => x.to_vec(),
            Kind::Mask { keep } => keep.iter().map(|&i| x[i]).collect(),
            Kind::AvgPool { factor } => self.pool(x, *factor),
            Kind::CircularBlur { kernel, .. } => self.blur(x, kernel, false),
            Kind::DftMagnitude { fft } => {
                let spec = spectrum(fft.as_ref(), x);
                spec[..self.output_dim()].iter().map(|c| c.norm()).collect()
            }
            Kind::TonemapClip { scale, lo, hi } => x.iter().map(|v| (scale * v).clamp(*lo, *hi)).collect(),
        })
    }

    /// `cotangent^T dA/dx` at `x`.
    pub fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.output_dim(), cotangent.len())?;
        let n = self.input_dim();
        Ok(match &self.kind {
            Kind::Identity => cotangent.to_vec(),
            Kind::Mask { keep } => {
                let mut out = vec![0.0; n];
                for (&i, w) in keep.iter().zip(cotangent) {
                    out[i] += w;
                }
                out
            }
            Kind::AvgPool { factor } => self.pool_adjoint(cotangent, *factor),
            Kind::CircularBlur { kernel, .. } => self.blur(cotangent, kernel, true),
            Kind::DftMagnitude { fft } => {
                // d|X_k|/dx_j = Re(conj(X_k) e^{-2 pi i jk/n}) / |X_k|, so the VJP is
                // the real part of the forward DFT of c_k = w_k conj(X_k)/|X_k|.
                let spec = spectrum(fft.as_ref(), x);
                let mut c = vec![Complex64::new(0.0, 0.0); n];
                for (k, (w, xk)) in cotangent.iter().zip(&spec).enumerate() {
                    let modulus = xk.norm();
                    if modulus == 0.0 {
                        return Err(Error::NondifferentiablePoint { bin: k });
                    }
                    c[k] = xk.conj() * (w / modulus);
                }
                fft.process(&mut c);
                c.iter().map(|v| v.re).collect()
            }
            Kind::TonemapClip { scale, lo, hi } => x
                .iter()
                .zip(cotangent)
                .map(|(v, w)| {
                    let z = scale * v;
                    if z > *lo && z < *hi {
                        scale * w
                    } else {
                        0.0
                    }
                })
                .collect(),
        })
    }

    /// Dense matrix of a linear operator, assembled entry by entry from its
    /// definition. `None` for nonlinear kinds.
    pub fn matrix(&self) -> Option<DMatrix<f64>> {
        let n = self.input_dim();
        let m = self.output_dim();
        let mut a = DMatrix::zeros(m, n);
        match &self.kind {
            Kind::Identity => a.fill_with_identity(),
            Kind::Mask { keep } => {
                for (r, &i) in keep.iter().enumerate() {
                    a[(r, i)] = 1.0;
                }
            }
            Kind::AvgPool { factor } => {
                let f = *factor;
                let (rf, out_cols) = (if self.shape.rows == 1 { 1 } else { f }, self.shape.cols / f);
                let w = 1.0 / (rf * f) as f64;
                for i in 0..self.shape.rows {
                    for j in 0..self.shape.cols {
                        let out = (i / rf) * out_cols + j / f;
                        a[(out, i * self.shape.cols + j)] = w;
                    }
                }
            }
            Kind::CircularBlur { kernel, .. } => {
                let radius = (kernel.len() / 2) as i64;
                let (rows, cols) = (self.shape.rows as i64, self.shape.cols as i64);
                let row_kernel: Vec<(i64, f64)> = if rows == 1 {
                    vec![(0, 1.0)]
                } else {
                    kernel.iter().enumerate().map(|(k, &v)| (k as i64 - radius, v)).collect()
                };
                for i in 0..rows {
                    for j in 0..cols {
                        for &(di, wi) in &row_kernel {
                            for (k, &wj) in kernel.iter().enumerate() {
                                let dj = k as i64 - radius;
                                let src = (i - di).rem_euclid(rows) * cols + (j - dj).rem_euclid(cols);
                                a[((i * cols + j) as usize, src as usize)] += wi * wj;
                            }
                        }
                    }
                }
            }
            Kind::DftMagnitude { .. } | Kind::TonemapClip { .. } => return None,
        }
        Some(a)
    }

    fn pool(&self, x: &[f64], f: usize) -> Vec<f64> {
        let rf = if self.shape.rows == 1 { 1 } else { f };
        let out_cols = self.shape.cols / f;
        let mut out = vec![0.0; self.output_dim()];
        let w = 1.0 / (rf * f) as f64;
        for (idx, v) in x.iter().enumerate() {
            let (i, j) = (idx / self.shape.cols, idx % self.shape.cols);
            out[(i / rf) * out_cols + j / f] += w * v;
        }
        out
    }

    fn pool_adjoint(&self, w: &[f64], f: usize) -> Vec<f64> {
        let rf = if self.shape.rows == 1 { 1 } else { f };
        let out_cols = self.shape.cols / f;
        let scale = 1.0 / (rf * f) as f64;
        (0..self.input_dim())
            .map(|idx| {
                let (i, j) = (idx / self.shape.cols, idx % self.shape.cols);
                scale * w[(i / rf) * out_cols + j / f]
            })
            .collect()
    }

    /// Separable circular convolution; `adjoint` flips the kernel offsets.
    fn blur(&self, x: &[f64], kernel: &[f64], adjoint: bool) -> Vec<f64> {
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let radius = (kernel.len() / 2) as i64;
        let sign = if adjoint { -1 } else { 1 };
        let along = |src: &[f64], len: usize, stride: usize, count: usize, step: usize| {
            let mut out = vec![0.0; src.len()];
            for line in 0..count {
                let base = line * step;
                for p in 0..len as i64 {
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let q = (p - sign * (k as i64 - radius)).rem_euclid(len as i64) as usize;
                        acc += w * src[base + q * stride];
                    }
                    out[base + p as usize * stride] = acc;
                }
            }
            out
        };
        let horizontal = along(x, cols, 1, rows, cols);
        if rows == 1 {
            horizontal
        } else {
            along(&horizontal, rows, cols, cols, 1)
        }
    }
}

fn spectrum(fft: &dyn Fft<f64>, x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf
}

/// Measurement noise models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// Additive `N(0, sigma^2)`.
    Gaussian { sigma: f64 },
    /// Each entry replaced by 0 or by 1, each with probability `p / 2`.
    Impulse { p: f64 },
    /// `y (1 + eps)` with `eps ~ U(0, bound)` drawn per entry.
    Speckle { bound: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseModel::Gaussian { sigma } => sigma >= 0.0 && sigma.is_finite(),
            NoiseModel::Impulse { p } => (0.0..=1.0).contains(&p),
            NoiseModel::Speckle { bound } => bound >= 0.0 && bound.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid noise model {self:?}")))
        }
    }

    /// Corrupts a clean measurement in place.
    pub fn corrupt<R: Rng + ?Sized>(&self, clean: &mut [f64], rng: &mut R) {
        match *self {
            NoiseModel::Gaussian { sigma } => clean.iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }),
            NoiseModel::Impulse { p } => clean.iter_mut().for_each(|v| {
                let u: f64 = rng.random();
                if u < p / 2.0 {
                    *v = 0.0;
                } else if u < p {
                    *v = 1.0;
                }
            }),
            NoiseModel::Speckle { bound } => clean.iter_mut().for_each(|v| {
                let eps: f64 = rng.random::<f64>() * bound;
                *v *= 1.0 + eps;
            }),
        }
    }
}

/// Operator, noise model and observed measurement.
#[derive(Debug, Clone)]
pub struct ForwardProblem {
    pub operator: ForwardOperator,
    pub noise: NoiseModel,
    pub y: Vec<f64>,
    pub x_true: Option<Vec<f64>>,
    pub seed: u64,
}

impl ForwardProblem {
    /// Wraps an externally supplied measurement.
    pub fn from_measurement(operator: ForwardOperator, noise: NoiseModel, y: Vec<f64>) -> Result<Self> {
        check_dim(operator.output_dim(), y.len())?;
        Ok(Self { operator, noise, y, x_true: None, seed: 0 })
    }

    /// `y = noise(A(x_true))` with all randomness drawn from `seed`.
    pub fn synthesize(operator: ForwardOperator, noise: NoiseModel, x_true: Vec<f64>, seed: u64) -> Result<Self> {
        noise.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = operator.apply(&x_true)?;
        noise.corrupt(&mut y, &mut rng);
        Ok(Self { operator, noise, y, x_true: Some(x_true), seed })
    }

    /// Re-synthesizes `y` from the stored ground truth and seed.
    pub fn regenerate(&self) -> Result<Vec<f64>> {
        let x = self
            .x_true
            .clone()
            .ok_or_else(|| Error::InvalidArgument("problem has no ground truth".into()))?;
        Ok(Self::synthesize(self.operator.clone(), self.noise, x, self.seed)?.y)
    }

    pub fn measurement_dim(&self) -> usize {
        self.y.len()
    }

    pub fn residual(&self, x0: &[f64]) -> Result<Vec<f64>> {
        let ax = self.operator.apply(x0)?;
        Ok(self.y.iter().zip(&ax).map(|(a, b)| a - b).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn linear_ops() -> Vec<ForwardOperator> {
        vec![
            ForwardOperator::identity(12),
            ForwardOperator::mask(12, vec![0, 3, 4, 9, 11]).unwrap(),
            ForwardOperator::random_mask(12, 0.5, 3).unwrap(),
            ForwardOperator::avgpool(Shape::flat(12), 3).unwrap(),
            ForwardOperator::avgpool(Shape { rows: 4, cols: 3 }, 1).unwrap(),
            ForwardOperator::avgpool(Shape { rows: 6, cols: 2 }, 2).unwrap(),
            ForwardOperator::circular_blur(Shape::flat(12), 0.8).unwrap(),
            ForwardOperator::circular_blur(Shape { rows: 3, cols: 4 }, 1.3).unwrap(),
        ]
    }

    #[test]
    fn avgpool_block_means() {
        let op = ForwardOperator::avgpool(Shape::flat(4), 2).unwrap();
        assert_eq!(op.apply(&[1.0, 3.0, 5.0, 7.0]).unwrap(), vec![2.0, 6.0]);
        let op2 = ForwardOperator::avgpool(Shape { rows: 2, cols: 2 }, 2).unwrap();
        assert_eq!(op2.apply(&[1.0, 3.0, 5.0, 7.0]).unwrap(), vec![4.0]);
        assert!(ForwardOperator::avgpool(Shape::flat(5), 2).is_err());
    }

    #[test]
    fn dft_of_impulse_is_flat() {
        let op = ForwardOperator::dft_magnitude(8).unwrap();
        let mut x = vec![0.0; 8];
        x[0] = 1.0;
        let y = op.apply(&x).unwrap();
        assert_eq!(y.len(), 5);
        for v in y {
            assert_relative_eq!(v, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        for shape in [Shape::flat(9), Shape { rows: 3, cols: 5 }] {
            let op = ForwardOperator::circular_blur(shape, 1.1).unwrap();
            let y = op.apply(&vec![0.7; shape.len()]).unwrap();
            for v in y {
                assert_relative_eq!(v, 0.7, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn mask_adjoint_scatters() {
        let op = ForwardOperator::mask(4, vec![0, 2]).unwrap();
        assert_eq!(op.vjp(&[0.0; 4], &[5.0, 7.0]).unwrap(), vec![5.0, 0.0, 7.0, 0.0]);
    }

    #[test]
    fn tonemap_linear_region_vjp() {
        let op = ForwardOperator::tonemap_clip(3, 2.0, 0.0, 1.0).unwrap();
        let x = [0.1, 0.2, 0.4];
        assert_eq!(op.vjp(&x, &[1.0, -1.0, 0.5]).unwrap(), vec![2.0, -2.0, 1.0]);
        assert_eq!(op.apply(&[-0.3, 0.25, 0.9]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(op.vjp(&[-0.3, 0.25, 0.9], &[1.0, 1.0, 1.0]).unwrap(), vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn dft_vjp_matches_finite_differences() {
        let op = ForwardOperator::dft_magnitude(7).unwrap();
        let x = [0.3, -1.2, 0.8, 0.1, 0.5, -0.4, 1.0];
        let w = [0.2, -0.7, 1.1, 0.4];
        let v = op.vjp(&x, &w).unwrap();
        for j in 0..7 {
            let h = 1e-6;
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[j] += h;
            m[j] -= h;
            let fd = (dot(&op.apply(&p).unwrap(), &w) - dot(&op.apply(&m).unwrap(), &w)) / (2.0 * h);
            assert_relative_eq!(v[j], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn dft_vjp_rejects_zero_bins() {
        let op = ForwardOperator::dft_magnitude(4).unwrap();
        // [1, 1, 1, 1] has zero energy outside the DC bin
        let err = op.vjp(&[1.0; 4], &[1.0, 1.0, 1.0]).unwrap_err();
        assert_eq!(err, Error::NondifferentiablePoint { bin: 1 });
    }

    #[test]
    fn dimension_mismatch() {
        let op = ForwardOperator::identity(3);
        assert!(matches!(op.apply(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!(ForwardOperator::mask(3, vec![3]).is_err());
    }

    #[test]
    fn random_mask_keeps_requested_fraction() {
        let op = ForwardOperator::random_mask(100, 0.92, 1).unwrap();
        assert_eq!(op.output_dim(), 8);
    }

    #[test]
    fn zero_noise_is_exact() {
        let op = ForwardOperator::avgpool(Shape::flat(4), 2).unwrap();
        let x = vec![0.1, 0.5, 0.9, 0.3];
        let clean = op.apply(&x).unwrap();
        for noise in [NoiseModel::Gaussian { sigma: 0.0 }, NoiseModel::Impulse { p: 0.0 }, NoiseModel::Speckle { bound: 0.0 }] {
            let p = ForwardProblem::synthesize(op.clone(), noise, x.clone(), 9).unwrap();
            assert_eq!(p.y, clean);
        }
    }

    #[test]
    fn impulse_replaces_with_zero_or_one() {
        let op = ForwardOperator::identity(2000);
        let x = vec![0.5; 2000];
        let p = ForwardProblem::synthesize(op, NoiseModel::Impulse { p: 0.2 }, x, 4).unwrap();
        let zeros = p.y.iter().filter(|v| **v == 0.0).count() as f64 / 2000.0;
        let ones = p.y.iter().filter(|v| **v == 1.0).count() as f64 / 2000.0;
        assert!(p.y.iter().all(|v| *v == 0.0 || *v == 1.0 || *v == 0.5));
        assert!((zeros - 0.1).abs() < 0.03 && (ones - 0.1).abs() < 0.03);
    }

    #[test]
    fn speckle_is_multiplicative_and_bounded() {
        let op = ForwardOperator::identity(500);
        let x: Vec<f64> = (0..500).map(|i| 0.1 + i as f64 / 500.0).collect();
        let p = ForwardProblem::synthesize(op, NoiseModel::Speckle { bound: 0.4 }, x.clone(), 4).unwrap();
        for (y, c) in p.y.iter().zip(&x) {
            let ratio = y / c - 1.0;
            assert!((0.0..=0.4).contains(&ratio));
        }
    }

    #[test]
    fn gaussian_noise_level_concentrates() {
        // chi concentration: ||z|| / sqrt(m) has sd ~ 1/sqrt(2m) = 0.011 at m = 4096,
        // so [0.9, 1.1] is a > 9 sd window
        let op = ForwardOperator::identity(4096);
        let x = vec![0.3; 4096];
        let clean = op.apply(&x).unwrap();
        for seed in 0..1000 {
            let p = ForwardProblem::synthesize(op.clone(), NoiseModel::Gaussian { sigma: 0.05 }, x.clone(), seed).unwrap();
            let rms = (p.y.iter().zip(&clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4096.0).sqrt();
            assert!((0.045..=0.055).contains(&rms), "seed {seed}: {rms}");
        }
    }

    #[test]
    fn synthesis_is_reproducible() {
        let op = ForwardOperator::circular_blur(Shape::flat(16), 1.0).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let p = ForwardProblem::synthesize(op, NoiseModel::Gaussian { sigma: 0.1 }, x, 77).unwrap();
        let again = p.regenerate().unwrap();
        assert!(p.y.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    proptest! {
        #[test]
        fn adjoint_identity(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for op in linear_ops() {
                let x: Vec<f64> = (0..op.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let w: Vec<f64> = (0..op.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let lhs = dot(&op.apply(&x).unwrap(), &w);
                let rhs = dot(&x, &op.vjp(&x, &w).unwrap());
                prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1e-3), "{}: {lhs} vs {rhs}", op.name());
            }
        }

        #[test]
        fn matrix_matches_apply(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for op in linear_ops() {
                let x: Vec<f64> = (0..op.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = op.matrix().unwrap();
                let ax = &a * nalgebra::DVector::from_column_slice(&x);
                let y = op.apply(&x).unwrap();
                for (u, v) in ax.iter().zip(&y) {
                    prop_assert!((u - v).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn magnitude_is_sign_blind(x in prop::collection::vec(-2.0f64..2.0, 1..10)) {
            let op = ForwardOperator::dft_magnitude(x.len()).unwrap();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let a = op.apply(&x).unwrap();
            let b = op.apply(&neg).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn nonlinear_ops_have_no_matrix() {
        assert!(ForwardOperator::dft_magnitude(4).unwrap().matrix().is_none());
        assert!(ForwardOperator::tonemap_clip(4, 2.0, 0.0, 1.0).unwrap().matrix().is_none());
    }
}
