//! Noise-space potential energies `U(x_T) = -log p(x_T | y) + const`.
//!
//! Two likelihoods are supported: Gaussian with a known noise level, and the
//! Jeffreys-marginalized likelihood `(m/2) log ||y - A(D(x_T))||^2` used when the
//! noise level is unknown. Additive constants are dropped in both, so values
//! are only comparable within one mode.

use serde::{Deserialize, Serialize};

use crate::decoder::{DdimDecoder, Tape};
use crate::error::{check_dim, Error, Result};
use crate::operators::ForwardProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LikelihoodMode {
    KnownSigma { sigma: f64 },
    Jeffreys,
}

/// Decoded state and potential value at one point of noise space.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub x0: Vec<f64>,
    pub residual: Vec<f64>,
    tape: Tape,
}

impl Evaluation {
    pub fn residual_sq(&self) -> f64 {
        self.residual.iter().map(|r| r * r).sum()
    }

    /// `||y - A(x0)|| / sqrt(m)`.
    pub fn sigma_hat(&self) -> f64 {
        (self.residual_sq() / self.residual.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Potential<'a> {
    pub mode: LikelihoodMode,
    pub problem: &'a ForwardProblem,
    pub decoder: &'a DdimDecoder,
}

impl<'a> Potential<'a> {
    pub fn new(mode: LikelihoodMode, problem: &'a ForwardProblem, decoder: &'a DdimDecoder) -> Result<Self> {
        if let LikelihoodMode::KnownSigma { sigma } = mode {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidArgument(format!("known sigma must be positive, got {sigma}")));
            }
        }
        check_dim(decoder.dim(), problem.operator.input_dim())?;
        Ok(Self { mode, problem, decoder })
    }

    pub fn dim(&self) -> usize {
        self.decoder.dim()
    }

    pub fn evaluate(&self, x_t: &[f64]) -> Result<Evaluation> {
        let (x0, tape) = self.decoder.decode_with_tape(x_t)?;
        let residual = self.problem.residual(&x0)?;
        let prior = 0.5 * x_t.iter().map(|v| v * v).sum::<f64>();
        let sq: f64 = residual.iter().map(|r| r * r).sum();
        let likelihood = match self.mode {
            LikelihoodMode::KnownSigma { sigma } => sq / (2.0 * sigma * sigma),
            LikelihoodMode::Jeffreys => {
                if sq == 0.0 {
                    return Err(Error::DegenerateFit);
                }
                0.5 * residual.len() as f64 * sq.ln()
            }
        };
        Ok(Evaluation { value: prior + likelihood, x0, residual, tape })
    }

    /// Gradient at the point `eval` was computed for.
    pub fn gradient_at(&self, x_t: &[f64], eval: &Evaluation) -> Result<Vec<f64>> {
        let weight = match self.mode {
            LikelihoodMode::KnownSigma { sigma } => 1.0 / (sigma * sigma),
            LikelihoodMode::Jeffreys => {
                let sq = eval.residual_sq();
                if sq == 0.0 {
                    return Err(Error::DegenerateFit);
                }
                eval.residual.len() as f64 / sq
            }
        };
        let neg_r: Vec<f64> = eval.residual.iter().map(|r| -r).collect();
        let op_grad = self.problem.operator.vjp(&eval.x0, &neg_r)?;
        let dec_grad = self.decoder.vjp_with_tape(&eval.tape, &op_grad)?;
        Ok(x_t.iter().zip(&dec_grad).map(|(x, g)| x + weight * g).collect())
    }

    pub fn value(&self, x_t: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x_t)?.value)
    }

    pub fn gradient(&self, x_t: &[f64]) -> Result<Vec<f64>> {
        let eval = self.evaluate(x_t)?;
        self.gradient_at(x_t, &eval)
    }

    pub fn value_and_gradient(&self, x_t: &[f64]) -> Result<(Evaluation, Vec<f64>)> {
        let eval = self.evaluate(x_t)?;
        let grad = self.gradient_at(x_t, &eval)?;
        Ok((eval, grad))
    }
}
