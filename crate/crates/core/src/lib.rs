//! Posterior sampling for inverse problems in the noise space of a
//! deterministic diffusion decoder.
//!
//! A clean signal is modelled as `x0 = D(x_T)` with `x_T ~ N(0, I)` and `D` a
//! few-step DDIM decoder driven by the exact score of a Gaussian-mixture prior.
//! Observations `y = A(x0) + noise` are inverted by running Hamiltonian Monte
//! Carlo on `x_T`, either with a known noise level or with the noise level
//! integrated out under a Jeffreys prior.
//!
//! ```
//! use nhmc_core::{DdimDecoder, ForwardOperator, ForwardProblem, GmmPrior, HmcConfig, NoiseModel};
//! use nhmc_core::rng::{stream_rng, Stream};
//!
//! let prior = GmmPrior::bimodal_1d();
//! let decoder = DdimDecoder::two_step(&prior).unwrap();
//! let problem = ForwardProblem::synthesize(
//!     ForwardOperator::identity(1),
//!     NoiseModel::Gaussian { sigma: 0.1 },
//!     vec![1.0],
//!     7,
//! )
//! .unwrap();
//! let cfg = HmcConfig { iterations: 30, ..Default::default() };
//! let out = nhmc_core::sampler::run_chain(&cfg, &problem, &decoder, stream_rng(7, Stream::Chain(0))).unwrap();
//! assert_eq!(out.records.len(), 30);
//! ```

pub mod decoder;
pub mod error;
pub mod likelihood;
pub mod operators;
pub mod oracle;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod schedules;
pub mod stats;

pub use decoder::DdimDecoder;
pub use error::{Error, Result};
pub use likelihood::{LikelihoodMode, Potential};
pub use operators::{ForwardOperator, ForwardProblem, NoiseModel, Shape};
pub use oracle::PosteriorOracle;
pub use prior::GmmPrior;
pub use sampler::{ChainOutput, HmcConfig};
pub use schedules::{AlphaBarSchedule, SigmaAnnealSchedule, TimestepSchedule};
