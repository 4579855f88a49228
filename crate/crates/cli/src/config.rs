//! Experiment configuration: a JSON document that fully determines a run
//! together with its root seed.

use std::fmt;

use nhmc_core::rng::{stream_rng, stream_seed, Stream};
use nhmc_core::sampler::standard_normal_point;
use nhmc_core::{
    AlphaBarSchedule, DdimDecoder, ForwardOperator, ForwardProblem, GmmPrior, HmcConfig, LikelihoodMode, NoiseModel,
    SigmaAnnealSchedule, Shape, TimestepSchedule,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration that could not be parsed or does not describe a valid
/// experiment. The CLI exits with status 2 on these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(field: &str, err: impl fmt::Display) -> ConfigError {
    ConfigError(format!("{field}: {err}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub prior: PriorSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub decoder: DecoderSpec,
    pub operator: OperatorSpec,
    pub noise: NoiseModel,
    #[serde(default)]
    pub measurement: MeasurementSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub baselines: BaselineSpec,
    #[serde(default = "default_chains")]
    pub chains: u32,
    /// Peak signal value used for PSNR.
    #[serde(default = "default_peak")]
    pub peak: f64,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub success: SuccessSpec,
}

fn default_chains() -> u32 {
    1
}

fn default_peak() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    StandardNormal { dim: usize },
    #[serde(rename = "bimodal_1d")]
    Bimodal1d,
    #[serde(rename = "grid_2d")]
    Grid2d,
    RandomK { k: usize, dim: usize, seed: u64 },
    Gmm { weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub total_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { total_steps: 1000, beta_min: 1e-4, beta_max: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderSpec {
    Identity,
    /// Evenly spaced timesteps up to `t_max`, or an explicit list.
    Ddim {
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "default_t_max")]
        t_max: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timesteps: Option<Vec<usize>>,
    },
}

fn default_steps() -> usize {
    2
}

fn default_t_max() -> usize {
    750
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self::Ddim { steps: default_steps(), t_max: default_t_max(), timesteps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    Mask {
        keep: Vec<usize>,
    },
    RandomMask {
        drop_fraction: f64,
        seed: u64,
    },
    Avgpool {
        factor: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Shape>,
    },
    CircularBlur {
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Shape>,
    },
    DftMagnitude,
    TonemapClip {
        #[serde(default = "default_clip_scale")]
        scale: f64,
        #[serde(default)]
        lo: f64,
        #[serde(default = "default_clip_hi")]
        hi: f64,
    },
}

fn default_clip_scale() -> f64 {
    2.0
}

fn default_clip_hi() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementSpec {
    /// Draw a ground truth, apply the operator and corrupt with the noise model.
    Synthesize {
        #[serde(default)]
        x_true: TruthSpec,
    },
    /// Use a given measurement, optionally with a known ground truth for scoring.
    Given {
        y: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x_true: Option<Vec<f64>>,
    },
}

impl Default for MeasurementSpec {
    fn default() -> Self {
        Self::Synthesize { x_true: TruthSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    /// A draw from the prior.
    #[default]
    PriorSample,
    /// `D(z)` for `z ~ N(0, I)`, a draw from the decoder's pushforward. With
    /// `component`, draws are repeated until the result lies in that prior component.
    Decoded {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        component: Option<usize>,
    },
    Values { values: Vec<f64> },
}

/// HMC hyperparameters; the seed comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub iterations: usize,
    pub leapfrog_steps: usize,
    pub step_size: f64,
    pub decay: f64,
    pub sigma_schedule: SigmaAnnealSchedule,
    pub mode: LikelihoodMode,
    pub max_retries: usize,
    pub burn_in: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        let d = HmcConfig::default();
        Self {
            iterations: d.iterations,
            leapfrog_steps: d.leapfrog_steps,
            step_size: d.step_size,
            decay: d.decay,
            sigma_schedule: d.sigma_schedule,
            mode: d.mode,
            max_retries: d.max_retries,
            burn_in: d.burn_in,
        }
    }
}

impl SamplerSpec {
    pub fn hmc_config(&self, seed: u64) -> HmcConfig {
        HmcConfig {
            iterations: self.iterations,
            leapfrog_steps: self.leapfrog_steps,
            step_size: self.step_size,
            decay: self.decay,
            sigma_schedule: self.sigma_schedule,
            mode: self.mode,
            max_retries: self.max_retries,
            burn_in: self.burn_in,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangevinSpec {
    pub step: f64,
    pub iterations: usize,
}

impl Default for LangevinSpec {
    fn default() -> Self {
        Self { step: 0.01, iterations: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSpec {
    pub lr: f64,
    /// Defaults to `iterations * leapfrog_steps` of the sampler, matching its gradient budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Noise level of the known-sigma potential; falls back to `baselines.sigma`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self { lr: 1e-3, iterations: None, sigma: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    /// Noise level for the known-sigma methods (nhmc, ula, mala, map). When
    /// absent it is taken from a known-sigma sampler mode or a Gaussian noise model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub ula: LangevinSpec,
    pub mala: LangevinSpec,
    pub map: MapSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Exact conjugate oracle when available, else a grid for noise dimension <= 2.
    #[default]
    Auto,
    Conjugate,
    Grid,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub kind: OracleKind,
    /// Per-axis `[lo, hi]` in noise space; defaults to `[-8, 8]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
    pub resolution: usize,
    /// Prior scale for the residual statistic; defaults to the root mean prior variance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self { kind: OracleKind::Auto, bounds: None, resolution: 401, sigma0: None }
    }
}

/// Basin used to score success in comparisons: the prior component the final
/// state belongs to. Defaults to the component of the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SuccessSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chains == 0 {
            return Err(invalid("chains", "must be at least 1"));
        }
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return Err(invalid("peak", "must be positive"));
        }
        self.noise.validate().map_err(|e| invalid("noise", e))?;
        self.sampler.hmc_config(self.seed).validate().map_err(|e| invalid("sampler", e))?;
        Ok(())
    }

    /// JSON with sorted keys and no insignificant whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Known noise level for the known-sigma methods, if one can be determined.
    pub fn known_sigma(&self) -> Option<f64> {
        self.baselines.sigma.or(match self.sampler.mode {
            LikelihoodMode::KnownSigma { sigma } => Some(sigma),
            LikelihoodMode::Jeffreys => match self.noise {
                NoiseModel::Gaussian { sigma } => Some(sigma),
                _ => None,
            },
        })
    }

    pub fn build(&self) -> Result<Experiment, ConfigError> {
        let prior = match &self.prior {
            PriorSpec::StandardNormal { dim } => GmmPrior::standard_normal(*dim),
            PriorSpec::Bimodal1d => Ok(GmmPrior::bimodal_1d()),
            PriorSpec::Grid2d => Ok(GmmPrior::grid_2d()),
            PriorSpec::RandomK { k, dim, seed } => GmmPrior::random_k(*k, *dim, *seed),
            PriorSpec::Gmm { weights, means, variances } => GmmPrior::new(weights.clone(), means.clone(), variances.clone()),
        }
        .map_err(|e| invalid("prior", e))?;
        let n = prior.dim();
        let decoder = match &self.decoder {
            DecoderSpec::Identity => DdimDecoder::identity(n),
            DecoderSpec::Ddim { steps, t_max, timesteps } => {
                let s = &self.schedule;
                let schedule =
                    AlphaBarSchedule::linear(s.total_steps, s.beta_min, s.beta_max).map_err(|e| invalid("schedule", e))?;
                let ts = match timesteps {
                    Some(list) => TimestepSchedule::new(list.clone(), &schedule),
                    None => TimestepSchedule::evenly_spaced(&schedule, *steps, *t_max),
                }
                .map_err(|e| invalid("decoder", e))?;
                DdimDecoder::new(&schedule, &ts, &prior).map_err(|e| invalid("decoder", e))?
            }
        };
        let operator = match &self.operator {
            OperatorSpec::Identity => Ok(ForwardOperator::identity(n)),
            OperatorSpec::Mask { keep } => ForwardOperator::mask(n, keep.clone()),
            OperatorSpec::RandomMask { drop_fraction, seed } => ForwardOperator::random_mask(n, *drop_fraction, *seed),
            OperatorSpec::Avgpool { factor, shape } => ForwardOperator::avgpool(shape_for(*shape, n)?, *factor),
            OperatorSpec::CircularBlur { sigma, shape } => ForwardOperator::circular_blur(shape_for(*shape, n)?, *sigma),
            OperatorSpec::DftMagnitude => ForwardOperator::dft_magnitude(n),
            OperatorSpec::TonemapClip { scale, lo, hi } => ForwardOperator::tonemap_clip(n, *scale, *lo, *hi),
        }
        .map_err(|e| invalid("operator", e))?;
        let problem = match &self.measurement {
            MeasurementSpec::Synthesize { x_true } => {
                let truth = match x_true {
                    TruthSpec::PriorSample => prior.sample(&mut stream_rng(self.seed, Stream::GroundTruth)),
                    TruthSpec::Decoded { component } => decoded_truth(&prior, &decoder, self.seed, *component)?,
                    TruthSpec::Values { values } => {
                        if values.len() != n {
                            return Err(invalid("measurement.x_true.values", format!("expected {n} values, got {}", values.len())));
                        }
                        values.clone()
                    }
                };
                ForwardProblem::synthesize(operator, self.noise, truth, stream_seed(self.seed, Stream::Synthesis))
            }
            MeasurementSpec::Given { y, x_true } => {
                if let Some(t) = x_true {
                    if t.len() != n {
                        return Err(invalid("measurement.x_true", format!("expected {n} values, got {}", t.len())));
                    }
                }
                ForwardProblem::from_measurement(operator, self.noise, y.clone()).map(|mut p| {
                    p.x_true = x_true.clone();
                    p
                })
            }
        }
        .map_err(|e| invalid("measurement", e))?;
        if let Some(c) = self.success.component {
            if c >= prior.num_components() {
                return Err(invalid("success.component", format!("prior has {} components", prior.num_components())));
            }
        }
        Ok(Experiment { config: self.clone(), prior, decoder, problem })
    }
}

const MAX_TRUTH_DRAWS: usize = 10_000;

fn decoded_truth(prior: &GmmPrior, decoder: &DdimDecoder, seed: u64, component: Option<usize>) -> Result<Vec<f64>, ConfigError> {
    let field = "measurement.x_true";
    let mut rng = stream_rng(seed, Stream::GroundTruth);
    for _ in 0..MAX_TRUTH_DRAWS {
        let z = standard_normal_point(&mut rng, prior.dim());
        let x = decoder.decode(&z).map_err(|e| invalid(field, e))?;
        match component {
            None => return Ok(x),
            Some(c) if c >= prior.num_components() => {
                return Err(invalid(field, format!("prior has {} components", prior.num_components())))
            }
            Some(c) if prior.component_of(&x).map_err(|e| invalid(field, e))? == c => return Ok(x),
            Some(_) => {}
        }
    }
    Err(invalid(field, format!("no decoded draw landed in the requested component after {MAX_TRUTH_DRAWS} tries")))
}

fn shape_for(shape: Option<Shape>, n: usize) -> Result<Shape, ConfigError> {
    let shape = shape.unwrap_or(Shape::flat(n));
    if shape.len() != n {
        return Err(invalid("operator.shape", format!("{}x{} does not hold {n} values", shape.rows, shape.cols)));
    }
    Ok(shape)
}

/// A configuration resolved into concrete model objects.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub prior: GmmPrior,
    pub decoder: DdimDecoder,
    pub problem: ForwardProblem,
}

impl Experiment {
    pub fn hmc_config(&self) -> HmcConfig {
        self.config.sampler.hmc_config(self.config.seed)
    }

    pub fn x_true(&self) -> Option<&[f64]> {
        self.problem.x_true.as_deref()
    }
}
