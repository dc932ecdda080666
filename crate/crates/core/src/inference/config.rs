use serde::{Deserialize, Serialize};

use crate::basis::BasisConfig;
use crate::error::{Error, Result};

/// Dependence structure of the latent Gaussian copula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependenceMode {
    /// `Ψ = I`: cells are independent given covariates.
    Independent,
    /// One response, `Ψ = ZΔZ' + I + λΞ(α)`.
    CopulaUnivariate,
    /// `H` responses, `Ψ = ZΔZ' + Ξ(α) ⊗ Λ + I`.
    CopulaMultivariate,
}

/// A latent weight held at a known value instead of being sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedWeight {
    /// Response index (0-based).
    pub response: usize,
    /// Basis row (0-based).
    pub row: usize,
    /// Covariate column (0-based, 0 is the intercept).
    pub column: usize,
    pub value: f64,
}

/// Parameters pinned at known values; anything left `None` is sampled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedParams {
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    /// Random-effect variances, response-major (`H × R`).
    pub delta: Option<Vec<f64>>,
    /// Cross-response matrix, row-major (`H × H`).
    pub cross: Option<Vec<f64>>,
    pub shape: Option<f64>,
    pub weights: Vec<FixedWeight>,
}

/// What is fitted: basis, design and dependence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub basis: BasisConfig,
    pub dependence: DependenceMode,
    /// Fixed-effect covariate columns; the intercept is implicit.
    pub fixed_effects: Vec<String>,
    /// Random-effect design columns; `"intercept"` is the constant column.
    pub random_effects: Vec<String>,
    /// Covariates whose effect does not vary with the quantile level
    /// (their rows `m > 1` are pinned at zero).
    pub constant_effects: Vec<String>,
    /// Responses to model, in order; empty means every response in the data.
    pub responses: Vec<String>,
    /// Standardize each response to mean 0, SD 1 before fitting.
    pub standardize: bool,
    pub fixed: FixedParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            basis: BasisConfig::default(),
            dependence: DependenceMode::Independent,
            fixed_effects: Vec::new(),
            random_effects: Vec::new(),
            constant_effects: Vec::new(),
            responses: Vec::new(),
            standardize: true,
            fixed: FixedParams::default(),
        }
    }
}

/// Prior hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    /// Prior mean of `θ⋆` in the intercept column (used without shrinkage).
    pub theta_mean_intercept: f64,
    pub theta_mean_other: f64,
    pub theta_var: f64,
    /// Normal prior on the shrinkage locations `μ_mp`: mean for the
    /// intercept column of rows `m > 1`, mean elsewhere, and precision.
    pub mu_mean_intercept: f64,
    pub mu_mean_other: f64,
    pub mu_precision: f64,
    /// Gamma(shape, rate) on the shrinkage precisions `ι²_mp`.
    pub iota_shape: f64,
    pub iota_rate: f64,
    /// Inverse-Wishart on `Λ`: scale `cross_scale · I` and degrees of freedom.
    pub cross_scale: f64,
    pub cross_df: f64,
    pub delta_shape: f64,
    pub delta_rate: f64,
    pub lambda_shape: f64,
    pub lambda_rate: f64,
    /// Normal prior on the log Student-t shape.
    pub shape_log_mean: f64,
    pub shape_log_var: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        let ln10 = std::f64::consts::LN_10;
        Self {
            theta_mean_intercept: 1.0,
            theta_mean_other: 0.0,
            theta_var: 10.0,
            mu_mean_intercept: 1.0,
            mu_mean_other: 0.0,
            mu_precision: 1.0,
            iota_shape: 1.0,
            iota_rate: 1.0,
            cross_scale: 7.0,
            cross_df: 10.0,
            delta_shape: 1.0,
            delta_rate: 1.0,
            lambda_shape: 1.0,
            lambda_rate: 1.0,
            shape_log_mean: ln10,
            shape_log_var: ln10 / 2.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self, responses: usize) -> Result<()> {
        let positive = [
            ("theta_var", self.theta_var),
            ("mu_precision", self.mu_precision),
            ("iota_shape", self.iota_shape),
            ("iota_rate", self.iota_rate),
            ("cross_scale", self.cross_scale),
            ("delta_shape", self.delta_shape),
            ("delta_rate", self.delta_rate),
            ("lambda_shape", self.lambda_shape),
            ("lambda_rate", self.lambda_rate),
            ("shape_log_var", self.shape_log_var),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prior {name} must be positive, got {v}")));
            }
        }
        if !(self.cross_df > responses as f64 + 1.0) {
            return Err(Error::Config(format!(
                "inverse-Wishart degrees of freedom must exceed {}, got {}",
                responses + 1,
                self.cross_df
            )));
        }
        Ok(())
    }
}

/// Run length and randomness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
    /// Target acceptance rate for adaptive random-walk blocks.
    pub target_accept: f64,
    /// Keep per-subject random effects in the stored draws.
    pub store_random_effects: bool,
    /// Draw missing cells each retained iteration and report their posterior means.
    pub impute_missing: bool,
    /// Monte Carlo draws for multi-cell censored probabilities in LPML.
    pub ghk_draws: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 40_000,
            burn_in: 20_000,
            thin: 10,
            seed: 1,
            chains: 1,
            target_accept: 0.35,
            store_random_effects: false,
            impute_missing: true,
            ghk_draws: 400,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 || self.chains == 0 {
            return Err(Error::Config("thin and chains must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Everything needed to reproduce a fit: model, priors, MCMC settings and
/// the quantile levels to report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub priors: PriorSpec,
    pub mcmc: McmcConfig,
    pub report_grid: Vec<f64>,
}

pub const DEFAULT_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            priors: PriorSpec::default(),
            mcmc: McmcConfig::default(),
            report_grid: DEFAULT_GRID.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate()?;
        if self.report_grid.is_empty() || self.report_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("report grid must be non-empty and inside (0, 1)".into()));
        }
        self.model.basis.build()?;
        Ok(())
    }
}
