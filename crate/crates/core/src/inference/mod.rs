//! Posterior inference: configuration, the Metropolis-within-Gibbs sampler,
//! LPML model comparison, posterior summaries, convergence diagnostics and
//! on-disk run storage.

mod config;
mod diagnostics;
mod draws;
mod likelihood;
mod lpml;
mod model;
mod sampler;
mod storage;
mod summary;

use rayon::prelude::*;

use crate::data::PanelDataset;
use crate::error::Result;

pub use config::{
    DependenceMode, FixedParams, FixedWeight, McmcConfig, ModelConfig, PriorSpec, RunConfig,
    DEFAULT_GRID,
};
pub use diagnostics::{diagnostics, effective_sample_size, split_rhat, ParamDiagnostic};
pub use draws::{BlockAcceptance, CellEstimate, PosteriorDraws, RunMeta, Sample};
pub use likelihood::{gaussian_orthant, loglik_subject, random_effect_conditional};
pub use lpml::{lpml, lpml_from_loglik, lpml_on, LpmlReport, MIN_LPML_DRAWS};
pub use model::{Cell, ModelData, ModelDescriptor, Subject, INTERCEPT};
pub use sampler::truncated_normal_above;
pub use storage::{read_run, write_run, RunManifest, RunOutputs};
pub use summary::{
    interval, summarize, EffectSummary, Interval, ParameterSummary, PosteriorSummary,
    QuantileSummary,
};

/// Run one chain on prepared data.
pub fn run_sampler(
    data: &ModelData,
    priors: &PriorSpec,
    mcmc: &McmcConfig,
    fixed: &FixedParams,
    chain: usize,
) -> Result<PosteriorDraws> {
    sampler::Sampler::new(data, priors, mcmc, fixed, chain)?.run(chain)
}

/// A completed fit: the model view of the data and one draw set per chain.
#[derive(Clone, Debug)]
pub struct Fit {
    pub data: ModelData,
    pub chains: Vec<PosteriorDraws>,
}

impl Fit {
    /// All chains concatenated.
    pub fn pooled(&self) -> Result<PosteriorDraws> {
        PosteriorDraws::pool(&self.chains)
    }
}

/// Prepare `dataset` under `config` and run every chain. Chains run in
/// parallel; results do not depend on the number of worker threads.
pub fn fit(dataset: &PanelDataset, config: &RunConfig) -> Result<Fit> {
    config.validate()?;
    let data = ModelData::prepare(dataset, &config.model)?;
    let chains = (0..config.mcmc.chains)
        .into_par_iter()
        .map(|c| run_sampler(&data, &config.priors, &config.mcmc, &config.model.fixed, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Fit { data, chains })
}
