use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BaseFamily, FamilyConfig};
use crate::copula::CopulaParams;
use crate::error::{Error, Result};
use crate::qfmodel::{FixedEffects, Weights};

use super::config::DependenceMode;
use super::model::ModelDescriptor;

/// One retained iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `θ⋆`, response-major then row-major (`H × M × P`).
    pub theta_star: Vec<f64>,
    pub shape: Option<f64>,
    pub alpha: f64,
    /// `Λ` row-major (`H × H`); `[λ]` in the univariate model.
    pub cross: Vec<f64>,
    /// `Δ` response-major (`H × R`).
    pub delta: Vec<f64>,
    /// Shrinkage locations and precisions (`M × P`), empty without shrinkage.
    pub mu: Vec<f64>,
    pub iota2: Vec<f64>,
    /// Random effects, subject-major (`N × H × R`), empty unless stored.
    pub gamma: Vec<f64>,
    /// Raw-scale observed-data log-likelihood per subject.
    pub subject_loglik: Vec<f64>,
    /// Mean `U` over augmented censored cells in this iteration.
    pub censored_u_mean: Option<f64>,
}

/// Acceptance bookkeeping for one Metropolis block after burn-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub proposals: usize,
    pub accepted: usize,
    pub rate: f64,
    /// Final proposal scale.
    pub step: f64,
    /// Rate outside `[0.1, 0.7]`.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub chain: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub acceptance: Vec<BlockAcceptance>,
    /// Latent uniforms clamped away from 0 or 1.
    pub pit_clamped: usize,
    /// Unit of the CPO computation.
    pub cpo_unit: String,
    /// `Λ` is carried as a covariance and reported as a correlation.
    pub cross_carriage: String,
}

/// Posterior mean of an augmented cell on the raw scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    pub record: usize,
    pub subject: String,
    pub mean_y: f64,
    pub mean_u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub descriptor: ModelDescriptor,
    pub meta: RunMeta,
    pub subjects: Vec<String>,
    pub samples: Vec<Sample>,
    pub censored: Vec<CellEstimate>,
    pub imputed: Vec<CellEstimate>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn sample(&self, k: usize) -> Result<&Sample> {
        self.samples
            .get(k)
            .ok_or_else(|| Error::Dimension(format!("draw {k} out of range ({})", self.len())))
    }

    /// Fixed effects of every response at draw `k`.
    pub fn fixed_effects(&self, k: usize) -> Result<Vec<FixedEffects>> {
        let s = self.sample(k)?;
        let d = &self.descriptor;
        let mut basis_cfg = d.basis.clone();
        if let Some(shape) = s.shape {
            basis_cfg.family = FamilyConfig::StudentT { shape };
        }
        let basis = basis_cfg.build()?;
        let (m, p) = (d.num_basis(), d.num_covariates());
        (0..d.num_responses())
            .map(|h| {
                let block = &s.theta_star[h * m * p..(h + 1) * m * p];
                let rows: Vec<Vec<f64>> = block.chunks(p).map(<[f64]>::to_vec).collect();
                FixedEffects::new(basis.clone(), Weights::from_rows(&rows)?)
            })
            .collect()
    }

    /// Copula parameters at draw `k`.
    pub fn copula(&self, k: usize) -> Result<CopulaParams> {
        let s = self.sample(k)?;
        let d = &self.descriptor;
        let (h, r) = (d.num_responses(), d.num_random());
        Ok(match d.dependence {
            DependenceMode::Independent => CopulaParams::independent(h, r),
            DependenceMode::CopulaUnivariate => {
                CopulaParams::univariate(s.alpha, s.cross[0], s.delta.clone())?
            }
            DependenceMode::CopulaMultivariate => CopulaParams::multivariate(
                s.alpha,
                DMatrix::from_row_slice(h, h, &s.cross),
                DMatrix::from_row_slice(h, r, &s.delta),
            )?,
        })
    }

    /// Base family at draw `k`.
    pub fn family(&self, k: usize) -> Result<BaseFamily> {
        match self.sample(k)?.shape {
            Some(shape) => BaseFamily::student_t(shape),
            None => self.descriptor.basis.family.build(),
        }
    }

    /// Concatenate chains run on the same model.
    pub fn pool(chains: &[PosteriorDraws]) -> Result<PosteriorDraws> {
        let first = chains.first().ok_or_else(|| Error::Config("no chains to pool".into()))?;
        let mut out = first.clone();
        for c in &chains[1..] {
            if c.descriptor != first.descriptor || c.subjects != first.subjects {
                return Err(Error::Config("chains describe different models".into()));
            }
            out.samples.extend(c.samples.iter().cloned());
        }
        let n = chains.len() as f64;
        for (i, cell) in out.censored.iter_mut().enumerate() {
            cell.mean_y = chains.iter().map(|c| c.censored[i].mean_y).sum::<f64>() / n;
            cell.mean_u = chains.iter().map(|c| c.censored[i].mean_u).sum::<f64>() / n;
        }
        for (i, cell) in out.imputed.iter_mut().enumerate() {
            cell.mean_y = chains.iter().map(|c| c.imputed[i].mean_y).sum::<f64>() / n;
            cell.mean_u = chains.iter().map(|c| c.imputed[i].mean_u).sum::<f64>() / n;
        }
        Ok(out)
    }

    /// Named scalar parameter traces (constrained `θ`, copula parameters,
    /// shape), used for diagnostics and summaries.
    pub fn scalar_traces(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let d = &self.descriptor;
        let (h, m, p, r) = (d.num_responses(), d.num_basis(), d.num_covariates(), d.num_random());
        let mut names = Vec::new();
        for hh in 0..h {
            for mm in 0..m {
                for pp in 0..p {
                    names.push(format!("theta[{},{},{}]", d.responses[hh], mm + 1, d.fixed_names[pp]));
                }
            }
        }
        let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(self.len()); names.len()];
        for k in 0..self.len() {
            let fixed = self.fixed_effects(k)?;
            let mut idx = 0;
            for fe in &fixed {
                for v in fe.theta().as_slice() {
                    traces[idx].push(*v);
                    idx += 1;
                }
            }
        }
        let mut out: Vec<(String, Vec<f64>)> = names.into_iter().zip(traces).collect();
        let col = |f: &dyn Fn(&Sample) -> f64| self.samples.iter().map(f).collect::<Vec<_>>();
        if self.samples.first().and_then(|s| s.shape).is_some() {
            out.push(("shape".into(), col(&|s| s.shape.unwrap_or(f64::NAN))));
        }
        match d.dependence {
            DependenceMode::Independent => {}
            DependenceMode::CopulaUnivariate => {
                out.push(("alpha".into(), col(&|s| s.alpha)));
                out.push(("lambda".into(), col(&|s| s.cross[0])));
            }
            DependenceMode::CopulaMultivariate => {
                out.push(("alpha".into(), col(&|s| s.alpha)));
                for a in 0..h {
                    for b in a..h {
                        let name = if a == b {
                            format!("cross[{},{}]", d.responses[a], d.responses[b])
                        } else {
                            format!("cross_corr[{},{}]", d.responses[a], d.responses[b])
                        };
                        out.push((
                            name,
                            col(&|s| {
                                if a == b {
                                    s.cross[a * h + a]
                                } else {
                                    s.cross[a * h + b]
                                        / (s.cross[a * h + a] * s.cross[b * h + b]).sqrt()
                                }
                            }),
                        ));
                    }
                }
            }
        }
        if d.dependence != DependenceMode::Independent {
            for hh in 0..h {
                for rr in 0..r {
                    out.push((
                        format!("delta[{},{}]", d.responses[hh], d.random_names[rr]),
                        col(&|s| s.delta[hh * r + rr]),
                    ));
                }
            }
        }
        Ok(out)
    }
}
