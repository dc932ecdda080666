use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};

use super::draws::PosteriorDraws;
use super::likelihood::loglik_subject;
use super::model::ModelData;
use super::sampler::ghk_seed;
use super::config::DependenceMode;

/// Fewest retained draws accepted for a CPO estimate.
pub const MIN_LPML_DRAWS: usize = 100;

/// Log pseudo marginal likelihood with per-subject log CPO.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpmlReport {
    pub lpml: f64,
    pub log_cpo: Vec<f64>,
    /// Subjects whose CPO is not finite; excluded from `lpml`.
    pub flagged: Vec<usize>,
}

/// LPML from a draws × subjects matrix of log-likelihoods:
/// `log CPO_i = log D − logsumexp_d(−ℓ_di)`.
pub fn lpml_from_loglik(loglik: &[Vec<f64>]) -> Result<LpmlReport> {
    let draws = loglik.len();
    if draws < MIN_LPML_DRAWS {
        return Err(Error::Config(format!(
            "LPML needs at least {MIN_LPML_DRAWS} draws, got {draws}"
        )));
    }
    let subjects = loglik[0].len();
    if loglik.iter().any(|row| row.len() != subjects) {
        return Err(Error::Dimension("ragged log-likelihood matrix".into()));
    }
    let ln_d = (draws as f64).ln();
    let mut log_cpo = Vec::with_capacity(subjects);
    let mut flagged = Vec::new();
    let mut total = 0.0;
    for i in 0..subjects {
        let max = loglik.iter().map(|row| -row[i]).fold(f64::NEG_INFINITY, f64::max);
        let v = if max.is_finite() {
            let s: f64 = loglik.iter().map(|row| (-row[i] - max).exp()).sum();
            ln_d - (max + s.ln())
        } else {
            // max = +∞: some draw gives the subject zero likelihood.
            f64::NEG_INFINITY
        };
        if v.is_finite() {
            total += v;
        } else {
            flagged.push(i);
        }
        log_cpo.push(v);
    }
    Ok(LpmlReport { lpml: total, log_cpo, flagged })
}

/// LPML from the subject log-likelihoods stored with the draws.
pub fn lpml(draws: &PosteriorDraws) -> Result<LpmlReport> {
    let m: Vec<Vec<f64>> = draws.samples.iter().map(|s| s.subject_loglik.clone()).collect();
    lpml_from_loglik(&m)
}

/// LPML of the stored draws re-evaluated on `dataset` under the run's
/// frozen scalings.
pub fn lpml_on(draws: &PosteriorDraws, dataset: &PanelDataset, ghk_draws: usize) -> Result<LpmlReport> {
    let data = ModelData::with_descriptor(dataset, draws.descriptor.clone())?;
    let independent = draws.descriptor.dependence == DependenceMode::Independent;
    let jac: Vec<f64> = (0..data.num_subjects()).map(|i| data.log_jacobian(i)).collect();
    let mut m = Vec::with_capacity(draws.len());
    for k in 0..draws.len() {
        let fixed = draws.fixed_effects(k)?;
        let params = draws.copula(k)?;
        let row = data
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                loglik_subject(&s.cells, &fixed, &params, independent, ghk_draws, ghk_seed(draws.meta.seed, i))
                    .map(|ll| ll - jac[i])
            })
            .collect::<Result<Vec<_>>>()?;
        m.push(row);
    }
    lpml_from_loglik(&m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_likelihood_gives_its_log() {
        let m = vec![vec![-1.5, -2.0]; 200];
        let r = lpml_from_loglik(&m).unwrap();
        assert!((r.lpml + 3.5).abs() < 1e-12);
    }

    #[test]
    fn harmonic_mean_is_below_arithmetic_mean() {
        let m: Vec<Vec<f64>> = (0..200).map(|d| vec![-1.0 - (d % 7) as f64 * 0.3]).collect();
        let r = lpml_from_loglik(&m).unwrap();
        let arith = m.iter().map(|row| row[0].exp()).sum::<f64>() / 200.0;
        assert!(r.log_cpo[0] < arith.ln());
    }

    #[test]
    fn extreme_values_are_stable_and_zero_likelihood_is_flagged() {
        let mut m: Vec<Vec<f64>> = (0..150).map(|_| vec![-5000.0, -1.0]).collect();
        let r = lpml_from_loglik(&m).unwrap();
        assert!((r.log_cpo[0] + 5000.0).abs() < 1e-9);
        m[3][1] = f64::NEG_INFINITY;
        let r = lpml_from_loglik(&m).unwrap();
        assert_eq!(r.flagged, vec![1]);
        assert!(r.lpml.is_finite());
    }

    #[test]
    fn too_few_draws_is_an_error() {
        assert!(lpml_from_loglik(&vec![vec![0.0]; 10]).is_err());
    }
}
