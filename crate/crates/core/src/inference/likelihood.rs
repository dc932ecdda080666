//! Observed-data likelihood of one subject, with right-censored cells
//! entering through tail probabilities.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::copula::{self, CellPos, CopulaParams, LatentGaussian};
use crate::data::CellStatus;
use crate::dist;
use crate::error::{Error, Result};
use crate::qfmodel::FixedEffects;

use super::model::Cell;

/// Smallest tail probability accepted before a censored cell is flagged.
pub const DEGENERATE_TAIL: f64 = 1e-300;

/// Log observed-data likelihood of one subject on the model scale.
///
/// Observed cells contribute marginal densities joined by the copula; censored
/// cells contribute `P(W_c > t_c | W_obs)`, exact for one censored cell or
/// independence and a GHK estimate with `ghk_draws` draws otherwise. Missing
/// cells are marginalized. `ghk_seed` fixes the GHK random numbers.
pub fn loglik_subject(
    cells: &[Cell],
    fixed: &[FixedEffects],
    params: &CopulaParams,
    independent: bool,
    ghk_draws: usize,
    ghk_seed: u64,
) -> Result<f64> {
    let mut marginal = 0.0;
    let mut obs_scores = Vec::new();
    let mut obs_pos = Vec::new();
    let mut cen_bounds = Vec::new();
    let mut cen_pos = Vec::new();
    for c in cells {
        let fe = &fixed[c.response];
        let family = fe.basis().family();
        match c.status {
            CellStatus::Observed(y) => {
                let loc = fe.locate(y, &c.x)?;
                marginal += family.ln_pdf(loc.z) - loc.slope.ln();
                if !independent {
                    obs_scores.push(family.normal_score(loc.z));
                    obs_pos.push(CellPos { visit: c.visit, response: c.response, z: &c.z });
                }
            }
            CellStatus::Censored(t) => {
                let loc = fe.locate(t, &c.x)?;
                if independent {
                    let p = family.sf(loc.z);
                    if p < DEGENERATE_TAIL {
                        return Err(Error::InvalidModel(format!(
                            "censoring threshold in record {} has tail probability {p:e}",
                            c.record
                        )));
                    }
                    marginal += p.ln();
                } else {
                    cen_bounds.push(family.normal_score(loc.z));
                    cen_pos.push(CellPos { visit: c.visit, response: c.response, z: &c.z });
                }
            }
            CellStatus::Missing => {}
        }
    }
    if independent {
        return Ok(marginal);
    }
    let mut total = marginal;
    let mut w_obs = Vec::new();
    if !obs_pos.is_empty() {
        let cov = params.covariance(&obs_pos);
        let psi: Vec<f64> = cov.diagonal().iter().copied().collect();
        let latent = LatentGaussian::new(&cov, "observed-cell covariance")?;
        total += copula::copula_log_density(&latent, &obs_scores, &psi);
        w_obs = obs_scores.iter().zip(&psi).map(|(s, p)| s * p.sqrt()).collect();
    }
    if cen_pos.is_empty() {
        return Ok(total);
    }
    // Joint covariance over observed then censored cells.
    let mut all_pos = obs_pos.clone();
    all_pos.extend(cen_pos.iter().copied());
    let cov = params.covariance(&all_pos);
    let n_obs = obs_pos.len();
    let obs_idx: Vec<usize> = (0..n_obs).collect();
    let (mean, cond_cov) = copula::conditional_gaussian(&cov, &obs_idx, &w_obs)?;
    let bounds: Vec<f64> = cen_bounds
        .iter()
        .enumerate()
        .map(|(k, s)| s * cov[(n_obs + k, n_obs + k)].sqrt())
        .collect();
    let p = gaussian_orthant(&mean, &cond_cov, &bounds, ghk_draws, ghk_seed)?;
    if p < DEGENERATE_TAIL {
        return Err(Error::InvalidModel(format!(
            "censored cells have joint tail probability {p:e}"
        )));
    }
    Ok(total + p.ln())
}

/// `P(X > b)` element-wise for `X ~ N(mean, cov)`: exact in one dimension,
/// GHK simulator otherwise.
pub fn gaussian_orthant(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    bounds: &[f64],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let n = bounds.len();
    if n == 0 {
        return Ok(1.0);
    }
    if n == 1 {
        return Ok(dist::normal_sf((bounds[0] - mean[0]) / cov[(0, 0)].sqrt()));
    }
    let chol = Cholesky::new(cov.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        context: "censored-cell conditional covariance".into(),
        min_diag: cov.diagonal().min(),
    })?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = vec![0.0; n];
    let mut acc = 0.0;
    for _ in 0..draws.max(1) {
        let mut weight = 1.0;
        for k in 0..n {
            let mut shift = mean[k];
            for j in 0..k {
                shift += l[(k, j)] * e[j];
            }
            let a = (bounds[k] - shift) / l[(k, k)];
            let tail = dist::normal_sf(a);
            weight *= tail;
            if weight == 0.0 {
                break;
            }
            let u: f64 = rng.random();
            e[k] = dist::normal_quantile_upper((u * tail).max(f64::MIN_POSITIVE));
        }
        acc += weight;
    }
    Ok(acc / draws.max(1) as f64)
}

/// Conditional of random effects `γ` given latent `w = Zγ + e`, with
/// `γ ~ N(0, diag(d))` and `e ~ N(0, Σ)`: returns mean and covariance.
/// Components with zero variance are returned as exact zeros.
pub fn random_effect_conditional(
    z: &DMatrix<f64>,
    d: &[f64],
    sigma: &DMatrix<f64>,
    w: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = d.len();
    let active: Vec<usize> = (0..q).filter(|&k| d[k] > 0.0).collect();
    let mut mean = DVector::zeros(q);
    let mut cov = DMatrix::zeros(q, q);
    if active.is_empty() {
        return Ok((mean, cov));
    }
    let za = z.select_columns(&active);
    let sig = LatentGaussian::new(sigma, "error covariance")?;
    let sz = DMatrix::from_columns(
        &za.column_iter().map(|c| sig.solve(&c.into_owned())).collect::<Vec<_>>(),
    );
    let mut prec = za.transpose() * &sz;
    for (i, &k) in active.iter().enumerate() {
        prec[(i, i)] += 1.0 / d[k];
    }
    let pc = Cholesky::new(prec.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        context: "random-effect posterior precision".into(),
        min_diag: prec.diagonal().min(),
    })?;
    let m = pc.solve(&(sz.transpose() * w));
    let c = pc.inverse();
    for (i, &k) in active.iter().enumerate() {
        mean[k] = m[i];
        for (j, &l) in active.iter().enumerate() {
            cov[(k, l)] = c[(i, j)];
        }
    }
    Ok((mean, cov))
}

/// Draw `γ` from [`random_effect_conditional`].
pub fn draw_random_effects<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> DVector<f64> {
    let q = mean.len();
    let active: Vec<usize> = (0..q).filter(|&k| cov[(k, k)] > 0.0).collect();
    let mut out = mean.clone();
    if active.is_empty() {
        return out;
    }
    let sub = cov.select_rows(&active).select_columns(&active);
    let l = Cholesky::new(sub).map(|c| c.l()).unwrap_or_else(|| {
        DMatrix::from_diagonal(&DVector::from_iterator(
            active.len(),
            active.iter().map(|&k| cov[(k, k)].sqrt()),
        ))
    });
    let e = DVector::from_iterator(active.len(), (0..active.len()).map(|_| standard_normal(rng)));
    let shift = l * e;
    for (i, &k) in active.iter().enumerate() {
        out[k] += shift[i];
    }
    out
}

#[inline]
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
