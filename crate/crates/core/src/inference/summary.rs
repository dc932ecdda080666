use serde::{Deserialize, Serialize};

use crate::basis::check_level;
use crate::error::{Error, Result};

use super::draws::PosteriorDraws;

/// Posterior mean, SD and central 95% interval of a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub response: String,
    pub covariate: String,
    pub tau: f64,
    #[serde(flatten)]
    pub interval: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub response: String,
    pub tau: f64,
    #[serde(flatten)]
    pub interval: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    #[serde(flatten)]
    pub interval: Interval,
}

/// Raw-scale summaries of `β_p(τ)` and `Q(τ | profile)` plus scalar parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// Raw covariate values at which quantile curves are evaluated.
    pub profile: Vec<f64>,
    pub effects: Vec<EffectSummary>,
    pub quantiles: Vec<QuantileSummary>,
    pub parameters: Vec<ParameterSummary>,
}

/// Mean, SD and 2.5% / 97.5% empirical quantiles (linear interpolation).
pub fn interval(values: &[f64]) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::Config("cannot summarize zero draws".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Ok(Interval { mean, sd: var.sqrt(), lower: q(0.025), upper: q(0.975) })
}

/// Summarize draws over the quantile grid. `profile` holds raw values of the
/// fixed-effect covariates (without intercept); `None` uses the centers of
/// the fitted covariate ranges.
pub fn summarize(draws: &PosteriorDraws, grid: &[f64], profile: Option<&[f64]>) -> Result<PosteriorSummary> {
    if draws.is_empty() {
        return Err(Error::Config("cannot summarize zero draws".into()));
    }
    for &t in grid {
        check_level(t)?;
    }
    let d = &draws.descriptor;
    let (h, p) = (d.num_responses(), d.num_covariates());
    let profile: Vec<f64> = match profile {
        Some(v) if v.len() == p - 1 => v.to_vec(),
        Some(v) => {
            return Err(Error::Dimension(format!(
                "profile has {} values, model has {} covariates",
                v.len(),
                p - 1
            )))
        }
        None => d.x_scaling.columns.iter().map(|c| c.center).collect(),
    };
    let mut x = Vec::with_capacity(p);
    d.x_scaling.design(&profile, &mut x);

    let n = draws.len();
    let g = grid.len();
    // effects[h][p][t][draw], quantiles[h][t][draw]
    let mut effects = vec![vec![vec![Vec::with_capacity(n); g]; p]; h];
    let mut quantiles = vec![vec![Vec::with_capacity(n); g]; h];
    for k in 0..n {
        let fixed = draws.fixed_effects(k)?;
        for (hh, fe) in fixed.iter().enumerate() {
            let ys = d.y_scaling[hh];
            for (t, &tau) in grid.iter().enumerate() {
                let scaled: Vec<f64> = (0..p).map(|pp| fe.beta(pp, tau)).collect::<Result<_>>()?;
                let mut raw = d.x_scaling.effects_to_raw(&scaled);
                for (pp, v) in raw.iter_mut().enumerate() {
                    *v *= ys.sd;
                    if pp == 0 {
                        *v += ys.mean;
                    }
                    effects[hh][pp][t].push(*v);
                }
                quantiles[hh][t].push(ys.inverse(fe.quantile(tau, &x)?));
            }
        }
    }
    let mut out = PosteriorSummary { profile, effects: Vec::new(), quantiles: Vec::new(), parameters: Vec::new() };
    for hh in 0..h {
        for pp in 0..p {
            for (t, &tau) in grid.iter().enumerate() {
                out.effects.push(EffectSummary {
                    response: d.responses[hh].clone(),
                    covariate: d.fixed_names[pp].clone(),
                    tau,
                    interval: interval(&effects[hh][pp][t])?,
                });
            }
        }
        for (t, &tau) in grid.iter().enumerate() {
            out.quantiles.push(QuantileSummary {
                response: d.responses[hh].clone(),
                tau,
                interval: interval(&quantiles[hh][t])?,
            });
        }
    }
    for (name, trace) in draws.scalar_traces()? {
        if name.starts_with("theta[") {
            continue;
        }
        out.parameters.push(ParameterSummary { name, interval: interval(&trace)? });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_draws_have_zero_width() {
        let i = interval(&[2.5; 40]).unwrap();
        assert_eq!((i.mean, i.sd, i.lower, i.upper), (2.5, 0.0, 2.5, 2.5));
    }

    #[test]
    fn interval_quantiles_on_a_ramp() {
        let v: Vec<f64> = (0..=1000).map(|k| k as f64).collect();
        let i = interval(&v).unwrap();
        assert!((i.lower - 25.0).abs() < 1e-12 && (i.upper - 975.0).abs() < 1e-12);
        assert!(interval(&[]).is_err());
    }
}
