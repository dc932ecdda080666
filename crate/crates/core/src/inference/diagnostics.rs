use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::draws::PosteriorDraws;

/// Convergence diagnostics of one scalar parameter across chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostic {
    pub name: String,
    /// Summed over chains; `None` for a constant trace.
    pub ess: Option<f64>,
    pub rhat: Option<f64>,
    /// Constant trace, or `R̂ > 1.1`.
    pub flagged: bool,
}

/// Autocorrelation-based effective sample size using Geyer's initial
/// monotone positive sequence. `None` when the trace is constant.
pub fn effective_sample_size(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 4 {
        return None;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return None;
    }
    let rho = |lag: usize| -> f64 {
        c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var)
    };
    // Γ_k = ρ_{2k} + ρ_{2k+1}, truncated at the first non-positive pair and
    // forced non-increasing.
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    Some(n as f64 / tau)
}

/// Split-chain potential scale reduction. Each chain is halved; `None`
/// when the within-chain variance is zero.
pub fn split_rhat(chains: &[&[f64]]) -> Option<f64> {
    let mut halves: Vec<&[f64]> = Vec::new();
    for c in chains {
        let half = c.len() / 2;
        if half < 2 {
            return None;
        }
        halves.push(&c[..half]);
        halves.push(&c[c.len() - half..]);
    }
    let n = halves.iter().map(|h| h.len()).min()? as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (h.len() as f64 - 1.0))
        .sum::<f64>()
        / m;
    if !(w > 0.0) {
        return None;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

/// ESS and split-`R̂` for every scalar parameter.
pub fn diagnostics(chains: &[PosteriorDraws]) -> Result<Vec<ParamDiagnostic>> {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 4) {
        return Err(Error::Config("diagnostics need at least 4 draws per chain".into()));
    }
    let traces: Vec<Vec<(String, Vec<f64>)>> =
        chains.iter().map(PosteriorDraws::scalar_traces).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (j, (name, _)) in traces[0].iter().enumerate() {
        let per_chain: Vec<&[f64]> = traces.iter().map(|t| t[j].1.as_slice()).collect();
        let ess: Option<f64> = per_chain
            .iter()
            .map(|c| effective_sample_size(c))
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum());
        let rhat = split_rhat(&per_chain);
        let flagged = ess.is_none() || rhat.is_none_or(|r| r > 1.1);
        out.push(ParamDiagnostic { name: name.clone(), ess, rhat, flagged });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn independent_draws_have_full_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ess = effective_sample_size(&x).unwrap();
        assert!(ess > 8000.0 && ess < 12_000.0, "{ess}");
    }

    #[test]
    fn ar1_chain_matches_theory() {
        // ESS of an AR(1) chain with coefficient φ is n (1 − φ) / (1 + φ).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi = 0.8;
        let mut v = 0.0;
        let x: Vec<f64> = (0..100_000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v = phi * v + e;
                v
            })
            .collect();
        let ess = effective_sample_size(&x).unwrap();
        let want = 100_000.0 * (1.0 - phi) / (1.0 + phi);
        assert!((ess / want - 1.0).abs() < 0.15, "{ess} vs {want}");
    }

    #[test]
    fn constant_chain_is_undefined() {
        let x = vec![1.0; 100];
        assert!(effective_sample_size(&x).is_none());
        assert!(split_rhat(&[&x]).is_none());
    }

    #[test]
    fn identical_halves_give_unit_rhat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let half: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut chain = half.clone();
        chain.extend_from_slice(&half);
        let r = split_rhat(&[&chain]).unwrap();
        assert!((r - 1.0).abs() < 1e-6, "{r}");
    }

    #[test]
    fn shifted_chains_inflate_rhat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 3.0).collect();
        assert!(split_rhat(&[&a, &b]).unwrap() > 1.5);
    }
}
