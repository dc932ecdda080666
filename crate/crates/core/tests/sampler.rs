use qrmix_core::basis::{BasisConfig, FamilyConfig};
use qrmix_core::data::{CellStatus, PanelDataset, Record};
use qrmix_core::dist;
use qrmix_core::inference::{
    self, effective_sample_size, DependenceMode, McmcConfig, ModelConfig, ModelData, PriorSpec, RunConfig,
    INTERCEPT,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian2() -> BasisConfig {
    BasisConfig { family: FamilyConfig::Gaussian, num_basis: 2, knots: None }
}

/// `y = 2 + x + (1.5 + 0.5x) ε` with `x ~ U(−1, 1)`, `ε ~ N(0, 1)`.
fn heteroskedastic(subjects: usize, visits: usize, seed: u64) -> PanelDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = PanelDataset::new(vec!["x".into()]);
    for i in 0..subjects {
        for j in 0..visits {
            let x: f64 = rng.random_range(-1.0..1.0);
            let e: f64 = rng.sample(StandardNormal);
            data.records.push(Record {
                subject: format!("s{i}"),
                visit: j as i64 + 1,
                response: "y".into(),
                value: Some(2.0 + x + (1.5 + 0.5 * x) * e),
                censor: None,
                covariates: vec![x],
            });
        }
    }
    data
}

fn config(mcmc: McmcConfig) -> RunConfig {
    RunConfig {
        model: ModelConfig { basis: gaussian2(), fixed_effects: vec!["x".into()], ..ModelConfig::default() },
        mcmc,
        ..RunConfig::default()
    }
}

#[test]
fn heteroskedastic_normal_parameters_are_recovered() {
    let data = heteroskedastic(200, 5, 1);
    let cfg = config(McmcConfig { iterations: 4000, burn_in: 2000, thin: 2, seed: 8, ..McmcConfig::default() });
    let fit = inference::fit(&data, &cfg).unwrap();
    let draws = fit.pooled().unwrap();
    let upper = dist::normal_cdf(1.0);
    let summary = inference::summarize(&draws, &[0.5, upper], None).unwrap();
    let effect = |cov: &str, tau: f64| {
        summary.effects.iter().find(|e| e.covariate == cov && (e.tau - tau).abs() < 1e-12).unwrap().interval
    };
    // β(0.5) = location, β(Φ(1)) = location + scale.
    for (cov, tau, truth) in [(INTERCEPT, 0.5, 2.0), ("x", 0.5, 1.0), (INTERCEPT, upper, 3.5), ("x", upper, 1.5)] {
        let i = effect(cov, tau);
        assert!((i.mean - truth).abs() <= 3.0 * i.sd, "{cov} at {tau}: {} ± {} vs {truth}", i.mean, i.sd);
    }
}

#[test]
fn identical_seeds_give_identical_draws() {
    let data = heteroskedastic(30, 4, 2);
    let mut cfg = config(McmcConfig { iterations: 300, burn_in: 100, thin: 1, chains: 2, ..McmcConfig::default() });
    cfg.model.dependence = DependenceMode::CopulaUnivariate;
    cfg.model.random_effects = vec![INTERCEPT.into()];
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| inference::fit(&data, &cfg).unwrap())
    };
    let a = run(1);
    let b = run(1);
    let c = run(2);
    assert_eq!(a.chains, b.chains);
    assert_eq!(a.chains, c.chains);
    assert_ne!(a.chains[0].samples, a.chains[1].samples);
}

#[test]
fn censored_subject_averages_upper_half_uniforms() {
    let mut data = heteroskedastic(100, 5, 3);
    // Marginal median of y at the midpoint x = 0 is 2.
    let target = "s7";
    for r in data.records.iter_mut().filter(|r| r.subject == target) {
        r.covariates[0] = 0.0;
        r.value = Some(2.0);
        r.censor = Some(2.0);
    }
    let cfg = config(McmcConfig { iterations: 3000, burn_in: 1000, thin: 2, seed: 5, ..McmcConfig::default() });
    let draws = inference::fit(&data, &cfg).unwrap().pooled().unwrap();
    let mine: Vec<f64> = draws.censored.iter().filter(|c| c.subject == target).map(|c| c.mean_u).collect();
    assert_eq!(mine.len(), 5);
    let mean = mine.iter().sum::<f64>() / mine.len() as f64;
    assert!(mean > 0.70 && mean < 0.80, "{mean}");
}

#[test]
fn shrinkage_means_follow_their_prior_without_data() {
    // Two responses, then every cell is dropped to missing.
    let mut data = PanelDataset::new(vec!["x".into()]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..5 {
        for h in ["a", "b"] {
            data.records.push(Record {
                subject: format!("s{i}"),
                visit: 1,
                response: h.into(),
                value: Some(rng.random()),
                censor: None,
                covariates: vec![i as f64],
            });
        }
    }
    let model = ModelConfig {
        basis: gaussian2(),
        dependence: DependenceMode::CopulaMultivariate,
        fixed_effects: vec!["x".into()],
        standardize: false,
        ..ModelConfig::default()
    };
    let mut prepared = ModelData::prepare(&data, &model).unwrap();
    for cell in prepared.subjects.iter_mut().flat_map(|s| s.cells.iter_mut()) {
        cell.status = CellStatus::Missing;
    }
    let priors = PriorSpec::default();
    let mcmc = McmcConfig { iterations: 12_000, burn_in: 2000, thin: 1, seed: 21, ..McmcConfig::default() };
    let draws = inference::run_sampler(&prepared, &priors, &mcmc, &model.fixed, 0).unwrap();
    assert_eq!(draws.len(), 10_000);
    let p = 2;
    for k in 0..draws.samples[0].mu.len() {
        let (m, col) = (k / p, k % p);
        let prior_mean = if m > 0 && col == 0 { priors.mu_mean_intercept } else { priors.mu_mean_other };
        let trace: Vec<f64> = draws.samples.iter().map(|s| s.mu[k]).collect();
        let i = inference::interval(&trace).unwrap();
        let se = i.sd / effective_sample_size(&trace).unwrap().sqrt();
        assert!((i.mean - prior_mean).abs() <= 3.0 * se, "mu[{m},{col}] = {} (se {se}) vs {prior_mean}", i.mean);
    }
}

#[test]
fn lpml_matches_expected_log_density_and_doubles_on_duplicated_data() {
    // iid N(1, 2²) with one cell per subject.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut data = PanelDataset::new(vec!["x".into()]);
    let n = 2000;
    for i in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        data.records.push(Record {
            subject: format!("s{i}"),
            visit: 1,
            response: "y".into(),
            value: Some(1.0 + 2.0 * e),
            censor: None,
            covariates: vec![rng.random_range(-1.0..1.0)],
        });
    }
    let cfg = RunConfig {
        model: ModelConfig {
            basis: gaussian2(),
            fixed_effects: vec!["x".into()],
            constant_effects: vec!["x".into()],
            ..ModelConfig::default()
        },
        mcmc: McmcConfig { iterations: 2000, burn_in: 1000, thin: 2, seed: 2, ..McmcConfig::default() },
        ..RunConfig::default()
    };
    let draws = inference::fit(&data, &cfg).unwrap().pooled().unwrap();
    let report = inference::lpml(&draws).unwrap();
    let expected = -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - 0.5;
    assert!((report.lpml / n as f64 - expected).abs() < 0.05, "{} vs {expected}", report.lpml / n as f64);

    let single = inference::lpml_on(&draws, &data, 100).unwrap().lpml;
    assert!((single - report.lpml).abs() < 1e-8 * report.lpml.abs());
    let doubled = data.concat_renamed(&data, "_copy").unwrap();
    let twice = inference::lpml_on(&draws, &doubled, 100).unwrap().lpml;
    assert!((twice - 2.0 * single).abs() < 1e-9 * single.abs(), "{twice} vs {}", 2.0 * single);
}
