use nalgebra::DMatrix;
use proptest::prelude::*;
use qrmix_core::copula::{build_cov_multivariate, build_cov_univariate, pit_forward, pit_inverse, LatentGaussian};
use qrmix_core::data::{PanelDataset, Record};
use qrmix_core::inference::{self, McmcConfig, ModelConfig, PosteriorDraws, RunConfig};
use qrmix_core::{BasisConfig, FamilyConfig};

fn design(visits: usize, cols: usize, seed: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(visits, cols, |j, r| if r == 0 { 1.0 } else { seed[(j + r) % seed.len()] })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn univariate_covariance_is_symmetric_positive_definite(
        visits in 1usize..9,
        alpha in 0.0f64..0.99,
        lambda in 0.0f64..5.0,
        delta in prop::collection::vec(0.0f64..4.0, 1..3),
        xs in prop::collection::vec(-1.0f64..1.0, 1..5),
    ) {
        let z = design(visits, delta.len(), &xs);
        let (psi, diag) = build_cov_univariate(&z, &delta, alpha, lambda).unwrap();
        prop_assert_eq!(&psi, &psi.transpose());
        prop_assert!(LatentGaussian::new(&psi, "psi").is_ok());
        for d in diag {
            prop_assert!(d >= 1.0 + lambda - 1e-12);
        }
        // Lag-one AR part is λα above the random-effect block.
        if visits > 1 {
            let re: f64 = (0..delta.len()).map(|r| z[(0, r)] * delta[r] * z[(1, r)]).sum();
            prop_assert!((psi[(0, 1)] - re - lambda * alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn multivariate_covariance_is_positive_definite(
        visits in 1usize..6,
        alpha in 0.0f64..0.99,
        rho in -0.95f64..0.95,
        s in 0.2f64..3.0,
        d in 0.0f64..2.0,
    ) {
        let cross = DMatrix::from_row_slice(2, 2, &[1.0, rho * s.sqrt(), rho * s.sqrt(), s]);
        let z = DMatrix::from_element(visits, 1, 1.0);
        let delta = DMatrix::from_element(2, 1, d);
        let (psi, diag) = build_cov_multivariate(&z, &delta, alpha, &cross, visits, 2).unwrap();
        prop_assert_eq!(psi.nrows(), 2 * visits);
        prop_assert!(LatentGaussian::new(&psi, "psi").is_ok());
        prop_assert!((diag[0] - (2.0 + d)).abs() < 1e-12);
        prop_assert!((diag[1] - (1.0 + s + d)).abs() < 1e-12);
    }

    #[test]
    fn probability_integral_transform_round_trips(
        cells in prop::collection::vec((-6.0f64..6.0, 0.1f64..9.0), 1..20),
    ) {
        let (w, psi): (Vec<f64>, Vec<f64>) = cells.into_iter().map(|(s, p)| (s * p.sqrt(), p)).unzip();
        let (u, clamped) = pit_forward(&w, &psi);
        prop_assert_eq!(clamped, 0);
        prop_assert!(u.iter().all(|u| *u > 0.0 && *u < 1.0));
        let back = pit_inverse(&u, &psi);
        for (a, b) in w.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-7 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn csv_round_trip_preserves_records(
        rows in prop::collection::vec((0u8..6, 1i64..5, prop::option::of(-50.0f64..50.0), -1.0f64..1.0), 1..30),
    ) {
        let mut data = PanelDataset::new(vec!["x".into()]);
        for (s, v, value, x) in rows {
            data.records.push(Record {
                subject: format!("id{s}"),
                visit: v,
                response: "y".into(),
                value,
                censor: None,
                covariates: vec![x],
            });
        }
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = PanelDataset::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &data);
        prop_assert_eq!(back.content_hash(), data.content_hash());
    }
}

#[test]
fn stored_runs_read_back_identically() {
    let mut data = PanelDataset::new(vec!["x".into()]);
    for i in 0..20 {
        for j in 1..=3 {
            let x = (i as f64 / 10.0) - 1.0;
            data.records.push(Record {
                subject: format!("s{i}"),
                visit: j,
                response: "y".into(),
                value: Some(x + (i * j % 7) as f64 / 3.0),
                censor: if i % 5 == 0 { Some(0.5) } else { None },
                covariates: vec![x],
            });
        }
    }
    let cfg = RunConfig {
        model: ModelConfig {
            basis: BasisConfig { family: FamilyConfig::Gaussian, num_basis: 3, knots: None },
            fixed_effects: vec!["x".into()],
            ..ModelConfig::default()
        },
        mcmc: McmcConfig { iterations: 200, burn_in: 100, thin: 2, chains: 2, ..McmcConfig::default() },
        ..RunConfig::default()
    };
    let fit = inference::fit(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = inference::write_run(dir.path(), &cfg, &fit.data.data_hash, &fit.chains).unwrap();
    let back = inference::read_run(dir.path()).unwrap();
    assert_eq!(back.chains, fit.chains);
    assert_eq!(back.manifest.digest().unwrap(), manifest.digest().unwrap());
    let lpml = inference::lpml(&fit.pooled().unwrap()).unwrap().lpml;
    let relpml = inference::lpml(&PosteriorDraws::pool(&back.chains).unwrap()).unwrap().lpml;
    assert_eq!(lpml, relpml);
}

