use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use qrmix_core::dist::StudentT;
use qrmix_core::inference::{self, gaussian_orthant, McmcConfig, RunConfig};
use qrmix_core::simgen::{self, SimArm, StudyModel};
use qrmix_core::{BaseFamily, BasisConfig, BasisSpec, FamilyConfig, FixedEffects, Weights};

fn weights() -> Weights {
    Weights::from_rows(&[
        vec![0.2, 0.5, -0.3],
        vec![1.0, 0.1, 0.2],
        vec![0.6, 0.0, 0.1],
        vec![0.4, 0.2, 0.0],
        vec![0.3, -0.1, 0.05],
    ])
    .unwrap()
}

fn marginal_cdf(c: &mut Criterion) {
    let mut group = c.benchmark_group("marginal_cdf");
    let families = [("gaussian", BaseFamily::Gaussian), ("t10", BaseFamily::StudentT(StudentT::new(10.0).unwrap()))];
    for (name, family) in families {
        let fe = FixedEffects::new(BasisSpec::equally_spaced(family, 5).unwrap(), weights()).unwrap();
        let x = [1.0, 0.3, -0.4];
        group.bench_function(name, |b| {
            let mut y = -2.0;
            b.iter(|| {
                y = if y > 3.0 { -2.0 } else { y + 0.01 };
                black_box(fe.cdf(black_box(y), &x).unwrap())
            })
        });
    }
    group.finish();
}

fn orthant(c: &mut Criterion) {
    let mut group = c.benchmark_group("gaussian_orthant");
    for dim in [3usize, 7] {
        let cov = DMatrix::from_fn(dim, dim, |i, j| if i == j { 2.0 } else { 0.5f64.powi(i.abs_diff(j) as i32) });
        let mean = DVector::zeros(dim);
        let bounds = vec![0.0; dim];
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, _| {
            b.iter(|| gaussian_orthant(&mean, &cov, black_box(&bounds), 200, 7).unwrap())
        });
    }
    group.finish();
}

fn short_fit(c: &mut Criterion) {
    let arm = SimArm::new(0.5, 3.0, 2, 50);
    let data = simgen::gen_dataset(&arm, 0).unwrap().dataset;
    let basis = BasisConfig { family: FamilyConfig::Gaussian, num_basis: 2, knots: None };
    let mut group = c.benchmark_group("fit_dt2_n50_200it");
    group.sample_size(10);
    for model in [StudyModel::independent(), StudyModel::copula()] {
        let cfg = RunConfig {
            model: model.model_config(basis.clone()),
            mcmc: McmcConfig { iterations: 200, burn_in: 100, thin: 1, ..McmcConfig::default() },
            ..RunConfig::default()
        };
        group.bench_function(model.label.clone(), |b| b.iter(|| inference::fit(&data, &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, marginal_cdf, orthant, short_fit);
criterion_main!(benches);
