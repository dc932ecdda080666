//! Synthetic longitudinal designs with known quantile effects, and the
//! coverage / MSE study harness.
//!
//! Each subject has `J` visits, a subject-level binary `X₂ ∈ {−1, 1}` and
//! visit-level `X₁ ~ U(−1, 1)`. Latent `W_i ~ N(0, Ψ_i)` with
//! `Ψ_i = Z_iΔZ_i' + Ξ(α) + I` and `Z_ij = (1, X₁ij)`; `U = Φ(W/√ψ)`.
//!
//! * datatype 1: `Y = 3Φ⁻¹(U) + (X₁ + X₂)(0.5 − U)·1{U < 0.5}`
//! * datatype 2: `Y = (3 + X₁ + X₂) Q_t5(U)`

use std::io::Write;

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, FamilyConfig, DEFAULT_T_SHAPE};
use crate::data::{PanelDataset, Record};
use crate::dist::{self, StudentT};
use crate::error::{Error, Result};
use crate::inference::{self, DependenceMode, McmcConfig, ModelConfig, RunConfig, INTERCEPT};

pub const VISITS: usize = 7;
pub const ALPHAS: [f64; 3] = [0.0, 0.5, 0.9];
pub const DELTAS: [f64; 2] = [0.0, 3.0];
pub const SUBJECT_COUNTS: [usize; 2] = [50, 100];
pub const COVARIATES: [&str; 2] = ["x1", "x2"];
pub const RESPONSE: &str = "y";
const T5: f64 = 5.0;

/// One cell of the simulation design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimArm {
    pub alpha: f64,
    pub delta: f64,
    pub datatype: u8,
    pub subjects: usize,
    pub visits: usize,
    pub replications: usize,
    pub seed: u64,
    /// Allow values outside the enumerated design.
    #[serde(default)]
    pub extended: bool,
}

impl SimArm {
    pub fn new(alpha: f64, delta: f64, datatype: u8, subjects: usize) -> Self {
        Self { alpha, delta, datatype, subjects, visits: VISITS, replications: 100, seed: 2012, extended: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.datatype, 1 | 2) {
            return Err(Error::Config(format!("datatype must be 1 or 2, got {}", self.datatype)));
        }
        if !(0.0..1.0).contains(&self.alpha) || self.delta < 0.0 || self.subjects == 0 || self.visits == 0 {
            return Err(Error::Config("arm parameters out of range".into()));
        }
        if !self.extended
            && (!ALPHAS.contains(&self.alpha)
                || !DELTAS.contains(&self.delta)
                || !SUBJECT_COUNTS.contains(&self.subjects)
                || self.visits != VISITS)
        {
            return Err(Error::Config(format!(
                "arm (alpha {}, delta {}, N {}, J {}) is outside the design; set `extended` to allow it",
                self.alpha, self.delta, self.subjects, self.visits
            )));
        }
        Ok(())
    }

    /// RNG for replicate `rep`, independent of every other replicate.
    fn rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }

    pub fn label(&self) -> String {
        format!("dt{}_alpha{}_delta{}_n{}", self.datatype, self.alpha, self.delta, self.subjects)
    }
}

/// Response of a datatype at latent level `u`.
pub fn response(datatype: u8, u: f64, x1: f64, x2: f64) -> f64 {
    match datatype {
        1 => {
            let shift = if u < 0.5 { (x1 + x2) * (0.5 - u) } else { 0.0 };
            3.0 * dist::normal_quantile(u) + shift
        }
        _ => (3.0 + x1 + x2) * t5().quantile(u),
    }
}

fn t5() -> StudentT {
    StudentT::new(T5).expect("positive shape")
}

/// True quantile effect `β_p(τ)` (`p = 0` intercept, 1 for `X₁`, 2 for `X₂`).
pub fn true_beta(datatype: u8, p: usize, tau: f64) -> f64 {
    match (datatype, p) {
        (1, 0) => 3.0 * dist::normal_quantile(tau),
        (1, _) => {
            if tau < 0.5 {
                0.5 - tau
            } else {
                0.0
            }
        }
        (_, 0) => 3.0 * t5().quantile(tau),
        (_, _) => t5().quantile(tau),
    }
}

/// A generated dataset with its latent uniforms (one per record, in record order).
#[derive(Clone, Debug, PartialEq)]
pub struct SimDataset {
    pub dataset: PanelDataset,
    pub latent_u: Vec<f64>,
    /// Per cell: `(ZΔZ')_jj / ψ_j`.
    pub random_effect_share: Vec<f64>,
}

/// Latent covariance of one subject for visit-level `X₁` values.
fn subject_cov(arm: &SimArm, x1: &[f64]) -> DMatrix<f64> {
    let j = x1.len();
    DMatrix::from_fn(j, j, |a, b| {
        let ar = if a == b { 1.0 } else { arm.alpha.powi(a.abs_diff(b) as i32) };
        let re = arm.delta * (1.0 + x1[a] * x1[b]);
        ar + re + if a == b { 1.0 } else { 0.0 }
    })
}

/// Draw one subject's covariates and latent uniforms.
fn draw_subject<R: Rng>(arm: &SimArm, rng: &mut R) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let x2 = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let x1: Vec<f64> = (0..arm.visits).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cov = subject_cov(arm, &x1);
    let l = Cholesky::new(cov.clone()).expect("design covariance is positive definite").l();
    let e = nalgebra::DVector::from_iterator(
        arm.visits,
        (0..arm.visits).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
    );
    let w = l * e;
    let u: Vec<f64> = (0..arm.visits).map(|j| dist::normal_cdf(w[j] / cov[(j, j)].sqrt())).collect();
    let share: Vec<f64> =
        (0..arm.visits).map(|j| arm.delta * (1.0 + x1[j] * x1[j]) / cov[(j, j)]).collect();
    (x2, x1, u, share)
}

/// Generate replicate `rep` of `arm`; deterministic in `(arm.seed, rep)`.
pub fn gen_dataset(arm: &SimArm, rep: usize) -> Result<SimDataset> {
    arm.validate()?;
    let mut rng = arm.rng(rep);
    let mut dataset = PanelDataset::new(COVARIATES.iter().map(|s| s.to_string()).collect());
    let mut latent_u = Vec::new();
    let mut random_effect_share = Vec::new();
    for i in 0..arm.subjects {
        let (x2, x1, u, share) = draw_subject(arm, &mut rng);
        for j in 0..arm.visits {
            let uu = u[j].clamp(dist::PROB_FLOOR, 1.0 - dist::PROB_FLOOR);
            dataset.records.push(Record {
                subject: format!("s{:04}", i + 1),
                visit: j as i64 + 1,
                response: RESPONSE.to_string(),
                value: Some(response(arm.datatype, uu, x1[j], x2)),
                censor: None,
                covariates: vec![x1[j], x2],
            });
            latent_u.push(u[j]);
            random_effect_share.push(share[j]);
        }
    }
    Ok(SimDataset { dataset, latent_u, random_effect_share })
}

/// Latent uniforms only, `subjects × visits`, for marginal-law checks.
pub fn simulate_latent_u(arm: &SimArm, subjects: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..subjects).map(|_| draw_subject(arm, &mut rng).2).collect()
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1): statistic and
/// asymptotic p-value (with the Stephens small-sample correction).
pub fn ks_uniform(sample: &[f64]) -> (f64, f64) {
    let n = sample.len();
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / nf - v).max(v - i as f64 / nf))
        .fold(0.0, f64::max);
    let sqrt_n = nf.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_sf(lambda))
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Posterior summary of one effect in one replicate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub covariate: usize,
    pub tau: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateScore {
    pub covariate: usize,
    pub coverage: f64,
    pub mse: f64,
    pub replicates: usize,
}

/// Coverage and MSE of the `X₁`, `X₂` effects against the truth, averaged
/// over replicates and the grid. Every replicate must report exactly the grid.
pub fn score(estimates: &[Vec<EffectEstimate>], datatype: u8, grid: &[f64]) -> Result<Vec<CovariateScore>> {
    let mut out = Vec::new();
    for p in 1..=2 {
        let mut hits = 0usize;
        let mut sq = 0.0;
        let mut count = 0usize;
        for rep in estimates {
            let mine: Vec<&EffectEstimate> = rep.iter().filter(|e| e.covariate == p).collect();
            if mine.len() != grid.len() || mine.iter().zip(grid).any(|(e, t)| (e.tau - t).abs() > 1e-12) {
                return Err(Error::Dimension("replicate estimates do not match the grid".into()));
            }
            for e in mine {
                let truth = true_beta(datatype, p, e.tau);
                hits += (e.lower <= truth && truth <= e.upper) as usize;
                sq += (e.mean - truth).powi(2);
                count += 1;
            }
        }
        let denom = count.max(1) as f64;
        out.push(CovariateScore {
            covariate: p,
            coverage: if count == 0 { f64::NAN } else { hits as f64 / denom },
            mse: if count == 0 { f64::NAN } else { sq / denom },
            replicates: estimates.len(),
        });
    }
    Ok(out)
}

/// A model fitted in the study. Candidate bases are indexed by datatype; with
/// more than one candidate the LPML-best fit is scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyModel {
    pub label: String,
    pub dependence: DependenceMode,
    pub bases_datatype1: Vec<BasisConfig>,
    pub bases_datatype2: Vec<BasisConfig>,
}

fn basis(family: FamilyConfig, m: usize) -> BasisConfig {
    BasisConfig { family, num_basis: m, knots: None }
}

impl StudyModel {
    /// Independence model with the default bases.
    pub fn independent() -> Self {
        Self {
            label: "Ind".into(),
            dependence: DependenceMode::Independent,
            bases_datatype1: vec![basis(FamilyConfig::Gaussian, 5)],
            bases_datatype2: vec![basis(FamilyConfig::StudentT { shape: DEFAULT_T_SHAPE }, 2)],
        }
    }

    /// Copula model (AR-1 plus random intercept and `X₁` slope).
    pub fn copula() -> Self {
        Self {
            label: "Cop".into(),
            dependence: DependenceMode::CopulaUnivariate,
            bases_datatype1: vec![basis(FamilyConfig::StudentT { shape: DEFAULT_T_SHAPE }, 5)],
            bases_datatype2: vec![basis(FamilyConfig::StudentT { shape: DEFAULT_T_SHAPE }, 2)],
        }
    }

    /// Both families at `M ∈ {2, 3, 5}`, chosen per replicate by LPML.
    pub fn with_lpml_selection(mut self) -> Self {
        let all: Vec<BasisConfig> = [2, 3, 5]
            .iter()
            .flat_map(|&m| [basis(FamilyConfig::Gaussian, m), basis(FamilyConfig::StudentT { shape: DEFAULT_T_SHAPE }, m)])
            .collect();
        self.bases_datatype1 = all.clone();
        self.bases_datatype2 = all;
        self
    }

    fn bases(&self, datatype: u8) -> &[BasisConfig] {
        if datatype == 1 {
            &self.bases_datatype1
        } else {
            &self.bases_datatype2
        }
    }

    pub fn model_config(&self, basis: BasisConfig) -> ModelConfig {
        ModelConfig {
            basis,
            dependence: self.dependence,
            fixed_effects: COVARIATES.iter().map(|s| s.to_string()).collect(),
            random_effects: if self.dependence == DependenceMode::Independent {
                Vec::new()
            } else {
                vec![INTERCEPT.to_string(), COVARIATES[0].to_string()]
            },
            ..ModelConfig::default()
        }
    }
}

/// Outcome of fitting one model to one replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub arm: usize,
    pub replicate: usize,
    pub model: String,
    pub basis: Option<BasisConfig>,
    pub lpml: Option<f64>,
    pub estimates: Vec<EffectEstimate>,
    pub error: Option<String>,
}

/// One row of the study table: coverage and MSE for a model, arm and covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub model: String,
    pub datatype: u8,
    pub delta: f64,
    pub alpha: f64,
    pub subjects: usize,
    pub covariate: String,
    pub coverage: f64,
    pub mse: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub replicates: Vec<ReplicateResult>,
}

fn fit_one(
    data: &PanelDataset,
    model: &StudyModel,
    datatype: u8,
    mcmc: &McmcConfig,
    grid: &[f64],
) -> Result<(BasisConfig, Option<f64>, Vec<EffectEstimate>)> {
    let candidates = model.bases(datatype);
    let mut best: Option<(BasisConfig, Option<f64>, Vec<EffectEstimate>)> = None;
    for b in candidates {
        let config = RunConfig {
            model: model.model_config(b.clone()),
            mcmc: mcmc.clone(),
            report_grid: grid.to_vec(),
            ..RunConfig::default()
        };
        let fit = inference::fit(data, &config)?;
        let draws = fit.pooled()?;
        // LPML is only required when it has to pick between bases.
        let lpml = match inference::lpml(&draws) {
            Ok(r) => Some(r.lpml),
            Err(e) if candidates.len() == 1 => {
                log::debug!("model {}: LPML unavailable: {e}", model.label);
                None
            }
            Err(e) => return Err(e),
        };
        if best.as_ref().is_some_and(|(_, l, _)| *l >= lpml) {
            continue;
        }
        let summary = inference::summarize(&draws, grid, None)?;
        let estimates = summary
            .effects
            .iter()
            .filter_map(|e| {
                let p = COVARIATES.iter().position(|c| *c == e.covariate)? + 1;
                Some(EffectEstimate {
                    covariate: p,
                    tau: e.tau,
                    mean: e.interval.mean,
                    lower: e.interval.lower,
                    upper: e.interval.upper,
                })
            })
            .collect();
        best = Some((b.clone(), lpml, estimates));
    }
    best.ok_or_else(|| Error::Config(format!("model {} has no candidate bases", model.label)))
}

/// Generate every replicate of every arm, fit each model and score coverage
/// and MSE. Replicates run in parallel; output order and values do not depend
/// on the worker count. Failed fits are recorded and skipped in the scores.
pub fn run_study(arms: &[SimArm], models: &[StudyModel], mcmc: &McmcConfig, grid: &[f64]) -> Result<StudyReport> {
    for arm in arms {
        arm.validate()?;
    }
    let jobs: Vec<(usize, usize)> = arms
        .iter()
        .enumerate()
        .flat_map(|(a, arm)| (0..arm.replications).map(move |r| (a, r)))
        .collect();
    let results: Vec<Vec<ReplicateResult>> = jobs
        .par_iter()
        .map(|&(a, rep)| {
            let arm = &arms[a];
            let data = gen_dataset(arm, rep);
            let mut job_mcmc = mcmc.clone();
            job_mcmc.seed = mcmc.seed ^ arm.seed.rotate_left(17) ^ (rep as u64).wrapping_mul(0x9E37_79B9);
            job_mcmc.impute_missing = false;
            models
                .iter()
                .map(|model| {
                    let outcome = data
                        .as_ref()
                        .map_err(|e| Error::Data(e.to_string()))
                        .and_then(|d| fit_one(&d.dataset, model, arm.datatype, &job_mcmc, grid));
                    match outcome {
                        Ok((basis, lpml, estimates)) => ReplicateResult {
                            arm: a,
                            replicate: rep,
                            model: model.label.clone(),
                            basis: Some(basis),
                            lpml,
                            estimates,
                            error: None,
                        },
                        Err(e) => {
                            log::warn!("arm {} replicate {rep} model {}: {e}", arm.label(), model.label);
                            ReplicateResult {
                                arm: a,
                                replicate: rep,
                                model: model.label.clone(),
                                basis: None,
                                lpml: None,
                                estimates: Vec::new(),
                                error: Some(e.to_string()),
                            }
                        }
                    }
                })
                .collect()
        })
        .collect();
    let replicates: Vec<ReplicateResult> = results.into_iter().flatten().collect();

    let mut rows = Vec::new();
    for model in models {
        for (a, arm) in arms.iter().enumerate() {
            let mine: Vec<&ReplicateResult> =
                replicates.iter().filter(|r| r.arm == a && r.model == model.label).collect();
            let ok: Vec<Vec<EffectEstimate>> =
                mine.iter().filter(|r| r.error.is_none()).map(|r| r.estimates.clone()).collect();
            let failures = mine.len() - ok.len();
            if mine.is_empty() {
                continue;
            }
            for s in score(&ok, arm.datatype, grid)? {
                rows.push(StudyRow {
                    model: model.label.clone(),
                    datatype: arm.datatype,
                    delta: arm.delta,
                    alpha: arm.alpha,
                    subjects: arm.subjects,
                    covariate: COVARIATES[s.covariate - 1].to_string(),
                    coverage: s.coverage,
                    mse: s.mse,
                    replicates: ok.len(),
                    failures,
                });
            }
        }
    }
    Ok(StudyReport { rows, replicates })
}

/// Model entry of a study specification: a preset name (`"independent"`,
/// `"copula"`, with an optional `"+lpml"` suffix for per-replicate basis
/// selection) or a full [`StudyModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelEntry {
    Preset(String),
    Custom(StudyModel),
}

impl ModelEntry {
    pub fn resolve(&self) -> Result<StudyModel> {
        match self {
            ModelEntry::Custom(m) => Ok(m.clone()),
            ModelEntry::Preset(name) => {
                let (base, select) = match name.strip_suffix("+lpml") {
                    Some(b) => (b, true),
                    None => (name.as_str(), false),
                };
                let model = match base {
                    "independent" | "Ind" => StudyModel::independent(),
                    "copula" | "Cop" => StudyModel::copula(),
                    other => return Err(Error::Config(format!("unknown study model `{other}`"))),
                };
                Ok(if select { model.with_lpml_selection() } else { model })
            }
        }
    }
}

/// A complete study: arms, models, sampler settings and the scoring grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySpec {
    pub arms: Vec<SimArm>,
    pub models: Vec<ModelEntry>,
    pub mcmc: McmcConfig,
    pub grid: Vec<f64>,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            arms: Vec::new(),
            models: vec![ModelEntry::Preset("independent".into()), ModelEntry::Preset("copula".into())],
            mcmc: McmcConfig { iterations: 5000, burn_in: 2500, thin: 5, ..McmcConfig::default() },
            grid: crate::inference::DEFAULT_GRID.to_vec(),
        }
    }
}

impl StudySpec {
    pub fn run(&self) -> Result<StudyReport> {
        self.mcmc.validate()?;
        let models = self.models.iter().map(ModelEntry::resolve).collect::<Result<Vec<_>>>()?;
        run_study(&self.arms, &models, &self.mcmc, &self.grid)
    }
}

/// Truth sidecar of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub arm: SimArm,
    pub replicate: usize,
    pub grid: Vec<f64>,
    /// `beta[p][t]` for intercept, `x1`, `x2`.
    pub beta: Vec<Vec<f64>>,
    /// Latent uniforms in record order.
    pub latent_u: Vec<f64>,
}

impl TruthSidecar {
    pub fn new(arm: &SimArm, replicate: usize, sim: &SimDataset, grid: &[f64]) -> Self {
        Self {
            arm: arm.clone(),
            replicate,
            grid: grid.to_vec(),
            beta: (0..3).map(|p| grid.iter().map(|&t| true_beta(arm.datatype, p, t)).collect()).collect(),
            latent_u: sim.latent_u.clone(),
        }
    }
}

/// Study table CSV: one row per model × arm × covariate.
pub fn write_table_csv<W: Write>(rows: &[StudyRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "datatype", "delta", "alpha", "n", "covariate", "coverage", "mse", "replicates", "failures"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.datatype.to_string(),
            r.delta.to_string(),
            r.alpha.to_string(),
            r.subjects.to_string(),
            r.covariate.clone(),
            format!("{:.4}", r.coverage),
            format!("{:.6}", r.mse),
            r.replicates.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
