//! Metropolis-within-Gibbs sampler.
//!
//! Random effects are integrated out of the likelihood, so every Metropolis
//! step targets `Π_i f(y_i | θ, α, Λ, Δ)` with `W_i ~ N(0, Ψ_i)`; `γ_i` is
//! drawn from its Gaussian conditional only when it is to be stored. Missing
//! cells are likewise marginalized and imputed only for reporting. Censored
//! cells are carried as latent responses `y* > c`, refreshed each sweep from
//! their truncated conditionals.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::BaseFamily;
use crate::copula::{self, CellPos, CopulaParams, LatentGaussian};
use crate::data::CellStatus;
use crate::dist;
use crate::error::{Error, Result};
use crate::qfmodel::{FixedEffects, Weights};

use super::config::{DependenceMode, FixedParams, McmcConfig, PriorSpec};
use super::draws::{BlockAcceptance, CellEstimate, PosteriorDraws, RunMeta, Sample};
use super::likelihood::{self, standard_normal};
use super::model::ModelData;

const ACCEPT_LOW: f64 = 0.1;
const ACCEPT_HIGH: f64 = 0.7;
/// Iterations of history before a row block switches to its empirical covariance.
const COVARIANCE_WARMUP: usize = 200;
const COVARIANCE_REFRESH: usize = 50;

/// Robbins–Monro scale adaptation, frozen after burn-in.
#[derive(Clone, Debug)]
struct Adapter {
    name: String,
    log_scale: f64,
    updates: usize,
    proposals: usize,
    accepted: usize,
}

impl Adapter {
    fn new(name: String, scale: f64) -> Self {
        Self { name, log_scale: scale.ln(), updates: 0, proposals: 0, accepted: 0 }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, log_ratio: f64, accepted: bool, adapting: bool, target: f64) {
        if adapting {
            self.updates += 1;
            let prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
            let rate = (self.updates as f64).powf(-0.6);
            self.log_scale = (self.log_scale + rate * (prob - target)).clamp(-12.0, 6.0);
        } else {
            self.proposals += 1;
            self.accepted += accepted as usize;
        }
    }

    fn report(&self) -> BlockAcceptance {
        let rate = if self.proposals == 0 { f64::NAN } else { self.accepted as f64 / self.proposals as f64 };
        BlockAcceptance {
            block: self.name.clone(),
            proposals: self.proposals,
            accepted: self.accepted,
            rate,
            step: self.scale(),
            flagged: !(ACCEPT_LOW..=ACCEPT_HIGH).contains(&rate),
        }
    }
}

/// Adaptive-Metropolis proposal for one `θ⋆` row over its free entries.
#[derive(Clone, Debug)]
struct RowBlock {
    response: usize,
    row: usize,
    free: Vec<usize>,
    adapter: Adapter,
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
    factor: Option<DMatrix<f64>>,
}

impl RowBlock {
    fn observe(&mut self, row: &[f64]) {
        let x = DVector::from_iterator(self.free.len(), self.free.iter().map(|&k| row[k]));
        self.count += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = &x - &self.mean;
        self.scatter += &delta * delta2.transpose();
        if self.count >= COVARIANCE_WARMUP && self.count.is_multiple_of(COVARIANCE_REFRESH) {
            let d = self.free.len();
            let cov = &self.scatter / (self.count - 1) as f64
                + DMatrix::identity(d, d) * 1e-10;
            if let Some(c) = Cholesky::new(cov) {
                self.factor = Some(c.l());
            }
        }
    }

    fn propose<R: Rng>(&self, rng: &mut R, row: &[f64]) -> Vec<f64> {
        let d = self.free.len();
        let e = DVector::from_iterator(d, (0..d).map(|_| standard_normal(rng)));
        let step = match &self.factor {
            Some(l) => l * e * (2.38 / (d as f64).sqrt()),
            None => e * 0.1,
        } * self.adapter.scale();
        let mut out = row.to_vec();
        for (i, &k) in self.free.iter().enumerate() {
            out[k] += step[i];
        }
        out
    }
}

/// Which copula parameter a scalar block moves.
#[derive(Clone, Copy, Debug, PartialEq)]
enum CopulaTarget {
    Alpha,
    Lambda,
    Cross(usize, usize),
    Delta(usize, usize),
}

/// An active (observed or censored) cell.
#[derive(Clone, Debug)]
struct Active {
    subject: usize,
    cell: usize,
    response: usize,
    censor: Option<f64>,
}

pub(crate) struct Sampler<'a> {
    data: &'a ModelData,
    priors: &'a PriorSpec,
    mcmc: &'a McmcConfig,
    dims: (usize, usize, usize, usize),
    independent: bool,
    shrinkage: bool,
    act: Vec<Active>,
    ranges: Vec<std::ops::Range<usize>>,
    pos: Vec<Vec<CellPos<'a>>>,
    by_response: Vec<Vec<usize>>,
    subjects_of_response: Vec<Vec<usize>>,
    censored_subjects: Vec<usize>,
    missing_subjects: Vec<usize>,

    fixed: Vec<FixedEffects>,
    pinned: Vec<Vec<Vec<Option<f64>>>>,
    shape: Option<f64>,
    params: CopulaParams,
    y: Vec<f64>,
    lnf: Vec<f64>,
    score: Vec<f64>,
    psi: Vec<f64>,
    latent: Vec<Option<LatentGaussian>>,
    cop: Vec<f64>,
    mu: Vec<f64>,
    iota2: Vec<f64>,

    rows: Vec<RowBlock>,
    copula_blocks: Vec<(CopulaTarget, Adapter)>,
    shape_block: Option<Adapter>,
    rng: ChaCha8Rng,
    pit_clamped: usize,
    scratch: Vec<f64>,
    wbuf: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub(crate) fn new(
        data: &'a ModelData,
        priors: &'a PriorSpec,
        mcmc: &'a McmcConfig,
        fixed_params: &FixedParams,
        chain: usize,
    ) -> Result<Self> {
        mcmc.validate()?;
        let d = &data.descriptor;
        priors.validate(d.num_responses())?;
        let (h, m, p, r) = (d.num_responses(), d.num_basis(), d.num_covariates(), d.num_random());
        let independent = d.dependence == DependenceMode::Independent;
        let mut rng = ChaCha8Rng::seed_from_u64(mcmc.seed);
        rng.set_stream(chain as u64);

        // Active-cell layout.
        let mut act = Vec::new();
        let mut ranges = Vec::with_capacity(data.num_subjects());
        let mut pos = Vec::with_capacity(data.num_subjects());
        let mut by_response = vec![Vec::new(); h];
        let mut subjects_of_response = vec![Vec::new(); h];
        let mut censored_subjects = Vec::new();
        let mut missing_subjects = Vec::new();
        let mut y = Vec::new();
        for (i, s) in data.subjects.iter().enumerate() {
            let start = act.len();
            let mut cell_pos = Vec::new();
            let mut has_censored = false;
            for (c, cell) in s.cells.iter().enumerate() {
                let censor = match cell.status {
                    CellStatus::Observed(v) => {
                        y.push(v);
                        None
                    }
                    CellStatus::Censored(t) => {
                        has_censored = true;
                        y.push(t);
                        Some(t)
                    }
                    CellStatus::Missing => continue,
                };
                by_response[cell.response].push(act.len());
                if subjects_of_response[cell.response].last() != Some(&i) {
                    subjects_of_response[cell.response].push(i);
                }
                act.push(Active { subject: i, cell: c, response: cell.response, censor });
                cell_pos.push(CellPos { visit: cell.visit, response: cell.response, z: &cell.z });
            }
            if has_censored {
                censored_subjects.push(i);
            }
            if s.cells.len() > cell_pos.len() {
                missing_subjects.push(i);
            }
            ranges.push(start..act.len());
            pos.push(cell_pos);
        }
        for list in &mut subjects_of_response {
            list.dedup();
        }

        // Pinned weights.
        let mut pinned = vec![vec![vec![None; p]; m]; h];
        for hh in 0..h {
            for mm in 1..m {
                for &pp in &d.constant_columns {
                    pinned[hh][mm][pp] = Some(0.0);
                }
            }
        }
        for w in &fixed_params.weights {
            if w.response >= h || w.row >= m || w.column >= p {
                return Err(Error::Config(format!(
                    "fixed weight ({}, {}, {}) outside the {h} x {m} x {p} model",
                    w.response, w.row, w.column
                )));
            }
            pinned[w.response][w.row][w.column] = Some(w.value);
        }

        // Initial values.
        let mut family = d.basis.family.build()?;
        if let Some(shape) = fixed_params.shape {
            family = BaseFamily::student_t(shape)?;
        }
        let shape = family.shape();
        let basis = d.basis.build()?.with_family(family);
        let spread = family.quantile(0.75) - family.quantile(0.25);
        let mut fixed = Vec::with_capacity(h);
        for hh in 0..h {
            let mut obs: Vec<f64> = by_response[hh]
                .iter()
                .filter(|&&a| act[a].censor.is_none())
                .map(|&a| y[a])
                .collect();
            obs.sort_by(f64::total_cmp);
            let (center, scale) = if obs.len() >= 4 {
                let q = |f: f64| obs[((obs.len() - 1) as f64 * f).round() as usize];
                (q(0.5), ((q(0.75) - q(0.25)) / spread).max(1e-3))
            } else {
                (0.0, 1.0)
            };
            let mut w = Weights::zeros(m, p);
            w.set(0, 0, center);
            for mm in 1..m {
                w.set(mm, 0, scale);
            }
            for mm in 0..m {
                for pp in 0..p {
                    if let Some(v) = pinned[hh][mm][pp] {
                        w.set(mm, pp, v);
                    }
                }
            }
            fixed.push(FixedEffects::new(basis.clone(), w)?);
        }

        let params = match d.dependence {
            DependenceMode::Independent => CopulaParams::independent(h, r),
            DependenceMode::CopulaUnivariate => CopulaParams::univariate(
                fixed_params.alpha.unwrap_or(0.5),
                fixed_params.lambda.unwrap_or(1.0),
                fixed_params.delta.clone().unwrap_or_else(|| vec![1.0; r]),
            )?,
            DependenceMode::CopulaMultivariate => CopulaParams::multivariate(
                fixed_params.alpha.unwrap_or(0.5),
                match &fixed_params.cross {
                    Some(v) if v.len() == h * h => DMatrix::from_row_slice(h, h, v),
                    Some(_) => return Err(Error::Config("fixed cross matrix has wrong size".into())),
                    None => DMatrix::identity(h, h),
                },
                match &fixed_params.delta {
                    Some(v) if v.len() == h * r => DMatrix::from_row_slice(h, r, v),
                    Some(_) => return Err(Error::Config("fixed delta has wrong size".into())),
                    None => DMatrix::from_element(h, r, 1.0),
                },
            )?,
        };
        if let Some(v) = &fixed_params.delta {
            if v.len() != h * r {
                return Err(Error::Config(format!("fixed delta needs {} values", h * r)));
            }
        }

        let shrinkage = d.shrinkage();
        let (mu, iota2) = if shrinkage {
            let mu = (0..m * p)
                .map(|k| {
                    let (mm, pp) = (k / p, k % p);
                    if mm > 0 && pp == 0 { priors.mu_mean_intercept } else { priors.mu_mean_other }
                })
                .collect();
            (mu, vec![1.0; m * p])
        } else {
            (Vec::new(), Vec::new())
        };

        // Blocks.
        let mut rows = Vec::new();
        for hh in 0..h {
            for mm in 0..m {
                let free: Vec<usize> = (0..p).filter(|&pp| pinned[hh][mm][pp].is_none()).collect();
                if free.is_empty() {
                    continue;
                }
                let k = free.len();
                rows.push(RowBlock {
                    response: hh,
                    row: mm,
                    free,
                    adapter: Adapter::new(format!("theta[{},{}]", d.responses[hh], mm + 1), 1.0),
                    count: 0,
                    mean: DVector::zeros(k),
                    scatter: DMatrix::zeros(k, k),
                    factor: None,
                });
            }
        }
        let mut copula_blocks = Vec::new();
        if !independent {
            if fixed_params.alpha.is_none() {
                copula_blocks.push((CopulaTarget::Alpha, Adapter::new("alpha".into(), 0.5)));
            }
            match d.dependence {
                DependenceMode::CopulaUnivariate if fixed_params.lambda.is_none() => {
                    copula_blocks.push((CopulaTarget::Lambda, Adapter::new("lambda".into(), 0.5)));
                }
                DependenceMode::CopulaMultivariate if fixed_params.cross.is_none() => {
                    for a in 0..h {
                        for b in a..h {
                            copula_blocks.push((
                                CopulaTarget::Cross(a, b),
                                Adapter::new(format!("cross[{},{}]", d.responses[a], d.responses[b]), 0.2),
                            ));
                        }
                    }
                }
                _ => {}
            }
            if fixed_params.delta.is_none() {
                for hh in 0..h {
                    for rr in 0..r {
                        copula_blocks.push((
                            CopulaTarget::Delta(hh, rr),
                            Adapter::new(format!("delta[{},{}]", d.responses[hh], d.random_names[rr]), 0.5),
                        ));
                    }
                }
            }
        }
        let shape_block = match (shape, fixed_params.shape) {
            (Some(_), None) => Some(Adapter::new("shape".into(), 0.3)),
            _ => None,
        };

        let n_act = act.len();
        let n_sub = data.num_subjects();
        let mut s = Self {
            data,
            priors,
            mcmc,
            dims: (h, m, p, r),
            independent,
            shrinkage,
            act,
            ranges,
            pos,
            by_response,
            subjects_of_response,
            censored_subjects,
            missing_subjects,
            fixed,
            pinned,
            shape,
            params,
            y,
            lnf: vec![0.0; n_act],
            score: vec![0.0; n_act],
            psi: vec![1.0; n_act],
            latent: vec![None; n_sub],
            cop: vec![0.0; n_sub],
            mu,
            iota2,
            rows,
            copula_blocks,
            shape_block,
            rng,
            pit_clamped: 0,
            scratch: Vec::new(),
            wbuf: Vec::new(),
        };
        s.init_censored()?;
        s.refresh_all()?;
        Ok(s)
    }

    fn x(&self, a: usize) -> &'a [f64] {
        let act = &self.act[a];
        &self.data.subjects[act.subject].cells[act.cell].x
    }

    /// Start every censored cell at a draw from its marginal truncated law.
    fn init_censored(&mut self) -> Result<()> {
        for a in 0..self.act.len() {
            if let Some(c) = self.act[a].censor {
                let fe = &self.fixed[self.act[a].response];
                let x = self.x(a);
                let loc = fe.locate(c, x)?;
                let bound = fe.basis().family().normal_score(loc.z);
                let s = truncated_normal_above(&mut self.rng, 0.0, 1.0, bound);
                self.y[a] = fe.quantile_at_score(s, x).max(c);
            }
        }
        Ok(())
    }

    /// Log marginal density and normal score of active cell `a` under `fe`.
    #[inline]
    fn eval_cell(&self, fe: &FixedEffects, a: usize) -> Result<(f64, f64)> {
        let (z, slope, _) = fe.standardize(self.y[a], self.x(a))?;
        let family = fe.basis().family();
        let lnf = family.ln_pdf(z) - slope.ln();
        let score = if self.independent { 0.0 } else { family.normal_score(z) };
        Ok((lnf, score))
    }

    fn build_latent(
        &self,
        params: &CopulaParams,
        i: usize,
        psi: &mut [f64],
    ) -> Result<Option<LatentGaussian>> {
        let pos = &self.pos[i];
        if pos.is_empty() {
            return Ok(None);
        }
        let cov = params.covariance(pos);
        for (k, v) in cov.diagonal().iter().enumerate() {
            psi[k] = *v;
        }
        LatentGaussian::from_matrix(cov, || format!("subject {}", self.data.subjects[i].id)).map(Some)
    }

    fn cop_term(
        latent: &Option<LatentGaussian>,
        score: &[f64],
        psi: &[f64],
        wbuf: &mut Vec<f64>,
        scratch: &mut Vec<f64>,
    ) -> f64 {
        let Some(l) = latent else { return 0.0 };
        wbuf.clear();
        wbuf.extend(score.iter().zip(psi).map(|(s, p)| s * p.sqrt()));
        scratch.resize(wbuf.len(), 0.0);
        copula::copula_term(l, score, psi, wbuf, scratch)
    }

    fn refresh_all(&mut self) -> Result<()> {
        for h in 0..self.dims.0 {
            for idx in 0..self.by_response[h].len() {
                let a = self.by_response[h][idx];
                let (lnf, score) = self.eval_cell(&self.fixed[h], a)?;
                self.lnf[a] = lnf;
                self.score[a] = score;
            }
        }
        if !self.independent {
            for i in 0..self.data.num_subjects() {
                let range = self.ranges[i].clone();
                let mut psi = vec![0.0; range.len()];
                self.latent[i] = self.build_latent(&self.params, i, &mut psi)?;
                self.psi[range.clone()].copy_from_slice(&psi);
                self.cop[i] = Self::cop_term(
                    &self.latent[i],
                    &self.score[range.clone()],
                    &self.psi[range],
                    &mut self.wbuf,
                    &mut self.scratch,
                );
            }
        }
        Ok(())
    }

    fn log_lik(&self) -> f64 {
        self.lnf.iter().sum::<f64>() + self.cop.iter().sum::<f64>()
    }

    fn theta_prior_moments(&self, m: usize, p: usize) -> (f64, f64) {
        if self.shrinkage {
            let k = m * self.dims.2 + p;
            (self.mu[k], 1.0 / self.iota2[k])
        } else {
            let mean = if m > 0 && p == 0 {
                self.priors.theta_mean_intercept
            } else {
                self.priors.theta_mean_other
            };
            (mean, self.priors.theta_var)
        }
    }

    fn row_log_prior(&self, block: &RowBlock, row: &[f64]) -> f64 {
        block
            .free
            .iter()
            .map(|&p| {
                let (mean, var) = self.theta_prior_moments(block.row, p);
                -0.5 * (row[p] - mean).powi(2) / var
            })
            .sum()
    }

    fn update_rows(&mut self, adapting: bool) -> Result<()> {
        let target = self.mcmc.target_accept;
        for b in 0..self.rows.len() {
            let (h, m) = (self.rows[b].response, self.rows[b].row);
            let current = self.fixed[h].theta_star().row(m).to_vec();
            let proposal = self.rows[b].propose(&mut self.rng, &current);
            let mut fe = self.fixed[h].clone();
            fe.set_row(m, &proposal);
            let prior_diff =
                self.row_log_prior(&self.rows[b], &proposal) - self.row_log_prior(&self.rows[b], &current);

            let mut ok = true;
            let mut ll_diff = 0.0;
            let mut cand_lnf = Vec::with_capacity(self.by_response[h].len());
            let mut cand_score = self.score.clone();
            for &a in &self.by_response[h] {
                match self.eval_cell(&fe, a) {
                    Ok((lnf, score)) => {
                        ll_diff += lnf - self.lnf[a];
                        cand_lnf.push(lnf);
                        cand_score[a] = score;
                    }
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            let mut cand_cop = Vec::new();
            if ok && !self.independent {
                for &i in &self.subjects_of_response[h] {
                    let range = self.ranges[i].clone();
                    let c = Self::cop_term(
                        &self.latent[i],
                        &cand_score[range.clone()],
                        &self.psi[range],
                        &mut self.wbuf,
                        &mut self.scratch,
                    );
                    ll_diff += c - self.cop[i];
                    cand_cop.push(c);
                }
            }
            let log_ratio = if ok { ll_diff + prior_diff } else { f64::NEG_INFINITY };
            let accept = log_ratio.is_finite() && self.rng.random::<f64>().ln() < log_ratio;
            if accept {
                self.fixed[h] = fe;
                for (k, &a) in self.by_response[h].iter().enumerate() {
                    self.lnf[a] = cand_lnf[k];
                    self.score[a] = cand_score[a];
                }
                for (k, &i) in self.subjects_of_response[h].iter().enumerate() {
                    if let Some(c) = cand_cop.get(k) {
                        self.cop[i] = *c;
                    }
                }
            }
            self.rows[b].adapter.record(log_ratio, accept, adapting, target);
            if adapting {
                let row = self.fixed[h].theta_star().row(m).to_vec();
                self.rows[b].observe(&row);
            }
        }
        Ok(())
    }

    fn update_shrinkage(&mut self) {
        if !self.shrinkage {
            return;
        }
        let (h, m, p, _) = self.dims;
        for mm in 0..m {
            for pp in 0..p {
                let k = mm * p + pp;
                let free: Vec<f64> = (0..h)
                    .filter(|&hh| self.pinned[hh][mm][pp].is_none())
                    .map(|hh| self.fixed[hh].theta_star().get(mm, pp))
                    .collect();
                let mean0 = if mm > 0 && pp == 0 {
                    self.priors.mu_mean_intercept
                } else {
                    self.priors.mu_mean_other
                };
                let n = free.len() as f64;
                let prec = self.priors.mu_precision + n * self.iota2[k];
                let mean = (self.priors.mu_precision * mean0 + self.iota2[k] * free.iter().sum::<f64>()) / prec;
                self.mu[k] = mean + standard_normal(&mut self.rng) / prec.sqrt();
                let ss: f64 = free.iter().map(|t| (t - self.mu[k]).powi(2)).sum();
                let shape = self.priors.iota_shape + 0.5 * n;
                let rate = self.priors.iota_rate + 0.5 * ss;
                let g: f64 = self.rng.sample(rand_distr::Gamma::new(shape, 1.0 / rate).expect("valid gamma"));
                self.iota2[k] = g.max(1e-12);
            }
        }
    }

    fn copula_candidate(&self, target: CopulaTarget, step: f64, e: f64) -> Option<(CopulaParams, f64)> {
        let mut p = self.params.clone();
        let jac;
        match target {
            CopulaTarget::Alpha => {
                let u = logit(p.alpha.max(1e-300)) + step * e;
                let a = sigmoid(u);
                if !(0.0..1.0).contains(&a) {
                    return None;
                }
                jac = (a * (1.0 - a)).ln() - (p.alpha * (1.0 - p.alpha)).ln();
                p.alpha = a;
            }
            CopulaTarget::Lambda => {
                let v = p.cross[(0, 0)] * (step * e).exp();
                jac = step * e;
                p.cross[(0, 0)] = v;
            }
            CopulaTarget::Cross(a, b) => {
                let v = p.cross[(a, b)] + step * e;
                p.cross[(a, b)] = v;
                p.cross[(b, a)] = v;
                Cholesky::new(p.cross.clone())?;
                jac = 0.0;
            }
            CopulaTarget::Delta(h, r) => {
                let v = p.delta[(h, r)] * (step * e).exp();
                jac = step * e;
                p.delta[(h, r)] = v;
            }
        }
        Some((p, jac))
    }

    fn copula_log_prior(&self, p: &CopulaParams) -> f64 {
        let pr = self.priors;
        let mut lp = 0.0;
        for v in p.delta.iter() {
            lp += gamma_log_density(*v, pr.delta_shape, pr.delta_rate);
        }
        match self.data.descriptor.dependence {
            DependenceMode::CopulaUnivariate => {
                lp += gamma_log_density(p.cross[(0, 0)], pr.lambda_shape, pr.lambda_rate);
            }
            DependenceMode::CopulaMultivariate => {
                lp += inverse_wishart_log_density(&p.cross, pr.cross_scale, pr.cross_df);
            }
            DependenceMode::Independent => {}
        }
        lp
    }

    fn update_copula(&mut self, adapting: bool) -> Result<()> {
        let target = self.mcmc.target_accept;
        let n = self.data.num_subjects();
        for b in 0..self.copula_blocks.len() {
            let (which, step) = (self.copula_blocks[b].0, self.copula_blocks[b].1.scale());
            let e = standard_normal(&mut self.rng);
            let mut log_ratio = f64::NEG_INFINITY;
            let mut cand = None;
            if let Some((p, jac)) = self.copula_candidate(which, step, e) {
                let mut psi = vec![0.0; self.psi.len()];
                let mut latent = Vec::with_capacity(n);
                let mut cop = Vec::with_capacity(n);
                let mut ll_diff = 0.0;
                let mut ok = true;
                for i in 0..n {
                    let range = self.ranges[i].clone();
                    match self.build_latent(&p, i, &mut psi[range.clone()]) {
                        Ok(l) => {
                            let c = Self::cop_term(
                                &l,
                                &self.score[range.clone()],
                                &psi[range],
                                &mut self.wbuf,
                                &mut self.scratch,
                            );
                            ll_diff += c - self.cop[i];
                            latent.push(l);
                            cop.push(c);
                        }
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    log_ratio = ll_diff + self.copula_log_prior(&p) - self.copula_log_prior(&self.params) + jac;
                    cand = Some((p, psi, latent, cop));
                }
            }
            let accept = log_ratio.is_finite() && self.rng.random::<f64>().ln() < log_ratio;
            if accept {
                let (p, psi, latent, cop) = cand.expect("candidate exists when accepted");
                self.params = p;
                self.psi = psi;
                self.latent = latent;
                self.cop = cop;
            }
            self.copula_blocks[b].1.record(log_ratio, accept, adapting, target);
        }
        Ok(())
    }

    fn update_shape(&mut self, adapting: bool) -> Result<()> {
        let Some(adapter) = &self.shape_block else { return Ok(()) };
        let step = adapter.scale();
        let current = self.shape.expect("shape block implies Student-t");
        let u = current.ln() + step * standard_normal(&mut self.rng);
        let proposal = u.exp();
        let mut log_ratio = f64::NEG_INFINITY;
        let saved = (self.fixed.clone(), self.lnf.clone(), self.score.clone(), self.cop.clone());
        if let Ok(family) = BaseFamily::student_t(proposal) {
            if proposal.is_finite() {
                let before = self.log_lik();
                let basis = self.fixed[0].basis().with_family(family);
                for fe in &mut self.fixed {
                    fe.set_basis(basis.clone());
                }
                if self.refresh_cells_and_cop().is_ok() {
                    let after = self.log_lik();
                    let lp = |v: f64| -0.5 * (v.ln() - self.priors.shape_log_mean).powi(2) / self.priors.shape_log_var;
                    log_ratio = after - before + lp(proposal) - lp(current);
                }
            }
        }
        let accept = log_ratio.is_finite() && self.rng.random::<f64>().ln() < log_ratio;
        if accept {
            self.shape = Some(proposal);
        } else {
            (self.fixed, self.lnf, self.score, self.cop) = saved;
        }
        if let Some(adapter) = &mut self.shape_block {
            adapter.record(log_ratio, accept, adapting, self.mcmc.target_accept);
        }
        Ok(())
    }

    /// Re-evaluate cells and copula terms with unchanged covariance factors.
    fn refresh_cells_and_cop(&mut self) -> Result<()> {
        for h in 0..self.dims.0 {
            for idx in 0..self.by_response[h].len() {
                let a = self.by_response[h][idx];
                let (lnf, score) = self.eval_cell(&self.fixed[h], a)?;
                self.lnf[a] = lnf;
                self.score[a] = score;
            }
        }
        if !self.independent {
            for i in 0..self.data.num_subjects() {
                let range = self.ranges[i].clone();
                self.cop[i] = Self::cop_term(
                    &self.latent[i],
                    &self.score[range.clone()],
                    &self.psi[range],
                    &mut self.wbuf,
                    &mut self.scratch,
                );
            }
        }
        Ok(())
    }

    /// Refresh censored latent responses from their truncated conditionals.
    fn augment_censored(&mut self) -> Result<()> {
        for idx in 0..self.censored_subjects.len() {
            let i = self.censored_subjects[idx];
            let range = self.ranges[i].clone();
            let n = range.len();
            let omega = match (&self.latent[i], self.independent) {
                (Some(l), false) => Some(l.inverse()),
                _ => None,
            };
            let mut w: Vec<f64> = range.clone().map(|a| self.score[a] * self.psi[a].sqrt()).collect();
            for k in 0..n {
                let a = range.start + k;
                let Some(c) = self.act[a].censor else { continue };
                let fe = &self.fixed[self.act[a].response];
                let x = self.x(a);
                let loc = fe.locate(c, x)?;
                let bound = fe.basis().family().normal_score(loc.z);
                let s = match &omega {
                    Some(om) => {
                        let sqrt_psi = self.psi[a].sqrt();
                        let okk = om[(k, k)];
                        let mut ow = 0.0;
                        for j in 0..n {
                            ow += om[(k, j)] * w[j];
                        }
                        let mean = w[k] - ow / okk;
                        let sd = 1.0 / okk.sqrt();
                        let wk = truncated_normal_above(&mut self.rng, mean, sd, bound * sqrt_psi);
                        w[k] = wk;
                        wk / sqrt_psi
                    }
                    None => truncated_normal_above(&mut self.rng, 0.0, 1.0, bound),
                };
                let u = dist::normal_cdf(s);
                if u >= 1.0 - dist::PROB_FLOOR {
                    self.pit_clamped += 1;
                }
                self.y[a] = fe.quantile_at_score(s, x).max(c);
                let (lnf, score) = self.eval_cell(&self.fixed[self.act[a].response], a)?;
                self.lnf[a] = lnf;
                self.score[a] = score;
                if omega.is_some() {
                    w[k] = score * self.psi[a].sqrt();
                }
            }
            if !self.independent {
                self.cop[i] = Self::cop_term(
                    &self.latent[i],
                    &self.score[range.clone()],
                    &self.psi[range],
                    &mut self.wbuf,
                    &mut self.scratch,
                );
            }
        }
        Ok(())
    }

    fn sweep(&mut self, iteration: usize, adapting: bool) -> Result<()> {
        self.augment_censored()?;
        self.update_rows(adapting)?;
        self.update_shrinkage();
        self.update_copula(adapting)?;
        self.update_shape(adapting)?;
        let ll = self.log_lik();
        if !ll.is_finite() {
            return Err(Error::Sampler { iteration, reason: format!("non-finite log-likelihood; {}", self.state_dump()) });
        }
        Ok(())
    }

    fn state_dump(&self) -> String {
        let theta: Vec<&[f64]> = self.fixed.iter().map(|f| f.theta_star().as_slice()).collect();
        format!(
            "theta_star={theta:?} shape={:?} alpha={} cross={:?} delta={:?}",
            self.shape,
            self.params.alpha,
            self.params.cross.as_slice(),
            self.params.delta.as_slice()
        )
    }

    fn subject_logliks(&self) -> Result<Vec<f64>> {
        let n = self.data.num_subjects();
        let mut out = Vec::with_capacity(n);
        let mut censored = self.censored_subjects.iter().peekable();
        for i in 0..n {
            let ll = if censored.peek() == Some(&&i) {
                censored.next();
                likelihood::loglik_subject(
                    &self.data.subjects[i].cells,
                    &self.fixed,
                    &self.params,
                    self.independent,
                    self.mcmc.ghk_draws,
                    ghk_seed(self.mcmc.seed, i),
                )?
            } else {
                let range = self.ranges[i].clone();
                self.lnf[range].iter().sum::<f64>() + self.cop[i]
            };
            out.push(ll - self.data.log_jacobian(i));
        }
        Ok(out)
    }

    fn draw_gamma(&mut self) -> Result<Vec<f64>> {
        let (h, _, _, r) = self.dims;
        let n = self.data.num_subjects();
        let mut out = vec![0.0; n * h * r];
        if self.independent || r == 0 {
            return Ok(out);
        }
        let d: Vec<f64> = (0..h * r).map(|k| self.params.delta[(k / r, k % r)]).collect();
        let no_re = CopulaParams { delta: DMatrix::zeros(h, r), ..self.params.clone() };
        for i in 0..n {
            let pos = &self.pos[i];
            if pos.is_empty() {
                let e: Vec<f64> = (0..h * r).map(|k| d[k].sqrt() * standard_normal(&mut self.rng)).collect();
                out[i * h * r..(i + 1) * h * r].copy_from_slice(&e);
                continue;
            }
            let sigma = no_re.covariance(pos);
            let z = DMatrix::from_fn(pos.len(), h * r, |c, k| {
                if pos[c].response == k / r { pos[c].z[k % r] } else { 0.0 }
            });
            let range = self.ranges[i].clone();
            let w = DVector::from_iterator(range.len(), range.map(|a| self.score[a] * self.psi[a].sqrt()));
            let (mean, cov) = likelihood::random_effect_conditional(&z, &d, &sigma, &w)?;
            let g = likelihood::draw_random_effects(&mut self.rng, &mean, &cov);
            out[i * h * r..(i + 1) * h * r].copy_from_slice(g.as_slice());
        }
        Ok(out)
    }

    /// Draw every missing cell from its conditional given the active cells.
    fn impute_missing(&mut self, sums: &mut [(f64, f64)], slot: &[Vec<usize>]) -> Result<()> {
        for idx in 0..self.missing_subjects.len() {
            let i = self.missing_subjects[idx];
            let subject = &self.data.subjects[i];
            let missing: Vec<usize> = subject
                .cells
                .iter()
                .enumerate()
                .filter(|(_, c)| c.status == CellStatus::Missing)
                .map(|(k, _)| k)
                .collect();
            let scores: Vec<f64> = if self.independent {
                missing.iter().map(|_| standard_normal(&mut self.rng)).collect()
            } else {
                let mut all = self.pos[i].clone();
                all.extend(missing.iter().map(|&k| {
                    let c = &subject.cells[k];
                    CellPos { visit: c.visit, response: c.response, z: &c.z }
                }));
                let cov = self.params.covariance(&all);
                let n_act = self.pos[i].len();
                let range = self.ranges[i].clone();
                let w: Vec<f64> = range.map(|a| self.score[a] * self.psi[a].sqrt()).collect();
                let obs: Vec<usize> = (0..n_act).collect();
                let (mean, cond) = copula::conditional_gaussian(&cov, &obs, &w)?;
                let draw = likelihood::draw_random_effects(&mut self.rng, &mean, &cond);
                draw.iter()
                    .enumerate()
                    .map(|(k, v)| v / cov[(n_act + k, n_act + k)].sqrt())
                    .collect()
            };
            for (k, &cell_idx) in missing.iter().enumerate() {
                let cell = &subject.cells[cell_idx];
                let fe = &self.fixed[cell.response];
                let y = fe.quantile_at_score(scores[k], &cell.x);
                let raw = self.data.descriptor.y_scaling[cell.response].inverse(y);
                let entry = &mut sums[slot[i][k]];
                entry.0 += raw;
                entry.1 += dist::normal_cdf(scores[k]);
            }
        }
        Ok(())
    }

    fn snapshot(&mut self) -> Result<Sample> {
        let theta_star = self.fixed.iter().flat_map(|f| f.theta_star().as_slice().to_vec()).collect();
        let censored_u: Vec<f64> = self
            .act
            .iter()
            .enumerate()
            .filter(|(_, a)| a.censor.is_some())
            .map(|(k, _)| self.latent_u(k))
            .collect();
        let gamma = if self.mcmc.store_random_effects { self.draw_gamma()? } else { Vec::new() };
        Ok(Sample {
            theta_star,
            shape: self.shape,
            alpha: self.params.alpha,
            cross: self.params.cross.transpose().as_slice().to_vec(),
            delta: self.params.delta.transpose().as_slice().to_vec(),
            mu: self.mu.clone(),
            iota2: self.iota2.clone(),
            gamma,
            subject_loglik: self.subject_logliks()?,
            censored_u_mean: if censored_u.is_empty() {
                None
            } else {
                Some(censored_u.iter().sum::<f64>() / censored_u.len() as f64)
            },
        })
    }

    /// `U` of active cell `a` under the current marginal model.
    fn latent_u(&self, a: usize) -> f64 {
        let fe = &self.fixed[self.act[a].response];
        fe.locate(self.y[a], self.x(a)).map(|l| l.tau).unwrap_or(f64::NAN)
    }

    pub(crate) fn run(mut self, chain: usize) -> Result<PosteriorDraws> {
        let mcmc = self.mcmc;
        let d = &self.data.descriptor;
        let mut samples = Vec::with_capacity(mcmc.retained());

        let censored_cells: Vec<usize> = (0..self.act.len()).filter(|&a| self.act[a].censor.is_some()).collect();
        let mut censored_sums = vec![(0.0, 0.0); censored_cells.len()];
        let mut missing_slot: Vec<Vec<usize>> = vec![Vec::new(); self.data.num_subjects()];
        let mut missing_records = Vec::new();
        for (i, s) in self.data.subjects.iter().enumerate() {
            for c in s.cells.iter().filter(|c| c.status == CellStatus::Missing) {
                missing_slot[i].push(missing_records.len());
                missing_records.push((i, c.record));
            }
        }
        let mut missing_sums = vec![(0.0, 0.0); missing_records.len()];

        for it in 0..mcmc.iterations {
            let adapting = it < mcmc.burn_in;
            self.sweep(it, adapting)?;
            if it >= mcmc.burn_in && (it + 1 - mcmc.burn_in).is_multiple_of(mcmc.thin) {
                samples.push(self.snapshot()?);
                for (k, &a) in censored_cells.iter().enumerate() {
                    let raw = d.y_scaling[self.act[a].response].inverse(self.y[a]);
                    censored_sums[k].0 += raw;
                    censored_sums[k].1 += self.latent_u(a);
                }
                if mcmc.impute_missing && !missing_records.is_empty() {
                    self.impute_missing(&mut missing_sums, &missing_slot)?;
                }
            }
        }

        let kept = samples.len().max(1) as f64;
        let subject_id = |i: usize| self.data.subjects[i].id.clone();
        let censored = censored_cells
            .iter()
            .zip(&censored_sums)
            .map(|(&a, s)| {
                let act = &self.act[a];
                CellEstimate {
                    record: self.data.subjects[act.subject].cells[act.cell].record,
                    subject: subject_id(act.subject),
                    mean_y: s.0 / kept,
                    mean_u: s.1 / kept,
                }
            })
            .collect();
        let imputed = if mcmc.impute_missing {
            missing_records
                .iter()
                .zip(&missing_sums)
                .map(|(&(i, record), s)| CellEstimate {
                    record,
                    subject: subject_id(i),
                    mean_y: s.0 / kept,
                    mean_u: s.1 / kept,
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut acceptance: Vec<BlockAcceptance> = self.rows.iter().map(|b| b.adapter.report()).collect();
        acceptance.extend(self.copula_blocks.iter().map(|(_, a)| a.report()));
        acceptance.extend(self.shape_block.iter().map(Adapter::report));
        for a in acceptance.iter().filter(|a| a.flagged) {
            log::warn!("block {} acceptance {:.3} outside [{ACCEPT_LOW}, {ACCEPT_HIGH}]", a.block, a.rate);
        }
        Ok(PosteriorDraws {
            descriptor: d.clone(),
            meta: RunMeta {
                seed: mcmc.seed,
                chain,
                iterations: mcmc.iterations,
                burn_in: mcmc.burn_in,
                thin: mcmc.thin,
                acceptance,
                pit_clamped: self.pit_clamped,
                cpo_unit: "subject".into(),
                cross_carriage: "covariance".into(),
            },
            subjects: self.data.subjects.iter().map(|s| s.id.clone()).collect(),
            samples,
            censored,
            imputed,
        })
    }
}

/// Fixed GHK seed per subject, shared by every draw so CPO ratios use common
/// random numbers.
pub(crate) fn ghk_seed(seed: u64, subject: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (subject as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Draw from `N(mean, sd²)` restricted to `(lower, ∞)` by inverse CDF, using
/// the upper tail directly when the bound is above the mean.
pub fn truncated_normal_above<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lower: f64) -> f64 {
    let a = (lower - mean) / sd;
    let u = 1.0 - rng.random::<f64>();
    let x = if a >= 0.0 {
        let q = dist::normal_sf(a);
        dist::normal_quantile_upper((u * q).max(f64::MIN_POSITIVE))
    } else {
        let p_lo = dist::normal_cdf(a);
        dist::normal_quantile((p_lo + u * (1.0 - p_lo)).min(1.0 - f64::EPSILON))
    };
    mean + sd * x.max(a)
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Gamma(shape, rate) log density up to a constant.
fn gamma_log_density(v: f64, shape: f64, rate: f64) -> f64 {
    if v <= 0.0 {
        return f64::NEG_INFINITY;
    }
    (shape - 1.0) * v.ln() - rate * v
}

/// Inverse-Wishart(`scale · I`, `df`) log density up to a constant.
fn inverse_wishart_log_density(m: &DMatrix<f64>, scale: f64, df: f64) -> f64 {
    let h = m.nrows() as f64;
    match Cholesky::new(m.clone()) {
        Some(c) => {
            let log_det = 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let trace = c.inverse().trace();
            -0.5 * (df + h + 1.0) * log_det - 0.5 * scale * trace
        }
        None => f64::NEG_INFINITY,
    }
}
