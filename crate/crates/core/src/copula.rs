//! Gaussian-copula dependence within a subject.
//!
//! The latent vector of a subject is `W = Zγ + E` with `γ ~ N(0, Δ)` and
//! `Cov(E) = Ξ(α) ⊗ Λ + I`, so marginally `W ~ N(0, Ψ)` with
//! `Ψ = ZΔZ' + Ξ(α) ⊗ Λ + I`. Cells map to uniforms through
//! `U = Φ(W / √ψ)` where `ψ = diag(Ψ)`. The univariate model is the `H = 1`
//! case with `Λ = [λ]`.
//!
//! Cells are laid out visit-major, response-minor: index `j·H + h`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dist::{self, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::qfmodel::FixedEffects;

/// AR-1 correlation matrix `Ξ(α)[u, v] = α^|u-v|`.
pub fn ar1_matrix(alpha: f64, visits: usize) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    Ok(DMatrix::from_fn(visits, visits, |u, v| ar1_entry(alpha, u.abs_diff(v))))
}

#[inline]
pub(crate) fn ar1_entry(alpha: f64, lag: usize) -> f64 {
    if lag == 0 {
        1.0
    } else {
        alpha.powi(lag as i32)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Domain(format!("AR-1 correlation must be in [0, 1), got {alpha}")))
    }
}

/// Copula parameters: serial correlation `α`, cross-response matrix `Λ`
/// (`H × H`; `[λ]` in the univariate model) and random-effect variances
/// `Δ` (`H × R`, diagonal structure).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopulaParams {
    pub alpha: f64,
    pub cross: DMatrix<f64>,
    pub delta: DMatrix<f64>,
}

impl CopulaParams {
    /// Univariate model `Ψ = ZΔZ' + I + λΞ(α)`.
    pub fn univariate(alpha: f64, lambda: f64, delta: Vec<f64>) -> Result<Self> {
        check_alpha(alpha)?;
        if !(lambda >= 0.0) {
            return Err(Error::Domain(format!("serial scale must be nonnegative, got {lambda}")));
        }
        let r = delta.len();
        let p = Self {
            alpha,
            cross: DMatrix::from_element(1, 1, lambda),
            delta: DMatrix::from_vec(1, r, delta),
        };
        p.check_delta()?;
        Ok(p)
    }

    /// Multivariate model `Ψ = ZΔZ' + Ξ(α) ⊗ Λ + I`.
    pub fn multivariate(alpha: f64, cross: DMatrix<f64>, delta: DMatrix<f64>) -> Result<Self> {
        check_alpha(alpha)?;
        if !cross.is_square() {
            return Err(Error::Dimension("cross-response matrix must be square".into()));
        }
        if delta.nrows() != cross.nrows() {
            return Err(Error::Dimension(format!(
                "random-effect variances have {} rows, expected {}",
                delta.nrows(),
                cross.nrows()
            )));
        }
        if (&cross - cross.transpose()).amax() > 1e-12 {
            return Err(Error::Domain("cross-response matrix must be symmetric".into()));
        }
        if cross.nrows() > 1 && Cholesky::new(cross.clone()).is_none() {
            return Err(Error::NotPositiveDefinite {
                context: "cross-response matrix".into(),
                min_diag: cross.diagonal().min(),
            });
        }
        let p = Self { alpha, cross, delta };
        p.check_delta()?;
        Ok(p)
    }

    /// All-zero dependence: `Ψ = I`.
    pub fn independent(responses: usize, random_effects: usize) -> Self {
        Self {
            alpha: 0.0,
            cross: DMatrix::zeros(responses, responses),
            delta: DMatrix::zeros(responses, random_effects),
        }
    }

    fn check_delta(&self) -> Result<()> {
        if self.delta.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Domain("random-effect variances must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn responses(&self) -> usize {
        self.cross.nrows()
    }

    pub fn random_effects(&self) -> usize {
        self.delta.ncols()
    }

    /// `Λ` rescaled to unit diagonal.
    pub fn cross_correlation(&self) -> DMatrix<f64> {
        let d: Vec<f64> = self.cross.diagonal().iter().map(|v| v.sqrt()).collect();
        DMatrix::from_fn(self.cross.nrows(), self.cross.ncols(), |a, b| {
            self.cross[(a, b)] / (d[a] * d[b])
        })
    }

    /// `Ψ[c, c']` for two cells given by visit, response and random-effect covariates.
    #[inline]
    pub fn entry(&self, a: CellPos<'_>, b: CellPos<'_>) -> f64 {
        let mut v = ar1_entry(self.alpha, a.visit.abs_diff(b.visit)) * self.cross[(a.response, b.response)];
        if a.response == b.response {
            let row = a.response;
            for (r, (za, zb)) in a.z.iter().zip(b.z).enumerate() {
                v += za * zb * self.delta[(row, r)];
            }
        }
        if a.visit == b.visit && a.response == b.response {
            v += 1.0;
        }
        v
    }

    /// `ψ` of one cell.
    #[inline]
    pub fn diag(&self, cell: CellPos<'_>) -> f64 {
        self.entry(cell, cell)
    }

    /// Covariance over an arbitrary set of cells.
    pub fn covariance(&self, cells: &[CellPos<'_>]) -> DMatrix<f64> {
        let n = cells.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.entry(cells[i], cells[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

/// Location of a cell inside the subject's latent vector.
#[derive(Clone, Copy, Debug)]
pub struct CellPos<'a> {
    pub visit: usize,
    pub response: usize,
    /// Random-effect covariates of the cell (length `R`).
    pub z: &'a [f64],
}

/// `Ψ_i = Z_iΔZ_i' + I + λΞ(α)` for one subject with a `J × R` design.
pub fn build_cov_univariate(
    z: &DMatrix<f64>,
    delta: &[f64],
    alpha: f64,
    lambda: f64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if z.ncols() != delta.len() {
        return Err(Error::Dimension(format!(
            "design has {} random effects, {} variances given",
            z.ncols(),
            delta.len()
        )));
    }
    let params = CopulaParams::univariate(alpha, lambda, delta.to_vec())?;
    finish(subject_cov(&params, z, 1))
}

/// `Ψ_i = Z_iΔZ_i' + Ξ(α) ⊗ Λ + I` over `J·H` cells, visit-major.
///
/// `z` is the `J × R` random-effect design shared by all responses and
/// `delta` the `H × R` variances.
pub fn build_cov_multivariate(
    z: &DMatrix<f64>,
    delta: &DMatrix<f64>,
    alpha: f64,
    cross: &DMatrix<f64>,
    visits: usize,
    responses: usize,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if cross.nrows() != responses || z.nrows() != visits || delta.ncols() != z.ncols() {
        return Err(Error::Dimension(format!(
            "expected Λ {responses}×{responses}, Z {visits}×R, Δ {responses}×R; got Λ {}×{}, Z {}×{}, Δ {}×{}",
            cross.nrows(),
            cross.ncols(),
            z.nrows(),
            z.ncols(),
            delta.nrows(),
            delta.ncols()
        )));
    }
    let params = CopulaParams::multivariate(alpha, cross.clone(), delta.clone())?;
    finish(subject_cov(&params, z, responses))
}

fn subject_cov(params: &CopulaParams, z: &DMatrix<f64>, responses: usize) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..z.nrows()).map(|j| z.row(j).iter().copied().collect()).collect();
    let cells: Vec<CellPos<'_>> = (0..z.nrows())
        .flat_map(|j| (0..responses).map(move |h| (j, h)))
        .map(|(j, h)| CellPos { visit: j, response: h, z: &rows[j] })
        .collect();
    params.covariance(&cells)
}

fn finish(psi: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    LatentGaussian::new(&psi, "subject covariance")?;
    let diag = psi.diagonal().iter().copied().collect();
    Ok((psi, diag))
}

/// `U = Φ(W / √ψ)` cell-wise. Returns the uniforms and how many were clamped
/// into `[1e-12, 1 - 1e-12]`.
pub fn pit_forward(w: &[f64], psi: &[f64]) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let u = w
        .iter()
        .zip(psi)
        .map(|(w, p)| {
            let u = dist::normal_cdf(w / p.sqrt());
            if !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&u) {
                clamped += 1;
                u.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
            } else {
                u
            }
        })
        .collect();
    (u, clamped)
}

/// `W = √ψ Φ⁻¹(U)` cell-wise.
pub fn pit_inverse(u: &[f64], psi: &[f64]) -> Vec<f64> {
    u.iter().zip(psi).map(|(u, p)| dist::normal_quantile(*u) * p.sqrt()).collect()
}

/// Cholesky-factored zero-mean Gaussian.
#[derive(Clone, Debug)]
pub struct LatentGaussian {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl LatentGaussian {
    pub fn new(cov: &DMatrix<f64>, context: &str) -> Result<Self> {
        Self::from_matrix(cov.clone(), || context.to_string())
    }

    /// Factor `cov` in place; `context` is only built on failure.
    pub fn from_matrix(cov: DMatrix<f64>, context: impl FnOnce() -> String) -> Result<Self> {
        let min_diag = cov.diagonal().min();
        let chol = Cholesky::new(cov).ok_or_else(|| Error::NotPositiveDefinite { context: context(), min_diag })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower Cholesky factor (upper triangle is not meaningful).
    pub fn factor(&self) -> &DMatrix<f64> {
        self.chol.l_dirty()
    }

    /// `w' Σ⁻¹ w` by forward substitution into `scratch`.
    #[inline]
    pub fn quad_form(&self, w: &[f64], scratch: &mut [f64]) -> f64 {
        forward_quad(self.chol.l_dirty(), w, scratch)
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        let mut scratch = vec![0.0; w.len()];
        let q = self.quad_form(w, &mut scratch);
        -0.5 * (q + self.log_det) - w.len() as f64 * dist::LN_SQRT_2PI
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// `|L⁻¹ w|²` for lower-triangular `L`.
#[inline]
pub(crate) fn forward_quad(l: &DMatrix<f64>, w: &[f64], scratch: &mut [f64]) -> f64 {
    let n = w.len();
    let mut q = 0.0;
    for i in 0..n {
        let mut s = w[i];
        for k in 0..i {
            s -= l[(i, k)] * scratch[k];
        }
        let v = s / l[(i, i)];
        scratch[i] = v;
        q += v * v;
    }
    q
}

/// Log Gaussian-copula density of normal scores `s` (`s = Φ⁻¹(U)`) whose
/// latent covariance is factored in `latent` with diagonal `psi`:
/// `log φ_Ψ(s√ψ) − Σ [log φ(s) − ½ log ψ]`.
pub fn copula_log_density(latent: &LatentGaussian, scores: &[f64], psi: &[f64]) -> f64 {
    let w: Vec<f64> = scores.iter().zip(psi).map(|(s, p)| s * p.sqrt()).collect();
    let mut scratch = vec![0.0; w.len()];
    copula_term(latent, scores, psi, &w, &mut scratch)
}

#[inline]
pub(crate) fn copula_term(
    latent: &LatentGaussian,
    scores: &[f64],
    psi: &[f64],
    w: &[f64],
    scratch: &mut [f64],
) -> f64 {
    let q = latent.quad_form(w, scratch);
    let ss: f64 = scores.iter().map(|s| s * s).sum();
    let half_log_psi: f64 = psi.iter().map(|p| 0.5 * p.ln()).sum();
    -0.5 * (q + latent.log_det()) + 0.5 * ss + half_log_psi
}

/// Mean and covariance of the unobserved block of `N(0, Ψ)` given the observed cells.
///
/// A singular observed block is regularized with a `1e-10` ridge.
pub fn conditional_gaussian(
    psi: &DMatrix<f64>,
    observed_idx: &[usize],
    observed_values: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = psi.nrows();
    if observed_idx.len() != observed_values.len() {
        return Err(Error::Dimension("observed indices and values differ in length".into()));
    }
    let mut is_obs = vec![false; n];
    for &i in observed_idx {
        if i >= n || is_obs[i] {
            return Err(Error::Domain(format!("observed index {i} invalid or repeated")));
        }
        is_obs[i] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !is_obs[i]).collect();
    if observed_idx.is_empty() {
        return Ok((DVector::zeros(n), psi.clone()));
    }
    if free.is_empty() {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let s11 = psi.select_rows(observed_idx).select_columns(observed_idx);
    let s21 = psi.select_rows(&free).select_columns(observed_idx);
    let s22 = psi.select_rows(&free).select_columns(&free);
    let chol = match Cholesky::new(s11.clone()) {
        Some(c) => c,
        None => {
            log::warn!("singular observed block in conditional Gaussian; adding ridge 1e-10");
            let ridged = s11 + DMatrix::identity(observed_idx.len(), observed_idx.len()) * 1e-10;
            Cholesky::new(ridged.clone()).ok_or_else(|| Error::NotPositiveDefinite {
                context: "observed block".into(),
                min_diag: ridged.diagonal().min(),
            })?
        }
    };
    let w = DVector::from_column_slice(observed_values);
    let mean = &s21 * chol.solve(&w);
    let gain = chol.solve(&s21.transpose());
    let cov = s22 - &s21 * gain;
    Ok((mean, cov))
}

/// An observed cell for [`joint_loglik`].
#[derive(Clone, Debug)]
pub struct ObservedCell {
    pub visit: usize,
    pub response: usize,
    pub y: f64,
    /// Fixed-effect design (scaled, leading intercept).
    pub x: Vec<f64>,
    /// Random-effect design.
    pub z: Vec<f64>,
}

/// Joint log density of one subject's observed cells: marginal quantile-model
/// densities joined by the Gaussian copula.
pub fn joint_loglik(
    cells: &[ObservedCell],
    fixed: &[FixedEffects],
    params: &CopulaParams,
) -> Result<f64> {
    if cells.is_empty() {
        return Ok(0.0);
    }
    let mut marginal = 0.0;
    let mut scores = Vec::with_capacity(cells.len());
    for c in cells {
        let fe = fixed.get(c.response).ok_or_else(|| {
            Error::Dimension(format!("no fixed effects for response {}", c.response))
        })?;
        let loc = fe.locate(c.y, &c.x)?;
        marginal += fe.basis().family().ln_pdf(loc.z) - loc.slope.ln();
        scores.push(fe.basis().family().normal_score(loc.z));
    }
    let pos: Vec<CellPos<'_>> = cells
        .iter()
        .map(|c| CellPos { visit: c.visit, response: c.response, z: &c.z })
        .collect();
    let psi_mat = params.covariance(&pos);
    let psi: Vec<f64> = psi_mat.diagonal().iter().copied().collect();
    let latent = LatentGaussian::new(&psi_mat, "subject covariance")?;
    Ok(marginal + copula_log_density(&latent, &scores, &psi))
}
