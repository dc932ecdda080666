//! Marginal quantile-function regression `Q(τ|x) = Σ_p x_p Σ_m I_m(τ) θ_mp`.
//!
//! Within each inter-knot segment `Q` is affine in `q₀(τ)`, so the CDF and
//! density are available in closed form through the base family.

use serde::{Deserialize, Serialize};

use crate::basis::{check_level, BasisSpec};
use crate::error::{Error, Result};

/// Intercept weight used for rows that leave the constraint space.
pub const FALLBACK_INTERCEPT: f64 = 0.001;

/// Row-major `M × P` matrix of basis weights for one response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Weights {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged weight rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    /// Build from a column-major listing `θ·₁, θ·₂, …` (one vector per covariate).
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let rows = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|c| c.len() != rows) {
            return Err(Error::Dimension("ragged weight columns".into()));
        }
        let mut w = Self::zeros(rows, cols.len());
        for (p, col) in cols.iter().enumerate() {
            for (m, &v) in col.iter().enumerate() {
                w.set(m, p, v);
            }
        }
        Ok(w)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, m: usize, p: usize) -> f64 {
        self.data[m * self.cols + p]
    }

    #[inline]
    pub fn set(&mut self, m: usize, p: usize, v: f64) {
        self.data[m * self.cols + p] = v;
    }

    #[inline]
    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.cols..(m + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.data[m * self.cols..(m + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Map a latent row `θ⋆_m·` (0-based `m`) to the constrained row `θ_m·`.
///
/// Row 0 is the location process and is never constrained.
pub fn constrain(row: &[f64], m: usize) -> Vec<f64> {
    let mut out = row.to_vec();
    constrain_into(row, m, &mut out);
    out
}

#[inline]
pub(crate) fn constrain_into(row: &[f64], m: usize, out: &mut [f64]) {
    out.copy_from_slice(row);
    if m == 0 || row.is_empty() {
        return;
    }
    if !satisfies_constraint(row) {
        out.fill(0.0);
        out[0] = FALLBACK_INTERCEPT;
    }
}

#[inline]
pub fn satisfies_constraint(row: &[f64]) -> bool {
    let spread: f64 = row[1..].iter().map(|v| v.abs()).sum();
    row[0] > spread
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Where a response value falls under `Q(·|x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Located {
    /// `F(y|x)`.
    pub tau: f64,
    /// Standardized value on the base scale: `τ = F₀(z)`.
    pub z: f64,
    /// Slope of `Q` in `q₀(τ)` on the bracketing segment.
    pub slope: f64,
    pub segment: usize,
}

/// Fixed effects of one response: latent weights `θ⋆` and their constrained image `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedEffects {
    basis: BasisSpec,
    theta_star: Weights,
    theta: Weights,
}

impl FixedEffects {
    pub fn new(basis: BasisSpec, theta_star: Weights) -> Result<Self> {
        if theta_star.rows() != basis.num_basis() {
            return Err(Error::Dimension(format!(
                "weights have {} rows, basis has {} functions",
                theta_star.rows(),
                basis.num_basis()
            )));
        }
        if theta_star.cols() == 0 {
            return Err(Error::Dimension("need at least the intercept column".into()));
        }
        let mut theta = theta_star.clone();
        for m in 0..theta.rows() {
            constrain_into(theta_star.row(m), m, theta.row_mut(m));
        }
        Ok(Self { basis, theta_star, theta })
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn theta_star(&self) -> &Weights {
        &self.theta_star
    }

    pub fn theta(&self) -> &Weights {
        &self.theta
    }

    pub fn num_covariates(&self) -> usize {
        self.theta.cols()
    }

    /// Replace latent row `m` (0-based) and refresh its constrained image.
    pub fn set_row(&mut self, m: usize, row: &[f64]) {
        self.theta_star.row_mut(m).copy_from_slice(row);
        constrain_into(row, m, self.theta.row_mut(m));
    }

    pub fn set_basis(&mut self, basis: BasisSpec) {
        debug_assert_eq!(basis.num_basis(), self.basis.num_basis());
        self.basis = basis;
    }

    /// `β_p(τ)` for 0-based covariate `p`.
    pub fn beta(&self, p: usize, tau: f64) -> Result<f64> {
        check_level(tau)?;
        Ok((0..self.theta.rows())
            .map(|m| self.basis.eval_unchecked(m + 1, tau) * self.theta.get(m, p))
            .sum())
    }

    pub fn quantile(&self, tau: f64, x: &[f64]) -> Result<f64> {
        check_level(tau)?;
        self.check_x(x)?;
        Ok(self.quantile_unchecked(tau, x))
    }

    pub(crate) fn quantile_unchecked(&self, tau: f64, x: &[f64]) -> f64 {
        let k = self.basis.segment_of(tau);
        let (a, b) = self.segment_line(k, x);
        a + b * self.basis.family().quantile(tau)
    }

    /// `Q(Φ(s)|x)`: the response whose latent normal score is `s`.
    pub fn quantile_at_score(&self, s: f64, x: &[f64]) -> f64 {
        let tau = crate::dist::normal_cdf(s);
        let k = self.basis.segment_of(tau);
        let (a, b) = self.segment_line(k, x);
        a + b * self.basis.family().quantile_at_score(s)
    }

    /// Intercept and slope of `Q = a + b q₀(τ)` on segment `k`.
    fn segment_line(&self, k: usize, x: &[f64]) -> (f64, f64) {
        let mut left = dot(self.theta.row(0), x);
        if k == 0 {
            return (left, dot(self.theta.row(1), x));
        }
        let kq = self.basis.knot_quantiles();
        left += dot(self.theta.row(1), x) * kq[0];
        for j in 1..k {
            left += dot(self.theta.row(j + 1), x) * (kq[j] - kq[j - 1]);
        }
        let b = dot(self.theta.row(k + 1), x);
        (left - b * kq[k - 1], b)
    }

    /// Segment search and affine inversion of `Q(·|x)` at `y`.
    #[inline]
    pub fn locate(&self, y: f64, x: &[f64]) -> Result<Located> {
        let (z, slope, segment) = self.standardize(y, x)?;
        Ok(Located { tau: self.basis.family().cdf(z), z, slope, segment })
    }

    /// `(z, b, k)` with `y = a_k + b z` on the segment `k` containing `y`.
    #[inline]
    pub fn standardize(&self, y: f64, x: &[f64]) -> Result<(f64, f64, usize)> {
        let kq = self.basis.knot_quantiles();
        let last = kq.len();
        let mut base = dot(self.theta.row(0), x);
        for k in 0..=last {
            let b = dot(self.theta.row(k + 1), x);
            if !(b > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "non-positive slope {b:e} on segment {k}"
                )));
            }
            let a = if k == 0 { base } else { base - b * kq[k - 1] };
            if k == last || y <= a + b * kq[k] {
                return Ok(((y - a) / b, b, k));
            }
            base = a + b * kq[k];
        }
        unreachable!("last segment always brackets")
    }

    pub fn cdf(&self, y: f64, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        self.check_y(y)?;
        Ok(self.locate(y, x)?.tau)
    }

    pub fn ln_pdf(&self, y: f64, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        self.check_y(y)?;
        let loc = self.locate(y, x)?;
        Ok(self.basis.family().ln_pdf(loc.z) - loc.slope.ln())
    }

    pub fn pdf(&self, y: f64, x: &[f64]) -> Result<f64> {
        self.ln_pdf(y, x).map(f64::exp)
    }

    /// `Q'(τ|x) = Σ_p x_p Σ_m I_m'(τ) θ_mp`.
    pub fn quantile_deriv(&self, tau: f64, x: &[f64]) -> Result<f64> {
        check_level(tau)?;
        self.check_x(x)?;
        let mut total = 0.0;
        for m in 1..=self.basis.num_basis() {
            let d = self.basis.eval_deriv(m, tau)?;
            if d != 0.0 {
                total += d * dot(self.theta.row(m - 1), x);
            }
        }
        Ok(total)
    }

    /// `P(Y > c | x) = 1 - F(c|x)`, computed on the upper tail directly.
    pub fn censored_tail_prob(&self, c: f64, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        self.check_y(c)?;
        let loc = self.locate(c, x)?;
        Ok(self.basis.family().sf(loc.z))
    }

    /// True when `Q(·|x)` is increasing on every segment.
    pub fn is_monotone(&self, x: &[f64]) -> bool {
        (1..self.theta.rows()).all(|m| dot(self.theta.row(m), x) > 0.0)
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.theta.cols() {
            return Err(Error::Dimension(format!(
                "covariate vector has length {}, model expects {}",
                x.len(),
                self.theta.cols()
            )));
        }
        Ok(())
    }

    fn check_y(&self, y: f64) -> Result<()> {
        if y.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("response must be finite, got {y}")))
        }
    }
}

/// Affine map of one raw covariate onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub center: f64,
    pub half_range: f64,
}

/// Per-covariate min–max scaling to `[-1, 1]`, fit once on training data.
///
/// Covers the non-intercept covariates only; the design vector is `(1, scaled…)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorScaling {
    pub columns: Vec<ColumnScale>,
}

impl PredictorScaling {
    pub fn fit(columns: &[Vec<f64>]) -> Result<Self> {
        let mut scales = Vec::with_capacity(columns.len());
        for (idx, col) in columns.iter().enumerate() {
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::Data(format!("covariate column {idx} is empty or non-finite")));
            }
            if hi <= lo {
                return Err(Error::Data(format!(
                    "covariate column {idx} is constant ({lo}); drop it or use the intercept"
                )));
            }
            scales.push(ColumnScale { center: 0.5 * (lo + hi), half_range: 0.5 * (hi - lo) });
        }
        Ok(Self { columns: scales })
    }

    /// Identity scaling for covariates that are already in `[-1, 1]`.
    pub fn identity(n: usize) -> Self {
        Self { columns: vec![ColumnScale { center: 0.0, half_range: 1.0 }; n] }
    }

    /// Scale raw covariates into a design vector with a leading intercept.
    /// Returns the number of values clipped to `[-1, 1]`.
    pub fn design(&self, raw: &[f64], out: &mut Vec<f64>) -> usize {
        out.clear();
        out.push(1.0);
        let mut clipped = 0;
        for (v, s) in raw.iter().zip(&self.columns) {
            let scaled = (v - s.center) / s.half_range;
            if scaled.abs() > 1.0 {
                clipped += 1;
            }
            out.push(scaled.clamp(-1.0, 1.0));
        }
        clipped
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.columns).map(|(v, s)| (v - s.center) / s.half_range).collect()
    }

    pub fn invert(&self, scaled: &[f64]) -> Vec<f64> {
        scaled.iter().zip(&self.columns).map(|(v, s)| v * s.half_range + s.center).collect()
    }

    /// Convert effects on the scaled design `(1, x̃…)` into raw-covariate effects.
    pub fn effects_to_raw(&self, scaled: &[f64]) -> Vec<f64> {
        let mut raw = scaled.to_vec();
        for (p, s) in self.columns.iter().enumerate() {
            raw[p + 1] = scaled[p + 1] / s.half_range;
            raw[0] -= s.center * raw[p + 1];
        }
        raw
    }
}

/// Linear standardization of a response to mean 0, SD 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseScaling {
    pub mean: f64,
    pub sd: f64,
}

impl ResponseScaling {
    pub const IDENTITY: Self = Self { mean: 0.0, sd: 1.0 };

    pub fn fit(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Data("need at least two observed values per response".into()));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if !(var > 0.0) {
            return Err(Error::Data("response has zero variance".into()));
        }
        Ok(Self { mean, sd: var.sqrt() })
    }

    #[inline]
    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    #[inline]
    pub fn inverse(&self, y: f64) -> f64 {
        y * self.sd + self.mean
    }
}
