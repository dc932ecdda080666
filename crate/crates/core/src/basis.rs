//! Parametric quantile basis functions.
//!
//! With `M` basis functions and `M - 2` interior knots `κ₁ < … < κ_{M-2}`
//! (plus `κ₀ = 0`, `κ_{M-1} = 1`), the non-constant bases tile `(0, 1)`:
//!
//! ```text
//! I₁(τ) = 1
//! I₂(τ) = q₀(min(τ, κ₁))
//! I_m(τ) = q₀(clamp(τ, κ_{m-2}, κ_{m-1})) - q₀(κ_{m-2})      m ≥ 3
//! ```
//!
//! so exactly one basis changes on each inter-knot segment and
//! `Σ_{m≥2} I_m(τ) = q₀(τ)`.

use serde::{Deserialize, Serialize};

use crate::dist::{self, StudentT};
use crate::error::{Error, Result};

/// Base location/scale family supplying `q₀`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaseFamily {
    Gaussian,
    StudentT(StudentT),
}

impl BaseFamily {
    pub fn student_t(shape: f64) -> Result<Self> {
        StudentT::new(shape)
            .map(BaseFamily::StudentT)
            .ok_or_else(|| Error::Domain(format!("student-t shape must be positive, got {shape}")))
    }

    pub fn shape(&self) -> Option<f64> {
        match self {
            BaseFamily::Gaussian => None,
            BaseFamily::StudentT(t) => Some(t.shape()),
        }
    }

    /// `q₀(τ)`, no domain check.
    #[inline]
    pub fn quantile(&self, tau: f64) -> f64 {
        match self {
            BaseFamily::Gaussian => dist::normal_quantile(tau),
            BaseFamily::StudentT(t) => t.quantile(tau),
        }
    }

    #[inline]
    pub fn cdf(&self, z: f64) -> f64 {
        match self {
            BaseFamily::Gaussian => dist::normal_cdf(z),
            BaseFamily::StudentT(t) => t.cdf(z),
        }
    }

    #[inline]
    pub fn sf(&self, z: f64) -> f64 {
        match self {
            BaseFamily::Gaussian => dist::normal_sf(z),
            BaseFamily::StudentT(t) => t.sf(z),
        }
    }

    #[inline]
    pub fn ln_pdf(&self, z: f64) -> f64 {
        match self {
            BaseFamily::Gaussian => dist::normal_ln_pdf(z),
            BaseFamily::StudentT(t) => t.ln_pdf(z),
        }
    }

    /// `q₀(Φ(s))`, the inverse of [`BaseFamily::normal_score`].
    #[inline]
    pub fn quantile_at_score(&self, s: f64) -> f64 {
        match self {
            BaseFamily::Gaussian => s,
            BaseFamily::StudentT(t) => t.quantile_at_score(s),
        }
    }

    /// `Φ⁻¹(F₀(z))`. Exact identity for the Gaussian family; tail-stable otherwise.
    #[inline]
    pub fn normal_score(&self, z: f64) -> f64 {
        match self {
            BaseFamily::Gaussian => z,
            BaseFamily::StudentT(t) => {
                let tau_floor = dist::PROB_FLOOR;
                if z > 0.0 {
                    dist::normal_quantile_upper(t.sf(z).max(tau_floor))
                } else {
                    dist::normal_quantile(t.cdf(z).max(tau_floor))
                }
            }
        }
    }
}

/// Serializable description of a base family. Deserializes from the tagged
/// form (`{"kind": "student_t", "shape": 5}`) or a bare name, where
/// `"student_t"` starts the shape at [`DEFAULT_T_SHAPE`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(try_from = "FamilyRepr")]
pub enum FamilyConfig {
    Gaussian,
    StudentT { shape: f64 },
}

pub const DEFAULT_T_SHAPE: f64 = 10.0;

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TaggedFamily {
    Gaussian,
    StudentT {
        #[serde(default = "default_t_shape")]
        shape: f64,
    },
}

fn default_t_shape() -> f64 {
    DEFAULT_T_SHAPE
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FamilyRepr {
    Name(String),
    Tagged(TaggedFamily),
}

impl TryFrom<FamilyRepr> for FamilyConfig {
    type Error = String;

    fn try_from(r: FamilyRepr) -> std::result::Result<Self, String> {
        match r {
            FamilyRepr::Tagged(TaggedFamily::Gaussian) => Ok(FamilyConfig::Gaussian),
            FamilyRepr::Tagged(TaggedFamily::StudentT { shape }) => Ok(FamilyConfig::StudentT { shape }),
            FamilyRepr::Name(n) => match n.as_str() {
                "gaussian" => Ok(FamilyConfig::Gaussian),
                "student_t" | "t" => Ok(FamilyConfig::StudentT { shape: DEFAULT_T_SHAPE }),
                other => Err(format!("unknown base family `{other}`")),
            },
        }
    }
}

impl FamilyConfig {
    pub fn build(&self) -> Result<BaseFamily> {
        match *self {
            FamilyConfig::Gaussian => Ok(BaseFamily::Gaussian),
            FamilyConfig::StudentT { shape } => BaseFamily::student_t(shape),
        }
    }
}

impl From<BaseFamily> for FamilyConfig {
    fn from(f: BaseFamily) -> Self {
        match f {
            BaseFamily::Gaussian => FamilyConfig::Gaussian,
            BaseFamily::StudentT(t) => FamilyConfig::StudentT { shape: t.shape() },
        }
    }
}

/// Basis definition: family, number of functions and interior knots, with
/// `q₀` cached at every segment boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSpec {
    family: BaseFamily,
    knots: Vec<f64>,
    /// `q₀` at the interior knots.
    knot_q: Vec<f64>,
}

impl BasisSpec {
    pub fn new(family: BaseFamily, m: usize, knots: Vec<f64>) -> Result<Self> {
        if m < 2 {
            return Err(Error::Domain(format!("need at least 2 basis functions, got {m}")));
        }
        if knots.len() != m - 2 {
            return Err(Error::Domain(format!(
                "{m} basis functions need {} interior knots, got {}",
                m - 2,
                knots.len()
            )));
        }
        if knots.iter().any(|&k| !(k > 0.0 && k < 1.0)) {
            return Err(Error::Domain("knots must lie in (0, 1)".into()));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("knots must be strictly increasing".into()));
        }
        let knot_q = knots.iter().map(|&k| family.quantile(k)).collect();
        Ok(Self { family, knots, knot_q })
    }

    /// `m` basis functions with equally spaced interior knots.
    pub fn equally_spaced(family: BaseFamily, m: usize) -> Result<Self> {
        let segments = m.saturating_sub(1).max(1);
        let knots = (1..m.saturating_sub(1)).map(|k| k as f64 / segments as f64).collect();
        Self::new(family, m, knots)
    }

    /// Same knots, new base family (e.g. an updated Student-t shape).
    pub fn with_family(&self, family: BaseFamily) -> Self {
        let knot_q = self.knots.iter().map(|&k| family.quantile(k)).collect();
        Self { family, knots: self.knots.clone(), knot_q }
    }

    pub fn family(&self) -> &BaseFamily {
        &self.family
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() + 2
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of inter-knot segments, `M - 1`.
    pub fn num_segments(&self) -> usize {
        self.knots.len() + 1
    }

    /// Lower and upper quantile level of segment `k` (0-based).
    pub fn segment_bounds(&self, k: usize) -> (f64, f64) {
        let lo = if k == 0 { 0.0 } else { self.knots[k - 1] };
        let hi = if k == self.knots.len() { 1.0 } else { self.knots[k] };
        (lo, hi)
    }

    /// `q₀` at the lower/upper bound of segment `k`; infinite at 0 and 1.
    #[inline]
    pub fn segment_q(&self, k: usize) -> (f64, f64) {
        let lo = if k == 0 { f64::NEG_INFINITY } else { self.knot_q[k - 1] };
        let hi = if k == self.knot_q.len() { f64::INFINITY } else { self.knot_q[k] };
        (lo, hi)
    }

    /// Cached `q₀` values at the interior knots.
    pub fn knot_quantiles(&self) -> &[f64] {
        &self.knot_q
    }

    pub fn base_quantile(&self, tau: f64) -> Result<f64> {
        check_level(tau)?;
        Ok(self.family.quantile(tau))
    }

    /// `I_m(τ)` for 1-based `m`.
    pub fn eval(&self, m: usize, tau: f64) -> Result<f64> {
        self.check_index(m)?;
        check_level(tau)?;
        Ok(self.eval_unchecked(m, tau))
    }

    pub(crate) fn eval_unchecked(&self, m: usize, tau: f64) -> f64 {
        if m == 1 {
            return 1.0;
        }
        let k = m - 2;
        let (lo, hi) = self.segment_bounds(k);
        let (q_lo, q_hi) = self.segment_q(k);
        let offset = if k == 0 { 0.0 } else { q_lo };
        if tau <= lo {
            0.0
        } else if tau <= hi {
            self.family.quantile(tau) - offset
        } else {
            q_hi - offset
        }
    }

    /// All `M` basis values at `τ`.
    pub fn eval_all(&self, tau: f64) -> Result<Vec<f64>> {
        check_level(tau)?;
        Ok((1..=self.num_basis()).map(|m| self.eval_unchecked(m, tau)).collect())
    }

    /// `dI_m/dτ`; at a knot the right-continuous branch is taken.
    pub fn eval_deriv(&self, m: usize, tau: f64) -> Result<f64> {
        self.check_index(m)?;
        check_level(tau)?;
        if m == 1 {
            return Ok(0.0);
        }
        let (lo, hi) = self.segment_bounds(m - 2);
        if tau >= lo && (tau < hi || hi == 1.0) {
            Ok(self.base_quantile_deriv(tau))
        } else {
            Ok(0.0)
        }
    }

    /// `q₀'(τ) = 1 / f₀(q₀(τ))`.
    pub fn base_quantile_deriv(&self, tau: f64) -> f64 {
        let z = self.family.quantile(tau);
        (-self.family.ln_pdf(z)).exp()
    }

    /// Index of the segment containing `τ`; ties go to the lower segment.
    pub fn segment_of(&self, tau: f64) -> usize {
        self.knots.partition_point(|&k| k < tau)
    }

    fn check_index(&self, m: usize) -> Result<()> {
        if m == 0 || m > self.num_basis() {
            return Err(Error::Domain(format!(
                "basis index {m} outside 1..={}",
                self.num_basis()
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_level(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("quantile level must be in (0, 1), got {tau}")))
    }
}

/// Serializable basis description used in configs and manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub family: FamilyConfig,
    pub num_basis: usize,
    /// Interior knots; equally spaced when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<f64>>,
}

impl BasisConfig {
    pub fn build(&self) -> Result<BasisSpec> {
        let family = self.family.build()?;
        match &self.knots {
            Some(k) => BasisSpec::new(family, self.num_basis, k.clone()),
            None => BasisSpec::equally_spaced(family, self.num_basis),
        }
    }
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { family: FamilyConfig::Gaussian, num_basis: 2, knots: None }
    }
}

impl From<&BasisSpec> for BasisConfig {
    fn from(b: &BasisSpec) -> Self {
        Self {
            family: FamilyConfig::from(b.family),
            num_basis: b.num_basis(),
            knots: Some(b.knots.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quartiles() -> BasisSpec {
        BasisSpec::new(BaseFamily::Gaussian, 5, vec![0.25, 0.5, 0.75]).unwrap()
    }

    #[test]
    fn base_quantile_examples() {
        let g = BasisSpec::equally_spaced(BaseFamily::Gaussian, 2).unwrap();
        assert_eq!(g.base_quantile(0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(g.base_quantile(0.975).unwrap(), 1.959964, epsilon = 1e-6);
        let t = BasisSpec::equally_spaced(BaseFamily::student_t(5.0).unwrap(), 2).unwrap();
        assert_abs_diff_eq!(t.base_quantile(0.9).unwrap(), 1.475884, epsilon = 1e-6);
        assert_eq!(t.base_quantile(0.5).unwrap(), 0.0);
        assert!(g.base_quantile(0.0).is_err());
        assert!(g.base_quantile(1.0).is_err());
        assert!(g.base_quantile(f64::NAN).is_err());
    }

    #[test]
    fn eval_examples() {
        let b = quartiles();
        assert_eq!(b.eval(1, 0.37).unwrap(), 1.0);
        assert_abs_diff_eq!(b.eval(2, 0.5).unwrap(), -0.674490, epsilon = 1e-6);
        assert_eq!(b.eval(4, 0.25).unwrap(), 0.0);
        assert!(b.eval(0, 0.5).is_err());
        assert!(b.eval(6, 0.5).is_err());
    }

    #[test]
    fn deriv_examples() {
        let b = quartiles();
        assert_eq!(b.eval_deriv(1, 0.3).unwrap(), 0.0);
        assert_eq!(b.eval_deriv(3, 0.9).unwrap(), 0.0);
        let g2 = BasisSpec::equally_spaced(BaseFamily::Gaussian, 2).unwrap();
        assert_abs_diff_eq!(
            g2.eval_deriv(2, 0.5).unwrap(),
            (2.0 * std::f64::consts::PI).sqrt(),
            epsilon = 1e-6
        );
        // right-continuous at a knot: τ = 0.5 belongs to basis 4's interval.
        assert!(b.eval_deriv(4, 0.5).unwrap() > 0.0);
        assert_eq!(b.eval_deriv(3, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn family_config_accepts_names_and_tags() {
        let parse = |s: &str| serde_json::from_str::<FamilyConfig>(s);
        assert_eq!(parse(r#""gaussian""#).unwrap(), FamilyConfig::Gaussian);
        assert_eq!(parse(r#""student_t""#).unwrap(), FamilyConfig::StudentT { shape: DEFAULT_T_SHAPE });
        assert_eq!(parse(r#"{"kind":"student_t","shape":4}"#).unwrap(), FamilyConfig::StudentT { shape: 4.0 });
        assert!(parse(r#""cauchy""#).is_err());
        let c = FamilyConfig::StudentT { shape: 3.5 };
        assert_eq!(parse(&serde_json::to_string(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(BasisSpec::new(BaseFamily::Gaussian, 1, vec![]).is_err());
        assert!(BasisSpec::new(BaseFamily::Gaussian, 4, vec![0.5, 0.3]).is_err());
        assert!(BasisSpec::new(BaseFamily::Gaussian, 3, vec![1.0]).is_err());
        assert!(BasisSpec::new(BaseFamily::Gaussian, 3, vec![0.2, 0.4]).is_err());
    }

    #[test]
    fn equally_spaced_matches_quartile_grid() {
        let b = BasisSpec::equally_spaced(BaseFamily::Gaussian, 5).unwrap();
        assert_eq!(b.knots(), &[0.25, 0.5, 0.75]);
        assert!(BasisSpec::equally_spaced(BaseFamily::Gaussian, 2).unwrap().knots().is_empty());
    }

    #[test]
    fn m2_is_base_quantile() {
        let b = BasisSpec::equally_spaced(BaseFamily::student_t(3.0).unwrap(), 2).unwrap();
        for i in 1..100 {
            let tau = i as f64 / 100.0;
            assert_eq!(b.eval(2, tau).unwrap(), b.base_quantile(tau).unwrap());
        }
    }

    #[test]
    fn telescoping_on_grid() {
        for family in [BaseFamily::Gaussian, BaseFamily::student_t(4.0).unwrap()] {
            let b = BasisSpec::new(family, 5, vec![0.2, 0.45, 0.8]).unwrap();
            for i in 1..1000 {
                let tau = i as f64 / 1000.0;
                let s: f64 = (2..=5).map(|m| b.eval(m, tau).unwrap()).sum();
                assert!((s - family.quantile(tau)).abs() <= 1e-12, "tau={tau}");
            }
        }
    }

    #[test]
    fn finite_difference_matches_derivative() {
        let b = BasisSpec::new(BaseFamily::student_t(6.0).unwrap(), 4, vec![0.3, 0.6]).unwrap();
        let h = 1e-7;
        for i in 1..200 {
            let tau = i as f64 / 200.0 + 0.0011;
            if tau >= 1.0 || b.knots().iter().any(|k| (k - tau).abs() < 1e-4) {
                continue;
            }
            for m in 1..=4 {
                let fd = (b.eval(m, tau + h).unwrap() - b.eval(m, tau - h).unwrap()) / (2.0 * h);
                let d = b.eval_deriv(m, tau).unwrap();
                assert!((fd - d).abs() <= 1e-6 * d.abs().max(1.0), "m={m} tau={tau}");
            }
        }
    }

    proptest! {
        #[test]
        fn basis_pieces_are_monotone(a in 0.001f64..0.999, b in 0.001f64..0.999, m in 1usize..=5) {
            let spec = quartiles();
            let (t1, t2) = if a < b { (a, b) } else { (b, a) };
            let (v1, v2) = (spec.eval(m, t1).unwrap(), spec.eval(m, t2).unwrap());
            prop_assert!(v1 <= v2);
            if m >= 2 && t1 < t2 {
                let (lo, hi) = spec.segment_bounds(m - 2);
                let overlaps = t1 < hi && t2 > lo;
                prop_assert_eq!(v1 < v2, overlaps);
            }
        }
    }
}
