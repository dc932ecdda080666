//! Scalar distribution primitives for the standard normal and Student-t
//! (location 0, scale 1) families.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use statrs::function::beta::{inv_beta_reg, ln_beta};
use libm::erfc;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::ln_gamma;

/// `ln(2π) / 2`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Smallest probability handed to a quantile function from a latent draw.
pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(z)`, accurate for large positive `z`.
#[inline]
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z * FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_ln_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    normal_ln_pdf(z).exp()
}

/// Standard normal quantile `Φ⁻¹(p)`; `±∞` at the endpoints.
#[inline]
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// `Φ⁻¹` of an upper-tail probability, i.e. `Φ⁻¹(1 - q)` without forming `1 - q`.
#[inline]
pub fn normal_quantile_upper(q: f64) -> f64 {
    -normal_quantile(q)
}

/// Regularized incomplete beta `I_x(a, b)` given `ln B(a, b)`.
fn beta_reg(a: f64, b: f64, x: f64, ln_beta_ab: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (a * x.ln() + b * (-x).ln_1p() - ln_beta_ab).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_fraction(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Student-t with `shape` degrees of freedom, location 0 and scale 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentT {
    shape: f64,
    ln_norm: f64,
    /// `ln B(ν/2, 1/2)`.
    ln_beta: f64,
}

impl StudentT {
    pub fn new(shape: f64) -> Option<Self> {
        if !(shape.is_finite() && shape > 0.0) {
            return None;
        }
        let ln_norm =
            ln_gamma(0.5 * (shape + 1.0)) - ln_gamma(0.5 * shape) - 0.5 * (shape * PI).ln();
        Some(Self { shape, ln_norm, ln_beta: ln_beta(0.5 * shape, 0.5) })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    #[inline]
    pub fn ln_pdf(&self, z: f64) -> f64 {
        self.ln_norm - 0.5 * (self.shape + 1.0) * (z * z / self.shape).ln_1p()
    }

    /// `P(T > |z|)`, computed on whichever incomplete-beta branch is stable.
    #[inline]
    fn tail(&self, z: f64) -> f64 {
        let nu = self.shape;
        let z2 = z * z;
        if z2 < nu {
            // 0.5 - 0.5 I_{z²/(ν+z²)}(1/2, ν/2)
            0.5 - 0.5 * beta_reg(0.5, 0.5 * nu, z2 / (nu + z2), self.ln_beta)
        } else {
            0.5 * beta_reg(0.5 * nu, 0.5, nu / (nu + z2), self.ln_beta)
        }
    }

    #[inline]
    pub fn cdf(&self, z: f64) -> f64 {
        if z.is_infinite() {
            return if z > 0.0 { 1.0 } else { 0.0 };
        }
        let t = self.tail(z);
        if z > 0.0 {
            1.0 - t
        } else {
            t
        }
    }

    #[inline]
    pub fn sf(&self, z: f64) -> f64 {
        self.cdf(-z)
    }

    /// Quantile at `Φ(s)`, without rounding `Φ(s)` towards 1 in the upper tail.
    pub fn quantile_at_score(&self, s: f64) -> f64 {
        if s > 0.0 {
            -self.quantile(normal_sf(s))
        } else {
            self.quantile(normal_cdf(s))
        }
    }

    /// Quantile via the inverse incomplete beta, polished by Newton steps on the CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        if p == 0.5 {
            return 0.0;
        }
        let nu = self.shape;
        let lower = p.min(1.0 - p);
        let x = inv_beta_reg(0.5 * nu, 0.5, 2.0 * lower);
        let mut z = -(nu * (1.0 - x) / x).sqrt();
        if !(z.is_finite() && z < 0.0) {
            // I_x(a, 1/2) ≈ x^a / (a B(a, 1/2)) as x → 0
            let a = 0.5 * nu;
            let ln_x = (2.0 * lower * a).ln() + ln_beta(a, 0.5);
            z = -(0.5 * (nu.ln() - ln_x / a)).exp();
        }
        if lower < 0.1 {
            // Newton on ln F(-e^u) = ln p; nearly linear for power tails.
            let target = lower.ln();
            let mut u = (-z).ln();
            for _ in 0..60 {
                let zz = -u.exp();
                let ln_f = self.cdf(zz).ln();
                let slope = -(self.ln_pdf(zz) + u - ln_f).exp();
                let step = (ln_f - target) / slope;
                if !step.is_finite() {
                    break;
                }
                u -= step;
                if step.abs() <= 1e-15 {
                    break;
                }
            }
            z = -u.exp();
        } else {
            for _ in 0..8 {
                let f = self.cdf(z);
                let dens = self.ln_pdf(z).exp();
                let step = (f - lower) / dens;
                if !step.is_finite() {
                    break;
                }
                z = (z - step).min(-f64::MIN_POSITIVE);
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
        }
        if p > 0.5 {
            -z
        } else {
            z
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_reference_values() {
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959_963_984_540_054, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.25), -0.674_489_750_196_081_7, epsilon = 1e-12);
        assert_eq!(normal_quantile(0.5), 0.0);
        assert_abs_diff_eq!(normal_cdf(1.959_963_984_540_054), 0.975, epsilon = 1e-14);
        assert_abs_diff_eq!(normal_pdf(0.0), 0.398_942_280_401_432_7, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_sf(8.0), 6.220_960_574_271_785e-16, epsilon = 1e-25);
    }

    #[test]
    fn student_t_matches_root_found_oracle() {
        // Oracle: bisection to machine precision on a Simpson-quadrature CDF,
        // independent of the incomplete-beta route.
        fn simpson_cdf(nu: f64, z: f64) -> f64 {
            let t = StudentT::new(nu).unwrap();
            let n = 20_000;
            let h = z / n as f64;
            let mut s = t.ln_pdf(0.0).exp() + t.ln_pdf(z).exp();
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * t.ln_pdf(i as f64 * h).exp();
            }
            0.5 + s * h / 3.0
        }
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if simpson_cdf(5.0, mid) < 0.9 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert_abs_diff_eq!(oracle, 1.475_884, epsilon = 1e-6);
        let t5 = StudentT::new(5.0).unwrap();
        assert_abs_diff_eq!(t5.quantile(0.9), oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(t5.cdf(t5.quantile(0.9)), 0.9, epsilon = 1e-14);
    }

    #[test]
    fn student_t_roundtrip_across_shapes() {
        for &nu in &[0.7, 1.0, 2.5, 5.0, 30.0, 400.0] {
            let t = StudentT::new(nu).unwrap();
            for &p in &[1e-9, 1e-4, 0.01, 0.2, 0.5, 0.77, 0.99, 1.0 - 1e-7] {
                let z = t.quantile(p);
                let back = t.cdf(z);
                assert!((back - p).abs() <= 1e-12 * p.max(1e-3), "nu={nu} p={p} back={back}");
            }
            assert_abs_diff_eq!(t.cdf(1.3) + t.sf(1.3), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn incomplete_beta_agrees_with_statrs() {
        for &nu in &[0.7, 1.0, 5.0, 30.0, 200.0] {
            let t = StudentT::new(nu).unwrap();
            for k in 1..200 {
                let x = k as f64 / 200.0;
                for (a, b) in [(0.5, 0.5 * nu), (0.5 * nu, 0.5)] {
                    let want = statrs::function::beta::beta_reg(a, b, x);
                    assert!((beta_reg(a, b, x, t.ln_beta) - want).abs() < 1e-13, "nu {nu} x {x}");
                }
            }
        }
    }

    #[test]
    fn cauchy_special_case() {
        let t = StudentT::new(1.0).unwrap();
        let z: f64 = 2.3;
        assert_abs_diff_eq!(t.cdf(z), 0.5 + z.atan() / PI, epsilon = 1e-14);
        assert_abs_diff_eq!(t.ln_pdf(z).exp(), 1.0 / (PI * (1.0 + z * z)), epsilon = 1e-15);
    }
}
