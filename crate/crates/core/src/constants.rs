//! Concrete values for the constants of the stability and rate estimates,
//! built from calibrated Mittag-Leffler bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mittag_leffler::{calibrated_constants, MLBoundConstants};
use crate::special::gamma;
use crate::spectral::SpectralDomain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub alpha: f64,
    pub tau: f64,
    pub lambda1: f64,
    /// lower Mittag-Leffler constant C₁
    pub c1: f64,
    /// upper Mittag-Leffler constant C₂
    pub c2: f64,
    /// (1 + λ₁²τ^α)Γ(1−α)/(C₁λ₁²), so that κ_n ≥ 1/(C₃λ_n²)
    pub c3: f64,
    pub c4: f64,
    /// noise amplification of truncation, √2·C₃
    pub c18: f64,
    /// C₂/(Γ(1−α)τ^α), so that κ_n ≤ C₂₀/λ_n²
    pub c20: f64,
    /// C₂(1 + λ₁²τ^α)/(C₁λ₁²), the forward stability constant
    pub stability_c: f64,
}

impl DerivedConstants {
    pub fn new(bounds: &MLBoundConstants, lambda1: f64, tau: f64) -> Result<Self> {
        let alpha = bounds.alpha;
        if !(lambda1 > 0.0 && tau > 0.0) {
            return Err(Error::param("need lambda1 > 0 and tau > 0"));
        }
        let g = gamma(1.0 - alpha);
        let l2 = lambda1 * lambda1;
        let growth = 1.0 + l2 * tau.powf(alpha);
        let c3 = growth * g / (bounds.c1_lower * l2);
        Ok(Self {
            alpha,
            tau,
            lambda1,
            c1: bounds.c1_lower,
            c2: bounds.c1_upper,
            c3,
            c4: 1.0 / c3,
            c18: std::f64::consts::SQRT_2 * c3,
            c20: bounds.c1_upper / (g * tau.powf(alpha)),
            stability_c: bounds.c1_upper * growth / (bounds.c1_lower * l2),
        })
    }

    /// Calibrates C₁, C₂ on the default grid for this domain and horizon.
    pub fn calibrate(domain: &SpectralDomain, alpha: f64, tau: f64) -> Result<Self> {
        Self::new(&calibrated_constants(alpha)?, domain.lambda1(), tau)
    }

    /// Stability constant of the modified method (q ≥ 1):
    /// ‖u^δ_β − u_β‖ ≤ C₅ δ / β^{2/(q+2)}.
    pub fn c5(&self, q: u32) -> Result<f64> {
        if q == 0 {
            return Err(Error::param("C5 is defined for q >= 1"));
        }
        let q = q as f64;
        let c = self.c4;
        Ok(std::f64::consts::SQRT_2 * (2.0 * c / q).powf(2.0 / (q + 2.0)) * q / (c * (q + 2.0)))
    }

    /// Exact-data bias constant for p < q + 2:
    /// ‖u_β(0) − g‖ ≤ C₆ ρ β^{p/(q+2)}.
    pub fn c6(&self, p: f64, q: u32) -> Result<f64> {
        let qf = q as f64;
        if !(p > 0.0 && p < qf + 2.0) {
            return Err(Error::param(format!(
                "C6 needs 0 < p < q + 2, got p = {p}, q = {q}"
            )));
        }
        let c = self.c4;
        let m = qf + 2.0 - p;
        Ok((c * m / p).powf(m / (qf + 2.0)) * p / (c * (qf + 2.0)))
    }

    /// Exact-data bias constant for p ≥ q + 2: ‖u_β(0) − g‖ ≤ C₇ ρ β.
    pub fn c7(&self, p: f64, q: u32) -> Result<f64> {
        if !(p >= q as f64 + 2.0) {
            return Err(Error::param(format!(
                "C7 needs p >= q + 2, got p = {p}, q = {q}"
            )));
        }
        Ok(1.0 / (self.c4 * self.lambda1.powf(p - q as f64 - 2.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::build_domain;

    #[test]
    fn constants_from_single_point_calibration() {
        // grid {0}: C₁ = C₂ = Γ(1/2)
        let b = crate::mittag_leffler::estimate_bound_constants(0.5, &[0.0]).unwrap();
        let c = DerivedConstants::new(&b, 1.0, 1.0).unwrap();
        assert!((c.c3 - 2.0).abs() < 1e-14);
        assert!((c.c4 - 0.5).abs() < 1e-14);
        assert!((c.c20 - 1.0).abs() < 1e-14);
        assert!((c.stability_c - 2.0).abs() < 1e-14);
        assert!((c.c18 - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-14);
    }

    #[test]
    fn kappa_bounds_hold_on_default_domain() {
        let d = build_domain(1, &[std::f64::consts::PI], 256).unwrap();
        let c = DerivedConstants::calibrate(&d, 0.5, 1.0).unwrap();
        for &lam in d.eigenvalues() {
            let k = crate::mittag_leffler::relaxation(0.5, lam * lam, 1.0).unwrap();
            assert!(k * c.c3 * lam * lam >= 1.0);
            assert!(k * lam * lam <= c.c20);
        }
    }

    #[test]
    fn c6_is_the_supremum_of_the_bias_factor() {
        let b = crate::mittag_leffler::estimate_bound_constants(0.5, &[0.0, -1.0, -1e3]).unwrap();
        let c = DerivedConstants::new(&b, 1.0, 1.0).unwrap();
        let (p, q, beta) = (1.5, 2u32, 1e-3f64);
        let bound = c.c6(p, q).unwrap() * beta.powf(p / (q as f64 + 2.0));
        let mut best = 0.0f64;
        for i in 0..20000 {
            let s = 1.0 + i as f64 * 0.01;
            let v = beta * s.powf(q as f64 + 2.0 - p) / (c.c4 + beta * s.powf(q as f64 + 2.0));
            best = best.max(v);
        }
        assert!(best <= bound * (1.0 + 1e-12));
        assert!(best >= bound * 0.999);
    }
}
