//! Forward representation of the fractional fourth-order problem in the
//! eigenbasis: v_n(t) = E_{α,1}(-λ_n² t^α) g_n + Ψ_n(t).

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::DerivedConstants;
use crate::error::{Error, Result};
use crate::mittag_leffler::{ml_kernel_l1, relaxation, DEFAULT_REL_TOL};
use crate::spectral::{ModeSource, SpectralDomain, SpectralField, TimeSource};

/// Decay rate of one mode of the biharmonic operator, i.e. λ_n² for the
/// Laplacian eigenvalue λ_n. Kernel calls only accept this type.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DecayRate(f64);

impl DecayRate {
    /// From a Laplacian eigenvalue λ; stores λ².
    pub fn of_eigenvalue(lambda: f64) -> Result<Self> {
        Self::from_squared(lambda * lambda)
    }

    /// From an already squared value.
    pub fn from_squared(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::param(format!(
                "decay rate must be positive and finite, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// All decay rates of a domain, mode order.
pub fn decay_rates(domain: &SpectralDomain) -> Vec<DecayRate> {
    domain
        .eigenvalues()
        .iter()
        .map(|&l| DecayRate(l * l))
        .collect()
}

/// Ψ(t) = ∫_0^t (t-s)^{α-1} E_{α,α}(-λ²(t-s)^α) f_n(s) ds.
///
/// Piecewise-constant data are integrated exactly with the kernel
/// antiderivative F(u) = (1 - E_{α,1}(-λ²u^α))/λ².
pub fn psi(alpha: f64, rate: DecayRate, f_n: ModeSource<'_>, t: f64, tau: f64) -> Result<f64> {
    if !(t >= 0.0 && t <= tau) {
        return Err(Error::domain(format!("time {t} outside [0, {tau}]")));
    }
    let lam = rate.value();
    let antiderivative = |u: f64| ml_kernel_l1(alpha, lam, u, DEFAULT_REL_TOL);
    match f_n {
        ModeSource::Zero => Ok(0.0),
        ModeSource::Constant(c) => {
            if c == 0.0 || t == 0.0 {
                return Ok(0.0);
            }
            Ok(c * antiderivative(t)?)
        }
        ModeSource::Sampled(series) => {
            let breaks = series.breaks();
            let mut total = crate::summation::NeumaierSum::new();
            for (j, &v) in series.values().iter().enumerate() {
                let a = breaks[j].max(0.0);
                let b = breaks[j + 1].min(t);
                if b <= a || v == 0.0 {
                    continue;
                }
                total.add(v * (antiderivative(t - a)? - antiderivative(t - b)?));
            }
            Ok(total.total())
        }
    }
}

/// Lazily evaluated forward solution.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    domain: Arc<SpectralDomain>,
    alpha: f64,
    tau: f64,
    g0: SpectralField,
    source: TimeSource,
}

pub fn forward_solve(
    domain: Arc<SpectralDomain>,
    alpha: f64,
    g0: SpectralField,
    source: TimeSource,
    tau: f64,
) -> Result<ForwardSolution> {
    check_alpha(alpha)?;
    domain.check_len(g0.len(), "initial value")?;
    if !source.is_zero() {
        domain.check_len(source.n_modes(), "source")?;
    }
    if source.tau() != tau {
        return Err(Error::Configuration(format!(
            "source horizon {} differs from tau = {tau}",
            source.tau()
        )));
    }
    Ok(ForwardSolution {
        domain,
        alpha,
        tau,
        g0,
        source,
    })
}

impl ForwardSolution {
    pub fn domain(&self) -> &Arc<SpectralDomain> {
        &self.domain
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn initial_value(&self) -> &SpectralField {
        &self.g0
    }

    pub fn source(&self) -> &TimeSource {
        &self.source
    }

    /// Coefficient of mode n (1-based) at time t.
    pub fn mode_eval(&self, n: usize, t: f64) -> Result<f64> {
        if n == 0 || n > self.domain.n_modes() {
            return Err(Error::param(format!(
                "mode {n} outside 1..={}",
                self.domain.n_modes()
            )));
        }
        if !(t >= 0.0 && t <= self.tau) {
            return Err(Error::domain(format!("time {t} outside [0, {}]", self.tau)));
        }
        let rate = DecayRate::of_eigenvalue(self.domain.eigenvalue(n))?;
        let g = self.g0.coeffs()[n - 1];
        let decay = if g == 0.0 {
            0.0
        } else {
            relaxation(self.alpha, rate.value(), t)? * g
        };
        Ok(decay + psi(self.alpha, rate, self.source.mode(n), t, self.tau)?)
    }

    /// All coefficients at time t.
    pub fn at(&self, t: f64) -> Result<SpectralField> {
        let coeffs = (1..=self.domain.n_modes())
            .into_par_iter()
            .map(|n| self.mode_eval(n, t))
            .collect::<Result<Vec<f64>>>()?;
        SpectralField::new(coeffs)
    }

    /// Final data h = v(τ).
    pub fn final_value(&self) -> Result<SpectralField> {
        self.at(self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Noisy,
}

/// Υ_n = h_n − Ψ_n(τ), the right-hand side of T g = Υ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveData {
    pub upsilon: SpectralField,
    pub provenance: Provenance,
}

impl EffectiveData {
    pub fn new(upsilon: SpectralField, provenance: Provenance) -> Self {
        Self {
            upsilon,
            provenance,
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        self.upsilon.coeffs()
    }

    pub fn norm(&self) -> f64 {
        self.upsilon.norm()
    }
}

pub fn effective_data(
    domain: &SpectralDomain,
    h: &SpectralField,
    source: &TimeSource,
    alpha: f64,
    tau: f64,
    provenance: Provenance,
) -> Result<EffectiveData> {
    check_alpha(alpha)?;
    domain.check_len(h.len(), "final data")?;
    if source.is_zero() {
        return Ok(EffectiveData::new(h.clone(), provenance));
    }
    domain.check_len(source.n_modes(), "source")?;
    if source.tau() != tau {
        return Err(Error::Configuration(format!(
            "source horizon {} differs from tau = {tau}",
            source.tau()
        )));
    }
    let rates = decay_rates(domain);
    let coeffs = rates
        .par_iter()
        .enumerate()
        .map(|(i, &rate)| Ok(h.coeffs()[i] - psi(alpha, rate, source.mode(i + 1), tau, tau)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(EffectiveData::new(SpectralField::new(coeffs)?, provenance))
}

/// Both sides of the stability estimate at an interior time t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityTerms {
    /// ‖ũ(t) − u(t)‖²
    pub lhs: f64,
    /// 4C²/t^{2α}(‖h − h̃‖² + θ‖f − f̃‖²) + 2θ‖f − f̃‖²
    pub rhs: f64,
}

pub fn stability_terms(
    u: &ForwardSolution,
    u_tilde: &ForwardSolution,
    t: f64,
    constants: &DerivedConstants,
) -> Result<StabilityTerms> {
    if u.domain.spec() != u_tilde.domain.spec() || u.alpha != u_tilde.alpha || u.tau != u_tilde.tau
    {
        return Err(Error::Configuration(
            "solutions live on different problems".into(),
        ));
    }
    if !(t > 0.0 && t < u.tau) {
        return Err(Error::domain(format!(
            "stability check needs 0 < t < {}, got {t}",
            u.tau
        )));
    }
    let lhs = u.at(t)?.distance(&u_tilde.at(t)?)?.powi(2);
    let dh = u.final_value()?.distance(&u_tilde.final_value()?)?;
    let df = u.source.sup_distance(&u_tilde.source)?;
    let theta = u.domain.theta();
    let c = constants.stability_c;
    let rhs =
        4.0 * c * c / t.powf(2.0 * u.alpha) * (dh * dh + theta * df * df) + 2.0 * theta * df * df;
    Ok(StabilityTerms { lhs, rhs })
}

pub fn stability_bound_check(
    u: &ForwardSolution,
    u_tilde: &ForwardSolution,
    t: f64,
    constants: &DerivedConstants,
) -> Result<bool> {
    let terms = stability_terms(u, u_tilde, t, constants)?;
    Ok(terms.lhs <= terms.rhs)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!(
            "fractional order must lie in (0, 1], got {alpha}"
        )))
    }
}
