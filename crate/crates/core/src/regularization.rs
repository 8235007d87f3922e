//! Quasi-boundary value (q = 0), modified quasi-boundary value (q ≥ 1) and
//! Fourier truncation reconstructions, with apriori and discrepancy-based
//! parameter choices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constants::DerivedConstants;
use crate::error::{Error, Result};
use crate::forward::EffectiveData;
use crate::inverse::{apply_t, BackwardOperator};
use crate::spectral::{SpectralDomain, SpectralField};
use crate::summation::{l2_norm, NeumaierSum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QbvmConfig {
    pub q: u32,
    pub beta: f64,
}

impl QbvmConfig {
    pub fn new(q: u32, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self { q, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtmConfig {
    pub n_cut: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyConfig {
    pub xi: f64,
    pub mu: f64,
    pub nu: f64,
    pub root_tol: f64,
}

impl Default for DiscrepancyConfig {
    fn default() -> Self {
        Self {
            xi: 1.5,
            mu: 1.5,
            nu: 0.5,
            root_tol: 1e-10,
        }
    }
}

impl DiscrepancyConfig {
    pub fn new(xi: f64, mu: f64, nu: f64, root_tol: f64) -> Result<Self> {
        let cfg = Self {
            xi,
            mu,
            nu,
            root_tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s2 = std::f64::consts::SQRT_2;
        if !(self.xi > s2) {
            return Err(Error::param(format!(
                "xi must exceed sqrt(2), got {}",
                self.xi
            )));
        }
        if !(self.mu > s2) {
            return Err(Error::param(format!(
                "mu must exceed sqrt(2), got {}",
                self.mu
            )));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::param(format!(
                "nu must lie in (0, 1), got {}",
                self.nu
            )));
        }
        if !(self.root_tol > 0.0 && self.root_tol < 1e-2) {
            return Err(Error::param(format!(
                "root_tol must lie in (0, 0.01), got {}",
                self.root_tol
            )));
        }
        Ok(())
    }
}

/// Regularization family. Serialized as `qbvm`, `mqbvm:<q>` or `ftm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Qbvm,
    Mqbvm(u32),
    Ftm,
}

impl Method {
    /// Power q of the penalty (0 for plain QBVM and for FTM).
    pub fn q(&self) -> u32 {
        match self {
            Method::Mqbvm(q) => *q,
            _ => 0,
        }
    }

    /// Quasi-boundary family with penalty power q.
    pub fn quasi_boundary(q: u32) -> Self {
        if q == 0 {
            Method::Qbvm
        } else {
            Method::Mqbvm(q)
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Qbvm => write!(f, "qbvm"),
            Method::Mqbvm(q) => write!(f, "mqbvm:{q}"),
            Method::Ftm => write!(f, "ftm"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qbvm" => Ok(Method::Qbvm),
            "ftm" => Ok(Method::Ftm),
            _ => {
                let q = s
                    .strip_prefix("mqbvm:")
                    .and_then(|q| q.parse::<u32>().ok())
                    .filter(|&q| q >= 1)
                    .ok_or_else(|| {
                        Error::param(format!(
                            "unknown method '{s}' (qbvm, mqbvm:<q> with q >= 1, ftm)"
                        ))
                    })?;
                Ok(Method::Mqbvm(q))
            }
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceRule {
    /// parameter given directly by the caller
    Manual,
    Apriori,
    Aposteriori,
}

impl fmt::Display for ChoiceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChoiceRule::Manual => "manual",
            ChoiceRule::Apriori => "apriori",
            ChoiceRule::Aposteriori => "aposteriori",
        })
    }
}

impl FromStr for ChoiceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(ChoiceRule::Manual),
            "apriori" => Ok(ChoiceRule::Apriori),
            "aposteriori" => Ok(ChoiceRule::Aposteriori),
            _ => Err(Error::param(format!(
                "unknown rule '{s}' (manual, apriori, aposteriori)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    Beta(f64),
    NCut(usize),
}

impl Parameter {
    pub fn as_f64(&self) -> f64 {
        match self {
            Parameter::Beta(b) => *b,
            Parameter::NCut(n) => *n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// ‖T g_rec − Υ^δ‖
    pub residual: f64,
    /// (parameter, discrepancy) pairs visited by a parameter search
    pub trace: Vec<(f64, f64)>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizedSolution {
    pub g_rec: SpectralField,
    pub method: Method,
    pub parameter: Parameter,
    pub choice_rule: ChoiceRule,
    pub diagnostics: Diagnostics,
}

impl RegularizedSolution {
    fn new(
        op: &BackwardOperator,
        upsilon: &EffectiveData,
        g_rec: SpectralField,
        method: Method,
        parameter: Parameter,
    ) -> Result<Self> {
        let residual = residual(op, upsilon, &g_rec)?;
        Ok(Self {
            g_rec,
            method,
            parameter,
            choice_rule: ChoiceRule::Manual,
            diagnostics: Diagnostics {
                residual,
                ..Diagnostics::default()
            },
        })
    }

    pub fn with_rule(mut self, rule: ChoiceRule) -> Self {
        self.choice_rule = rule;
        self
    }
}

pub fn residual(op: &BackwardOperator, upsilon: &EffectiveData, g: &SpectralField) -> Result<f64> {
    Ok(apply_t(op, g)?.distance(&upsilon.upsilon)?)
}

/// g_n = Υ^δ_n/(κ_n + βλ_n^q).
pub fn qbvm_solve(
    op: &BackwardOperator,
    upsilon: &EffectiveData,
    cfg: QbvmConfig,
) -> Result<RegularizedSolution> {
    check_beta(cfg.beta)?;
    op.check(&upsilon.upsilon, "effective data")?;
    let lams = op.domain().eigenvalues();
    let coeffs = upsilon
        .coeffs()
        .iter()
        .zip(op.kappas())
        .zip(lams)
        .map(|((u, k), lam)| u / (k + cfg.beta * lam.powi(cfg.q as i32)))
        .collect();
    RegularizedSolution::new(
        op,
        upsilon,
        SpectralField::new(coeffs)?,
        Method::quasi_boundary(cfg.q),
        Parameter::Beta(cfg.beta),
    )
}

/// g_n = Υ^δ_n/κ_n for n ≤ N, zero beyond.
pub fn ftm_solve(
    op: &BackwardOperator,
    upsilon: &EffectiveData,
    cfg: FtmConfig,
) -> Result<RegularizedSolution> {
    op.check(&upsilon.upsilon, "effective data")?;
    if cfg.n_cut == 0 || cfg.n_cut > op.n_modes() {
        return Err(Error::param(format!(
            "n_cut {} outside 1..={}",
            cfg.n_cut,
            op.n_modes()
        )));
    }
    let coeffs = upsilon
        .coeffs()
        .iter()
        .zip(op.kappas())
        .enumerate()
        .map(|(i, (u, k))| if i < cfg.n_cut { u / k } else { 0.0 })
        .collect();
    RegularizedSolution::new(
        op,
        upsilon,
        SpectralField::new(coeffs)?,
        Method::Ftm,
        Parameter::NCut(cfg.n_cut),
    )
}

/// Exponent e of the apriori choice β = (δ/ρ)^e.
pub fn apriori_beta_exponent(p: f64, q: u32) -> Result<f64> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::param(format!(
            "smoothness p must be positive, got {p}"
        )));
    }
    let qf = q as f64;
    Ok(match q {
        0 if p < 2.0 => 2.0 / (p + 2.0),
        0 => 0.5,
        _ if p < qf + 2.0 => (qf + 2.0) / (p + 2.0),
        _ => (qf + 2.0) / (qf + 4.0),
    })
}

pub fn apriori_beta(delta: f64, rho: f64, p: f64, q: u32) -> Result<f64> {
    if !(delta > 0.0 && rho > 0.0) {
        return Err(Error::param("need delta > 0 and rho > 0"));
    }
    Ok((delta / rho).powf(apriori_beta_exponent(p, q)?))
}

/// Truncation level chosen by a rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NChoice {
    pub n: usize,
    /// unclamped formula value
    pub formula: f64,
    pub clamped: bool,
}

/// N = ⌊((ρ/δ)/(C₁₈e₁^p e₂²))^{d/(2p+4)}⌋, clamped to N_max.
pub fn apriori_n(
    delta: f64,
    rho: f64,
    p: f64,
    domain: &SpectralDomain,
    c18: f64,
) -> Result<NChoice> {
    if !(delta > 0.0 && rho > 0.0 && p > 0.0 && c18 > 0.0) {
        return Err(Error::param("need delta, rho, p, C18 > 0"));
    }
    let d = domain.dim() as f64;
    let base = rho / delta / (c18 * domain.e1().powf(p) * domain.e2().powi(2));
    let formula = base.powf(d / (2.0 * p + 4.0));
    if formula < 1.0 {
        return Err(Error::DegenerateNoise(format!(
            "apriori truncation level {formula:.4} < 1 at delta = {delta:e}"
        )));
    }
    let raw = formula.floor();
    let n_max = domain.n_modes();
    let clamped = raw > n_max as f64;
    Ok(NChoice {
        n: if clamped { n_max } else { raw as usize },
        formula,
        clamped,
    })
}

/// Φ(β) = ‖T u^δ_β − Υ^δ‖ = (Σ [βλ_n^q Υ_n/(κ_n + βλ_n^q)]²)^{1/2}.
pub fn discrepancy_phi(
    op: &BackwardOperator,
    upsilon: &EffectiveData,
    q: u32,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    op.check(&upsilon.upsilon, "effective data")?;
    let terms: Vec<f64> = upsilon
        .coeffs()
        .iter()
        .zip(op.kappas())
        .zip(op.domain().eigenvalues())
        .map(|((u, k), lam)| {
            let pen = beta * lam.powi(q as i32);
            u / (k / pen + 1.0)
        })
        .collect();
    Ok(l2_norm(&terms))
}

/// Target of the discrepancy equation: ξδ^ν for q = 0, ξδ otherwise.
pub fn discrepancy_target(delta: f64, q: u32, cfg: &DiscrepancyConfig) -> f64 {
    if q == 0 {
        cfg.xi * delta.powf(cfg.nu)
    } else {
        cfg.xi * delta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaChoice {
    pub beta: f64,
    pub target: f64,
    pub phi: f64,
    pub trace: Vec<(f64, f64)>,
    /// Φ already exceeded the target at the lower end of the bracket
    pub at_lower_limit: bool,
}

pub const BETA_LO: f64 = 1e-16;
pub const BETA_HI: f64 = 1e8;
const MAX_EXPANSIONS: usize = 400;
const MAX_BISECTIONS: usize = 200;

/// Root of Φ(β) = target by geometric bisection.
pub fn aposteriori_beta(
    op: &BackwardOperator,
    upsilon: &EffectiveData,
    delta: f64,
    q: u32,
    cfg: &DiscrepancyConfig,
) -> Result<BetaChoice> {
    cfg.validate()?;
    if !(delta > 0.0) {
        return Err(Error::param(format!(
            "noise level must be positive, got {delta}"
        )));
    }
    let target = discrepancy_target(delta, q, cfg);
    let norm = upsilon.norm();
    if target >= norm {
        return Err(Error::NoRoot(format!(
            "discrepancy target {target:e} is not below the data norm {norm:e}"
        )));
    }
    let phi = |b: f64| discrepancy_phi(op, upsilon, q, b);
    let mut trace = Vec::new();
    let mut lo = BETA_LO;
    let phi_lo = phi(lo)?;
    trace.push((lo, phi_lo));
    if phi_lo >= target {
        log::debug!("discrepancy exceeds target already at beta = {lo:e}");
        return Ok(BetaChoice {
            beta: lo,
            target,
            phi: phi_lo,
            trace,
            at_lower_limit: true,
        });
    }
    let mut hi = BETA_HI;
    let mut phi_hi = phi(hi)?;
    trace.push((hi, phi_hi));
    let mut expansions = 0;
    while phi_hi <= target {
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            return Err(Error::NoRoot(format!(
                "could not bracket the discrepancy target {target:e}"
            )));
        }
        lo = hi;
        hi *= 10.0;
        phi_hi = phi(hi)?;
        trace.push((hi, phi_hi));
    }
    let mut best = (hi, phi_hi);
    for _ in 0..MAX_BISECTIONS {
        let mid = (lo * hi).sqrt();
        let v = phi(mid)?;
        trace.push((mid, v));
        if (v - target).abs() < (best.1 - target).abs() {
            best = (mid, v);
        }
        if (v - target).abs() <= cfg.root_tol * target || hi / lo - 1.0 < 4.0 * f64::EPSILON {
            break;
        }
        if v > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(BetaChoice {
        beta: best.0,
        target,
        phi: best.1,
        trace,
        at_lower_limit: false,
    })
}

/// ζ(N) = (Σ_{n>N} (Υ^δ_n)²)^{1/2} for N = 0..=len.
pub fn tail_norms(upsilon: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; upsilon.len() + 1];
    let mut acc = NeumaierSum::new();
    for n in (0..upsilon.len()).rev() {
        acc.add(upsilon[n] * upsilon[n]);
        out[n] = acc.total().sqrt();
    }
    out
}

/// Smallest N ≥ 1 with ζ(N) ≤ μδ, so that ζ(N) ≤ μδ < ζ(N − 1).
pub fn aposteriori_n(upsilon: &EffectiveData, delta: f64, mu: f64) -> Result<usize> {
    if !(delta > 0.0 && mu > 0.0) {
        return Err(Error::param("need delta > 0 and mu > 0"));
    }
    let level = mu * delta;
    let tails = tail_norms(upsilon.coeffs());
    if tails[0] <= level {
        return Err(Error::NoRoot(format!(
            "mu*delta = {level:e} is not below the data norm {:e}; nothing but noise",
            tails[0]
        )));
    }
    Ok(tails
        .iter()
        .position(|&z| z <= level)
        .expect("the empty tail is zero"))
}

/// Upper estimate of the discrepancy-chosen truncation level:
/// (C₂₀ρ/((μ − √2)e₁^{p+2}δ))^{d/(2p+4)}.
pub fn aposteriori_n_bound(
    delta: f64,
    rho: f64,
    p: f64,
    mu: f64,
    domain: &SpectralDomain,
    c20: f64,
) -> f64 {
    let d = domain.dim() as f64;
    (c20 * rho / ((mu - std::f64::consts::SQRT_2) * domain.e1().powf(p + 2.0) * delta))
        .powf(d / (2.0 * p + 4.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    /// s²/(c + βs^{q+2})
    Psi,
    /// βs^{q+2−p}/(c + βs^{q+2})
    Phi,
}

/// Maximizer and maximum over s ≥ s_min of the envelope functions that
/// control the regularized error.
pub fn envelope_max(
    kind: Envelope,
    c: f64,
    q: u32,
    p: f64,
    beta: f64,
    s_min: f64,
) -> Result<(f64, f64)> {
    check_beta(beta)?;
    if !(c > 0.0 && s_min > 0.0) {
        return Err(Error::param("need c > 0 and s_min > 0"));
    }
    let qf = q as f64;
    let (s0, eval): (f64, Box<dyn Fn(f64) -> f64>) = match kind {
        Envelope::Psi => {
            if q == 0 {
                return Err(Error::param(
                    "psi envelope has no finite maximizer for q = 0",
                ));
            }
            let s0 = (2.0 * c / (qf * beta)).powf(1.0 / (qf + 2.0));
            (
                s0,
                Box::new(move |s: f64| s * s / (c + beta * s.powf(qf + 2.0))),
            )
        }
        Envelope::Phi => {
            if !(p > 0.0 && p < qf + 2.0) {
                return Err(Error::param(format!(
                    "phi envelope needs 0 < p < q + 2, got p = {p}, q = {q}"
                )));
            }
            let m = qf + 2.0 - p;
            let s0 = (m * c / (p * beta)).powf(1.0 / (qf + 2.0));
            (
                s0,
                Box::new(move |s: f64| beta * s.powf(m) / (c + beta * s.powf(qf + 2.0))),
            )
        }
    };
    // both envelopes increase up to s0 and decrease after it
    let s = s0.max(s_min);
    let value = if s == s0 {
        match kind {
            Envelope::Psi => (2.0 * c / (qf * beta)).powf(2.0 / (qf + 2.0)) * qf / (c * (qf + 2.0)),
            Envelope::Phi => {
                let m = qf + 2.0 - p;
                (c * m / p).powf(m / (qf + 2.0)) * p / (c * (qf + 2.0)) * beta.powf(p / (qf + 2.0))
            }
        }
    } else {
        eval(s)
    };
    Ok((s, value))
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!(
            "beta must be positive and finite, got {beta}"
        )))
    }
}

/// Everything a parameter-choice rule may consult.
#[derive(Debug, Clone, Copy)]
pub struct RuleInputs<'a> {
    pub delta: f64,
    pub rho: f64,
    pub p: f64,
    pub constants: &'a DerivedConstants,
    pub discrepancy: DiscrepancyConfig,
    /// β, or the truncation level for FTM, when the rule is manual
    pub manual: Option<f64>,
}

/// Picks the regularization parameter by `rule` and solves.
pub fn solve_with_rule(
    op: &BackwardOperator,
    upsilon: &EffectiveData,
    method: Method,
    rule: ChoiceRule,
    inputs: &RuleInputs<'_>,
) -> Result<RegularizedSolution> {
    let RuleInputs {
        delta,
        rho,
        p,
        constants,
        ..
    } = *inputs;
    let manual = || {
        inputs.manual.ok_or_else(|| {
            Error::Configuration(format!(
                "manual rule needs an explicit parameter for {method}"
            ))
        })
    };
    let sol = match (method, rule) {
        (Method::Ftm, ChoiceRule::Manual) => {
            let n = manual()?;
            if !(n >= 1.0 && n.fract() == 0.0) {
                return Err(Error::param(format!(
                    "truncation level must be a positive integer, got {n}"
                )));
            }
            ftm_solve(op, upsilon, FtmConfig { n_cut: n as usize })?
        }
        (Method::Ftm, ChoiceRule::Apriori) => {
            let choice = apriori_n(delta, rho, p, op.domain(), constants.c18)?;
            let mut sol = ftm_solve(op, upsilon, FtmConfig { n_cut: choice.n })?;
            if choice.clamped {
                sol.diagnostics
                    .notes
                    .push(format!("clamped from {:.3}", choice.formula));
            }
            sol
        }
        (Method::Ftm, ChoiceRule::Aposteriori) => {
            let n_cut = aposteriori_n(upsilon, delta, inputs.discrepancy.mu)?;
            ftm_solve(op, upsilon, FtmConfig { n_cut })?
        }
        (m, ChoiceRule::Manual) => qbvm_solve(op, upsilon, QbvmConfig::new(m.q(), manual()?)?)?,
        (m, ChoiceRule::Apriori) => {
            let beta = apriori_beta(delta, rho, p, m.q())?;
            qbvm_solve(op, upsilon, QbvmConfig::new(m.q(), beta)?)?
        }
        (m, ChoiceRule::Aposteriori) => {
            let choice = aposteriori_beta(op, upsilon, delta, m.q(), &inputs.discrepancy)?;
            let mut sol = qbvm_solve(op, upsilon, QbvmConfig::new(m.q(), choice.beta)?)?;
            if choice.at_lower_limit {
                sol.diagnostics
                    .notes
                    .push("discrepancy above target at the smallest beta".into());
            }
            sol.diagnostics.trace = choice.trace;
            sol
        }
    };
    Ok(sol.with_rule(rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Provenance;
    use crate::inverse::exact_backward;
    use crate::spectral::build_domain;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn single_mode_op(alpha: f64) -> BackwardOperator {
        BackwardOperator::new(Arc::new(build_domain(1, &[PI], 1).unwrap()), alpha, 1.0).unwrap()
    }

    fn data(v: Vec<f64>) -> EffectiveData {
        EffectiveData::new(SpectralField::new(v).unwrap(), Provenance::Noisy)
    }

    #[test]
    fn qbvm_scalar_example() {
        let op = single_mode_op(1.0);
        let sol = qbvm_solve(&op, &data(vec![1.0]), QbvmConfig::new(0, 0.1).unwrap()).unwrap();
        assert!((sol.g_rec.coeffs()[0] - 1.0 / ((-1.0f64).exp() + 0.1)).abs() < 1e-14);
        assert!((sol.g_rec.coeffs()[0] - 2.137_302_715).abs() < 1e-9);
        let expect = (op.kappas()[0] * sol.g_rec.coeffs()[0] - 1.0).abs();
        assert!((sol.diagnostics.residual - expect).abs() < 1e-15);
    }

    #[test]
    fn small_beta_and_full_truncation_match_exact_inverse() {
        let op =
            BackwardOperator::new(Arc::new(build_domain(1, &[PI], 20).unwrap()), 0.5, 1.0).unwrap();
        let ups = data((1..=20).map(|n| 1.0 / (n * n) as f64).collect());
        let exact = exact_backward(&op, &ups).unwrap();
        let q = qbvm_solve(&op, &ups, QbvmConfig::new(0, 1e-12).unwrap()).unwrap();
        for (a, b) in q.g_rec.coeffs().iter().zip(exact.coeffs()) {
            assert!(((a - b) / b).abs() < 1e-6);
        }
        let f = ftm_solve(&op, &ups, FtmConfig { n_cut: 20 }).unwrap();
        assert_eq!(f.g_rec, exact);
        let f1 = ftm_solve(&op, &ups, FtmConfig { n_cut: 1 }).unwrap();
        assert_eq!(f1.g_rec.coeffs()[0], 1.0 / op.kappas()[0]);
        assert!(f1.g_rec.coeffs()[1..].iter().all(|&c| c == 0.0));
        assert!(ftm_solve(&op, &ups, FtmConfig { n_cut: 21 }).is_err());
    }

    #[test]
    fn apriori_beta_cases() {
        assert!((apriori_beta(1e-4, 1.0, 1.0, 0).unwrap() - 2.154_434_69e-3).abs() < 1e-11);
        assert!((apriori_beta(1e-4, 1.0, 5.0, 0).unwrap() - 1e-2).abs() < 1e-15);
        for (p, q) in [(1.0, 0), (3.0, 0), (1.0, 2), (6.0, 2)] {
            assert_eq!(apriori_beta(0.3, 0.3, p, q).unwrap(), 1.0);
        }
        assert_eq!(apriori_beta_exponent(1.0, 2).unwrap(), 4.0 / 3.0);
        assert_eq!(apriori_beta_exponent(6.0, 2).unwrap(), 4.0 / 6.0);
        assert!(apriori_beta(1e-3, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn apriori_n_cases() {
        let d = build_domain(1, &[PI], 256).unwrap();
        let c = apriori_n(1e-6, 1.0, 2.0, &d, 2.0).unwrap();
        assert_eq!(c.n, 5);
        assert!((c.formula - 5e5f64.powf(0.125)).abs() < 1e-12);
        assert!(apriori_n(5e-7, 1.0, 2.0, &d, 2.0).unwrap().n >= 5);
        let big = apriori_n(1e-40, 1.0, 0.5, &d, 1.0).unwrap();
        assert!(big.clamped && big.n == 256);
        assert!(matches!(
            apriori_n(1.0, 1.0, 2.0, &d, 2.0),
            Err(Error::DegenerateNoise(_))
        ));
    }

    #[test]
    fn discrepancy_examples() {
        let op = single_mode_op(1.0);
        let ups = data(vec![1.0]);
        assert!(discrepancy_phi(&op, &ups, 0, 1e-300).unwrap() < 1e-200);
        let v = discrepancy_phi(&op, &ups, 0, 0.040_875_5).unwrap();
        assert!((v - 0.1).abs() < 1e-6);
        let op256 =
            BackwardOperator::new(Arc::new(build_domain(1, &[PI], 3).unwrap()), 0.5, 1.0).unwrap();
        let ups3 = data(vec![0.5, 0.3, 0.1]);
        let v = discrepancy_phi(&op256, &ups3, 0, 1e12).unwrap();
        assert!((v - 0.591_607_98).abs() < 1e-6);
    }

    #[test]
    fn aposteriori_beta_single_mode() {
        let op = single_mode_op(1.0);
        let ups = data(vec![1.0]);
        let kappa = op.kappas()[0];
        // q = 0: target ξδ^ν = 0.1
        let cfg = DiscrepancyConfig {
            root_tol: 1e-12,
            ..DiscrepancyConfig::default()
        };
        let delta = (0.1 / cfg.xi).powf(1.0 / cfg.nu);
        let c = aposteriori_beta(&op, &ups, delta, 0, &cfg).unwrap();
        let analytic = 0.1 * kappa / (1.0 - 0.1);
        assert!((c.beta - analytic).abs() < 1e-8);
        assert!((c.beta - 0.040_875_5).abs() < 1e-7);
        assert!((c.phi - c.target).abs() <= cfg.root_tol * c.target);
        // q = 1 with λ₁ = 1 gives the same equation with target ξδ
        let c1 = aposteriori_beta(&op, &ups, 0.1 / cfg.xi, 1, &cfg).unwrap();
        assert!((c1.beta - analytic).abs() < 1e-8);
        let larger = aposteriori_beta(&op, &ups, 2.0 * delta, 0, &cfg).unwrap();
        assert!(larger.beta > c.beta);
        assert!(matches!(
            aposteriori_beta(&op, &ups, 1.0, 1, &cfg),
            Err(Error::NoRoot(_))
        ));
    }

    #[test]
    fn aposteriori_n_examples() {
        let ups = data(vec![0.5, 0.3, 0.1]);
        assert_eq!(aposteriori_n(&ups, 0.2, 1.0).unwrap(), 2);
        assert!(aposteriori_n(&ups, 1.0, 1.0).is_err());
        let tails = tail_norms(ups.coeffs());
        assert!((tails[1] - 0.316_227_77).abs() < 1e-8);
        // just below ζ(N_max − 1)
        assert_eq!(aposteriori_n(&ups, 0.1 * (1.0 - 1e-12), 1.0).unwrap(), 3);
    }

    #[test]
    fn envelope_values() {
        let (s, v) = envelope_max(Envelope::Psi, 1.0, 2, 0.0, 1.0, 1e-3).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert!((v - 0.5).abs() < 1e-15);
        let (s1, _) = envelope_max(Envelope::Psi, 1.0, 2, 0.0, 1.0, 1e-3).unwrap();
        let (s2, _) = envelope_max(Envelope::Psi, 1.0, 2, 0.0, 16.0, 1e-3).unwrap();
        assert!((s1 / s2 - 2.0).abs() < 1e-12);
        assert!(envelope_max(Envelope::Phi, 1.0, 0, 2.0, 1.0, 1.0).is_err());
        // boundary case: maximizer below s_min
        let (s, v) = envelope_max(Envelope::Psi, 1.0, 2, 0.0, 1.0, 3.0).unwrap();
        assert_eq!(s, 3.0);
        assert!((v - 9.0 / 82.0).abs() < 1e-15);
    }

    #[test]
    fn envelope_dominates_grid() {
        for (kind, q, p, beta) in [
            (Envelope::Psi, 1, 0.0, 1e-3),
            (Envelope::Psi, 3, 0.0, 0.2),
            (Envelope::Phi, 0, 1.0, 1e-2),
            (Envelope::Phi, 2, 3.0, 1e-4),
        ] {
            let (_, vmax) = envelope_max(kind, 0.7, q, p, beta, 1.0).unwrap();
            for i in 0..10_000 {
                let s = 1.0 + 999.0 * i as f64 / 9999.0;
                let sp = s.powf(q as f64 + 2.0);
                let v = match kind {
                    Envelope::Psi => s * s / (0.7 + beta * sp),
                    Envelope::Phi => beta * s.powf(q as f64 + 2.0 - p) / (0.7 + beta * sp),
                };
                assert!(v <= vmax * (1.0 + 1e-12), "{kind:?} q={q} s={s}");
            }
        }
    }

    #[test]
    fn method_strings() {
        for m in [Method::Qbvm, Method::Mqbvm(2), Method::Ftm] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("mqbvm:0".parse::<Method>().is_err());
        assert!("tikhonov".parse::<Method>().is_err());
    }

    #[test]
    fn rule_dispatch() {
        let domain = Arc::new(build_domain(1, &[PI], 16).unwrap());
        let op = BackwardOperator::new(domain.clone(), 0.5, 1.0).unwrap();
        let c = DerivedConstants::calibrate(&domain, 0.5, 1.0).unwrap();
        let g = SpectralField::new((1..=16).map(|n| 1.0 / (n * n * n) as f64).collect()).unwrap();
        let ups = EffectiveData::new(apply_t(&op, &g).unwrap(), Provenance::Noisy);
        let mut inputs = RuleInputs {
            delta: 1e-4,
            rho: 1.0,
            p: 1.0,
            constants: &c,
            discrepancy: DiscrepancyConfig::default(),
            manual: None,
        };
        let err = solve_with_rule(&op, &ups, Method::Qbvm, ChoiceRule::Manual, &inputs);
        assert!(matches!(err, Err(Error::Configuration(_))));
        inputs.manual = Some(2.5);
        assert!(solve_with_rule(&op, &ups, Method::Ftm, ChoiceRule::Manual, &inputs).is_err());
        inputs.manual = Some(4.0);
        let sol = solve_with_rule(&op, &ups, Method::Ftm, ChoiceRule::Manual, &inputs).unwrap();
        assert_eq!(sol.parameter, Parameter::NCut(4));
        assert_eq!(sol.choice_rule, ChoiceRule::Manual);
        let sol = solve_with_rule(&op, &ups, Method::Mqbvm(2), ChoiceRule::Apriori, &inputs).unwrap();
        let beta = apriori_beta(1e-4, 1.0, 1.0, 2).unwrap();
        assert_eq!(sol.parameter, Parameter::Beta(beta));
        let sol = solve_with_rule(&op, &ups, Method::Qbvm, ChoiceRule::Aposteriori, &inputs).unwrap();
        assert!(!sol.diagnostics.trace.is_empty());
    }
}
