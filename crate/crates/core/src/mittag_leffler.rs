//! Mittag-Leffler functions E_{γ,β}(x) on the closed negative half line.
//!
//! Three evaluation routes are tried in order of cost, and each one accepts
//! its own result only when its a-posteriori error estimate is below the
//! requested tolerance:
//!
//! * power series with compensated summation (small |x|, where the
//!   cancellation factor stays moderate);
//! * the algebraic asymptotic expansion `-Σ x^{-k}/Γ(β-γk)`, truncated at the
//!   smallest term of its coefficient envelope (large |x|);
//! * the real-line integral representation of Gorenflo, Loutchko and Luchko
//!   for 0 < γ < 1, β < 1 + γ (everything in between), with recurrences in β
//!   to reach other second parameters.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};
use crate::special::{gamma, ln_gamma, rgamma, sin_pi};
use crate::summation::NeumaierSum;

/// Default relative tolerance used by the kernel helpers and the forward model.
pub const DEFAULT_REL_TOL: f64 = 1e-13;

pub const MIN_REL_TOL: f64 = 1e-14;
pub const MAX_REL_TOL: f64 = 1e-6;

/// Fractional order pair (γ, β) of E_{γ,β}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MLOrder {
    gamma: f64,
    beta: f64,
}

impl MLOrder {
    pub fn new(gamma: f64, beta: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::param(format!(
                "order gamma must lie in (0, 1], got {gamma}"
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::param(format!(
                "order beta must be positive, got {beta}"
            )));
        }
        Ok(Self { gamma, beta })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Which evaluation route produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Exact,
    Series,
    Asymptotic,
    Integral,
}

/// E_{γ,β}(x) for x ≤ 0 with relative error at most `rel_tol`.
pub fn ml_eval(order: MLOrder, x: f64, rel_tol: f64) -> Result<f64> {
    ml_eval_traced(order, x, rel_tol).map(|(v, _)| v)
}

/// Like [`ml_eval`], also reporting the route that was used.
pub fn ml_eval_traced(order: MLOrder, x: f64, rel_tol: f64) -> Result<(f64, Route)> {
    if !(MIN_REL_TOL..=MAX_REL_TOL).contains(&rel_tol) {
        return Err(Error::param(format!(
            "rel_tol must lie in [{MIN_REL_TOL:e}, {MAX_REL_TOL:e}], got {rel_tol:e}"
        )));
    }
    if x.is_nan() {
        return Err(Error::domain("argument is NaN"));
    }
    if x > 0.0 {
        return Err(Error::domain(format!(
            "positive argument {x} is not supported"
        )));
    }
    evaluate(order.gamma, order.beta, -x, rel_tol)
}

fn evaluate(gamma_: f64, beta: f64, t: f64, tol: f64) -> Result<(f64, Route)> {
    if t == 0.0 {
        return Ok((rgamma(beta), Route::Exact));
    }
    if t.is_infinite() {
        return Ok((0.0, Route::Exact));
    }
    if gamma_ == 1.0 && beta == 1.0 {
        return Ok(((-t).exp(), Route::Exact));
    }
    if t > 1.0 {
        if let Some(v) = asymptotic(gamma_, beta, t, tol) {
            return Ok((v, Route::Asymptotic));
        }
    }
    if let Some(v) = series(gamma_, beta, t, tol) {
        return Ok((v, Route::Series));
    }
    integral(gamma_, beta, t, tol).map(|v| (v, Route::Integral))
}

/// Power series in x = -t. `None` when the cancellation makes the requested
/// accuracy unreachable in double precision.
fn series(gamma_: f64, beta: f64, t: f64, tol: f64) -> Option<f64> {
    // the largest term is about exp(t^{1/γ})
    let peak = t.powf(1.0 / gamma_);
    if peak > 40.0 {
        return None;
    }
    let ln_t = t.ln();
    let mut sum = NeumaierSum::new();
    let mut abs_sum = 0.0;
    for k in 0..100_000usize {
        let arg = k as f64 * gamma_ + beta;
        let mut mag = if arg < 170.0 {
            t.powi(k as i32) * rgamma(arg)
        } else {
            f64::NAN
        };
        if !mag.is_finite() {
            mag = (k as f64 * ln_t - ln_gamma(arg)).exp();
        }
        let term = if k % 2 == 0 { mag } else { -mag };
        sum.add(term);
        abs_sum += mag;
        let total = sum.total();
        if k as f64 * gamma_ > peak + 1.0 && (mag <= 1e-3 * tol * total.abs() || mag < 1e-300) {
            let err = 16.0 * f64::EPSILON * abs_sum;
            return if total != 0.0 && err <= 0.5 * tol * total.abs() {
                Some(total)
            } else {
                None
            };
        }
    }
    None
}

/// Asymptotic expansion `-Σ_{k≥1} x^{-k}/Γ(β-γk)`, valid on the negative axis
/// for 0 < γ < 1 (and up to an exponentially small term for γ = 1).
fn asymptotic(gamma_: f64, beta: f64, t: f64, tol: f64) -> Option<f64> {
    if gamma_ == 1.0 {
        // E_{1,β}(-t) also carries a term of size e^{-t} t^{1-β}
        let exp_term = ((1.0 - beta) * t.ln() - t).exp();
        if !(exp_term < 1e-3 * tol / t) {
            return None;
        }
    }
    let ln_t = t.ln();
    let mut sum = NeumaierSum::new();
    let mut prev_env = f64::INFINITY;
    for k in 1..20_000usize {
        let kf = k as f64;
        let arg = beta - gamma_ * kf;
        // |1/Γ(y)| ≤ Γ(1 - y)/π for y ≤ 1/2; direct value otherwise
        let ln_coeff_env = if arg <= 0.5 {
            ln_gamma(1.0 - arg) - PI.ln()
        } else {
            rgamma(arg).abs().ln()
        };
        let ln_env = ln_coeff_env - kf * ln_t;
        let env = ln_env.exp();
        if env > prev_env && k > 1 {
            break;
        }
        let coeff = rgamma(arg);
        let term = if coeff == 0.0 {
            0.0
        } else {
            let mag = (coeff.abs().ln() - kf * ln_t).exp();
            // -(−t)^{-k} = -(−1)^k t^{-k}
            let sign = -coeff.signum() * if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * mag
        };
        sum.add(term);
        let total = sum.total();
        if env <= 1e-3 * tol * total.abs() {
            return Some(total);
        }
        prev_env = env;
    }
    let total = sum.total();
    if total != 0.0 && 100.0 * prev_env <= tol * total.abs() {
        Some(total)
    } else {
        None
    }
}

fn integral(gamma_: f64, beta: f64, t: f64, tol: f64) -> Result<f64> {
    let quad_rel = (0.1 * tol).max(2e-15);
    if gamma_ == 1.0 {
        if beta > 1.0 {
            // E_{1,β}(-t) = (1/Γ(β)) ∫_0^1 exp(-t (1 - u^{1/(β-1)})) du
            let p = 1.0 / (beta - 1.0);
            let est = quadrature::integrate(
                |u: f64| (-t * (1.0 - u.powf(p))).exp(),
                &[0.0, 0.5, 1.0],
                Tolerance {
                    abs: 0.0,
                    rel: quad_rel,
                    max_intervals: 4000,
                },
            )?;
            return Ok(rgamma(beta) * est.value);
        }
        // E_{1,β}(z) = 1/Γ(β) + z E_{1,β+1}(z)
        let (upper, _) = evaluate(1.0, beta + 1.0, t, tol)?;
        return Ok(rgamma(beta) - t * upper);
    }
    if beta >= 1.0 + gamma_ {
        // E_{γ,β}(z) = (E_{γ,β-γ}(z) - 1/Γ(β-γ)) / z
        let (lower, _) = evaluate(gamma_, beta - gamma_, t, tol)?;
        return Ok((rgamma(beta - gamma_) - lower) / t);
    }
    let s1 = sin_pi(1.0 - beta);
    let s2 = sin_pi(1.0 - beta + gamma_);
    // 1 + cos(πγ), kept accurate for γ near 1 where the denominator nearly vanishes at χ = t
    let one_plus_c = 2.0 * sin_pi(0.5 * (1.0 - gamma_)).powi(2);
    let power = (1.0 - beta) / gamma_;
    let inv_gamma = 1.0 / gamma_;
    let kernel = |chi: f64| {
        if chi <= 0.0 {
            return 0.0;
        }
        let num = chi * s1 + t * s2;
        let den = (chi - t) * (chi - t) + 2.0 * chi * t * one_plus_c;
        chi.powf(power) * (-chi.powf(inv_gamma)).exp() * num / den
    };
    // exp(-χ^{1/γ}) < 1e-22 beyond this point
    let chi_max = 50f64.powf(gamma_);
    let mut points = vec![0.0];
    for p in [0.25 * t, t, 2.0 * t] {
        if p > 0.0 && p < chi_max && p > *points.last().unwrap() {
            points.push(p);
        }
    }
    points.push(chi_max);
    let est = quadrature::integrate(
        kernel,
        &points,
        Tolerance {
            abs: 0.0,
            rel: quad_rel,
            max_intervals: 4000,
        },
    )?;
    Ok(est.value / (gamma_ * PI))
}

/// t^{α-1} E_{α,α}(-λ t^α), the derivative kernel of the relaxation function.
pub fn ml_kernel(alpha: f64, lambda: f64, t: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(lambda > 0.0) {
        return Err(Error::param(format!(
            "decay rate must be positive, got {lambda}"
        )));
    }
    if !(t > 0.0) {
        return Err(Error::domain(format!(
            "kernel is singular at t = 0 and undefined for t < 0, got t = {t}"
        )));
    }
    let order = MLOrder::new(alpha, alpha)?;
    let e = ml_eval(order, -lambda * t.powf(alpha), DEFAULT_REL_TOL)?;
    Ok(t.powf(alpha - 1.0) * e)
}

/// ∫_0^τ s^{α-1} E_{α,α}(-λ s^α) ds = (1 - E_{α,1}(-λ τ^α)) / λ.
///
/// For small λτ^α the equivalent form τ^α E_{α,α+1}(-λτ^α) avoids the
/// cancellation in `1 - E`.
pub fn ml_kernel_l1(alpha: f64, lambda: f64, tau: f64, rel_tol: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(lambda > 0.0) {
        return Err(Error::param(format!(
            "decay rate must be positive, got {lambda}"
        )));
    }
    if !(tau >= 0.0) {
        return Err(Error::domain(format!(
            "horizon must be non-negative, got {tau}"
        )));
    }
    if tau == 0.0 {
        return Ok(0.0);
    }
    let tau_a = tau.powf(alpha);
    let z = lambda * tau_a;
    if z <= 1.0 {
        let e = ml_eval(MLOrder::new(alpha, alpha + 1.0)?, -z, rel_tol)?;
        Ok(tau_a * e)
    } else {
        let e = ml_eval(MLOrder::new(alpha, 1.0)?, -z, rel_tol)?;
        Ok((1.0 - e) / lambda)
    }
}

/// E_{α,1}(-λ t^α), the relaxation function of the fractional ODE.
pub fn relaxation(alpha: f64, lambda: f64, t: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(t >= 0.0) {
        return Err(Error::domain(format!("time must be non-negative, got {t}")));
    }
    ml_eval(
        MLOrder::new(alpha, 1.0)?,
        -lambda * t.powf(alpha),
        DEFAULT_REL_TOL,
    )
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

/// Sampling grid for bound-constant calibration: `points` logarithmically
/// spaced arguments in `[-max_abs, -min_abs]`, optionally plus `x = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min_abs: f64,
    pub max_abs: f64,
    pub points: usize,
    pub include_zero: bool,
}

impl GridSpec {
    pub fn log_spaced(
        min_abs: f64,
        max_abs: f64,
        points: usize,
        include_zero: bool,
    ) -> Result<Self> {
        if !(min_abs > 0.0 && max_abs >= min_abs) {
            return Err(Error::param("grid needs 0 < min_abs <= max_abs"));
        }
        if points == 0 && !include_zero {
            return Err(Error::param("grid is empty"));
        }
        Ok(Self {
            min_abs,
            max_abs,
            points,
            include_zero,
        })
    }

    /// `[-1e12, -1e-3] ∪ {0}` with 400 log-spaced points; wide enough to
    /// cover every relaxation argument λ_n² τ^α of the default experiments.
    pub fn calibration_default() -> Self {
        Self {
            min_abs: 1e-3,
            max_abs: 1e12,
            points: 400,
            include_zero: true,
        }
    }

    /// A grid interleaved with `self` (midpoints in log scale), for validating
    /// calibrated constants on arguments they were not fitted on.
    pub fn validation_partner(&self) -> Self {
        let ratio = if self.points > 1 {
            (self.max_abs / self.min_abs).powf(0.5 / (self.points - 1) as f64)
        } else {
            2.0
        };
        Self {
            min_abs: self.min_abs * ratio,
            max_abs: self.max_abs / ratio,
            points: self.points.saturating_sub(1).max(1),
            include_zero: false,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points + 1);
        if self.include_zero {
            out.push(0.0);
        }
        let (lo, hi) = (self.min_abs.ln(), self.max_abs.ln());
        for i in 0..self.points {
            let frac = if self.points == 1 {
                0.0
            } else {
                i as f64 / (self.points - 1) as f64
            };
            out.push(-(lo + frac * (hi - lo)).exp());
        }
        out
    }
}

/// Short stable digest of a sampling grid.
pub fn grid_hash(grid: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for x in grid {
        hasher.update(x.to_bits().to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Empirical two-sided constants for
/// `c1_lower / (Γ(1-α)(1-x)) ≤ E_{α,1}(x) ≤ c1_upper / (Γ(1-α)(1-x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLBoundConstants {
    pub alpha: f64,
    pub c1_lower: f64,
    pub c1_upper: f64,
    pub grid_hash: String,
}

impl MLBoundConstants {
    pub fn new(alpha: f64, c1_lower: f64, c1_upper: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::param(format!(
                "bound constants need alpha in (0, 1), got {alpha}"
            )));
        }
        if !(c1_lower > 0.0 && c1_lower <= c1_upper && c1_upper.is_finite()) {
            return Err(Error::param(format!(
                "need 0 < c1_lower <= c1_upper < inf, got {c1_lower}, {c1_upper}"
            )));
        }
        Ok(Self {
            alpha,
            c1_lower,
            c1_upper,
            grid_hash: String::from("manual"),
        })
    }

    /// Lower and upper bounds on E_{α,1}(x).
    pub fn envelope(&self, x: f64) -> (f64, f64) {
        let scale = 1.0 / (gamma(1.0 - self.alpha) * (1.0 - x));
        (self.c1_lower * scale, self.c1_upper * scale)
    }

    /// Whether E_{α,1}(x) lies inside the envelope, up to `slack` relative.
    pub fn holds_at(&self, x: f64, slack: f64) -> Result<bool> {
        let e = ml_eval(MLOrder::new(self.alpha, 1.0)?, x, DEFAULT_REL_TOL)?;
        let (lo, hi) = self.envelope(x);
        Ok(e >= lo * (1.0 - slack) && e <= hi * (1.0 + slack))
    }
}

/// Tightest constants supported by the sampled arguments.
pub fn estimate_bound_constants(alpha: f64, x_grid: &[f64]) -> Result<MLBoundConstants> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!(
            "bound constants need alpha in (0, 1), got {alpha}"
        )));
    }
    if x_grid.is_empty() {
        return Err(Error::param("calibration grid is empty"));
    }
    let order = MLOrder::new(alpha, 1.0)?;
    let g = gamma(1.0 - alpha);
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &x in x_grid {
        let e = ml_eval(order, x, DEFAULT_REL_TOL)?;
        let r = e * g * (1.0 - x);
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if !(lo > 0.0 && hi.is_finite()) {
        return Err(Error::Numerical(format!(
            "degenerate calibration: [{lo}, {hi}]"
        )));
    }
    Ok(MLBoundConstants {
        alpha,
        c1_lower: lo,
        c1_upper: hi,
        grid_hash: grid_hash(x_grid),
    })
}

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub alpha: f64,
    pub grid: GridSpec,
    pub grid_hash: String,
    pub c1_lower: f64,
    pub c1_upper: f64,
}

/// Versioned table of calibrated constants, keyed by (alpha, grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub version: u32,
    pub entries: Vec<CalibrationEntry>,
}

impl Default for CalibrationTable {
    fn default() -> Self {
        Self {
            version: CALIBRATION_FORMAT_VERSION,
            entries: Vec::new(),
        }
    }
}

impl CalibrationTable {
    pub fn calibrate(alphas: &[f64], grid: &GridSpec) -> Result<Self> {
        let values = grid.values();
        let mut table = Self::default();
        for &alpha in alphas {
            let c = estimate_bound_constants(alpha, &values)?;
            table.entries.push(CalibrationEntry {
                alpha,
                grid: grid.clone(),
                grid_hash: c.grid_hash,
                c1_lower: c.c1_lower,
                c1_upper: c.c1_upper,
            });
        }
        Ok(table)
    }

    pub fn lookup(&self, alpha: f64, grid: &GridSpec) -> Option<MLBoundConstants> {
        self.entries
            .iter()
            .find(|e| e.alpha == alpha && &e.grid == grid)
            .map(|e| MLBoundConstants {
                alpha: e.alpha,
                c1_lower: e.c1_lower,
                c1_upper: e.c1_upper,
                grid_hash: e.grid_hash.clone(),
            })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)?;
        if table.version != CALIBRATION_FORMAT_VERSION {
            return Err(Error::Configuration(format!(
                "calibration table version {} is not supported (expected {CALIBRATION_FORMAT_VERSION})",
                table.version
            )));
        }
        for e in &table.entries {
            if grid_hash(&e.grid.values()) != e.grid_hash {
                return Err(Error::Configuration(format!(
                    "calibration entry for alpha = {} does not match its grid hash",
                    e.alpha
                )));
            }
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Calibrated constants on the default grid, the normal entry point for the
/// rest of the crate.
pub fn calibrated_constants(alpha: f64) -> Result<MLBoundConstants> {
    estimate_bound_constants(alpha, &GridSpec::calibration_default().values())
}
