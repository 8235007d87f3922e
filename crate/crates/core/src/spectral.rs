//! Dirichlet eigenstructure of axis-aligned boxes and the coefficient-space
//! objects built on it: fields, time-dependent sources, source sets and noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::summation::{l2_norm, NeumaierSum};

pub const MAX_DIM: usize = 7;

/// Relative target for the analytic bound on the omitted tail of θ.
pub const THETA_TAIL_TARGET: f64 = 1e-10;
/// Upper limit on lattice points enumerated for θ.
const THETA_MAX_POINTS: f64 = 2.0e6;
/// Always enumerate at least this many, which is free in low dimension.
const THETA_CHEAP_POINTS: f64 = 1.0e5;

/// Geometry and truncation level; everything else in [`SpectralDomain`] is
/// derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub dim: usize,
    pub side_lengths: Vec<f64>,
    pub n_modes: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            dim: 1,
            side_lengths: vec![PI],
            n_modes: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDomain {
    spec: DomainSpec,
    eigenvalues: Vec<f64>,
    multi_indices: Vec<Vec<u32>>,
    e1: f64,
    e2: f64,
    theta: f64,
    theta_tail_bound: f64,
}

pub fn build_domain(dim: usize, side_lengths: &[f64], n_modes: usize) -> Result<SpectralDomain> {
    SpectralDomain::new(DomainSpec {
        dim,
        side_lengths: side_lengths.to_vec(),
        n_modes,
    })
}

impl SpectralDomain {
    pub fn new(spec: DomainSpec) -> Result<Self> {
        let d = spec.dim;
        if !(1..=MAX_DIM).contains(&d) {
            return Err(Error::Dimension(d));
        }
        if spec.side_lengths.len() != d {
            return Err(Error::param(format!(
                "expected {d} side lengths, got {}",
                spec.side_lengths.len()
            )));
        }
        if spec
            .side_lengths
            .iter()
            .any(|&l| !(l > 0.0 && l.is_finite()))
        {
            return Err(Error::param("side lengths must be positive and finite"));
        }
        if spec.n_modes == 0 {
            return Err(Error::param("n_modes must be at least 1"));
        }
        let lattice = Lattice::new(&spec.side_lengths);

        // grow the cutoff until it captures n_modes lattice points
        let mut cutoff = lattice.base() * 4.0;
        let mut points = lattice.collect(cutoff);
        while points.len() < spec.n_modes {
            cutoff *= 2.0;
            points = lattice.collect(cutoff);
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        points.truncate(spec.n_modes);
        let (eigenvalues, multi_indices): (Vec<f64>, Vec<Vec<u32>>) = points.into_iter().unzip();

        let exponent = 2.0 / d as f64;
        let (mut e1, mut e2) = (f64::INFINITY, 0.0f64);
        for (i, &lam) in eigenvalues.iter().enumerate() {
            let r = lam / ((i + 1) as f64).powf(exponent);
            e1 = e1.min(r);
            e2 = e2.max(r);
        }

        let (theta, theta_tail_bound) = lattice.theta(eigenvalues[0]);
        if theta_tail_bound > THETA_TAIL_TARGET * theta {
            log::warn!(
                "theta tail bound {theta_tail_bound:e} exceeds {THETA_TAIL_TARGET:e} relative (d = {d})"
            );
        }
        Ok(Self {
            spec,
            eigenvalues,
            multi_indices,
            e1,
            e2,
            theta,
            theta_tail_bound,
        })
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn side_lengths(&self) -> &[f64] {
        &self.spec.side_lengths
    }

    pub fn n_modes(&self) -> usize {
        self.spec.n_modes
    }

    /// λ_1 ≤ … ≤ λ_N (index 0 holds λ_1).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// λ_n for 1-based n.
    pub fn eigenvalue(&self, n: usize) -> f64 {
        self.eigenvalues[n - 1]
    }

    pub fn lambda1(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn multi_index(&self, n: usize) -> &[u32] {
        &self.multi_indices[n - 1]
    }

    pub fn e1(&self) -> f64 {
        self.e1
    }

    pub fn e2(&self) -> f64 {
        self.e2
    }

    /// Upper estimate of Σ_{n≥1} λ_n⁻⁴ over the full (untruncated) spectrum.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Analytic bound on the part of θ that was not enumerated.
    pub fn theta_tail_bound(&self) -> f64 {
        self.theta_tail_bound
    }

    /// Normalized eigenfunction φ_n at a point of the box.
    pub fn eigenfunction(&self, n: usize, x: &[f64]) -> Result<f64> {
        if n == 0 || n > self.n_modes() {
            return Err(Error::param(format!(
                "mode {n} outside 1..={}",
                self.n_modes()
            )));
        }
        if x.len() != self.dim() {
            return Err(Error::param(format!(
                "point has {} coordinates, domain has {}",
                x.len(),
                self.dim()
            )));
        }
        let mut v = 1.0;
        for ((&k, &l), &xj) in self
            .multi_index(n)
            .iter()
            .zip(&self.spec.side_lengths)
            .zip(x)
        {
            v *= (2.0 / l).sqrt() * (k as f64 * PI * xj / l).sin();
        }
        Ok(v)
    }

    pub(crate) fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len == self.n_modes() {
            Ok(())
        } else {
            Err(Error::Configuration(format!(
                "{what} has {len} modes but the domain has {}",
                self.n_modes()
            )))
        }
    }
}

/// Positive lattice k ∈ ℕ^d with values Σ (k_j π / L_j)².
struct Lattice {
    scales: Vec<f64>,
}

impl Lattice {
    fn new(sides: &[f64]) -> Self {
        Self {
            scales: sides.iter().map(|l| (PI / l).powi(2)).collect(),
        }
    }

    fn base(&self) -> f64 {
        self.scales.iter().sum()
    }

    fn visit(&self, cutoff: f64, mut f: impl FnMut(f64, &[u32])) {
        let d = self.scales.len();
        let mut k = vec![1u32; d];
        // rest[j]: smallest possible contribution of coordinates j.. (all at k = 1)
        let rest: Vec<f64> = (0..=d).map(|j| self.scales[j..].iter().sum()).collect();
        self.recurse(0, 0.0, cutoff, &rest, &mut k, &mut f);
    }

    fn recurse(
        &self,
        j: usize,
        partial: f64,
        cutoff: f64,
        rest: &[f64],
        k: &mut [u32],
        f: &mut impl FnMut(f64, &[u32]),
    ) {
        if j == self.scales.len() {
            f(partial, k);
            return;
        }
        let mut kj = 1u32;
        loop {
            let v = partial + self.scales[j] * (kj as f64).powi(2);
            if v + rest[j + 1] > cutoff {
                break;
            }
            k[j] = kj;
            self.recurse(j + 1, v, cutoff, rest, k, f);
            kj += 1;
        }
        k[j] = 1;
    }

    fn collect(&self, cutoff: f64) -> Vec<(f64, Vec<u32>)> {
        let mut out = Vec::new();
        self.visit(cutoff, |v, k| out.push((v, k.to_vec())));
        out
    }

    /// A with #{λ ≤ Λ} ≤ A Λ^{d/2}: each lattice point owns a unit cell lying
    /// inside the positive orthant of the ellipsoid.
    fn weyl_constant(&self) -> f64 {
        let d = self.scales.len() as f64;
        let unit_ball = PI.powf(d / 2.0) / crate::special::gamma(d / 2.0 + 1.0);
        let semi_axes: f64 = self.scales.iter().map(|s| 1.0 / s.sqrt()).product();
        unit_ball * semi_axes / 2f64.powf(d)
    }

    /// (θ estimate, tail bound). The enumerated sum covers λ ≤ Λ; the rest is
    /// bounded by integrating λ⁻⁴ against the counting bound A λ^{d/2}.
    fn theta(&self, lambda1: f64) -> (f64, f64) {
        let d = self.scales.len() as f64;
        let a = self.weyl_constant();
        let tail_at = |cut: f64| 4.0 * a * cut.powf(d / 2.0 - 4.0) / (4.0 - d / 2.0);
        // cutoff meeting the tail target against the crude lower bound θ ≥ λ_1⁻⁴
        let goal = THETA_TAIL_TARGET * lambda1.powi(-4);
        let wanted = (goal * (4.0 - d / 2.0) / (4.0 * a)).powf(1.0 / (d / 2.0 - 4.0));
        let affordable = (THETA_MAX_POINTS / a).powf(2.0 / d);
        let cheap = (THETA_CHEAP_POINTS / a).powf(2.0 / d);
        let cutoff = wanted.max(cheap).min(affordable).max(self.base());
        let mut sum = NeumaierSum::new();
        let mut count = 0usize;
        self.visit(cutoff, |v, _| {
            sum.add(v.powi(-4));
            count += 1;
        });
        let tail = (tail_at(cutoff) - count as f64 * cutoff.powi(-4)).max(0.0);
        (sum.total() + tail, tail)
    }
}

/// Coefficients (g_n) of a space function in the eigenbasis, n = 1…N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::param("field coefficients must be finite"));
        }
        Ok(Self { coeffs })
    }

    pub fn zeros(n_modes: usize) -> Self {
        Self {
            coeffs: vec![0.0; n_modes],
        }
    }

    /// φ_n itself (1-based n).
    pub fn unit(n_modes: usize, n: usize) -> Result<Self> {
        if n == 0 || n > n_modes {
            return Err(Error::param(format!("mode {n} outside 1..={n_modes}")));
        }
        let mut coeffs = vec![0.0; n_modes];
        coeffs[n - 1] = 1.0;
        Ok(Self { coeffs })
    }

    pub(crate) fn from_vec_unchecked(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.coeffs)
    }

    /// (Σ λ_n^{2p} g_n²)^{1/2}.
    pub fn hp_norm(&self, domain: &SpectralDomain, p: f64) -> Result<f64> {
        domain.check_len(self.len(), "field")?;
        let weighted: Vec<f64> = self
            .coeffs
            .iter()
            .zip(domain.eigenvalues())
            .map(|(g, lam)| g * lam.powf(p))
            .collect();
        Ok(l2_norm(&weighted))
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.same_len(other)?;
        let mut s = NeumaierSum::new();
        for (a, b) in self.coeffs.iter().zip(&other.coeffs) {
            s.add(a * b);
        }
        Ok(s.total())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_len(other)?;
        Ok(Self {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_len(other)?;
        Ok(Self {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }

    fn same_len(&self, other: &Self) -> Result<()> {
        if self.len() == other.len() {
            Ok(())
        } else {
            Err(Error::Configuration(format!(
                "fields have {} and {} modes",
                self.len(),
                other.len()
            )))
        }
    }
}

/// The ball S_{ρ,p} = {φ : ‖φ‖_{H_p} ≤ ρ}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSet {
    rho: f64,
    p: f64,
}

impl SourceSet {
    pub fn new(rho: f64, p: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::param(format!("rho must be positive, got {rho}")));
        }
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::param(format!(
                "smoothness p must be positive, got {p}"
            )));
        }
        Ok(Self { rho, p })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn contains(&self, domain: &SpectralDomain, field: &SpectralField) -> Result<bool> {
        Ok(field.hp_norm(domain, self.p)? <= self.rho)
    }
}

/// Coefficient decay law for synthesized members of a source set:
/// |g_n| ∝ λ_n^{-p·lambda_factor} n^{-index_power}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    pub lambda_factor: f64,
    pub index_power: f64,
}

impl Default for DecayProfile {
    fn default() -> Self {
        Self {
            lambda_factor: 1.0,
            index_power: 0.55,
        }
    }
}

/// Fraction of ρ at which synthesized members sit (just inside the boundary).
pub const BOUNDARY_FRACTION: f64 = 1.0 - 1e-9;

/// A member of S_{ρ,p} on its boundary, with seeded random signs.
pub fn synthesize_source_member(
    domain: &SpectralDomain,
    set: SourceSet,
    profile: DecayProfile,
    seed: u64,
) -> Result<SpectralField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = domain
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(i, lam)| {
            let mag = lam.powf(-set.p * profile.lambda_factor)
                * ((i + 1) as f64).powf(-profile.index_power);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let field = SpectralField::new(raw)?;
    let norm = field.hp_norm(domain, set.p)?;
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numerical(format!("profile has H_p norm {norm}")));
    }
    Ok(field.scaled(set.rho * BOUNDARY_FRACTION / norm))
}

/// Piecewise-constant time series: value `values[j]` on `[breaks[j], breaks[j+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSeries {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl ModeSeries {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breaks.len() != values.len() + 1 || values.is_empty() {
            return Err(Error::param("a series needs one more break than values"));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0])) || !breaks.iter().all(|b| b.is_finite()) {
            return Err(Error::param(
                "series breaks must be finite and strictly increasing",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("series values must be finite"));
        }
        Ok(Self { breaks, values })
    }

    /// Samples of a function at the left end of each piece of a uniform grid.
    pub fn sample(tau: f64, pieces: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if pieces == 0 || !(tau > 0.0) {
            return Err(Error::param(
                "sampling needs tau > 0 and at least one piece",
            ));
        }
        let breaks: Vec<f64> = (0..=pieces)
            .map(|j| tau * j as f64 / pieces as f64)
            .collect();
        let values = breaks[..pieces].iter().map(|&s| f(s)).collect();
        Self::new(breaks, values)
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at s (right-continuous; the final break belongs to the last piece).
    pub fn at(&self, s: f64) -> f64 {
        let j = self.breaks.partition_point(|&b| b <= s);
        self.values[j.saturating_sub(1).min(self.values.len() - 1)]
    }

    fn shifted(&self, delta: f64) -> Self {
        Self {
            breaks: self.breaks.clone(),
            values: self.values.iter().map(|v| v + delta).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    Zero,
    PerModeConstant { values: Vec<f64> },
    PerModeSampled { modes: Vec<ModeSeries> },
}

/// f(·, s) as per-mode coefficient functions f_n(s) on [0, τ].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSource {
    tau: f64,
    n_modes: usize,
    kind: SourceKind,
}

/// One mode of a [`TimeSource`].
#[derive(Debug, Clone, Copy)]
pub enum ModeSource<'a> {
    Zero,
    Constant(f64),
    Sampled(&'a ModeSeries),
}

impl TimeSource {
    pub fn zero(n_modes: usize, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self {
            tau,
            n_modes,
            kind: SourceKind::Zero,
        })
    }

    pub fn constant(values: Vec<f64>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("source values must be finite"));
        }
        Ok(Self {
            tau,
            n_modes: values.len(),
            kind: SourceKind::PerModeConstant { values },
        })
    }

    pub fn sampled(modes: Vec<ModeSeries>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        for m in &modes {
            let (a, b) = (m.breaks[0], *m.breaks.last().unwrap());
            if a > 0.0 || b < tau {
                return Err(Error::param(format!(
                    "sampled mode covers [{a}, {b}], which does not contain [0, {tau}]"
                )));
            }
        }
        Ok(Self {
            tau,
            n_modes: modes.len(),
            kind: SourceKind::PerModeSampled { modes },
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn kind(&self) -> &SourceKind {
        &self.kind
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, SourceKind::Zero)
    }

    /// Mode n (1-based).
    pub fn mode(&self, n: usize) -> ModeSource<'_> {
        match &self.kind {
            SourceKind::Zero => ModeSource::Zero,
            SourceKind::PerModeConstant { values } => ModeSource::Constant(values[n - 1]),
            SourceKind::PerModeSampled { modes } => ModeSource::Sampled(&modes[n - 1]),
        }
    }

    /// Coefficients f_n(s).
    pub fn values_at(&self, s: f64) -> Vec<f64> {
        (1..=self.n_modes)
            .map(|n| match self.mode(n) {
                ModeSource::Zero => 0.0,
                ModeSource::Constant(c) => c,
                ModeSource::Sampled(m) => m.at(s),
            })
            .collect()
    }

    /// Piece boundaries in [0, τ] shared by every mode.
    fn union_breaks(&self, other: Option<&Self>) -> Vec<f64> {
        let mut b = vec![0.0, self.tau];
        for src in std::iter::once(self).chain(other) {
            if let SourceKind::PerModeSampled { modes } = &src.kind {
                for m in modes {
                    b.extend(
                        m.breaks
                            .iter()
                            .copied()
                            .filter(|&x| x > 0.0 && x < self.tau),
                    );
                }
            }
        }
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }

    /// sup_s (Σ_n f_n(s)²)^{1/2}, exact for piecewise-constant data.
    pub fn sup_norm(&self) -> f64 {
        match &self.kind {
            SourceKind::Zero => 0.0,
            SourceKind::PerModeConstant { values } => l2_norm(values),
            SourceKind::PerModeSampled { .. } => {
                self.sup_over_pieces(|s| l2_norm(&self.values_at(s)), None)
            }
        }
    }

    /// sup_s ‖f(s) − f̃(s)‖.
    pub fn sup_distance(&self, other: &Self) -> Result<f64> {
        if self.n_modes != other.n_modes && !(self.is_zero() || other.is_zero()) {
            return Err(Error::Configuration(format!(
                "sources have {} and {} modes",
                self.n_modes, other.n_modes
            )));
        }
        if self.tau != other.tau {
            return Err(Error::Configuration(format!(
                "sources live on [0, {}] and [0, {}]",
                self.tau, other.tau
            )));
        }
        if self.is_zero() {
            return Ok(other.sup_norm());
        }
        if other.is_zero() {
            return Ok(self.sup_norm());
        }
        Ok(self.sup_over_pieces(
            |s| {
                let a = self.values_at(s);
                let b = other.values_at(s);
                let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                l2_norm(&diff)
            },
            Some(other),
        ))
    }

    fn sup_over_pieces(&self, eval: impl Fn(f64) -> f64, other: Option<&Self>) -> f64 {
        let breaks = self.union_breaks(other);
        breaks
            .windows(2)
            .map(|w| eval(0.5 * (w[0] + w[1])))
            .fold(0.0, f64::max)
    }

    /// The source plus a time-constant per-mode shift.
    pub fn shifted_by(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.n_modes && !self.is_zero() {
            return Err(Error::Configuration(format!(
                "shift has {} modes, source has {}",
                shift.len(),
                self.n_modes
            )));
        }
        let kind = match &self.kind {
            SourceKind::Zero => SourceKind::PerModeConstant {
                values: shift.to_vec(),
            },
            SourceKind::PerModeConstant { values } => SourceKind::PerModeConstant {
                values: values.iter().zip(shift).map(|(a, b)| a + b).collect(),
            },
            SourceKind::PerModeSampled { modes } => SourceKind::PerModeSampled {
                modes: modes
                    .iter()
                    .zip(shift)
                    .map(|(m, &s)| m.shifted(s))
                    .collect(),
            },
        };
        Ok(Self {
            tau: self.tau,
            n_modes: shift.len().max(self.n_modes),
            kind,
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!(
            "horizon tau must be positive, got {tau}"
        )))
    }
}

/// Noisy final data and source, with the clean-data budget they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyData {
    pub h_noisy: SpectralField,
    pub f_noisy: TimeSource,
    pub delta: f64,
    pub split: f64,
    pub seed: u64,
}

impl NoisyData {
    /// ‖h − h^δ‖² + θ‖f − f^δ‖²_∞ against the paired clean data.
    pub fn budget_used(
        &self,
        domain: &SpectralDomain,
        h: &SpectralField,
        f: &TimeSource,
    ) -> Result<f64> {
        let dh = h.distance(&self.h_noisy)?;
        let df = f.sup_distance(&self.f_noisy)?;
        Ok(dh * dh + domain.theta() * df * df)
    }

    pub fn within_budget(
        &self,
        domain: &SpectralDomain,
        h: &SpectralField,
        f: &TimeSource,
    ) -> Result<bool> {
        Ok(self.budget_used(domain, h, f)? <= self.delta * self.delta)
    }
}

/// Number of leading modes carrying injected noise.
pub const NOISE_MODES: usize = 64;
const H_NOISE_FACTOR: f64 = 0.999;
const F_NOISE_FACTOR: f64 = 0.998;

/// Adds seeded noise with ‖h − h^δ‖ = √split·δ·0.999 and
/// θ‖f − f^δ‖²_∞ = (1 − split)·δ²·0.998.
pub fn inject_noise(
    domain: &SpectralDomain,
    h: &SpectralField,
    f: &TimeSource,
    delta: f64,
    split: f64,
    seed: u64,
) -> Result<NoisyData> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::param(format!(
            "noise level must be positive, got {delta}"
        )));
    }
    if !(0.0..=1.0).contains(&split) {
        return Err(Error::param(format!(
            "split must lie in [0, 1], got {split}"
        )));
    }
    domain.check_len(h.len(), "final data")?;
    if !f.is_zero() {
        domain.check_len(f.n_modes(), "source")?;
    }
    let n = domain.n_modes();
    let h_norm = split.sqrt() * delta * H_NOISE_FACTOR;
    let f_norm = delta * ((1.0 - split) * F_NOISE_FACTOR / domain.theta()).sqrt();

    let dh = flat_direction(n, seed, 1, h_norm);
    let h_noisy = h.add(&SpectralField::from_vec_unchecked(dh))?;
    let f_noisy = if f_norm > 0.0 {
        f.shifted_by(&flat_direction(n, seed, 2, f_norm))?
    } else {
        f.clone()
    };
    Ok(NoisyData {
        h_noisy,
        f_noisy,
        delta,
        split,
        seed,
    })
}

/// Gaussian direction on the first NOISE_MODES modes, scaled to `norm`.
fn flat_direction(n: usize, seed: u64, stream: u64, norm: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    if norm == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let m = n.min(NOISE_MODES);
    for v in out.iter_mut().take(m) {
        *v = rng.sample(StandardNormal);
    }
    let raw = l2_norm(&out);
    for v in out.iter_mut() {
        *v *= norm / raw;
    }
    out
}

/// JSON record of a field together with the domain it lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub domain: DomainSpec,
    pub coeffs: Vec<f64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl FieldRecord {
    pub fn new(domain: &SpectralDomain, field: &SpectralField) -> Self {
        Self {
            domain: domain.spec().clone(),
            coeffs: field.coeffs().to_vec(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn field(&self) -> Result<SpectralField> {
        if self.coeffs.len() != self.domain.n_modes {
            return Err(Error::Configuration(format!(
                "record has {} coefficients for {} modes",
                self.coeffs.len(),
                self.domain.n_modes
            )));
        }
        SpectralField::new(self.coeffs.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// JSON record of a time source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub domain: DomainSpec,
    pub source: TimeSource,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Writes `n,lambda,<name>...` rows, one per mode.
pub fn write_coefficient_csv(
    path: impl AsRef<Path>,
    domain: &SpectralDomain,
    columns: &[(&str, &SpectralField)],
) -> Result<()> {
    let path = path.as_ref();
    for (name, field) in columns {
        domain.check_len(field.len(), name)?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_coefficient_table(file, domain, columns).map_err(|e| Error::csv(path, e))
}

pub fn write_coefficient_table<W: Write>(
    out: W,
    domain: &SpectralDomain,
    columns: &[(&str, &SpectralField)],
) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["n".to_string(), "lambda".to_string()];
    header.extend(columns.iter().map(|(name, _)| name.to_string()));
    w.write_record(&header)?;
    for n in 1..=domain.n_modes() {
        let mut row = vec![n.to_string(), format!("{:e}", domain.eigenvalue(n))];
        row.extend(
            columns
                .iter()
                .map(|(_, f)| format!("{:e}", f.coeffs()[n - 1])),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
