use std::f64::consts::{PI, SQRT_2};
use std::sync::{Arc, LazyLock};

use backfrac::constants::DerivedConstants;
use backfrac::forward::{
    decay_rates, effective_data, forward_solve, psi, DecayRate, EffectiveData, Provenance,
};
use backfrac::inverse::{apply_t, exact_backward, BackwardOperator};
use backfrac::mittag_leffler::{
    calibrated_constants, ml_eval, ml_kernel, ml_kernel_l1, relaxation, GridSpec, MLOrder,
    DEFAULT_REL_TOL,
};
use backfrac::regularization::{discrepancy_phi, ftm_solve, qbvm_solve, FtmConfig, QbvmConfig};
use backfrac::spectral::{
    build_domain, inject_noise, synthesize_source_member, DecayProfile, ModeSeries, ModeSource,
    SourceSet, SpectralDomain, SpectralField, TimeSource,
};
use proptest::prelude::*;

static DOMAIN: LazyLock<Arc<SpectralDomain>> =
    LazyLock::new(|| Arc::new(build_domain(1, &[PI], 256).unwrap()));
static OP: LazyLock<BackwardOperator> =
    LazyLock::new(|| BackwardOperator::new(DOMAIN.clone(), 0.5, 1.0).unwrap());
static CONSTS: LazyLock<DerivedConstants> =
    LazyLock::new(|| DerivedConstants::calibrate(&DOMAIN, 0.5, 1.0).unwrap());

fn member(p: f64, rho: f64, lambda_factor: f64, index_power: f64, seed: u64) -> SpectralField {
    let profile = DecayProfile {
        lambda_factor,
        index_power,
    };
    synthesize_source_member(&DOMAIN, SourceSet::new(rho, p).unwrap(), profile, seed).unwrap()
}

fn perturbation(coeffs: &[f64], norm: f64) -> SpectralField {
    let mut v = vec![0.0; DOMAIN.n_modes()];
    v[..coeffs.len()].copy_from_slice(coeffs);
    let f = SpectralField::new(v).unwrap();
    let n = f.norm();
    if n == 0.0 {
        f
    } else {
        f.scaled(norm / n)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relaxation_is_positive_and_decreasing(alpha in 0.05f64..=1.0, x in 0.0f64..1e4, dx in 1e-3f64..10.0) {
        let order = MLOrder::new(alpha, 1.0).unwrap();
        let a = ml_eval(order, -x, DEFAULT_REL_TOL).unwrap();
        let b = ml_eval(order, -x - dx, DEFAULT_REL_TOL).unwrap();
        prop_assert!(b > 0.0);
        prop_assert!(b < a, "E({}) = {a}, E({}) = {b}", -x, -x - dx);
    }

    #[test]
    fn derivative_identity(alpha in 0.1f64..1.0, lambda in 0.1f64..100.0, t in 0.05f64..3.0) {
        let h = 1e-5 * t;
        let fd = (relaxation(alpha, lambda, t + h).unwrap() - relaxation(alpha, lambda, t - h).unwrap()) / (2.0 * h);
        let exact = -lambda * ml_kernel(alpha, lambda, t).unwrap();
        prop_assert!(((fd - exact) / exact).abs() <= 1e-5, "fd {fd} exact {exact}");
    }

    #[test]
    fn kernel_l1_below_reciprocal(alpha in 0.05f64..=1.0, lambda in 1e-3f64..1e6, tau in 1e-3f64..10.0) {
        let v = ml_kernel_l1(alpha, lambda, tau, DEFAULT_REL_TOL).unwrap();
        prop_assert!(v > 0.0);
        prop_assert!(v * lambda <= 1.0 + 1e-12);
    }

    #[test]
    fn eigenvalue_envelope(dim in 1usize..=3, n_modes in 1usize..400, sides in prop::collection::vec(0.5f64..4.0, 3)) {
        let d = build_domain(dim, &sides[..dim], n_modes).unwrap();
        for n in 1..=n_modes {
            let scale = (n as f64).powf(2.0 / dim as f64);
            let lam = d.eigenvalue(n);
            prop_assert!(d.e1() * scale <= lam * (1.0 + 1e-12));
            prop_assert!(lam <= d.e2() * scale * (1.0 + 1e-12));
        }
    }

    #[test]
    fn noise_budget_holds(delta in 1e-9f64..1.0, split in 0.0f64..=1.0, seed in any::<u64>(), p in 0.5f64..6.0) {
        let g = member(p, 1.0, 1.0, 0.55, seed ^ 1);
        let f = TimeSource::constant((1..=256).map(|n| 0.1 / n as f64).collect(), 1.0).unwrap();
        let noisy = inject_noise(&DOMAIN, &g, &f, delta, split, seed).unwrap();
        prop_assert!(noisy.within_budget(&DOMAIN, &g, &f).unwrap());
    }

    #[test]
    fn hp_norm_monotone_in_p(coeffs in prop::collection::vec(-1.0f64..1.0, 256), p in 0.0f64..4.0, dp in 0.0f64..2.0) {
        let g = SpectralField::new(coeffs).unwrap();
        prop_assert!((g.hp_norm(&DOMAIN, 0.0).unwrap() - g.norm()).abs() <= 1e-12 * g.norm());
        prop_assert!(g.hp_norm(&DOMAIN, p).unwrap() <= g.hp_norm(&DOMAIN, p + dp).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn psi_bound_and_lipschitz(
        alpha in 0.1f64..=1.0,
        n in 1usize..64,
        a in prop::collection::vec(-3.0f64..3.0, 8),
        b in prop::collection::vec(-3.0f64..3.0, 8),
        frac in 0.0f64..=1.0,
    ) {
        let tau = 1.0;
        let breaks: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).collect();
        let fa = ModeSeries::new(breaks.clone(), a.clone()).unwrap();
        let fb = ModeSeries::new(breaks, b.clone()).unwrap();
        let lam = DOMAIN.eigenvalue(n);
        let rate = DecayRate::of_eigenvalue(lam).unwrap();
        let t = frac * tau;
        let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let pa = psi(alpha, rate, ModeSource::Sampled(&fa), t, tau).unwrap();
        let pb = psi(alpha, rate, ModeSource::Sampled(&fb), t, tau).unwrap();
        prop_assert!(pa.abs() <= sup(&a) / (lam * lam) * (1.0 + 1e-12));
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        prop_assert!((pa - pb).abs() <= sup(&diff) / (lam * lam) * (1.0 + 1e-9) + 1e-300);
    }

    #[test]
    fn constant_source_matches_sampled(alpha in 0.1f64..=1.0, c in -2.0f64..2.0, n in 1usize..32, frac in 0.0f64..=1.0) {
        let rate = decay_rates(&DOMAIN)[n - 1];
        let series = ModeSeries::new(vec![0.0, 0.3, 1.0], vec![c, c]).unwrap();
        let a = psi(alpha, rate, ModeSource::Constant(c), frac, 1.0).unwrap();
        let b = psi(alpha, rate, ModeSource::Sampled(&series), frac, 1.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
    }

    #[test]
    fn final_time_effective_data_is_t_of_g(p in 0.5f64..4.0, seed in any::<u64>(), c in 0.0f64..1.0) {
        let g = member(p, 1.0, 1.0, 0.55, seed);
        let f = TimeSource::constant((1..=256).map(|n| c / n as f64).collect(), 1.0).unwrap();
        let h = forward_solve(DOMAIN.clone(), 0.5, g.clone(), f.clone(), 1.0).unwrap().final_value().unwrap();
        let ups = effective_data(&DOMAIN, &h, &f, 0.5, 1.0, Provenance::Clean).unwrap();
        let tg = apply_t(&OP, &g).unwrap();
        prop_assert!(ups.upsilon.distance(&tg).unwrap() <= 1e-12 * (tg.norm() + f.sup_norm()));
    }

    #[test]
    fn backward_inverts_forward_operator(coeffs in prop::collection::vec(-1.0f64..1.0, 256)) {
        let g = SpectralField::new(coeffs).unwrap();
        let ups = EffectiveData::new(apply_t(&OP, &g).unwrap(), Provenance::Clean);
        let back = exact_backward(&OP, &ups).unwrap();
        prop_assert!(back.distance(&g).unwrap() <= 1e-12 * g.norm().max(1e-300));
    }

    #[test]
    fn phi_increasing_on_log_grid(p in 0.5f64..6.0, seed in any::<u64>(), q in 0u32..4, lo in -14.0f64..-4.0) {
        let g = member(p, 1.0, 1.0, 0.55, seed);
        let ups = EffectiveData::new(apply_t(&OP, &g).unwrap(), Provenance::Noisy);
        let mut prev = 0.0;
        for i in 0..100 {
            let beta = 10f64.powf(lo + 10.0 * i as f64 / 99.0);
            let phi = discrepancy_phi(&OP, &ups, q, beta).unwrap();
            prop_assert!(phi > prev, "Φ({beta:e}) = {phi:e} after {prev:e}");
            prev = phi;
        }
    }

    #[test]
    fn quasi_boundary_bias_bounds(p in 0.3f64..8.0, q in 0u32..4, log_beta in -10.0f64..-1.0, seed in any::<u64>(), rho in 0.1f64..10.0) {
        let beta = 10f64.powf(log_beta);
        let g = member(p, rho, 1.0, 0.55, seed);
        let ups = EffectiveData::new(apply_t(&OP, &g).unwrap(), Provenance::Clean);
        let u = qbvm_solve(&OP, &ups, QbvmConfig::new(q, beta).unwrap()).unwrap().g_rec;
        let err = u.distance(&g).unwrap();
        let qf = q as f64;
        let bound = if p < qf + 2.0 {
            CONSTS.c6(p, q).unwrap() * rho * beta.powf(p / (qf + 2.0))
        } else {
            CONSTS.c7(p, q).unwrap() * rho * beta
        };
        prop_assert!(err <= bound * (1.0 + 1e-9), "error {err:e} bound {bound:e}");
    }

    #[test]
    fn quasi_boundary_noise_stability(q in 0u32..4, log_beta in -10.0f64..0.0, coeffs in prop::collection::vec(-1.0f64..1.0, 64), delta in 1e-8f64..1e-2) {
        let beta = 10f64.powf(log_beta);
        let g = member(2.0, 1.0, 1.0, 0.55, 3);
        let clean = apply_t(&OP, &g).unwrap();
        let noisy = clean.add(&perturbation(&coeffs, SQRT_2 * delta)).unwrap();
        let cfg = QbvmConfig::new(q, beta).unwrap();
        let a = qbvm_solve(&OP, &EffectiveData::new(clean, Provenance::Clean), cfg).unwrap().g_rec;
        let b = qbvm_solve(&OP, &EffectiveData::new(noisy, Provenance::Noisy), cfg).unwrap().g_rec;
        let bound = if q == 0 {
            SQRT_2 * delta / beta
        } else {
            CONSTS.c5(q).unwrap() * delta / beta.powf(2.0 / (q as f64 + 2.0))
        };
        prop_assert!(a.distance(&b).unwrap() <= bound * (1.0 + 1e-9));
    }

    #[test]
    fn truncation_bias_and_noise_bounds(p in 0.3f64..6.0, n_cut in 1usize..256, seed in any::<u64>(), coeffs in prop::collection::vec(-1.0f64..1.0, 64), delta in 1e-8f64..1e-2) {
        let rho = 1.0;
        let g = member(p, rho, 1.0, 0.55, seed);
        let clean = apply_t(&OP, &g).unwrap();
        let noisy = clean.add(&perturbation(&coeffs, SQRT_2 * delta)).unwrap();
        let cfg = FtmConfig { n_cut };
        let gn = ftm_solve(&OP, &EffectiveData::new(clean, Provenance::Clean), cfg).unwrap().g_rec;
        let gdn = ftm_solve(&OP, &EffectiveData::new(noisy, Provenance::Noisy), cfg).unwrap().g_rec;
        let next = DOMAIN.eigenvalue(n_cut + 1);
        // the kept modes carry rounding from κ_n g_n / κ_n
        let rounding = 4.0 * f64::EPSILON * g.norm();
        prop_assert!(gn.distance(&g).unwrap() <= rho / next.powf(p) * (1.0 + 1e-9) + rounding);
        let lam_n = DOMAIN.eigenvalue(n_cut);
        prop_assert!(gn.distance(&gdn).unwrap() <= CONSTS.c18 * delta * lam_n * lam_n * (1.0 + 1e-9));
    }
}

#[test]
fn ml_bound_holds_off_the_calibration_grid() {
    let grid = GridSpec::calibration_default().validation_partner();
    for alpha in [0.3, 0.5, 0.8] {
        let c = calibrated_constants(alpha).unwrap();
        let mut failures = 0;
        for x in grid.values() {
            if !c.holds_at(x, 1e-9).unwrap() {
                failures += 1;
            }
        }
        assert_eq!(failures, 0, "alpha = {alpha}");
    }
}

#[test]
fn relaxation_increasing_on_dense_grid() {
    for alpha in [0.3, 0.5, 0.8, 1.0] {
        let order = MLOrder::new(alpha, 1.0).unwrap();
        let vals: Vec<f64> = (0..1000)
            .map(|i| ml_eval(order, -50.0 + 50.0 * i as f64 / 999.0, DEFAULT_REL_TOL).unwrap())
            .collect();
        assert!(vals.iter().all(|&v| v > 0.0));
        assert!(vals.windows(2).all(|w| w[1] > w[0]), "alpha = {alpha}");
    }
}

#[test]
fn theta_changes_within_tail_bound_on_refinement() {
    for (dim, n) in [(1usize, 64usize), (1, 256), (2, 128), (2, 512), (3, 256)] {
        let sides = vec![PI; dim];
        let coarse = build_domain(dim, &sides, n).unwrap();
        let fine = build_domain(dim, &sides, 2 * n).unwrap();
        let change = (fine.theta() - coarse.theta()).abs();
        assert!(
            change <= coarse.theta_tail_bound(),
            "d = {dim}, n = {n}: change {change:e} bound {:e}",
            coarse.theta_tail_bound()
        );
    }
}

#[test]
fn kappa_within_calibrated_envelope() {
    for (i, &k) in OP.kappas().iter().enumerate() {
        let l2 = DOMAIN.eigenvalue(i + 1).powi(2);
        assert!(k >= 1.0 / (CONSTS.c3 * l2), "mode {}", i + 1);
        assert!(k <= CONSTS.c20 / l2, "mode {}", i + 1);
    }
    let ratios: Vec<f64> = OP.kappas().iter().map(|k| 1.0 / k).collect();
    assert!(ratios.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn degenerate_parameters_recover_exact_backward() {
    let g = member(2.0, 1.0, 1.0, 0.55, 4);
    let ups = EffectiveData::new(apply_t(&OP, &g).unwrap(), Provenance::Clean);
    let exact = exact_backward(&OP, &ups).unwrap();
    let full = ftm_solve(&OP, &ups, FtmConfig { n_cut: 256 })
        .unwrap()
        .g_rec;
    assert_eq!(full, exact);
    let mut prev = f64::INFINITY;
    for beta in [1e-6, 1e-9, 1e-12, 1e-15] {
        let u = qbvm_solve(&OP, &ups, QbvmConfig::new(0, beta).unwrap())
            .unwrap()
            .g_rec;
        let d = u.distance(&exact).unwrap();
        assert!(d < prev);
        prev = d;
    }
    assert!(prev < 1e-8);
}
