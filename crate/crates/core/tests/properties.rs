use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qih_core::linalg::{max_abs, min_eigenvalue, quad_form, spectral_radius};
use qih_core::lyapunov::{
    lqr_gain, lyapunov_residual, penalty_arbitrary_controller, penalty_yu, solve_discrete_lyapunov, synthesize_pair,
    StageWeights, TuningParams,
};
use qih_core::model::{linearize, two_state_benchmark_with, BoxSet, DiscreteModel, Discretization, Linearization};
use qih_core::terminal::{compute_gamma, ellipsoid_map, nonlinearity_residual_chi, region_area, search_alpha};

fn benchmark() -> DiscreteModel {
    two_state_benchmark_with(0.1, 0.5, Discretization::default()).unwrap()
}

fn weights() -> StageWeights {
    StageWeights::new(DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 0.5)).unwrap()
}

fn lin() -> Linearization {
    linearize(&benchmark()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_jacobians_match_finite_differences(x1 in -3.0..3.0f64, x2 in -3.0..3.0f64, u in -2.0..2.0f64) {
        for disc in [Discretization::Euler, Discretization::Rk4 { substeps: 10 }] {
            let m = two_state_benchmark_with(0.1, 0.5, disc).unwrap();
            let x = DVector::from_vec(vec![x1, x2]);
            let u = DVector::from_element(1, u);
            let (a, b) = m.jacobians(&x, &u);
            let (fa, fb) = m.finite_difference_jacobians(&x, &u);
            prop_assert!(max_abs(&(a - fa)) <= 1e-6);
            prop_assert!(max_abs(&(b - fb)) <= 1e-6);
        }
    }

    #[test]
    fn lyapunov_solution_has_small_residual(seed in 0u64..1000, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let r = spectral_radius(&a);
        if r > 0.0 {
            a *= 0.95 / r.max(0.95);
        }
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = &g * g.transpose() + DMatrix::identity(n, n);
        let p = solve_discrete_lyapunov(&a, &q).unwrap();
        prop_assert!(lyapunov_residual(&a, &p, &q) <= 1e-10 * max_abs(&q).max(1.0));
        prop_assert!(min_eigenvalue(&p) > 0.0);
    }

    #[test]
    fn arbitrary_controller_penalty_is_monotone(r1 in 0.1..200.0f64, dr in 0.0..100.0f64, ru in 0.0..100.0f64) {
        let lin = lin();
        let w = weights();
        let l = lqr_gain(&lin, &w).unwrap().gain;
        let p1 = penalty_arbitrary_controller(&lin, &w, &l, r1, ru).unwrap().penalty;
        let p2 = penalty_arbitrary_controller(&lin, &w, &l, r1 + dr, ru + dr).unwrap().penalty;
        prop_assert!(min_eigenvalue(&(p2 - p1)) >= -1e-8);
    }

    #[test]
    fn chi_is_the_lyapunov_decrease_defect(x1 in -0.5..0.5f64, x2 in -0.5..0.5f64, rho in 0.5..100.0f64) {
        // V(x⁺) − V(x) = −xᵀ Q* x − χ(x)
        let model = benchmark();
        let lin = lin();
        let w = weights();
        let l = lqr_gain(&lin, &w).unwrap().gain;
        let pair = penalty_arbitrary_controller(&lin, &w, &l, rho, rho).unwrap();
        let x = DVector::from_vec(vec![x1, x2]);
        let next = model.step(&x, &(-(&pair.gain * &x)));
        let lhs = quad_form(&pair.penalty, &next) - quad_form(&pair.penalty, &x);
        let rhs = -quad_form(&pair.q_star, &x) - nonlinearity_residual_chi(&model, &pair, &pair.delta_q, &x);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * quad_form(&pair.penalty, &x).max(1.0));
    }
}

#[test]
fn yu_penalty_tends_to_plain_lyapunov_as_kappa_tends_to_one() {
    let lin = lin();
    let w = weights();
    let l = lqr_gain(&lin, &w).unwrap().gain;
    let phi_l = &lin.phi - &lin.gamma * &l;
    let q_star = &w.wx + l.transpose() * &w.wu * &l;
    let p0 = solve_discrete_lyapunov(&phi_l, &q_star).unwrap();
    let mut prev = f64::INFINITY;
    for k in [1e-2, 1e-3, 1e-4, 1e-6] {
        let p = penalty_yu(&lin, &w, &l, 1.0 + k).unwrap().penalty;
        let err = max_abs(&(p - &p0)) / max_abs(&p0);
        assert!(err < prev);
        prev = err;
    }
    assert!(prev < 1e-4);
}

#[test]
fn yu_kappa_above_spectral_bound_is_rejected() {
    let lin = lin();
    let w = weights();
    let l = lqr_gain(&lin, &w).unwrap().gain;
    let err = penalty_yu(&lin, &w, &l, 1.2).unwrap_err();
    assert!(err.to_string().contains("kappa violates spectral bound"), "{err}");
}

#[test]
fn gamma_ellipsoid_is_tangent_to_the_input_bound() {
    let lin = lin();
    let w = weights();
    let pair = synthesize_pair(&lin, &w, &TuningParams::arbitrary_controller(100.0, 100.0)).unwrap();
    let u = BoxSet::symmetric(1, 2.0).unwrap();
    let gamma = compute_gamma(&pair.gain, &pair.penalty, &u).unwrap();
    // maximizer of L x on {xᵀPx = γ} is x* = sqrt(γ / (L P⁻¹ Lᵀ)) P⁻¹ Lᵀ
    let pinv = pair.penalty.clone().try_inverse().unwrap();
    let lt = pair.gain.transpose();
    let s = (pair.gain.clone() * &pinv * &lt)[(0, 0)];
    let x_star: DVector<f64> = (&pinv * &lt).column(0) * (gamma / s).sqrt();
    assert!((quad_form(&pair.penalty, &x_star) - gamma).abs() <= 1e-9 * gamma);
    assert!(((&pair.gain * &x_star)[0] - 2.0).abs() <= 1e-9);
    // and nothing else on the boundary exceeds the bound
    let map = ellipsoid_map(&pair.penalty).unwrap() * gamma.sqrt();
    for k in 0..720 {
        let th = k as f64 * std::f64::consts::TAU / 720.0;
        let x = &map * DVector::from_vec(vec![th.cos(), th.sin()]);
        assert!((&pair.gain * x)[0].abs() <= 2.0 + 1e-9);
    }
}

#[test]
fn area_matches_monte_carlo() {
    let p = DMatrix::from_row_slice(2, 2, &[1524.9, 967.7, 967.7, 1524.9]);
    let alpha = 94.4;
    let area = region_area(&p, alpha).unwrap();
    let map = ellipsoid_map(&p).unwrap() * alpha.sqrt();
    let half = (0..2).map(|i| map.row(i).norm()).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 400_000;
    let mut hits = 0usize;
    for _ in 0..n {
        let x = DVector::from_vec(vec![rng.random_range(-half[0]..half[0]), rng.random_range(-half[1]..half[1])]);
        if quad_form(&p, &x) <= alpha {
            hits += 1;
        }
    }
    let mc = hits as f64 / n as f64 * 4.0 * half[0] * half[1];
    assert!((mc - area).abs() <= 0.01 * area, "{mc} vs {area}");
}

#[test]
fn denser_sampling_never_certifies_more() {
    let model = benchmark();
    let lin = lin();
    let w = weights();
    let mut params = TuningParams::arbitrary_controller(20.0, 0.0);
    let pair = synthesize_pair(&lin, &w, &params).unwrap();
    let gamma = compute_gamma(&pair.gain, &pair.penalty, &BoxSet::symmetric(1, 2.0).unwrap()).unwrap();
    let mut prev = f64::INFINITY;
    for samples in [90, 360, 1440, 3600 * 2] {
        params.boundary_samples = samples;
        let alpha = search_alpha(&model, &pair, &pair.delta_q, gamma, &params).unwrap().alpha;
        assert!(alpha <= prev * (1.0 + 1e-12));
        prev = alpha;
    }
}

#[test]
fn certified_region_satisfies_the_decrease_condition_on_fresh_points() {
    let model = benchmark();
    let lin = lin();
    let w = weights();
    let params = TuningParams::arbitrary_controller(100.0, 100.0);
    let pair = synthesize_pair(&lin, &w, &params).unwrap();
    let gamma = compute_gamma(&pair.gain, &pair.penalty, &BoxSet::symmetric(1, 2.0).unwrap()).unwrap();
    let t = search_alpha(&model, &pair, &pair.delta_q, gamma, &params).unwrap();
    let map = ellipsoid_map(&t.penalty).unwrap() * t.alpha.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..2000 {
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r: f64 = rng.random::<f64>().sqrt();
        let x = &map * DVector::from_vec(vec![r * th.cos(), r * th.sin()]);
        let next = model.step(&x, &t.local_control(&x));
        let dv = quad_form(&t.penalty, &next) - quad_form(&t.penalty, &x);
        // off-grid points may dip slightly below zero; allow a small fraction of ℓ
        assert!(dv <= -0.9 * quad_form(&t.q_star, &x) + 1e-12, "at {x:?}: {dv}");
    }
}
