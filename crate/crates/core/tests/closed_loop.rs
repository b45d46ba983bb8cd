use nalgebra::{DMatrix, DVector};

use qih_core::lyapunov::{StageWeights, TuningParams};
use qih_core::model::{two_state_benchmark_with, BoxSet, Discretization};
use qih_core::nmpc::{minimum_feasible_horizon, receding_horizon_run, solve_ocp, HorizonSearch, OCPProblem};
use qih_core::terminal::{ellipse_boundary, synthesize, TerminalIngredients, DEFAULT_GAMMA_MAX};
use qih_core::Error;

fn setup() -> (qih_core::model::DiscreteModel, StageWeights, BoxSet, TerminalIngredients) {
    let model = two_state_benchmark_with(0.1, 0.5, Discretization::default()).unwrap();
    let w = StageWeights::new(DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 0.5)).unwrap();
    let u = BoxSet::symmetric(1, 2.0).unwrap();
    let t = synthesize(&model, &w, &u, &TuningParams::arbitrary_controller(100.0, 100.0), DEFAULT_GAMMA_MAX).unwrap();
    (model, w, u, t)
}

#[test]
fn far_initial_state_is_infeasible_for_short_horizons() {
    let (model, w, u, t) = setup();
    let x0 = DVector::from_vec(vec![-30.0, 20.0]);
    let r = minimum_feasible_horizon(&model, &w, &t, &u, &x0, 5).unwrap();
    assert_eq!(r, HorizonSearch::InfeasibleUpTo(5));
    for n in 1..=5 {
        let p = OCPProblem::new(model.clone(), w.clone(), t.clone(), n, u.clone(), x0.clone()).unwrap();
        assert!(!solve_ocp(&p, None).unwrap().feasible);
    }
}

#[test]
fn closed_loop_from_region_boundary_is_monotone() {
    let (model, w, u, t) = setup();
    let x0 = ellipse_boundary(&t.penalty, t.alpha, 8).unwrap()[3].clone();
    let p = OCPProblem::new(model.clone(), w, t, 3, u, x0).unwrap();
    let tr = receding_horizon_run(&p, 60).unwrap();
    for k in 0..tr.steps() {
        let next = model.step(&tr.states[k], &tr.applied_inputs[k]);
        assert!((next - &tr.states[k + 1]).amax() <= 1e-12);
    }
    assert!(tr.terminal_value_decreasing());
    assert!(tr.worst_cost_decrease() <= 1e-5);
    assert!(tr.candidate_violations.iter().all(|v| *v <= 1e-8));
}

#[test]
fn infeasible_start_is_reported() {
    let (model, w, u, t) = setup();
    let p = OCPProblem::new(model, w, t, 2, u, DVector::from_vec(vec![-30.0, 20.0])).unwrap();
    assert!(matches!(receding_horizon_run(&p, 5), Err(Error::InfeasibleAtStart(_))));
}

#[test]
fn horizon_must_be_positive() {
    let (model, w, u, t) = setup();
    assert!(OCPProblem::new(model, w, t, 0, u, DVector::zeros(2)).is_err());
}
