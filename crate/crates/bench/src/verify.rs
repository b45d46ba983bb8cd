//! Property battery run by `qih-bench verify`.

use std::fmt::Write as _;

use rayon::prelude::*;

use qih_core::linalg::max_abs;
use qih_core::lyapunov::{lyapunov_residual, LYAPUNOV_TOL};
use qih_core::nmpc::{self, HorizonSearch, NlpOptions};
use qih_core::terminal::{self, TerminalIngredients};

use crate::config::RunConfig;
use crate::run::{base_problem, Setup};

pub const SLACK_TOL: f64 = 1e-8;
pub const CANDIDATE_TOL: f64 = 1e-8;
pub const COST_DECREASE_TOL: f64 = 1e-5;
pub const DOMINATION_REL_TOL: f64 = 1e-6;
pub const CONVERGENCE_NORM: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub subject: String,
    pub property: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let tag = if r.passed { "PASS" } else { "FAIL" };
            writeln!(out, "{tag} {:<10} {:<28} {}", r.subject, r.property, r.detail).unwrap();
        }
        let failed = self.failures().count();
        writeln!(out, "{} properties, {} failed", self.results.len(), failed).unwrap();
        out
    }
}

fn result(subject: &str, property: &str, passed: bool, detail: String) -> PropertyResult {
    PropertyResult { subject: subject.into(), property: property.into(), passed, detail }
}

/// Region-level properties: Lyapunov residual, decrease slack, invariance, domination.
pub fn region_properties(cfg: &RunConfig, setup: &Setup, label: &str, t: &TerminalIngredients) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let q = &t.q_star + &t.delta_q;
    let res = lyapunov_residual(&t.closed_loop, &t.penalty, &q) / max_abs(&q).max(1.0);
    out.push(result(label, "lyapunov_residual", res <= LYAPUNOV_TOL, format!("relative residual {res:.3e}")));

    let slack = t.pair().decrease_slack();
    out.push(result(
        label,
        "decrease_matrix_inequality",
        slack >= -SLACK_TOL,
        format!("min eig(P - PhiL'P PhiL - Q*) = {slack:.6e}"),
    ));

    let s = &cfg.sampling;
    match terminal::is_invariant_by_simulation(
        &setup.model,
        &t.pair(),
        &t.region(),
        &setup.inputs,
        s.invariance_samples,
        s.invariance_steps,
        cfg.seed,
    ) {
        Ok(c) => {
            let detail = match &c.counterexample {
                None => format!("{} trajectories x {} steps, no escape", s.invariance_samples, s.invariance_steps),
                Some(ce) => format!(
                    "escape from x0 = {:?} at step {}: {:?}",
                    ce.initial_state.as_slice(),
                    ce.step,
                    ce.reason
                ),
            };
            out.push(result(label, "invariance_by_simulation", c.invariant, detail));
        }
        Err(e) => out.push(result(label, "invariance_by_simulation", false, e.to_string())),
    }

    match terminal::infinite_horizon_domination(
        &setup.model,
        t,
        &setup.weights,
        s.domination_samples,
        s.domination_steps,
        cfg.seed,
        DOMINATION_REL_TOL,
    ) {
        Ok(d) => {
            let mut detail = format!("worst sum/bound = {:.6}", d.worst_ratio);
            if !d.passed {
                if let Some(z) = &d.worst_state {
                    write!(detail, " at z0 = {:?}", z.as_slice()).unwrap();
                }
            }
            out.push(result(label, "infinite_horizon_domination", d.passed, detail));
        }
        Err(e) => out.push(result(label, "infinite_horizon_domination", false, e.to_string())),
    }
    out
}

/// Closed-loop properties from each initial condition at its minimum horizon.
pub fn closed_loop_properties(cfg: &RunConfig, setup: &Setup, label: &str, t: &TerminalIngredients) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    for (i, x0) in cfg.initial_states().iter().enumerate() {
        let subject = format!("{label}/ic{i}");
        let base = match base_problem(setup, t, x0) {
            Ok(p) => p,
            Err(e) => {
                out.push(result(&subject, "closed_loop", false, e));
                continue;
            }
        };
        let n = match nmpc::minimum_feasible_horizon_for(&base, cfg.n_max, &NlpOptions::default()) {
            Ok(HorizonSearch::Feasible { horizon, .. }) => horizon,
            Ok(HorizonSearch::InfeasibleUpTo(n)) => {
                out.push(result(&subject, "closed_loop", false, format!("infeasible up to N_max = {n}")));
                continue;
            }
            Err(e) => {
                out.push(result(&subject, "closed_loop", false, e.to_string()));
                continue;
            }
        };
        let trace = match nmpc::receding_horizon_run(&base.with_horizon(n), cfg.closed_loop_steps) {
            Ok(tr) => tr,
            Err(e) => {
                out.push(result(&subject, "recursive_feasibility", false, format!("N = {n}: {e}")));
                continue;
            }
        };
        out.push(result(&subject, "recursive_feasibility", true, format!("N = {n}, {} steps", trace.steps())));
        let cand = trace.candidate_violations.iter().copied().fold(0.0, f64::max);
        out.push(result(&subject, "candidate_shift_feasibility", cand <= CANDIDATE_TOL, format!("max violation {cand:.3e}")));
        let dec = trace.worst_cost_decrease();
        out.push(result(
            &subject,
            "optimal_cost_decrease",
            !(dec > COST_DECREASE_TOL),
            format!("max J(k+1) - J(k) + l(k) = {dec:.3e}"),
        ));
        out.push(result(
            &subject,
            "terminal_value_decreasing",
            trace.terminal_value_decreasing(),
            format!("{} states inside the region", trace.lyapunov_values.iter().filter(|v| v.is_some()).count()),
        ));
        let hit = trace.states.iter().position(|x| x.norm() <= CONVERGENCE_NORM);
        out.push(result(
            &subject,
            "convergence",
            hit.is_some(),
            match hit {
                Some(k) => format!("|x| <= {CONVERGENCE_NORM:e} at step {k}"),
                None => format!("|x(end)| = {:.3e} after {} steps", trace.final_state().norm(), trace.steps()),
            },
        ));
    }
    out
}

/// Full battery for every configured approach, in parallel, reported in config order.
pub fn run_verify(cfg: &RunConfig, setup: &Setup) -> VerifyReport {
    let per_approach: Vec<Vec<PropertyResult>> = cfg
        .approaches
        .par_iter()
        .map(|a| {
            let params = match cfg.tuning(a) {
                Ok(p) => p,
                Err(e) => return vec![result(&a.label, "synthesis", false, e.to_string())],
            };
            match setup.synthesize(&params) {
                Err(e) => vec![result(&a.label, "synthesis", false, e)],
                Ok(t) => {
                    let mut v = vec![result(
                        &a.label,
                        "synthesis",
                        true,
                        format!("gamma = {:.6}, alpha = {:.6}", t.gamma, t.alpha),
                    )];
                    v.extend(region_properties(cfg, setup, &a.label, &t));
                    v.extend(closed_loop_properties(cfg, setup, &a.label, &t));
                    v
                }
            }
        })
        .collect();
    VerifyReport { results: per_approach.into_iter().flatten().collect() }
}
