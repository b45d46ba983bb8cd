//! Finite-horizon optimal control with a terminal ellipsoid, and the receding-horizon loop.
//!
//! The OCP is solved by single shooting: the inputs are the only unknowns and the
//! predicted states come from forward simulation. Gradients use the adjoint recursion,
//! Hessians are finite differences of the gradient. Input bounds are kept by projection;
//! the terminal constraint and the optional state box go through an augmented Lagrangian.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{positive_definite_part, quad_form, symmetrize};
use crate::lyapunov::StageWeights;
use crate::model::{BoxSet, DiscreteModel};
use crate::terminal::TerminalIngredients;

/// Constraint violation above which a solution is reported infeasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;
/// Stationarity plus complementarity level at which the solver stops.
pub const KKT_TOL: f64 = 1e-7;
/// Closed-loop runs stop once the state norm is this small.
pub const ORIGIN_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct OCPProblem {
    pub model: DiscreteModel,
    pub weights: StageWeights,
    pub terminal: TerminalIngredients,
    pub horizon: usize,
    pub input_set: BoxSet,
    pub state_set: Option<BoxSet>,
    pub x_init: DVector<f64>,
}

impl OCPProblem {
    pub fn new(
        model: DiscreteModel,
        weights: StageWeights,
        terminal: TerminalIngredients,
        horizon: usize,
        input_set: BoxSet,
        x_init: DVector<f64>,
    ) -> Result<Self> {
        let p = Self { model, weights, terminal, horizon, input_set, state_set: None, x_init };
        p.validate()?;
        Ok(p)
    }

    pub fn with_state_set(mut self, set: BoxSet) -> Result<Self> {
        self.state_set = Some(set);
        self.validate()?;
        Ok(self)
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self { horizon, ..self.clone() }
    }

    pub fn with_initial_state(&self, x: DVector<f64>) -> Self {
        Self { x_init: x, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.model.n_x(), self.model.n_u());
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if self.x_init.len() != n || self.input_set.dim() != m {
            return Err(Error::Dimension(format!(
                "model is {n}x{m}, x_init has {} entries, input box {}",
                self.x_init.len(),
                self.input_set.dim()
            )));
        }
        if self.weights.n_x() != n || self.weights.n_u() != m {
            return Err(Error::Dimension("stage weights do not match the model".into()));
        }
        if self.terminal.penalty.nrows() != n || self.terminal.gain.nrows() != m {
            return Err(Error::Dimension("terminal ingredients do not match the model".into()));
        }
        if let Some(s) = &self.state_set {
            if s.dim() != n {
                return Err(Error::Dimension("state box does not match the model".into()));
            }
        }
        if self.x_init.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("x_init must be finite".into()));
        }
        Ok(())
    }

    fn n_vars(&self) -> usize {
        self.horizon * self.model.n_u()
    }

    fn input(&self, w: &DVector<f64>, k: usize) -> DVector<f64> {
        let m = self.model.n_u();
        w.rows(k * m, m).into_owned()
    }

    /// Predicted states `z(0..=N)` under the stacked input vector `w`.
    pub fn rollout(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut z = Vec::with_capacity(self.horizon + 1);
        z.push(self.x_init.clone());
        for k in 0..self.horizon {
            let next = self.model.step(&z[k], &self.input(w, k));
            z.push(next);
        }
        z
    }

    pub fn cost(&self, w: &DVector<f64>, z: &[DVector<f64>]) -> f64 {
        let stage: f64 = (0..self.horizon)
            .map(|k| self.weights.stage_cost(&z[k], &self.input(w, k)))
            .sum();
        stage + quad_form(&self.terminal.penalty, &z[self.horizon])
    }

    /// Absolute violation of input box, state box and terminal constraint.
    pub fn violation(&self, w: &DVector<f64>, z: &[DVector<f64>]) -> f64 {
        let mut v = (0..self.horizon).fold(0.0_f64, |a, k| a.max(self.input_set.violation(&self.input(w, k))));
        if let Some(s) = &self.state_set {
            v = z[1..].iter().fold(v, |a, zk| a.max(s.violation(zk)));
        }
        v.max(quad_form(&self.terminal.penalty, &z[self.horizon]) - self.terminal.alpha)
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let m = self.model.n_u();
        let lb = DVector::from_fn(self.n_vars(), |i, _| self.input_set.lower()[i % m]);
        let ub = DVector::from_fn(self.n_vars(), |i, _| self.input_set.upper()[i % m]);
        (lb, ub)
    }

    /// `u_k = −L z_k`, clipped to the input box, closed over the horizon.
    pub fn local_controller_rollout(&self) -> DVector<f64> {
        let m = self.model.n_u();
        let mut w = DVector::zeros(self.n_vars());
        let mut x = self.x_init.clone();
        for k in 0..self.horizon {
            let u = self.input_set.project(&self.terminal.local_control(&x));
            w.rows_mut(k * m, m).copy_from(&u);
            x = self.model.step(&x, &u);
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OCPSolution {
    pub inputs: Vec<DVector<f64>>,
    pub predicted_states: Vec<DVector<f64>>,
    pub cost: f64,
    pub terminal_value: f64,
    pub feasible: bool,
    pub converged: bool,
    pub constraint_violation: f64,
    pub kkt_residual: f64,
}

impl OCPSolution {
    pub fn stacked_inputs(&self) -> DVector<f64> {
        let m = self.inputs.first().map_or(0, |u| u.len());
        DVector::from_iterator(self.inputs.len() * m, self.inputs.iter().flat_map(|u| u.iter().copied()))
    }

    /// The shifted sequence with `−L z(N)` appended.
    pub fn shifted_candidate(&self, terminal: &TerminalIngredients) -> Vec<DVector<f64>> {
        let mut c: Vec<DVector<f64>> = self.inputs[1..].to_vec();
        c.push(terminal.local_control(self.predicted_states.last().expect("non-empty rollout")));
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlpOptions {
    pub feasibility_tol: f64,
    pub kkt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self { feasibility_tol: FEASIBILITY_TOL, kkt_tol: KKT_TOL, max_outer: 40, max_inner: 200, initial_penalty: 10.0 }
    }
}

/// PHR term and its derivative for `g <= 0`.
fn phr(lambda: f64, mu: f64, g: f64) -> (f64, f64) {
    let s = (lambda + mu * g).max(0.0);
    ((s * s - lambda * lambda) / (2.0 * mu), s)
}

enum Merit<'a> {
    /// `V(z_N) + c Σ max(0, g_state)²`
    Phase1 { state_weight: f64 },
    Augmented { lam_t: f64, lam_s: &'a [f64], mu: f64 },
}

struct Shooting<'a> {
    p: &'a OCPProblem,
}

impl Shooting<'_> {
    /// Terms that depend only on `z_k`, `k >= 1`: value and gradient in `z_k`.
    fn state_terms(&self, merit: &Merit, k: usize, z: &DVector<f64>, grad: Option<&mut DVector<f64>>) -> f64 {
        let n = z.len();
        let mut val = 0.0;
        let mut gz = DVector::zeros(n);
        if let Some(s) = &self.p.state_set {
            for i in 0..n {
                for (side, g, sign) in [(0, z[i] - s.upper()[i], 1.0), (1, s.lower()[i] - z[i], -1.0)] {
                    let (v, d) = match merit {
                        Merit::Phase1 { state_weight } => {
                            let gp = g.max(0.0);
                            (state_weight * gp * gp, 2.0 * state_weight * gp)
                        }
                        Merit::Augmented { lam_s, mu, .. } => phr(lam_s[(k - 1) * 2 * n + 2 * i + side], *mu, g),
                    };
                    val += v;
                    gz[i] += sign * d;
                }
            }
        }
        if k == self.p.horizon {
            let pz = &self.p.terminal.penalty * z;
            let vz = z.dot(&pz);
            match merit {
                Merit::Phase1 { .. } => {
                    val += vz;
                    gz += &pz * 2.0;
                }
                Merit::Augmented { lam_t, mu, .. } => {
                    let (v, d) = phr(*lam_t, *mu, vz - self.p.terminal.alpha);
                    val += vz + v;
                    gz += &pz * (2.0 * (1.0 + d));
                }
            }
        }
        if let Some(g) = grad {
            *g += gz;
        }
        val
    }

    fn value(&self, merit: &Merit, w: &DVector<f64>) -> f64 {
        let p = self.p;
        let mut z = p.x_init.clone();
        let mut val = 0.0;
        for k in 0..p.horizon {
            let u = p.input(w, k);
            if matches!(merit, Merit::Augmented { .. }) {
                val += p.weights.stage_cost(&z, &u);
            }
            z = p.model.step(&z, &u);
            val += self.state_terms(merit, k + 1, &z, None);
        }
        val
    }

    fn value_grad(&self, merit: &Merit, w: &DVector<f64>) -> (f64, DVector<f64>) {
        let p = self.p;
        let (n_h, m) = (p.horizon, p.model.n_u());
        let z = p.rollout(w);
        let stage = matches!(merit, Merit::Augmented { .. });
        let mut val = 0.0;
        let mut grad = DVector::zeros(p.n_vars());
        let mut lam = DVector::zeros(p.model.n_x());
        val += self.state_terms(merit, n_h, &z[n_h], Some(&mut lam));
        for k in (0..n_h).rev() {
            let u = p.input(w, k);
            let (a, b) = p.model.jacobians(&z[k], &u);
            let mut gu = b.transpose() * &lam;
            let mut next = a.transpose() * &lam;
            if stage {
                val += p.weights.stage_cost(&z[k], &u);
                gu += &p.weights.wu * &u * 2.0;
                next += &p.weights.wx * &z[k] * 2.0;
            }
            if k >= 1 {
                val += self.state_terms(merit, k, &z[k], Some(&mut next));
            }
            grad.rows_mut(k * m, m).copy_from(&gu);
            lam = next;
        }
        (val, grad)
    }
}

struct InnerResult {
    w: DVector<f64>,
    stationarity: f64,
}

fn project(w: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(w.len(), |i, _| w[i].clamp(lb[i], ub[i]))
}

fn projected_gradient_norm(w: &DVector<f64>, g: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> f64 {
    (project(&(w - g), lb, ub) - w).amax()
}

/// Projected Newton for `min f` on a box, with an Armijo search along the projection arc.
/// Stops early once `f <= stop_below`.
fn projected_newton(
    value: &dyn Fn(&DVector<f64>) -> f64,
    value_grad: &dyn Fn(&DVector<f64>) -> (f64, DVector<f64>),
    w0: DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    stop_below: f64,
) -> Result<InnerResult> {
    let nv = w0.len();
    let mut w = project(&w0, lb, ub);
    let (mut f, mut g) = value_grad(&w);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp);
    }
    let mut stat = projected_gradient_norm(&w, &g, lb, ub);
    for _ in 0..max_iter {
        if stat <= tol || f <= stop_below {
            break;
        }
        let eps = stat.min(1e-3);
        let active: Vec<bool> = (0..nv)
            .map(|i| (w[i] <= lb[i] + eps && g[i] > 0.0) || (w[i] >= ub[i] - eps && g[i] < 0.0))
            .collect();

        let mut h = DMatrix::zeros(nv, nv);
        for j in 0..nv {
            let step = 1e-5 * w[j].abs().max(1.0);
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += step;
            wm[j] -= step;
            let col = (value_grad(&wp).1 - value_grad(&wm).1) / (2.0 * step);
            h.set_column(j, &col);
        }
        let h = symmetrize(&h);
        let free: Vec<usize> = (0..nv).filter(|&i| !active[i]).collect();
        let mut d = DVector::zeros(nv);
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let gf = DVector::from_fn(free.len(), |a, _| g[free[a]]);
            let hff = positive_definite_part(&hff, 1e-10);
            let df = hff
                .cholesky()
                .map(|c| -c.solve(&gf))
                .unwrap_or_else(|| -gf.clone());
            for (a, &i) in free.iter().enumerate() {
                d[i] = df[a];
            }
        }
        for i in (0..nv).filter(|&i| active[i]) {
            d[i] = -g[i] / h[(i, i)].abs().max(1e-8);
        }

        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let wt = project(&(&w + &d * t), lb, ub);
            let ft = value(&wt);
            if ft.is_finite() && ft <= f + 1e-4 * g.dot(&(&wt - &w)) {
                accepted = Some(wt);
                break;
            }
            t *= 0.5;
        }
        let Some(wt) = accepted else { break };
        let (ft, gt) = value_grad(&wt);
        if !ft.is_finite() {
            return Err(Error::BlowUp);
        }
        let progress = (f - ft).abs() <= 1e-16 * f.abs().max(1.0) && (&wt - &w).amax() <= 1e-15;
        w = wt;
        f = ft;
        g = gt;
        stat = projected_gradient_norm(&w, &g, lb, ub);
        if progress {
            break;
        }
    }
    Ok(InnerResult { w, stationarity: stat })
}

fn state_constraint_values(p: &OCPProblem, z: &[DVector<f64>]) -> Vec<f64> {
    let Some(s) = &p.state_set else { return Vec::new() };
    let mut out = Vec::with_capacity(2 * p.model.n_x() * p.horizon);
    for zk in &z[1..] {
        for i in 0..zk.len() {
            out.push(zk[i] - s.upper()[i]);
            out.push(s.lower()[i] - zk[i]);
        }
    }
    out
}

fn package(p: &OCPProblem, w: &DVector<f64>, kkt: f64, converged: bool, opts: &NlpOptions) -> OCPSolution {
    let z = p.rollout(w);
    let violation = p.violation(w, &z);
    OCPSolution {
        inputs: (0..p.horizon).map(|k| p.input(w, k)).collect(),
        cost: p.cost(w, &z),
        terminal_value: quad_form(&p.terminal.penalty, &z[p.horizon]),
        feasible: violation <= opts.feasibility_tol,
        converged,
        constraint_violation: violation,
        kkt_residual: kkt,
        predicted_states: z,
    }
}

/// Minimizes the terminal value over the input box from several starts.
/// Returns the first start that reaches the terminal set, or the best one found.
fn phase_one(p: &OCPProblem, starts: Vec<DVector<f64>>, opts: &NlpOptions) -> Result<(DVector<f64>, f64, f64)> {
    let sh = Shooting { p };
    let merit = Merit::Phase1 { state_weight: 1e4 };
    let (lb, ub) = p.bounds();
    let mut best: Option<(DVector<f64>, f64, f64)> = None;
    for w0 in starts {
        let r = projected_newton(
            &|w| sh.value(&merit, w),
            &|w| sh.value_grad(&merit, w),
            w0,
            &lb,
            &ub,
            1e-10,
            opts.max_inner,
            p.terminal.alpha * 0.999,
        )?;
        let violation = p.violation(&r.w, &p.rollout(&r.w));
        if violation <= opts.feasibility_tol {
            return Ok((r.w, violation, r.stationarity));
        }
        if best.as_ref().is_none_or(|b| violation < b.1) {
            best = Some((r.w, violation, r.stationarity));
        }
    }
    Ok(best.expect("at least one start"))
}

/// Local solution of the terminal-constrained OCP.
pub fn solve_ocp(problem: &OCPProblem, warm_start: Option<&[DVector<f64>]>) -> Result<OCPSolution> {
    solve_ocp_with(problem, warm_start, &NlpOptions::default())
}

pub fn solve_ocp_with(
    problem: &OCPProblem,
    warm_start: Option<&[DVector<f64>]>,
    opts: &NlpOptions,
) -> Result<OCPSolution> {
    problem.validate()?;
    let p = problem;
    let nv = p.n_vars();
    let (lb, ub) = p.bounds();
    let cold = DVector::zeros(nv);
    let w_start = match warm_start {
        Some(ws) => {
            if ws.len() != p.horizon || ws.iter().any(|u| u.len() != p.model.n_u()) {
                return Err(Error::Dimension(format!(
                    "warm start has {} moves, horizon is {}",
                    ws.len(),
                    p.horizon
                )));
            }
            project(&DVector::from_iterator(nv, ws.iter().flat_map(|u| u.iter().copied())), &lb, &ub)
        }
        None => cold.clone(),
    };

    let z0 = p.rollout(&w_start);
    if z0.iter().any(|z| z.iter().any(|v| !v.is_finite())) {
        return Err(Error::BlowUp);
    }
    let start_feasible = p.violation(&w_start, &z0) <= opts.feasibility_tol;
    let mut w = if start_feasible {
        w_start
    } else {
        let starts = vec![
            w_start.clone(),
            cold,
            p.local_controller_rollout(),
            lb.clone(),
            ub.clone(),
        ];
        let (w1, violation, stat) = phase_one(p, starts, opts)?;
        if violation > opts.feasibility_tol {
            return Ok(package(p, &w1, stat.max(violation), false, opts));
        }
        w1
    };
    let feasible_point = w.clone();

    let sh = Shooting { p };
    let mut lam_t = 0.0;
    let mut lam_s = vec![0.0; state_constraint_values(p, &z0).len()];
    let mut mu = opts.initial_penalty;
    let mut prev_violation = f64::INFINITY;
    let mut kkt = f64::INFINITY;
    let mut converged = false;
    for _ in 0..opts.max_outer {
        let merit = Merit::Augmented { lam_t, lam_s: &lam_s, mu };
        let r = projected_newton(
            &|x| sh.value(&merit, x),
            &|x| sh.value_grad(&merit, x),
            w,
            &lb,
            &ub,
            opts.kkt_tol,
            opts.max_inner,
            f64::NEG_INFINITY,
        )?;
        w = r.w;
        let z = p.rollout(&w);
        let g_t = quad_form(&p.terminal.penalty, &z[p.horizon]) - p.terminal.alpha;
        let g_s = state_constraint_values(p, &z);
        lam_t = (lam_t + mu * g_t).max(0.0);
        let mut violation = g_t.max(0.0);
        let mut compl = (lam_t * g_t).abs();
        for (l, g) in lam_s.iter_mut().zip(&g_s) {
            *l = (*l + mu * g).max(0.0);
            violation = violation.max(g.max(0.0));
            compl = compl.max((*l * g).abs());
        }
        kkt = r.stationarity.max(violation).max(compl);
        if kkt <= opts.kkt_tol {
            converged = true;
            break;
        }
        if violation > 0.25 * prev_violation {
            mu = (mu * 10.0).min(1e12);
        }
        prev_violation = violation;
    }
    let sol = package(p, &w, kkt, converged, opts);
    if !sol.feasible {
        // never hand back something worse than the phase-one point
        return Ok(package(p, &feasible_point, kkt, false, opts));
    }
    Ok(sol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub horizon: usize,
    pub states: Vec<DVector<f64>>,
    pub applied_inputs: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    /// `x(k)ᵀ P x(k)` while `x(k)` lies in the terminal region.
    pub lyapunov_values: Vec<Option<f64>>,
    pub ocp_costs: Vec<f64>,
    pub kkt_residuals: Vec<f64>,
    /// Violation of the shifted candidate `(u(1..N−1), −L z(N))` for the next problem.
    pub candidate_violations: Vec<f64>,
}

impl ClosedLoopTrace {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trace holds x(0)")
    }

    pub fn steps(&self) -> usize {
        self.applied_inputs.len()
    }

    /// Largest `J*(k+1) − J*(k) + ℓ(x(k), u(k))`; nonpositive up to solver accuracy.
    pub fn worst_cost_decrease(&self) -> f64 {
        (0..self.ocp_costs.len().saturating_sub(1))
            .map(|k| self.ocp_costs[k + 1] - self.ocp_costs[k] + self.stage_costs[k])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when `V` strictly drops at every step spent inside the region above the origin tolerance.
    pub fn terminal_value_decreasing(&self) -> bool {
        (0..self.lyapunov_values.len().saturating_sub(1)).all(|k| {
            match (self.lyapunov_values[k], self.lyapunov_values[k + 1]) {
                (Some(a), Some(b)) if self.states[k].norm() > ORIGIN_TOL => b < a,
                (Some(_), None) => false,
                _ => true,
            }
        })
    }

    pub fn write_csv<W: Write>(&self, out: &mut W, penalty: &DMatrix<f64>) -> io::Result<()> {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.applied_inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|j| format!("u{j}")));
        header.push("stage_cost".into());
        header.push("V".into());
        writeln!(out, "{}", header.join(","))?;
        for (k, x) in self.states.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(x.iter().map(|v| format!("{v:.12e}")));
            match self.applied_inputs.get(k) {
                Some(u) => {
                    row.extend(u.iter().map(|v| format!("{v:.12e}")));
                    row.push(format!("{:.12e}", self.stage_costs[k]));
                }
                None => row.extend(std::iter::repeat_n(String::new(), m + 1)),
            }
            row.push(format!("{:.12e}", quad_form(penalty, x)));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Runs the nominal closed loop for up to `t_steps` moves.
pub fn receding_horizon_run(problem: &OCPProblem, t_steps: usize) -> Result<ClosedLoopTrace> {
    receding_horizon_run_with(problem, t_steps, None, &NlpOptions::default())
}

pub fn receding_horizon_run_with(
    problem: &OCPProblem,
    t_steps: usize,
    warm_start: Option<&[DVector<f64>]>,
    opts: &NlpOptions,
) -> Result<ClosedLoopTrace> {
    problem.validate()?;
    let term = &problem.terminal;
    let in_region = |x: &DVector<f64>| {
        let v = quad_form(&term.penalty, x);
        (v <= term.alpha).then_some(v)
    };
    let mut x = problem.x_init.clone();
    let mut trace = ClosedLoopTrace {
        horizon: problem.horizon,
        states: vec![x.clone()],
        applied_inputs: Vec::new(),
        stage_costs: Vec::new(),
        lyapunov_values: vec![in_region(&x)],
        ocp_costs: Vec::new(),
        kkt_residuals: Vec::new(),
        candidate_violations: Vec::new(),
    };
    let mut warm: Option<Vec<DVector<f64>>> = warm_start.map(|w| w.to_vec());
    for k in 0..t_steps {
        if x.norm() <= ORIGIN_TOL {
            break;
        }
        let p = problem.with_initial_state(x.clone());
        let sol = solve_ocp_with(&p, warm.as_deref(), opts)?;
        if !sol.feasible {
            return Err(if k == 0 {
                Error::InfeasibleAtStart(sol.constraint_violation)
            } else {
                Error::RecursiveFeasibilityViolated { step: k, violation: sol.constraint_violation }
            });
        }
        let u = sol.inputs[0].clone();
        trace.stage_costs.push(problem.weights.stage_cost(&x, &u));
        trace.ocp_costs.push(sol.cost);
        trace.kkt_residuals.push(sol.kkt_residual);
        x = problem.model.step(&x, &u);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrajectoryDiverged { step: k + 1 });
        }
        let candidate = sol.shifted_candidate(term);
        let next = problem.with_initial_state(x.clone());
        let wc = DVector::from_iterator(next.n_vars(), candidate.iter().flat_map(|u| u.iter().copied()));
        trace.candidate_violations.push(next.violation(&wc, &next.rollout(&wc)));
        trace.applied_inputs.push(u);
        trace.states.push(x.clone());
        trace.lyapunov_values.push(in_region(&x));
        warm = Some(candidate);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub enum HorizonSearch {
    Feasible { horizon: usize, solution: OCPSolution },
    InfeasibleUpTo(usize),
}

impl HorizonSearch {
    pub fn horizon(&self) -> Option<usize> {
        match self {
            Self::Feasible { horizon, .. } => Some(*horizon),
            Self::InfeasibleUpTo(_) => None,
        }
    }
}

/// Smallest `N <= n_max` whose OCP from `x0` is feasible, by ascending scan. Each `N`
/// is warm-started from the previous best iterate with `−L z(N)` appended.
pub fn minimum_feasible_horizon(
    model: &DiscreteModel,
    weights: &StageWeights,
    terminal: &TerminalIngredients,
    input_set: &BoxSet,
    x0: &DVector<f64>,
    n_max: usize,
) -> Result<HorizonSearch> {
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be >= 1".into()));
    }
    let base = OCPProblem::new(model.clone(), weights.clone(), terminal.clone(), 1, input_set.clone(), x0.clone())?;
    minimum_feasible_horizon_for(&base, n_max, &NlpOptions::default())
}

/// As [`minimum_feasible_horizon`], keeping the state box and options of `base`.
pub fn minimum_feasible_horizon_for(base: &OCPProblem, n_max: usize, opts: &NlpOptions) -> Result<HorizonSearch> {
    let mut warm: Option<Vec<DVector<f64>>> = None;
    for n in 1..=n_max {
        let p = base.with_horizon(n);
        let sol = solve_ocp_with(&p, warm.as_deref(), opts)?;
        if sol.feasible {
            return Ok(HorizonSearch::Feasible { horizon: n, solution: sol });
        }
        let mut next = sol.inputs.clone();
        next.push(base.input_set.project(&base.terminal.local_control(sol.predicted_states.last().unwrap())));
        warm = Some(next);
    }
    Ok(HorizonSearch::InfeasibleUpTo(n_max))
}
