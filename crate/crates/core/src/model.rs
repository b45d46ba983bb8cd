//! Discrete-time nonlinear models, box sets and Jacobian linearization.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type DynamicsFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
pub type JacobianFn =
    dyn Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync;

/// Tolerance on `|F(0,0)|` accepted at construction.
pub const EQUILIBRIUM_TOL: f64 = 1e-12;

/// Relative central-difference step, scaled by `max(1, |coordinate|)`.
pub const FD_STEP: f64 = 1e-6;

/// A map `x(k+1) = F(x(k), u(k))` with the origin as equilibrium.
///
/// Immutable once built; cloning shares the underlying closures.
#[derive(Clone)]
pub struct DiscreteModel {
    name: String,
    n_x: usize,
    n_u: usize,
    dynamics: Arc<DynamicsFn>,
    jacobians: Option<Arc<JacobianFn>>,
}

impl fmt::Debug for DiscreteModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteModel")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .field("analytic_jacobians", &self.jacobians.is_some())
            .finish()
    }
}

impl DiscreteModel {
    pub fn new<F>(name: impl Into<String>, n_x: usize, n_u: usize, dynamics: F) -> Result<Self>
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if n_x == 0 || n_u == 0 {
            return Err(Error::InvalidArgument(
                "state and input dimensions must be positive".into(),
            ));
        }
        let model = Self {
            name: name.into(),
            n_x,
            n_u,
            dynamics: Arc::new(dynamics),
            jacobians: None,
        };
        let origin = model.step(&DVector::zeros(n_x), &DVector::zeros(n_u));
        if origin.len() != n_x {
            return Err(Error::Dimension(format!(
                "dynamics returned {} entries, expected {n_x}",
                origin.len()
            )));
        }
        let norm = origin.norm();
        if !(norm <= EQUILIBRIUM_TOL) {
            return Err(Error::NotAnEquilibrium(norm));
        }
        Ok(model)
    }

    pub fn with_jacobians<J>(mut self, jacobians: J) -> Self
    where
        J: Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync + 'static,
    {
        self.jacobians = Some(Arc::new(jacobians));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jacobians.is_some()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.dynamics)(x, u)
    }

    /// `(∂F/∂x, ∂F/∂u)` at `(x, u)`: analytic when supplied, central differences otherwise.
    pub fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        match &self.jacobians {
            Some(j) => j(x, u),
            None => self.finite_difference_jacobians(x, u),
        }
    }

    pub fn finite_difference_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut jx = DMatrix::zeros(self.n_x, self.n_x);
        let mut ju = DMatrix::zeros(self.n_x, self.n_u);
        for i in 0..self.n_x {
            let h = FD_STEP * x[i].abs().max(1.0);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let d = (self.step(&xp, u) - self.step(&xm, u)) / (2.0 * h);
            jx.set_column(i, &d);
        }
        for i in 0..self.n_u {
            let h = FD_STEP * u[i].abs().max(1.0);
            let (mut up, mut um) = (u.clone(), u.clone());
            up[i] += h;
            um[i] -= h;
            let d = (self.step(x, &up) - self.step(x, &um)) / (2.0 * h);
            ju.set_column(i, &d);
        }
        (jx, ju)
    }
}

/// Axis-aligned box `{v : lower <= v <= upper}` with the origin strictly inside.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Dimension(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..lower.len() {
            if !(lower[i] < 0.0 && 0.0 < upper[i]) {
                return Err(Error::InvalidArgument(format!(
                    "origin must be strictly inside the box: coordinate {i} has [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(dim: usize, bound: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, -bound), DVector::from_element(dim, bound))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Distance from the origin to the nearer face in coordinate `j`.
    pub fn half_width(&self, j: usize) -> f64 {
        self.lower[j].abs().min(self.upper[j])
    }

    /// Largest per-coordinate amount by which `v` leaves the box (0 inside).
    pub fn violation(&self, v: &DVector<f64>) -> f64 {
        (0..self.dim()).fold(0.0_f64, |acc, i| {
            acc.max(self.lower[i] - v[i]).max(v[i] - self.upper[i])
        })
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.violation(v) <= tol
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| v[i].clamp(self.lower[i], self.upper[i])),
        )
    }
}

/// Jacobian pair `(Φ, Γ)` at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

impl Linearization {
    pub fn new(phi: DMatrix<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() != phi.ncols() || gamma.nrows() != phi.nrows() || gamma.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "Φ is {}x{}, Γ is {}x{}",
                phi.nrows(),
                phi.ncols(),
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        Ok(Self { phi, gamma })
    }

    pub fn n_x(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.gamma.ncols()
    }
}

pub fn linearize(model: &DiscreteModel) -> Result<Linearization> {
    let x0 = DVector::zeros(model.n_x());
    let u0 = DVector::zeros(model.n_u());
    let (phi, gamma) = model.jacobians(&x0, &u0);
    if phi.nrows() != model.n_x()
        || phi.ncols() != model.n_x()
        || gamma.nrows() != model.n_x()
        || gamma.ncols() != model.n_u()
    {
        return Err(Error::Dimension("Jacobian shapes do not match the model".into()));
    }
    if phi.iter().chain(gamma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NotDifferentiable);
    }
    Linearization::new(phi, gamma)
}

/// `F(x, u) = A x + B u`.
pub fn linear_model(name: impl Into<String>, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<DiscreteModel> {
    let lin = Linearization::new(a, b)?;
    let (n_x, n_u) = (lin.n_x(), lin.n_u());
    let (a1, b1) = (lin.phi.clone(), lin.gamma.clone());
    Ok(
        DiscreteModel::new(name, n_x, n_u, move |x, u| &a1 * x + &b1 * u)?
            .with_jacobians(move |_, _| (lin.phi.clone(), lin.gamma.clone())),
    )
}

pub fn simulate_open_loop(
    model: &DiscreteModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("input sequence must not be empty".into()));
    }
    if x0.len() != model.n_x() {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, model has {}",
            x0.len(),
            model.n_x()
        )));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for (k, u) in inputs.iter().enumerate() {
        if u.len() != model.n_u() {
            return Err(Error::Dimension(format!("input {k} has {} entries", u.len())));
        }
        let next = model.step(&states[k], u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrajectoryDiverged { step: k + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

/// How the continuous two-state benchmark is turned into a discrete map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discretization {
    /// One forward-Euler step of length `T`.
    Euler,
    /// Classical RK4 over `T` split into `substeps`, input held constant (zero-order hold).
    /// Its linearization matches the matrix exponential of the continuous Jacobian.
    Rk4 { substeps: usize },
}

impl Default for Discretization {
    fn default() -> Self {
        Discretization::Rk4 { substeps: 10 }
    }
}

/// Parameters selecting and configuring a registered model.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkParams {
    pub sampling_time: f64,
    pub mu0: f64,
    pub discretization: Discretization,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self { sampling_time: 0.1, mu0: 0.5, discretization: Discretization::default() }
    }
}

pub const REGISTERED_MODELS: &[&str] = &["two_state"];

pub fn model_by_name(name: &str, params: &BenchmarkParams) -> Result<DiscreteModel> {
    match name {
        "two_state" => {
            two_state_benchmark_with(params.sampling_time, params.mu0, params.discretization)
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

/// Euler-discretized two-state benchmark, exactly as the difference equations are written:
///
/// ```text
/// x1+ = x1 + T (x2 + u (mu0 + (1 - mu0) x1))
/// x2+ = x2 + T (x1 + u (mu0 - 4 (1 - mu0) x2))
/// ```
pub fn two_state_benchmark(sampling_time: f64, mu0: f64) -> Result<DiscreteModel> {
    two_state_benchmark_with(sampling_time, mu0, Discretization::Euler)
}

pub fn two_state_benchmark_with(
    sampling_time: f64,
    mu0: f64,
    discretization: Discretization,
) -> Result<DiscreteModel> {
    if !(sampling_time > 0.0) || !sampling_time.is_finite() {
        return Err(Error::InvalidArgument(format!("T must be positive, got {sampling_time}")));
    }
    if !(mu0 > 0.0 && mu0 < 1.0) {
        return Err(Error::InvalidArgument(format!("mu0 must lie in (0, 1), got {mu0}")));
    }
    let field = TwoStateField { mu0 };
    let t = sampling_time;
    match discretization {
        Discretization::Euler => {
            let name = format!("two_state(T={t}, mu0={mu0}, euler)");
            Ok(DiscreteModel::new(name, 2, 1, move |x, u| x + field.rate(x, u[0]) * t)?
                .with_jacobians(move |x, u| {
                    let (fx, fu) = field.jacobians(x, u[0]);
                    (DMatrix::identity(2, 2) + fx * t, fu * t)
                }))
        }
        Discretization::Rk4 { substeps } => {
            if substeps == 0 {
                return Err(Error::InvalidArgument("RK4 needs at least one substep".into()));
            }
            let name = format!("two_state(T={t}, mu0={mu0}, rk4x{substeps})");
            Ok(DiscreteModel::new(name, 2, 1, move |x, u| {
                rk4_zoh(&field, x, u[0], t, substeps, false).0
            })?
            .with_jacobians(move |x, u| {
                let (_, sens) = rk4_zoh(&field, x, u[0], t, substeps, true);
                sens.expect("sensitivities requested")
            }))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TwoStateField {
    mu0: f64,
}

impl TwoStateField {
    fn rate(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        let m = self.mu0;
        DVector::from_vec(vec![
            x[1] + u * (m + (1.0 - m) * x[0]),
            x[0] + u * (m - 4.0 * (1.0 - m) * x[1]),
        ])
    }

    fn jacobians(&self, x: &DVector<f64>, u: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.mu0;
        let fx = DMatrix::from_row_slice(2, 2, &[u * (1.0 - m), 1.0, 1.0, -4.0 * (1.0 - m) * u]);
        let fu = DMatrix::from_column_slice(
            2,
            1,
            &[m + (1.0 - m) * x[0], m - 4.0 * (1.0 - m) * x[1]],
        );
        (fx, fu)
    }
}

type Sensitivities = (DMatrix<f64>, DMatrix<f64>);

/// RK4 with constant input; optionally carries the forward sensitivities
/// `∂x(T)/∂x(0)` and `∂x(T)/∂u` through every stage.
fn rk4_zoh(
    field: &TwoStateField,
    x0: &DVector<f64>,
    u: f64,
    t: f64,
    substeps: usize,
    with_sens: bool,
) -> (DVector<f64>, Option<Sensitivities>) {
    let h = t / substeps as f64;
    let mut y = x0.clone();
    let mut sx = DMatrix::<f64>::identity(2, 2);
    let mut su = DMatrix::<f64>::zeros(2, 1);
    for _ in 0..substeps {
        let k1 = field.rate(&y, u);
        let y2 = &y + &k1 * (0.5 * h);
        let k2 = field.rate(&y2, u);
        let y3 = &y + &k2 * (0.5 * h);
        let k3 = field.rate(&y3, u);
        let y4 = &y + &k3 * h;
        let k4 = field.rate(&y4, u);
        if with_sens {
            let stage = |yy: &DVector<f64>, ax: &DMatrix<f64>, au: &DMatrix<f64>| {
                let (fx, fu) = field.jacobians(yy, u);
                (&fx * ax, &fx * au + fu)
            };
            let (k1x, k1u) = stage(&y, &sx, &su);
            let (k2x, k2u) = stage(&y2, &(&sx + &k1x * (0.5 * h)), &(&su + &k1u * (0.5 * h)));
            let (k3x, k3u) = stage(&y3, &(&sx + &k2x * (0.5 * h)), &(&su + &k2u * (0.5 * h)));
            let (k4x, k4u) = stage(&y4, &(&sx + &k3x * h), &(&su + &k3u * h));
            sx += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
            su += (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (h / 6.0);
        }
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    (y, with_sens.then_some((sx, su)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn benchmark_steps_match_hand_substitution() {
        let m = two_state_benchmark(0.1, 0.5).unwrap();
        assert_eq!(m.step(&v(&[0.0, 0.0]), &v(&[0.0])), v(&[0.0, 0.0]));
        let a = m.step(&v(&[1.0, 1.0]), &v(&[0.0]));
        assert_abs_diff_eq!(a, v(&[1.1, 1.1]), epsilon = 1e-15);
        let b = m.step(&v(&[-3.0, 2.0]), &v(&[0.0]));
        assert_abs_diff_eq!(b, v(&[-2.8, 1.7]), epsilon = 1e-15);
    }

    #[test]
    fn benchmark_with_input_uses_state_dependent_gain() {
        // x1+ = 1 + 0.1 (2 + 1 (0.5 + 0.5)) = 1.3 ; x2+ = 2 + 0.1 (1 + 1 (0.5 - 4)) = 1.75
        let m = two_state_benchmark(0.1, 0.5).unwrap();
        let n = m.step(&v(&[1.0, 2.0]), &v(&[1.0]));
        assert_abs_diff_eq!(n, v(&[1.3, 1.75]), epsilon = 1e-14);
    }

    #[test]
    fn euler_linearization_by_hand() {
        let lin = linearize(&two_state_benchmark(0.1, 0.5).unwrap()).unwrap();
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]);
        let gamma = DMatrix::from_column_slice(2, 1, &[0.05, 0.05]);
        assert_abs_diff_eq!(lin.phi, phi, epsilon = 1e-15);
        assert_abs_diff_eq!(lin.gamma, gamma, epsilon = 1e-15);
    }

    #[test]
    fn rk4_linearization_matches_matrix_exponential() {
        // A = [[0,1],[1,0]], B = [0.5, 0.5]: exp(AT) = [[cosh T, sinh T],[sinh T, cosh T]],
        // and since B is an eigenvector of A with eigenvalue 1, Γ = (e^T - 1) B.
        let t = 0.1_f64;
        let lin = linearize(&two_state_benchmark_with(t, 0.5, Discretization::default()).unwrap())
            .unwrap();
        let phi = DMatrix::from_row_slice(2, 2, &[t.cosh(), t.sinh(), t.sinh(), t.cosh()]);
        let g = 0.5 * (t.exp() - 1.0);
        assert_abs_diff_eq!(lin.phi, phi, epsilon = 1e-10);
        assert_abs_diff_eq!(lin.gamma, DMatrix::from_column_slice(2, 1, &[g, g]), epsilon = 1e-10);
    }

    #[test]
    fn linear_model_linearizes_to_itself() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.2, -0.1, 0.7]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let lin = linearize(&linear_model("lin", a.clone(), b.clone()).unwrap()).unwrap();
        assert_eq!(lin.phi, a);
        assert_eq!(lin.gamma, b);
    }

    #[test]
    fn finite_differences_used_without_analytic_jacobians() {
        let m = DiscreteModel::new("fd", 2, 1, |x, u| {
            v(&[x[0] + 0.1 * x[1] + 0.05 * u[0] * (1.0 + x[0]), 0.9 * x[1] + x[0] * x[0]])
        })
        .unwrap();
        let lin = linearize(&m).unwrap();
        assert_abs_diff_eq!(
            lin.phi,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(lin.gamma, DMatrix::from_column_slice(2, 1, &[0.05, 0.0]), epsilon = 1e-9);
    }

    #[test]
    fn non_finite_jacobian_is_rejected() {
        let m = DiscreteModel::new("kink", 1, 1, |x, u| v(&[x[0] + u[0]]))
            .unwrap()
            .with_jacobians(|_, _| (DMatrix::from_element(1, 1, f64::NAN), DMatrix::identity(1, 1)));
        assert_eq!(linearize(&m), Err(Error::NotDifferentiable));
    }

    #[test]
    fn model_without_equilibrium_is_rejected() {
        let err = DiscreteModel::new("shifted", 1, 1, |x, _| v(&[x[0] + 1.0])).unwrap_err();
        assert!(matches!(err, Error::NotAnEquilibrium(_)));
    }

    #[test]
    fn open_loop_simulation() {
        let m = two_state_benchmark(0.1, 0.5).unwrap();
        let xs = simulate_open_loop(&m, &v(&[1.0, 1.0]), &[v(&[0.0]), v(&[0.0])]).unwrap();
        assert_eq!(xs.len(), 3);
        assert_abs_diff_eq!(xs[1], v(&[1.1, 1.1]), epsilon = 1e-15);
        assert_abs_diff_eq!(xs[2], v(&[1.21, 1.21]), epsilon = 1e-14);
        let zeros = simulate_open_loop(&m, &v(&[0.0, 0.0]), &vec![v(&[0.0]); 5]).unwrap();
        assert!(zeros.iter().all(|x| x.norm() == 0.0));
        assert!(simulate_open_loop(&m, &v(&[0.0, 0.0]), &[]).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let m = DiscreteModel::new("blow", 1, 1, |x, u| v(&[1e200 * (x[0] + u[0])])).unwrap();
        let err = simulate_open_loop(&m, &v(&[1.0]), &[v(&[0.0]), v(&[0.0]), v(&[0.0])]).unwrap_err();
        assert_eq!(err, Error::TrajectoryDiverged { step: 2 });
    }

    #[test]
    fn box_requires_origin_inside() {
        assert!(BoxSet::new(v(&[-1.0]), v(&[1.0])).is_ok());
        assert!(BoxSet::new(v(&[0.0]), v(&[1.0])).is_err());
        assert!(BoxSet::new(v(&[-1.0, -1.0]), v(&[1.0])).is_err());
        let b = BoxSet::new(v(&[-1.0]), v(&[3.0])).unwrap();
        assert_eq!(b.half_width(0), 1.0);
        assert_eq!(b.project(&v(&[5.0])), v(&[3.0]));
        assert_eq!(b.violation(&v(&[-1.5])), 0.5);
    }

    #[test]
    fn benchmark_parameter_validation() {
        assert!(two_state_benchmark(0.0, 0.5).is_err());
        assert!(two_state_benchmark(0.1, 1.0).is_err());
        assert!(two_state_benchmark_with(0.1, 0.5, Discretization::Rk4 { substeps: 0 }).is_err());
        assert!(model_by_name("nope", &BenchmarkParams::default()).is_err());
    }
}
