//! Discrete Lyapunov solves and the Riccati fixed point behind the three
//! terminal-penalty constructions.
//!
//! Every construction ends in `Φ_Lᵀ P Φ_L − P = −Q` for some closed loop
//! `Φ_L = Φ − Γ L` (scaled by κ for the Yu construction) and returns a
//! [`GainPenaltyPair`] that also carries the margin matrix ΔQ used later by the
//! nonlinearity residual χ.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, check_spd, max_abs, min_eigenvalue, spectral_radius, symmetrize};
use crate::model::Linearization;

/// Residual bound accepted for every Lyapunov solution, relative to `max(1, |Q|_max)`.
pub const LYAPUNOV_TOL: f64 = 1e-10;

/// Largest dimension solved by the Kronecker system; above it Smith doubling is used.
pub const KRONECKER_MAX_DIM: usize = 20;

pub const RICCATI_TOL: f64 = 1e-11;
pub const RICCATI_MAX_ITER: usize = 10_000;

const SYMMETRY_TOL: f64 = 1e-12;

/// Stage cost weights `W_x`, `W_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    pub wx: DMatrix<f64>,
    pub wu: DMatrix<f64>,
}

impl StageWeights {
    pub fn new(wx: DMatrix<f64>, wu: DMatrix<f64>) -> Result<Self> {
        check_spd(&wx, "W_x", SYMMETRY_TOL)?;
        check_spd(&wu, "W_u", SYMMETRY_TOL)?;
        Ok(Self { wx, wu })
    }

    pub fn n_x(&self) -> usize {
        self.wx.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.wu.nrows()
    }

    pub fn scaled(&self, rho_x: f64, rho_u: f64) -> Result<Self> {
        Self::new(&self.wx * rho_x, &self.wu * rho_u)
    }

    /// `W_x + Lᵀ W_u L`.
    pub fn closed_loop_weight(&self, gain: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(&self.wx + gain.transpose() * &self.wu * gain))
    }

    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.wx, x) + linalg::quad_form(&self.wu, u)
    }

    fn check_against(&self, lin: &Linearization) -> Result<()> {
        if self.n_x() != lin.n_x() || self.n_u() != lin.n_u() {
            return Err(Error::Dimension(format!(
                "weights are {}/{} but the linearization is {}/{}",
                self.n_x(),
                self.n_u(),
                lin.n_x(),
                lin.n_u()
            )));
        }
        Ok(())
    }
}

/// Which terminal-penalty construction to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Approach {
    /// `κ² Φ_Lᵀ P Φ_L − P = −Q*`.
    Yu,
    /// `Φ_Lᵀ P Φ_L − P = −(Q* + ΔQ)` with `ΔQ = ρ_x W_x + ρ_u Lᵀ W_u L`.
    ArbitraryController,
    /// `Φ_Lᵀ P Φ_L − P = −(ρ_x W_x + ρ_u Lᵀ W_u L)`.
    LqrInflated,
}

impl Approach {
    pub fn as_str(&self) -> &'static str {
        match self {
            Approach::Yu => "yu",
            Approach::ArbitraryController => "arbitrary_controller",
            Approach::LqrInflated => "lqr_inflated",
        }
    }

    pub fn short_label(&self) -> &'static str {
        match self {
            Approach::Yu => "Yu",
            Approach::ArbitraryController => "AC",
            Approach::LqrInflated => "LQR",
        }
    }
}

impl std::str::FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yu" => Ok(Approach::Yu),
            "arbitrary_controller" | "ac" => Ok(Approach::ArbitraryController),
            "lqr_inflated" | "lqr" => Ok(Approach::LqrInflated),
            other => Err(Error::InvalidArgument(format!("unknown approach '{other}'"))),
        }
    }
}

/// How the LQR-inflated construction picks its gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainMode {
    /// Gain and penalty are the joint Riccati fixed point for `(ρ_x W_x, ρ_u W_u)`.
    #[default]
    Coupled,
    /// Gain fixed to the unscaled LQR gain; only the Lyapunov right-hand side is inflated.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningParams {
    pub approach: Approach,
    pub rho_x: f64,
    pub rho_u: f64,
    pub kappa: f64,
    /// Backoff factor applied to α while certifying.
    pub beta: f64,
    pub boundary_samples: usize,
    pub gain_override: Option<DMatrix<f64>>,
    pub gain_mode: GainMode,
    /// Seed for the interior sample points of the α search.
    pub seed: u64,
}

impl Default for TuningParams {
    fn default() -> Self {
        Self {
            approach: Approach::ArbitraryController,
            rho_x: 1.0,
            rho_u: 0.0,
            kappa: 1.0,
            beta: 0.99,
            boundary_samples: 3600,
            gain_override: None,
            gain_mode: GainMode::Coupled,
            seed: 0,
        }
    }
}

impl TuningParams {
    pub fn yu(kappa: f64) -> Self {
        Self { approach: Approach::Yu, kappa, rho_x: 0.0, rho_u: 0.0, ..Self::default() }
    }

    pub fn arbitrary_controller(rho_x: f64, rho_u: f64) -> Self {
        Self { approach: Approach::ArbitraryController, rho_x, rho_u, ..Self::default() }
    }

    pub fn lqr_inflated(rho_x: f64, rho_u: f64) -> Self {
        Self { approach: Approach::LqrInflated, rho_x, rho_u, ..Self::default() }
    }

    /// Checks that do not need the model. The κ spectral bound and ΔQ ≻ 0 are
    /// checked again at solve time against the actual closed loop.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidArgument(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if self.boundary_samples == 0 {
            return Err(Error::InvalidArgument("boundary_samples must be positive".into()));
        }
        let finite = self.rho_x.is_finite() && self.rho_u.is_finite();
        match self.approach {
            Approach::Yu => {
                if !(self.kappa > 1.0) || !self.kappa.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "kappa must exceed 1, got {}",
                        self.kappa
                    )));
                }
            }
            Approach::ArbitraryController => {
                if !finite || self.rho_x < 0.0 || self.rho_u < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "rho_x and rho_u must be non-negative, got {} and {}",
                        self.rho_x, self.rho_u
                    )));
                }
                if self.rho_x == 0.0 && self.rho_u == 0.0 {
                    return Err(Error::DeltaQNotPositiveDefinite {
                        rho_x: self.rho_x,
                        rho_u: self.rho_u,
                    });
                }
            }
            Approach::LqrInflated => {
                if !finite || self.rho_x < 1.0 || self.rho_u < 1.0 || (self.rho_x == 1.0 && self.rho_u == 1.0)
                {
                    return Err(Error::DeltaQNotPositiveDefinite {
                        rho_x: self.rho_x,
                        rho_u: self.rho_u,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Gain `L`, penalty `P` and the matrices derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPenaltyPair {
    pub gain: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    /// `Φ − Γ L`.
    pub closed_loop: DMatrix<f64>,
    /// `W_x + Lᵀ W_u L`.
    pub q_star: DMatrix<f64>,
    /// Margin by which the penalty over-pays the closed-loop stage cost; feeds χ.
    pub delta_q: DMatrix<f64>,
    /// Max-norm residual of the Lyapunov equation that defined `penalty`.
    pub lyapunov_residual: f64,
}

impl GainPenaltyPair {
    /// Smallest eigenvalue of `P − Φ_Lᵀ P Φ_L − Q*`; nonnegative iff
    /// `Φ_Lᵀ P Φ_L − P ≼ −Q*`.
    pub fn decrease_slack(&self) -> f64 {
        let a = &self.closed_loop;
        min_eigenvalue(&(&self.penalty - a.transpose() * &self.penalty * a - &self.q_star))
    }

    pub fn closed_loop_spectral_radius(&self) -> f64 {
        spectral_radius(&self.closed_loop)
    }
}

/// Solves `Aᵀ P A − P = −Q` for symmetric positive definite `P`.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = linalg::check_square(a, "A")?;
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension(format!("Q must be {n}x{n}")));
    }
    check_spd(q, "Q", 1e-10)?;
    let rho = spectral_radius(a);
    if !(rho < 1.0) {
        return Err(Error::UnstableClosedLoop(rho));
    }
    let p = if n <= KRONECKER_MAX_DIM {
        lyapunov_kronecker(a, q)?
    } else {
        lyapunov_doubling(a, q)
    };
    let p = symmetrize(&p);
    let residual = lyapunov_residual(a, &p, q);
    if !(residual <= LYAPUNOV_TOL * max_abs(q).max(1.0)) {
        return Err(Error::LyapunovFailed(residual));
    }
    Ok(p)
}

pub fn lyapunov_residual(a: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    max_abs(&(a.transpose() * p * a - p + q))
}

fn lyapunov_kronecker(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let m = DMatrix::identity(n * n, n * n) - linalg::kron(&at, &at);
    let lu = m.clone().lu();
    let rhs = linalg::vec(q);
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("I - Aᵀ⊗Aᵀ".into()))?;
    // one step of iterative refinement
    let r = &rhs - &m * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    Ok(linalg::unvec(&x, n, n))
}

/// Smith doubling: `P ← P + A_kᵀ P A_k`, `A_k ← A_k²`.
fn lyapunov_doubling(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let inc = ak.transpose() * &p * &ak;
        p += &inc;
        ak = &ak * &ak;
        if max_abs(&inc) <= 1e-16 * max_abs(&p) {
            break;
        }
    }
    p
}

fn gain_from_penalty(lin: &Linearization, wu: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = &lin.gamma;
    let lhs = wu + g.transpose() * p * g;
    let rhs = g.transpose() * p * &lin.phi;
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::RiccatiFailed("W_u + Γᵀ P Γ is singular".into()))
}

/// Steady state of the coupled LQR equations
/// `P = Φ_Lᵀ P Φ_L + W_x + Lᵀ W_u L`, `L = (W_u + Γᵀ P Γ)⁻¹ Γᵀ P Φ`
/// by fixed-point iteration from `P = W_x`.
pub fn lqr_gain(lin: &Linearization, w: &StageWeights) -> Result<GainPenaltyPair> {
    w.check_against(lin)?;
    let mut p = w.wx.clone();
    let mut converged = false;
    for _ in 0..RICCATI_MAX_ITER {
        let l = gain_from_penalty(lin, &w.wu, &p)?;
        let phi_l = &lin.phi - &lin.gamma * &l;
        let next = symmetrize(&(phi_l.transpose() * &p * &phi_l + w.closed_loop_weight(&l)));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::RiccatiFailed("iteration diverged".into()));
        }
        let change = max_abs(&(&next - &p));
        p = next;
        if change <= RICCATI_TOL * max_abs(&p).max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::RiccatiFailed(format!(
            "no convergence in {RICCATI_MAX_ITER} iterations"
        )));
    }
    let gain = gain_from_penalty(lin, &w.wu, &p)?;
    let closed_loop = &lin.phi - &lin.gamma * &gain;
    let rho = spectral_radius(&closed_loop);
    if !(rho < 1.0) {
        return Err(Error::RiccatiFailed(format!("gain is not stabilizing (rho = {rho})")));
    }
    let q_star = w.closed_loop_weight(&gain);
    let penalty = solve_discrete_lyapunov(&closed_loop, &q_star)?;
    let lyapunov_residual = lyapunov_residual(&closed_loop, &penalty, &q_star);
    let n = lin.n_x();
    Ok(GainPenaltyPair {
        gain,
        penalty,
        closed_loop,
        q_star,
        delta_q: DMatrix::zeros(n, n),
        lyapunov_residual,
    })
}

fn closed_loop_for(lin: &Linearization, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if gain.nrows() != lin.n_u() || gain.ncols() != lin.n_x() {
        return Err(Error::Dimension(format!(
            "gain must be {}x{}, got {}x{}",
            lin.n_u(),
            lin.n_x(),
            gain.nrows(),
            gain.ncols()
        )));
    }
    let closed_loop = &lin.phi - &lin.gamma * gain;
    let rho = spectral_radius(&closed_loop);
    if !(rho < 1.0) {
        return Err(Error::UnstableClosedLoop(rho));
    }
    Ok(closed_loop)
}

/// Yu's construction: `κ² Φ_Lᵀ P Φ_L − P = −Q*`, with `1 < κ < 1/ρ_max(Φ_L)`.
///
/// The margin stored in `delta_q` is `(κ² − 1) Φ_Lᵀ P Φ_L`, which is exactly what
/// the equation leaves over after paying `Q*`.
pub fn penalty_yu(
    lin: &Linearization,
    w: &StageWeights,
    gain: &DMatrix<f64>,
    kappa: f64,
) -> Result<GainPenaltyPair> {
    w.check_against(lin)?;
    let closed_loop = closed_loop_for(lin, gain)?;
    let rho_max = spectral_radius(&closed_loop);
    let bound = 1.0 / rho_max;
    if !(kappa > 1.0 && kappa < bound) {
        return Err(Error::KappaOutOfRange { kappa, rho_max, bound });
    }
    let q_star = w.closed_loop_weight(gain);
    let scaled = &closed_loop * kappa;
    let penalty = solve_discrete_lyapunov(&scaled, &q_star)?;
    let lyapunov_residual = lyapunov_residual(&scaled, &penalty, &q_star);
    let delta_q = symmetrize(&(closed_loop.transpose() * &penalty * &closed_loop * (kappa * kappa - 1.0)));
    Ok(GainPenaltyPair {
        gain: gain.clone(),
        penalty,
        closed_loop,
        q_star,
        delta_q,
        lyapunov_residual,
    })
}

/// Arbitrary-controller construction: `Φ_Lᵀ P Φ_L − P = −(Q* + ΔQ)`,
/// `ΔQ = ρ_x W_x + ρ_u Lᵀ W_u L`.
pub fn penalty_arbitrary_controller(
    lin: &Linearization,
    w: &StageWeights,
    gain: &DMatrix<f64>,
    rho_x: f64,
    rho_u: f64,
) -> Result<GainPenaltyPair> {
    w.check_against(lin)?;
    let closed_loop = closed_loop_for(lin, gain)?;
    let q_star = w.closed_loop_weight(gain);
    let delta_q = symmetrize(&(&w.wx * rho_x + gain.transpose() * &w.wu * gain * rho_u));
    if rho_x < 0.0 || rho_u < 0.0 || check_spd(&delta_q, "ΔQ", 1e-10).is_err() {
        return Err(Error::DeltaQNotPositiveDefinite { rho_x, rho_u });
    }
    let rhs = &q_star + &delta_q;
    let penalty = solve_discrete_lyapunov(&closed_loop, &rhs)?;
    let lyapunov_residual = lyapunov_residual(&closed_loop, &penalty, &rhs);
    Ok(GainPenaltyPair { gain: gain.clone(), penalty, closed_loop, q_star, delta_q, lyapunov_residual })
}

/// LQR-inflated construction with a given (fixed) gain:
/// `Φ_Lᵀ P Φ_L − P = −(ρ_x W_x + ρ_u Lᵀ W_u L)`.
///
/// The margin is `ΔW_x + Lᵀ ΔW_u L = (ρ_x − 1) W_x + (ρ_u − 1) Lᵀ W_u L`.
pub fn penalty_lqr_inflated(
    lin: &Linearization,
    w: &StageWeights,
    gain: &DMatrix<f64>,
    rho_x: f64,
    rho_u: f64,
) -> Result<GainPenaltyPair> {
    w.check_against(lin)?;
    let closed_loop = closed_loop_for(lin, gain)?;
    let (q_star, delta_q) = inflated_margin(w, gain, rho_x, rho_u)?;
    let rhs = &q_star + &delta_q;
    let penalty = solve_discrete_lyapunov(&closed_loop, &rhs)?;
    let lyapunov_residual = lyapunov_residual(&closed_loop, &penalty, &rhs);
    Ok(GainPenaltyPair { gain: gain.clone(), penalty, closed_loop, q_star, delta_q, lyapunov_residual })
}

/// LQR-inflated construction with the gain solved jointly:
/// `L`, `P` are the Riccati fixed point for weights `(ρ_x W_x, ρ_u W_u)`.
pub fn penalty_lqr_inflated_coupled(
    lin: &Linearization,
    w: &StageWeights,
    rho_x: f64,
    rho_u: f64,
) -> Result<GainPenaltyPair> {
    w.check_against(lin)?;
    let inflated = w
        .scaled(rho_x, rho_u)
        .map_err(|_| Error::DeltaQNotPositiveDefinite { rho_x, rho_u })?;
    let lqr = lqr_gain(lin, &inflated)?;
    let (q_star, delta_q) = inflated_margin(w, &lqr.gain, rho_x, rho_u)?;
    Ok(GainPenaltyPair { q_star, delta_q, ..lqr })
}

fn inflated_margin(
    w: &StageWeights,
    gain: &DMatrix<f64>,
    rho_x: f64,
    rho_u: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(rho_x >= 1.0 && rho_u >= 1.0) {
        return Err(Error::DeltaQNotPositiveDefinite { rho_x, rho_u });
    }
    let q_star = w.closed_loop_weight(gain);
    let delta_q = symmetrize(&(&w.wx * (rho_x - 1.0) + gain.transpose() * &w.wu * gain * (rho_u - 1.0)));
    if check_spd(&delta_q, "ΔQ", 1e-10).is_err() {
        return Err(Error::DeltaQNotPositiveDefinite { rho_x, rho_u });
    }
    Ok((q_star, delta_q))
}

/// Builds the gain/penalty pair selected by `params`.
///
/// The Yu and arbitrary-controller constructions use `gain_override` or, if absent,
/// the unscaled LQR gain. The LQR-inflated construction follows `gain_mode`.
pub fn synthesize_pair(
    lin: &Linearization,
    w: &StageWeights,
    params: &TuningParams,
) -> Result<GainPenaltyPair> {
    params.validate()?;
    let base_gain = || -> Result<DMatrix<f64>> {
        match &params.gain_override {
            Some(g) => Ok(g.clone()),
            None => Ok(lqr_gain(lin, w)?.gain),
        }
    };
    match params.approach {
        Approach::Yu => penalty_yu(lin, w, &base_gain()?, params.kappa),
        Approach::ArbitraryController => {
            penalty_arbitrary_controller(lin, w, &base_gain()?, params.rho_x, params.rho_u)
        }
        Approach::LqrInflated => match (params.gain_mode, &params.gain_override) {
            (GainMode::Coupled, None) => penalty_lqr_inflated_coupled(lin, w, params.rho_x, params.rho_u),
            _ => penalty_lqr_inflated(lin, w, &base_gain()?, params.rho_x, params.rho_u),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn zero_dynamics_returns_q() {
        let q = m(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = solve_discrete_lyapunov(&DMatrix::zeros(2, 2), &q).unwrap();
        assert_relative_eq!(p, q, epsilon = 1e-14);
    }

    #[test]
    fn scalar_geometric_series() {
        let p = solve_discrete_lyapunov(&m(1, 1, &[0.5]), &m(1, 1, &[1.0])).unwrap();
        assert_relative_eq!(p[(0, 0)], 4.0 / 3.0, epsilon = 1e-14);
        let p2 = solve_discrete_lyapunov(&m(2, 2, &[0.5, 0.0, 0.0, 0.5]), &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(p2, DMatrix::identity(2, 2) * (4.0 / 3.0), epsilon = 1e-14);
    }

    #[test]
    fn unstable_input_is_rejected() {
        let err = solve_discrete_lyapunov(&m(1, 1, &[1.0]), &m(1, 1, &[1.0])).unwrap_err();
        assert!(matches!(err, Error::UnstableClosedLoop(_)));
    }

    #[test]
    fn doubling_agrees_with_kronecker() {
        let a = m(3, 3, &[0.5, 0.2, 0.0, -0.1, 0.6, 0.3, 0.05, 0.0, 0.4]);
        let q = m(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 1.5]);
        let pk = lyapunov_kronecker(&a, &q).unwrap();
        let pd = lyapunov_doubling(&a, &q);
        assert_relative_eq!(pk, pd, epsilon = 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn large_system_goes_through_doubling() {
        let n = KRONECKER_MAX_DIM + 5;
        let mut a = DMatrix::<f64>::identity(n, n) * 0.6;
        for i in 0..n - 1 {
            a[(i, i + 1)] = 0.2;
        }
        let q = DMatrix::identity(n, n);
        let p = solve_discrete_lyapunov(&a, &q).unwrap();
        assert!(lyapunov_residual(&a, &p, &q) < 1e-10);
    }

    #[test]
    fn no_control_authority_gives_zero_gain() {
        let lin = Linearization::new(m(2, 2, &[0.5, 0.0, 0.0, 0.5]), DMatrix::zeros(2, 1)).unwrap();
        let w = StageWeights::new(DMatrix::identity(2, 2), m(1, 1, &[0.5])).unwrap();
        let pair = lqr_gain(&lin, &w).unwrap();
        assert!(max_abs(&pair.gain) < 1e-14);
        assert_relative_eq!(pair.penalty, DMatrix::identity(2, 2) * (4.0 / 3.0), epsilon = 1e-10);
    }

    #[test]
    fn scalar_lqr_matches_closed_form_dare_root() {
        // P = a²P − a²b²P²/(r + b²P) + q  ⇔  b²P² + (r − a²r − qb²)P − qr = 0
        let (a, b, q, r) = (1.1_f64, 0.05_f64, 1.0_f64, 0.5_f64);
        let qa = b * b;
        let qb = r - a * a * r - q * b * b;
        let qc = -q * r;
        let p_root = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
        let l_root = a * b * p_root / (r + b * b * p_root);

        let lin = Linearization::new(m(1, 1, &[a]), m(1, 1, &[b])).unwrap();
        let w = StageWeights::new(m(1, 1, &[q]), m(1, 1, &[r])).unwrap();
        let pair = lqr_gain(&lin, &w).unwrap();
        assert_relative_eq!(pair.gain[(0, 0)], l_root, max_relative = 1e-9);
        assert_relative_eq!(pair.penalty[(0, 0)], p_root, max_relative = 1e-9);
    }

    #[test]
    fn yu_scalar_example() {
        // Φ_L = 0.5 with Φ = 0.5, Γ = 1, L = 0: P = 1 / (1 − (1.5·0.5)²)
        let lin = Linearization::new(m(1, 1, &[0.5]), m(1, 1, &[1.0])).unwrap();
        let w = StageWeights::new(m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        let pair = penalty_yu(&lin, &w, &m(1, 1, &[0.0]), 1.5).unwrap();
        assert_relative_eq!(pair.penalty[(0, 0)], 1.0 / (1.0 - 0.5625), epsilon = 1e-12);
        let err = penalty_yu(&lin, &w, &m(1, 1, &[0.0]), 2.5).unwrap_err();
        assert!(matches!(err, Error::KappaOutOfRange { .. }));
        assert!(penalty_yu(&lin, &w, &m(1, 1, &[0.0]), 1.0).is_err());
    }

    #[test]
    fn zero_delta_q_is_rejected() {
        let lin = Linearization::new(m(2, 2, &[0.5, 0.0, 0.0, 0.5]), m(2, 1, &[1.0, 0.0])).unwrap();
        let w = StageWeights::new(DMatrix::identity(2, 2), m(1, 1, &[1.0])).unwrap();
        let gain = m(1, 2, &[0.1, 0.0]);
        let err = penalty_arbitrary_controller(&lin, &w, &gain, 0.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::DeltaQNotPositiveDefinite { .. }));
        // ρ_u alone only gives a rank-one ΔQ here
        assert!(penalty_arbitrary_controller(&lin, &w, &gain, 0.0, 1.0).is_err());
    }

    #[test]
    fn tuning_validation() {
        assert!(TuningParams::arbitrary_controller(0.0, 0.0).validate().is_err());
        assert!(TuningParams::arbitrary_controller(0.1, 0.0).validate().is_ok());
        assert!(TuningParams::lqr_inflated(1.0, 1.0).validate().is_err());
        assert!(TuningParams::lqr_inflated(0.5, 2.0).validate().is_err());
        assert!(TuningParams::lqr_inflated(5.0, 1.0).validate().is_ok());
        assert!(TuningParams::yu(1.0).validate().is_err());
        let mut p = TuningParams::yu(1.05);
        p.beta = 1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn weights_must_be_spd() {
        assert!(StageWeights::new(m(2, 2, &[1.0, 0.0, 0.0, -1.0]), m(1, 1, &[1.0])).is_err());
        assert!(StageWeights::new(m(2, 2, &[1.0, 0.1, 0.0, 1.0]), m(1, 1, &[1.0])).is_err());
    }
}
