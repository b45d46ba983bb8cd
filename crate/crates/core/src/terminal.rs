//! Terminal region characterization.
//!
//! Step one bounds the ellipsoid level by the input constraints (γ), step two
//! backs the level off until the nonlinearity residual χ is nonnegative on a
//! dense sample of the region (α).

use std::f64::consts::PI;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{check_spd, quad_form};
use crate::lyapunov::{self, Approach, GainPenaltyPair, StageWeights, TuningParams};
use crate::model::{self, BoxSet, DiscreteModel};

/// Cap used when the gain is zero and the input constraints never bind.
pub const DEFAULT_GAMMA_MAX: f64 = 1e6;

/// α is abandoned once it falls below this fraction of the starting level.
pub const ALPHA_UNDERFLOW: f64 = 1e-12;

/// Sublevel set `{x : xᵀ P x <= level}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub penalty: DMatrix<f64>,
    pub level: f64,
}

impl Ellipsoid {
    pub fn new(penalty: DMatrix<f64>, level: f64) -> Result<Self> {
        if !(level >= 0.0) {
            return Err(Error::InvalidArgument(format!("ellipsoid level must be >= 0, got {level}")));
        }
        check_spd(&penalty, "P", 1e-10)?;
        Ok(Self { penalty, level })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        quad_form(&self.penalty, x)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.value(x) <= self.level
    }
}

/// Everything the NMPC needs from the terminal ingredients synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub approach: Approach,
    pub gain: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub closed_loop: DMatrix<f64>,
    pub q_star: DMatrix<f64>,
    pub delta_q: DMatrix<f64>,
    pub gamma: f64,
    pub alpha: f64,
    /// Only for two-dimensional states.
    pub area: Option<f64>,
    pub samples_checked: usize,
}

impl TerminalIngredients {
    pub fn region(&self) -> Ellipsoid {
        Ellipsoid { penalty: self.penalty.clone(), level: self.alpha }
    }

    pub fn pair(&self) -> GainPenaltyPair {
        GainPenaltyPair {
            gain: self.gain.clone(),
            penalty: self.penalty.clone(),
            closed_loop: self.closed_loop.clone(),
            q_star: self.q_star.clone(),
            delta_q: self.delta_q.clone(),
            lyapunov_residual: 0.0,
        }
    }

    pub fn terminal_value(&self, x: &DVector<f64>) -> f64 {
        quad_form(&self.penalty, x)
    }

    pub fn local_control(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.gain * x)
    }
}

/// Largest γ with `−Lx ∈ U` on all of `{xᵀ P x <= γ}`.
///
/// For a box, `max_{xᵀPx<=γ} |L_j x| = sqrt(γ · L_j P⁻¹ L_jᵀ)`, so each input row
/// gives `γ_j = b_j² / (L_j P⁻¹ L_jᵀ)` with `b_j` the nearer bound. Rows of `L` that
/// are identically zero never bind; if all do, `f64::INFINITY` is returned and the
/// caller has to cap it.
pub fn compute_gamma(gain: &DMatrix<f64>, penalty: &DMatrix<f64>, inputs: &BoxSet) -> Result<f64> {
    if gain.nrows() != inputs.dim() || gain.ncols() != penalty.nrows() {
        return Err(Error::Dimension(format!(
            "gain {}x{}, P {}x{}, {} inputs",
            gain.nrows(),
            gain.ncols(),
            penalty.nrows(),
            penalty.ncols(),
            inputs.dim()
        )));
    }
    let chol = penalty
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("P is not positive definite".into()))?;
    let mut gamma = f64::INFINITY;
    for j in 0..gain.nrows() {
        let row = gain.row(j).transpose();
        let s = row.dot(&chol.solve(&row));
        if s > 0.0 {
            let b = inputs.half_width(j);
            gamma = gamma.min(b * b / s);
        }
    }
    Ok(gamma)
}

/// `Ψ_L(x) = F(x, −Lx) − Φ_L x`.
pub fn nonlinearity(model: &DiscreteModel, pair: &GainPenaltyPair, x: &DVector<f64>) -> DVector<f64> {
    let u = -(&pair.gain * x);
    model.step(x, &u) - &pair.closed_loop * x
}

/// `χ(x) = xᵀ ΔQ x − 2 Ψ_Lᵀ P Φ_L x − Ψ_Lᵀ P Ψ_L`.
///
/// Along `x⁺ = F(x, −Lx)` one has `V(x⁺) − V(x) = −xᵀ Q* x − χ(x)` whenever the
/// penalty satisfies `Φ_Lᵀ P Φ_L − P = −(Q* + ΔQ)`.
pub fn nonlinearity_residual_chi(
    model: &DiscreteModel,
    pair: &GainPenaltyPair,
    delta_q: &DMatrix<f64>,
    x: &DVector<f64>,
) -> f64 {
    let psi = nonlinearity(model, pair, x);
    let p_psi = &pair.penalty * &psi;
    quad_form(delta_q, x) - 2.0 * p_psi.dot(&(&pair.closed_loop * x)) - psi.dot(&p_psi)
}

/// Deterministic unit directions: a uniform angle grid in 2-D, a Halton set otherwise.
pub fn boundary_directions(n_x: usize, count: usize) -> Vec<DVector<f64>> {
    match n_x {
        0 => Vec::new(),
        1 => (0..count)
            .map(|k| DVector::from_element(1, if k % 2 == 0 { 1.0 } else { -1.0 }))
            .collect(),
        2 => (0..count)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / count as f64;
                DVector::from_vec(vec![th.cos(), th.sin()])
            })
            .collect(),
        n => halton_directions(n, count),
    }
}

const PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base as u64) as f64 * inv;
        i /= base as u64;
        inv /= b;
    }
    out
}

fn halton_directions(n: usize, count: usize) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut i = 1u64;
    // rejection to the unit ball keeps the directions isotropic
    while out.len() < count {
        let y = DVector::from_iterator(
            n,
            (0..n).map(|d| 2.0 * radical_inverse(i, PRIMES[d % PRIMES.len()] + 97 * (d / PRIMES.len()) as u32) - 1.0),
        );
        i += 1;
        let r = y.norm();
        if r > 1e-3 && r <= 1.0 {
            out.push(y / r);
        }
    }
    out
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        // Box–Muller pairs
        let v = DVector::from_iterator(
            n,
            (0..n).map(|_| {
                let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
            }),
        );
        let r = v.norm();
        if r > 1e-12 {
            return v / r;
        }
    }
}

/// Scaled unit vectors `s·d` with `|s·d| <= 1`, used by the α search: the boundary set
/// (`s = 1`) followed by seeded interior points (`s = U^{1/n}`, one per ten boundary points).
pub fn certification_samples(n_x: usize, boundary: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut pts = boundary_directions(n_x, boundary);
    let interior = boundary.div_ceil(10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..interior {
        let d = random_direction(&mut rng, n_x);
        let s: f64 = rng.random::<f64>().powf(1.0 / n_x as f64);
        pts.push(d * s);
    }
    pts
}

/// Maps unit-ball points onto `{xᵀ P x <= level}` through `x = sqrt(level) C⁻ᵀ d`, `P = C Cᵀ`.
pub fn ellipsoid_map(penalty: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = penalty
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("P".into()))?;
    let lt = chol.l().transpose();
    lt.try_inverse()
        .ok_or_else(|| Error::Singular("Cholesky factor of P".into()))
}

/// Backoff search for the largest certified α in `(0, γ]`.
pub fn search_alpha(
    model: &DiscreteModel,
    pair: &GainPenaltyPair,
    delta_q: &DMatrix<f64>,
    gamma: f64,
    params: &TuningParams,
) -> Result<TerminalIngredients> {
    search_alpha_capped(model, pair, delta_q, gamma, params, DEFAULT_GAMMA_MAX)
}

pub fn search_alpha_capped(
    model: &DiscreteModel,
    pair: &GainPenaltyPair,
    delta_q: &DMatrix<f64>,
    gamma: f64,
    params: &TuningParams,
    gamma_max: f64,
) -> Result<TerminalIngredients> {
    if !(params.beta > 0.0 && params.beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0, 1), got {}", params.beta)));
    }
    let start = gamma.min(gamma_max);
    if !(start > 0.0) || !start.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be positive and finite, got {gamma}")));
    }
    let n_x = model.n_x();
    let map = ellipsoid_map(&pair.penalty)?;
    let unit = certification_samples(n_x, params.boundary_samples, params.seed);
    let shaped: Vec<DVector<f64>> = unit.iter().map(|d| &map * d).collect();

    let certified = |alpha: f64| {
        let r = alpha.sqrt();
        shaped
            .iter()
            .all(|x| nonlinearity_residual_chi(model, pair, delta_q, &(x * r)) >= 0.0)
    };

    let mut alpha = start;
    while !certified(alpha) {
        alpha *= params.beta;
        if alpha < ALPHA_UNDERFLOW * start {
            return Err(Error::NoCertifiableRegion(alpha));
        }
    }
    let area = if n_x == 2 { Some(region_area(&pair.penalty, alpha)?) } else { None };
    Ok(TerminalIngredients {
        approach: params.approach,
        gain: pair.gain.clone(),
        penalty: pair.penalty.clone(),
        closed_loop: pair.closed_loop.clone(),
        q_star: pair.q_star.clone(),
        delta_q: delta_q.clone(),
        gamma,
        alpha,
        area,
        samples_checked: shaped.len(),
    })
}

/// `π α / sqrt(det P)`, the area of `{xᵀ P x <= α}` in the plane.
pub fn region_area(penalty: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    if penalty.nrows() != 2 || penalty.ncols() != 2 {
        return Err(Error::Dimension(format!(
            "area is defined for 2x2 P, got {}x{}",
            penalty.nrows(),
            penalty.ncols()
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    let det = penalty.determinant();
    if !(det > 0.0) {
        return Err(Error::NotPositiveDefinite(format!("det P = {det}")));
    }
    Ok(PI * alpha / det.sqrt())
}

/// Full pipeline for one tuning: linearize, gain and penalty, γ, α.
pub fn synthesize(
    model: &DiscreteModel,
    weights: &StageWeights,
    inputs: &BoxSet,
    params: &TuningParams,
    gamma_max: f64,
) -> Result<TerminalIngredients> {
    let lin = model::linearize(model)?;
    let pair = lyapunov::synthesize_pair(&lin, weights, params)?;
    let gamma = compute_gamma(&pair.gain, &pair.penalty, inputs)?;
    search_alpha_capped(model, &pair, &pair.delta_q, gamma, params, gamma_max)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EscapeReason {
    /// `xᵀ P x` rose above the level.
    LeftRegion { value: f64 },
    /// `−Lx` left the input box.
    InputViolation { violation: f64 },
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub initial_state: DVector<f64>,
    pub step: usize,
    pub state: DVector<f64>,
    pub reason: EscapeReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceCheck {
    pub invariant: bool,
    pub counterexample: Option<Counterexample>,
    pub trajectories: usize,
}

/// Simulates `x⁺ = F(x, −Lx)` from seeded points of `region` (a quarter of them on the
/// boundary) and reports the first trajectory that leaves the region or the input box.
#[allow(clippy::too_many_arguments)]
pub fn is_invariant_by_simulation(
    model: &DiscreteModel,
    pair: &GainPenaltyPair,
    region: &Ellipsoid,
    inputs: &BoxSet,
    n_samples: usize,
    n_steps: usize,
    seed: u64,
) -> Result<InvarianceCheck> {
    let n_x = model.n_x();
    let map = ellipsoid_map(&region.penalty)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = region.level.sqrt();
    let level_tol = region.level * (1.0 + 1e-12) + 1e-14;
    for i in 0..n_samples {
        let d = random_direction(&mut rng, n_x);
        let s: f64 = if i % 4 == 0 { 1.0 } else { rng.random::<f64>().powf(1.0 / n_x as f64) };
        let x0 = &map * d * (s * scale);
        let mut x = x0.clone();
        for step in 0..=n_steps {
            let u = -(&pair.gain * &x);
            let fail = |reason| Counterexample { initial_state: x0.clone(), step, state: x.clone(), reason };
            if x.iter().any(|v| !v.is_finite()) {
                return Ok(escape(fail(EscapeReason::NonFinite), i));
            }
            let value = quad_form(&region.penalty, &x);
            if value > level_tol {
                return Ok(escape(fail(EscapeReason::LeftRegion { value }), i));
            }
            let violation = inputs.violation(&u);
            if violation > 1e-9 {
                return Ok(escape(fail(EscapeReason::InputViolation { violation }), i));
            }
            if step < n_steps {
                x = model.step(&x, &u);
            }
        }
    }
    Ok(InvarianceCheck { invariant: true, counterexample: None, trajectories: n_samples })
}

fn escape(c: Counterexample, i: usize) -> InvarianceCheck {
    InvarianceCheck { invariant: false, counterexample: Some(c), trajectories: i + 1 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominationCheck {
    pub passed: bool,
    /// Largest `Σ ℓ / zᵀ P z` over the samples.
    pub worst_ratio: f64,
    pub worst_state: Option<DVector<f64>>,
    pub samples: usize,
}

/// Checks `Σ_{k<n_steps} ℓ(z_k, −L z_k) <= z_0ᵀ P z_0 (1 + rel_tol)` along `z⁺ = F(z, −Lz)`
/// from seeded points of the region.
pub fn infinite_horizon_domination(
    model: &DiscreteModel,
    terminal: &TerminalIngredients,
    weights: &StageWeights,
    n_samples: usize,
    n_steps: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<DominationCheck> {
    let n_x = model.n_x();
    let map = ellipsoid_map(&terminal.penalty)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = terminal.alpha.sqrt();
    let mut worst_ratio = 0.0_f64;
    let mut worst_state = None;
    let mut passed = true;
    for i in 0..n_samples {
        let d = random_direction(&mut rng, n_x);
        let s: f64 = if i % 4 == 0 { 1.0 } else { rng.random::<f64>().powf(1.0 / n_x as f64) };
        let z0 = &map * d * (s * scale);
        let bound = quad_form(&terminal.penalty, &z0);
        let mut z = z0.clone();
        let mut total = 0.0;
        for _ in 0..n_steps {
            let u = terminal.local_control(&z);
            total += weights.stage_cost(&z, &u);
            z = model.step(&z, &u);
        }
        if !total.is_finite() || total > bound * (1.0 + rel_tol) {
            passed = false;
        }
        let ratio = if bound > 0.0 { total / bound } else { 0.0 };
        if ratio > worst_ratio || !total.is_finite() {
            worst_ratio = if total.is_finite() { ratio } else { f64::INFINITY };
            worst_state = Some(z0);
        }
    }
    Ok(DominationCheck { passed, worst_ratio, worst_state, samples: n_samples })
}

/// Points on `{xᵀ P x = level}` for plotting, ordered by angle.
pub fn ellipse_boundary(penalty: &DMatrix<f64>, level: f64, count: usize) -> Result<Vec<DVector<f64>>> {
    if penalty.nrows() != 2 {
        return Err(Error::Dimension("boundary export needs a 2x2 P".into()));
    }
    let map = ellipsoid_map(penalty)? * level.max(0.0).sqrt();
    Ok(boundary_directions(2, count).into_iter().map(|d| &map * d).collect())
}

/// Writes boundary points as CSV with header `x1,x2,...`.
pub fn write_boundary_csv<W: Write>(out: &mut W, points: &[DVector<f64>]) -> io::Result<()> {
    let n = points.first().map_or(2, |p| p.len());
    let header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for p in points {
        let row: Vec<String> = p.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::{lqr_gain, penalty_arbitrary_controller};
    use crate::model::{linear_model, linearize, two_state_benchmark_with, Discretization};
    use approx::assert_relative_eq;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn gamma_for_unit_ball() {
        let u = BoxSet::symmetric(1, 1.0).unwrap();
        let g = compute_gamma(&m(1, 2, &[1.0, 0.0]), &DMatrix::identity(2, 2), &u).unwrap();
        assert_relative_eq!(g, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gamma_zero_gain_is_unbounded() {
        let u = BoxSet::symmetric(1, 1.0).unwrap();
        let g = compute_gamma(&m(1, 2, &[0.0, 0.0]), &DMatrix::identity(2, 2), &u).unwrap();
        assert!(g.is_infinite());
    }

    #[test]
    fn gamma_rejects_singular_penalty() {
        let u = BoxSet::symmetric(1, 1.0).unwrap();
        assert!(compute_gamma(&m(1, 2, &[1.0, 0.0]), &m(2, 2, &[1.0, 0.0, 0.0, 0.0]), &u).is_err());
    }

    #[test]
    fn gamma_uses_nearer_bound_of_asymmetric_box() {
        let u = BoxSet::new(DVector::from_element(1, -0.5), DVector::from_element(1, 3.0)).unwrap();
        let g = compute_gamma(&m(1, 1, &[2.0]), &m(1, 1, &[4.0]), &u).unwrap();
        // |2x| <= 0.5 on 4x² <= γ ⇒ γ = 0.25 · 4 / 4
        assert_relative_eq!(g, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn area_examples() {
        assert_relative_eq!(region_area(&DMatrix::identity(2, 2), 1.0).unwrap(), PI, epsilon = 1e-15);
        assert!(region_area(&DMatrix::identity(3, 3), 1.0).is_err());
        assert!(region_area(&DMatrix::identity(2, 2), -1.0).is_err());
    }

    #[test]
    fn chi_vanishes_at_origin_and_is_quadratic_for_linear_models() {
        let model = linear_model(
            "lin",
            m(2, 2, &[1.0, 0.1, 0.1, 1.0]),
            m(2, 1, &[0.05, 0.05]),
        )
        .unwrap();
        let lin = linearize(&model).unwrap();
        let w = StageWeights::new(DMatrix::identity(2, 2), m(1, 1, &[0.5])).unwrap();
        let gain = lqr_gain(&lin, &w).unwrap().gain;
        let pair = penalty_arbitrary_controller(&lin, &w, &gain, 2.0, 0.0).unwrap();
        assert_eq!(nonlinearity_residual_chi(&model, &pair, &pair.delta_q, &DVector::zeros(2)), 0.0);
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let chi = nonlinearity_residual_chi(&model, &pair, &pair.delta_q, &x);
        assert_relative_eq!(chi, 2.0 * x.norm_squared(), max_relative = 1e-9);
    }

    #[test]
    fn boundary_csv_layout() {
        let pts = ellipse_boundary(&DMatrix::identity(2, 2), 1.0, 4).unwrap();
        let mut buf = Vec::new();
        write_boundary_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1,x2");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1.000000000000e0,"));
    }

    #[test]
    fn map_lands_on_the_level_set() {
        let p = m(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let pts = ellipse_boundary(&p, 5.0, 16).unwrap();
        for x in pts {
            assert_relative_eq!(quad_form(&p, &x), 5.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn halton_directions_are_unit_and_spread() {
        let dirs = boundary_directions(3, 200);
        assert_eq!(dirs.len(), 200);
        let mean = dirs.iter().fold(DVector::zeros(3), |a, d| a + d) / 200.0;
        assert!(dirs.iter().all(|d| (d.norm() - 1.0).abs() < 1e-12));
        assert!(mean.norm() < 0.15);
    }

    #[test]
    fn samples_are_nested_in_count() {
        // an angle grid of 2n contains the grid of n; the interior stream is a prefix
        let a = certification_samples(2, 360, 7);
        let b = certification_samples(2, 720, 7);
        for k in 0..360 {
            assert_relative_eq!(a[k], b[2 * k], epsilon = 1e-12);
        }
        for k in 0..36 {
            assert_eq!(a[360 + k], b[720 + k]);
        }
    }

    #[test]
    fn invariance_of_origin_and_detection_of_escape() {
        let model = two_state_benchmark_with(0.1, 0.5, Discretization::default()).unwrap();
        let lin = linearize(&model).unwrap();
        let w = StageWeights::new(DMatrix::identity(2, 2), m(1, 1, &[0.5])).unwrap();
        let gain = lqr_gain(&lin, &w).unwrap().gain;
        let pair = penalty_arbitrary_controller(&lin, &w, &gain, 1.0, 0.0).unwrap();
        let u = BoxSet::symmetric(1, 2.0).unwrap();
        let point = Ellipsoid::new(pair.penalty.clone(), 0.0).unwrap();
        let ok = is_invariant_by_simulation(&model, &pair, &point, &u, 5, 10, 1).unwrap();
        assert!(ok.invariant);
        let gamma = compute_gamma(&pair.gain, &pair.penalty, &u).unwrap();
        let big = Ellipsoid::new(pair.penalty.clone(), 10.0 * gamma).unwrap();
        let bad = is_invariant_by_simulation(&model, &pair, &big, &u, 200, 50, 1).unwrap();
        assert!(!bad.invariant);
        assert!(bad.counterexample.is_some());
    }
}
