use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model does not have an equilibrium at the origin: |F(0,0)| = {0:e}")]
    NotAnEquilibrium(f64),

    #[error("model not differentiable at origin: non-finite Jacobian entry")]
    NotDifferentiable,

    #[error("trajectory diverged at step {step}")]
    TrajectoryDiverged { step: usize },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("unstable closed loop: spectral radius {0} >= 1")]
    UnstableClosedLoop(f64),

    #[error("Lyapunov solve failed: residual {0:e}")]
    LyapunovFailed(f64),

    #[error("Riccati iteration failed: {0}")]
    RiccatiFailed(String),

    #[error("kappa violates spectral bound: kappa = {kappa}, rho_max(PhiL) = {rho_max}, need 1 < kappa < {bound}")]
    KappaOutOfRange { kappa: f64, rho_max: f64, bound: f64 },

    #[error("ΔQ must be positive definite (rho_x = {rho_x}, rho_u = {rho_u})")]
    DeltaQNotPositiveDefinite { rho_x: f64, rho_u: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("no certifiable terminal region: alpha fell below {0:e}")]
    NoCertifiableRegion(f64),

    #[error("trajectory blow-up, shorten horizon or scale inputs")]
    BlowUp,

    #[error("recursive feasibility violated at step {step}: constraint violation {violation:e}")]
    RecursiveFeasibilityViolated { step: usize, violation: f64 },

    #[error("optimal control problem infeasible at the initial state: constraint violation {0:e}")]
    InfeasibleAtStart(f64),

    #[error("unknown model '{0}'")]
    UnknownModel(String),
}
