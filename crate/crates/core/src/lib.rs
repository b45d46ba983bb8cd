//! Terminal ingredients and closed-loop simulation for quasi-infinite horizon NMPC.
//!
//! The pipeline is: a discrete model [`model::DiscreteModel`], its linearization at
//! the origin, a gain/penalty pair from [`lyapunov`], a certified ellipsoidal
//! terminal region from [`terminal`], and the receding-horizon loop in [`nmpc`].

pub mod error;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod nmpc;
pub mod terminal;

pub use error::{Error, Result};
