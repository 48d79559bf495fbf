//! Reduced-order modelling of the semilinear heat equation
//! `dy/dt - a (Laplace y) + b y^3 = F u` with homogeneous Dirichlet data.
//!
//! The library covers the full workflow: P1 finite elements on the unit
//! interval or square ([`mesh`]), one-step theta time stepping ([`stepper`]),
//! impulse-response snapshots of two simplified Newton steps ([`newton`]),
//! proper orthogonal decomposition ([`pod`]), the staged snapshot pipeline
//! ([`snapshots`]), Galerkin reduced models ([`rom`]), a tracking-type
//! optimal control solver ([`ocp`]), and plain-text artifact persistence
//! ([`persist`]).

pub mod config;
pub mod error;
pub mod mesh;
pub mod newton;
pub mod ocp;
pub mod persist;
pub mod pod;
pub mod rom;
pub mod snapshots;
pub mod stepper;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
