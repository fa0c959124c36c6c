//! Numerical laboratory for finite-time quenching of `u_t = u_xx - u^p`, `p < 0`.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] closed-form profiles, scalar laws and initial data,
//! * [`grid`] uniform symmetric grids, weighted norms and the heat semigroup,
//! * [`direct`] physical-space integration to quenching and a Duhamel iterator,
//! * [`splitting`] extraction of the modulation parameters `(a, b)`,
//! * [`rescaled`] evolution in the self-similar frame,
//! * [`linops`] the linearised operator, Hermite modes and the Mehler propagator,
//! * [`diagnostics`] majorants, inequality monitors and asymptotic fits.
//!
//! Kernel quadratures, Duhamel convolutions and multi-start checks run on rayon
//! when the `parallel` feature is enabled (the default); every such entry point
//! also accepts [`Execution::Sequential`].

pub mod diagnostics;
pub mod direct;
pub mod error;
pub mod grid;
pub mod linops;
pub mod model;
pub mod par;
pub mod rescaled;
pub mod splitting;

pub use error::{QuenchError, Result};
pub use grid::{bracket, Extension, Grid, GridFunction};
pub use model::{ExponentConfig, InitialDataSpec, Perturbation, ProfileParams};
pub use par::Execution;
