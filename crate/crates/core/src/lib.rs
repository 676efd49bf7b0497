//! Mixtures of conditional Gaussian graphical models, fitted by a penalised EM
//! algorithm whose M step is solved by proximal gradient descent under a group
//! graphical lasso penalty.
//!
//! The crate is organised around the fitting pipeline:
//!
//! * [`model`]: parameter types, conditional Gaussian densities, sampling.
//! * [`penalty`]: the group graphical lasso penalty, its proximal operator,
//!   and the proximal-gradient M-step solver.
//! * [`em`]: the EM loop (E step, moment accumulation, weight updates,
//!   initialisation strategies).
//! * [`baselines`]: unconditional GGM mixtures and the regress-then-cluster
//!   two-stage variant, both expressed through the same EM engine.
//! * [`datagen`]: synthetic benchmark generators.
//! * [`evaluation`]: clustering and estimation metrics, model selection.

pub mod baselines;
pub mod datagen;
pub mod em;
pub mod error;
pub mod evaluation;
mod linalg;
pub mod model;
pub mod penalty;
pub mod seeding;

pub use error::{Error, Result};
pub use model::{ClassParams, Dataset, MixtureParams, PenaltyConfig};
