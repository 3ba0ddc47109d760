//! Schrödinger-bridge transport toolkit.
//!
//! Iterated diffusion bridge mixtures (IDBM), diffusion IPF, score-based
//! generative modelling and Sinkhorn, together with the closed-form Gaussian
//! and Gaussian-mixture machinery used to validate them.

// `!(x > 0.0)` style checks reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod mixture;
pub mod mlp;
pub mod procedures;
pub mod reference_sde;
pub mod rng;
pub mod samplers;
pub mod sde;
pub mod sinkhorn;

pub use error::{Error, Result};
pub use gaussian::{BlockGaussian, GaussianCoupling, GaussianDist};
pub use mixture::GaussianMixture;
pub use reference_sde::{BetaSchedule, BridgeMoments, LinearRefSde, TransitionMoments};
pub use sde::{CouplingSamples, Direction, DriftField, PathBatch};
