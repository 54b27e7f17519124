//! Numerical laboratory for the unconstrained-feature model of neural collapse.
//!
//! The model treats last-layer features `H` as free variables next to the
//! classifier `(W, b)` and minimizes regularized cross-entropy. The crate
//! evaluates that objective and its derivatives, builds the simplex-ETF global
//! minimizer, measures the NC1–NC4 collapse metrics, certifies critical points
//! through the convex nuclear-norm counterpart, and trains with GD-momentum,
//! Adam and L-BFGS.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod convex;
pub mod error;
pub mod etf;
pub mod landscape;
pub mod lemmas;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod persist;
pub mod rng;

pub use error::{Error, Result};
pub use model::{GradTriple, Hyperparams, ModelState};
