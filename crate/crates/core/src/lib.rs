//! Deterministic probability-flow samplers for bounded-support data, with
//! exact mixture scores, interpolation operators, total-variation metrology
//! and numeric certificates for the associated error bounds.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic_data;
pub mod error;
pub mod forward;
pub mod ode;
pub mod operators_bounds;
pub mod order;
pub mod quadrature;
pub mod rng;
pub mod samplers;
pub mod score_models;
pub mod tv_metrics;

pub use analytic_data::{AtomCloud, MarginalScaling};
pub use error::{Error, Result};
pub use forward::{build_grid, validate_grid, ForwardKind, ForwardSpec, TimeGrid};
pub use score_models::{FieldSpec, ScoreField};
pub use samplers::{Sampler, Scheme};
