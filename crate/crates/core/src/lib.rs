//! Consistent visual-inertial-range odometry on SE_{2+L}(3).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchor_init;
pub mod baseline;
pub mod error;
pub mod eval;
pub mod io;
pub mod liegroup;
pub mod observability;
pub mod pipeline;
pub mod propagation;
pub mod range;
pub mod sim;
pub mod state;
pub mod visual;

pub use error::{Error, Result};
