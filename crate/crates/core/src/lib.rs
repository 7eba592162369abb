//! Differentially private over-the-air federated averaging.
//!
//! Devices upload clipped accumulated gradients over a shared analog channel;
//! the superposed signal is received with Gaussian noise that doubles as the
//! privacy mechanism. This crate selects the scheduled device set, the
//! alignment factor and the number of aggregation rounds under a sum-power and
//! a per-round privacy budget, evaluates the associated convergence bounds, and
//! simulates the training loop end to end.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod bounds;
pub mod config;
pub mod error;
pub mod fedavg_sim;
pub mod oracle;
pub mod privacy;
pub mod scheduler;
pub mod system_model;

pub(crate) mod serde_inf;

pub use error::{Error, Result};
