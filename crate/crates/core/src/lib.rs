//! Desk-scale simulator core for unsupervised federated representation
//! learning with balanced clustering.
//!
//! The crate is organized bottom-up: [`numcore`] holds the dense-matrix and
//! encoder machinery with hand-derived gradients, [`datasets`] generates and
//! partitions data, [`clustering`] implements balanced assignment plus the
//! cluster-geometry diagnostics and generalization-bound evaluators,
//! [`losses`] the training objectives, [`protocol`] the client/server round
//! loop, and [`evaluation`] the frozen probes and the unsupervised tuning
//! score. All randomness flows through [`rng`] so results are independent of
//! scheduling order.

pub mod clustering;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numcore;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};

/// Number of discrete rotation classes used by the degeneracy-prevention task.
pub const ROTATION_CLASSES: usize = 4;
