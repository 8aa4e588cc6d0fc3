//! Heterogeneous effects of multiple treatments estimated with an honest,
//! selection-penalised causal forest, plus the allocation machinery built on
//! top of the estimated effects: black-box assignment rules under capacity
//! limits, exhaustive shallow policy trees and k-means++ effect clustering.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataset`] holds the data model, CSV ingestion, balance diagnostics and
//!   the synthetic generator with known potential outcomes.
//! * [`pseudo_start`] simulates programme-start days for non-participants.
//! * [`forest`] grows the causal forest and turns it into comparison weights.
//! * [`effects`] aggregates weights into IATE/GATE/ATE/ATET estimates.
//! * [`policy_tree`], [`allocation`] and [`clustering`] consume the effects.
//! * [`report`] renders the table formats shared by every stage.

pub mod allocation;
pub mod clustering;
pub mod dataset;
pub mod effects;
pub mod error;
pub mod forest;
pub mod policy_tree;
pub mod pseudo_start;
pub mod report;
pub mod rng;
pub mod stats;

pub use error::{ErrorKind, McfError, Result};

/// Number of treatment arms: no programme plus three training programmes.
pub const N_ARMS: usize = 4;

/// Default labels for the four arms, indexed by arm.
pub const ARM_LABELS: [&str; N_ARMS] = ["NOP", "SVT", "LVT", "OT"];
