//! Differentially private regression over vertically partitioned data using
//! the functional mechanism, with secure two-party dot products for
//! coefficients that span parties.

pub mod audit;
pub mod baselines;
pub mod data;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod mpc;
pub mod objective;
pub mod protocol;
pub mod solver;

pub use error::{Error, Result};
pub use objective::{PartyId, PolyObjective, Record, TaskKind, VerticalPartition};
