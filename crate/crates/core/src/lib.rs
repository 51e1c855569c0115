//! Weakly supervised video moment retrieval by semantic completion.
//!
//! A proposal scorer picks candidate intervals; a masked-query reconstructor rates
//! each pick by how well its frames recover hidden query words; the reconstruction
//! ranking flows back to the scorer as rewards.

pub mod autograd;
pub mod backbone;
mod binio;
pub mod checkpoint;
pub mod completion;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod grounding;
pub mod objective;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
pub use temporal::{enumerate_candidates, iou, nms_filter, CandidateGrid, Cell, Proposal};
