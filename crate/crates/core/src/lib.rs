//! Convolutional neural mixture models.
//!
//! A [`Cnmm`] embeds `2^(T-1)` chain-structured CNNs that share blocks and
//! parameters. Member networks are indexed by [`mixture::Sequence`]s whose
//! distribution is held in a [`TransitionTable`]. Training propagates relaxed
//! samples through the triangular recurrence; inference propagates gate
//! expectations, and trained models are accelerated by early exits and by
//! pruning low-marginal blocks ([`prune`]). The [`oracle`] module evaluates
//! every member network explicitly and is the ground truth for the tests.

// Index loops mirror the recurrences, and negated float comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod mixture;
pub mod model;
pub mod oracle;
pub mod prune;
pub mod rng;
mod tensor;

pub use error::{Error, Result};
pub use mixture::{Sequence, TransitionTable};
pub use model::{Cnmm, GateMode, Topology, TrainConfig, Variant};
pub use tensor::Tensor;
