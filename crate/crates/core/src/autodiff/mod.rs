//! Minimal deterministic reverse-mode differentiation.

mod graph;
mod kernels;
mod params;

pub use graph::{sigmoid, BnMode, Gradients, Graph, RunningStats, Var};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
