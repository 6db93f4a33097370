//! Iterative magnitude pruning with a row/column deviance regularizer.
//!
//! The regularizer compares `|W|` with the rank-1 expectation
//! `row_sum * col_sum / total` and penalizes the difference, which drives
//! surviving weights of magnitude pruning into a grid of shared rows and
//! columns. The crate bundles everything needed to study that effect at toy
//! scale: a small reverse-mode autodiff engine, the regularizer, local
//! magnitude pruning under a cubic schedule, two toy models, a seeded
//! training harness and analysis/export tools.

pub mod analysis;
pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod harness;
pub mod matrix;
pub mod models;
pub mod pruner;
pub mod regularizer;

pub use error::{Result, SpurError};
pub use graph::{backward, finite_difference_gradient, ExprGraph, Gradients, NodeId};
pub use matrix::Matrix;
pub use pruner::{Mask, PruningSchedule, PruningState, TargetDomain};
pub use regularizer::{DevianceVariant, LambdaSchedule};
