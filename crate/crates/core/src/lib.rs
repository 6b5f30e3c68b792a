//! Deterministic federated-learning simulator built around the AdaFed
//! aggregation rule.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod data;
pub mod federation;
pub mod metrics;
pub mod models;
pub mod output;
pub mod param;
pub mod verify;

pub use param::ParamVector;
