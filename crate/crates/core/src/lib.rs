//! Question-guided visual cropping and a zero-shot VQA evaluation harness.
//!
//! Model inference lives behind the traits in [`backends`]; everything
//! else (crop geometry, strategies, metrics, dataset handling, reports) is
//! plain Rust and runs without any model using the synthetic backends.

pub mod backends;
pub mod datasets;
pub mod fixtures;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod strategies;
