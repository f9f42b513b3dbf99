//! Adversarial soundness verification for generative chess sequence models.
//!
//! The crate drives a model (in-process reference model or an external
//! process speaking the newline-delimited wire protocol) through valid game
//! prefixes chosen by an adversary, and reports when the model predicts an
//! illegal continuation.

pub mod adversaries;
pub mod datagen;
pub mod gateway;
pub mod harness;
pub mod metrics;
pub mod notation;
pub mod worldmodel;

pub use soundcheck_rules as rules;
