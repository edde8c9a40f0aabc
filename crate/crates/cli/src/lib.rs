//! Experiment harness behind the `samdkif` binary: run configuration,
//! artifact layout, manifests, and the commands tying pretraining, skill
//! training, routing, fusion and evaluation together.

pub mod config;
pub mod harness;
