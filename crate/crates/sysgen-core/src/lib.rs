//! Core library for the sysgen pipeline: generate, filter, verify, and apply
//! tag-annotated system messages for SFT conversation datasets.

pub mod client;
pub mod filter;
pub mod grammar;
pub mod io;
pub mod metrics;
pub mod model;
pub mod phases;
pub mod prompts;

pub use model::*;
