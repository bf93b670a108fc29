//! Contextual emotional-valence learning for per-person event logs.
//!
//! The crate ingests valence reports and sensor samples, rebuilds the
//! economized sample stream, encodes places as 1 km MGRS cells and learns
//! one gradient-boosted model per person over (weekday, hour, cell).

pub mod balance;
pub mod config;
pub mod economy;
pub mod empathy;
pub mod explain;
pub mod geo;
pub mod learn;
pub mod model;
pub mod pipeline;
pub mod sentiment;
pub mod stats;
pub mod store;
pub mod synth;
