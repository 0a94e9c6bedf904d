//! File formats, experiment runner and command-line front end for the
//! `tts-sim-core` simulator.
//!
//! - [`io`]: JSON configs, metrics and allocation inputs; JSON-lines traces
//!   and occupancy series.
//! - [`compare`]: baseline versus full-policy runs over many seeds.
//! - [`schedule`]: prefix-aware ordering of the CoTs recorded in a trace.

pub mod compare;
pub mod io;
pub mod schedule;

pub use tts_sim_core as core;
