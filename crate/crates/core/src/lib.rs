//! Policy library and deterministic discrete-event simulator for
//! verifier-guided test-time-scaling (TTS) LLM serving under tight memory
//! budgets.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. File formats,
//! the experiment runner and the command line live in the `tts-sim` crate.
//!
//! Module map:
//!
//! - [`search`]: beams, search configuration, candidate selection and
//!   branching.
//! - [`kv_trie`]: step-granular radix tree modelling KV-cache residency.
//! - [`prefix_sched`]: prefix-aware CoT ordering, its exhaustive oracle and
//!   the local-optimality checker.
//! - [`speculation`]: speculative beam extension, slot filling, two-phase
//!   scheduling and look-ahead verification.
//! - [`roofline`]: roofline latency model and the generator/verifier KV
//!   allocation search.
//! - [`workload`]: synthetic step-length and verifier-score processes.
//! - [`sim`]: the simulator that ties everything together.

#![no_std]

extern crate alloc;

pub mod error;
pub mod kv_trie;
pub mod prefix_sched;
pub mod rng;
pub mod roofline;
pub mod search;
pub mod sim;
pub mod speculation;
pub mod workload;

pub use error::{Error, Result};
