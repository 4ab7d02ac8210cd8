//! Collective student models: per-cluster, frequency-annotated automata
//! mined from event logs of procedural assignments.
//!
//! The pipeline is
//!
//! 1. read or generate event logs ([`eventlog`]),
//! 2. group students ([`clustering`]),
//! 3. build one [`automaton::ExtendedAutomaton`] per group ([`model`]),
//! 4. query it for likely next events, errors and floundering
//!    ([`prediction`]), and
//! 5. measure how well it predicts held-out students ([`validation`]).

pub mod automaton;
pub mod clustering;
pub mod error;
pub mod eventlog;
pub mod fixtures;
pub mod model;
pub mod prediction;
pub mod validation;

pub use error::{Error, Result};
