//! Heuristic evolution toolkit for dynamic flexible job shop scheduling (DFJSS).
//!
//! The crate evolves symbolic dispatching heuristics — pairs of sequencing and
//! routing rule trees — with genetic programming, and optionally guides the
//! mutation step with a task-conditioned autoregressive transformer trained on
//! elite heuristics harvested from earlier runs.
//!
//! Module map:
//! - [`expr`]: expression trees, evaluation, prefix token codec, grammar stack
//! - [`sim`]: seeded discrete-event shop simulator and objectives
//! - [`gp`]: multitask evolutionary engine (GP / TGP variation operators)
//! - [`dataset`]: elite-heuristic corpus construction and persistence
//! - [`neural`]: the task-conditioned transformer (forward, backprop, Adam, IO)
//! - [`guided`]: transformer-guided mutation and full-rule generation
//! - [`analysis`]: similarity metrics, pattern mining, rank-sum statistics
//! - [`seeds`]: counter-based seed derivation shared by all drivers

pub mod analysis;
pub mod dataset;
pub mod expr;
pub mod gp;
pub mod guided;
pub mod neural;
pub mod seeds;
pub mod sim;
