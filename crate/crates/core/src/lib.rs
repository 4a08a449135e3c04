//! Parallel modular reasoning engine.
//!
//! A fixed ensemble of specialized modules runs on a shared context, each
//! module emitting a typed record. Records are composed in dependency order,
//! scored by a reward model, and credited per module through counterfactual
//! ablation. Module policies are trained with a two-phase cascaded
//! preference procedure.

pub mod drpo;
pub mod harness;
pub mod hashing;
pub mod orchestrator;
pub mod policy;
pub mod reward;
pub mod schema;

/// Engine version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
