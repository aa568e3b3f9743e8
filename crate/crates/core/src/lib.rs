//! Subset selection for label-efficient supervised finetuning.
//!
//! Given prompt embeddings and per-token generation statistics from a base
//! model, pick `k` prompts to annotate by one of:
//!
//! * top-k uncertainty ([`uncertainty`]): mean entropy, least confidence,
//!   mean margin, min margin;
//! * greedy k-center ([`kcenter`]);
//! * facility-location maximization ([`facility_location`]) with naive, lazy
//!   or stochastic greedy, optionally mixed with a log-uncertainty term;
//!
//! plus kernel-width saturation diagnostics ([`diagnostics`]) and brute-force
//! references for small instances ([`oracle`]).

pub mod diagnostics;
pub mod error;
pub mod facility_location;
pub mod io;
pub mod kcenter;
pub mod kernels;
mod linalg;
pub mod oracle;
pub mod select;
pub mod synthetic;
pub mod types;
pub mod uncertainty;

pub use error::{Error, Result, Violation, Violations};
pub use facility_location::{CoverageKernel, CoverageState, ExplicitKernel, Greedy, Mixture};
pub use kcenter::SeedMode;
pub use kernels::{KernelOptions, SimilarityColumn, SimilarityEngine};
pub use select::{run_strategy, Strategy};
pub use types::{
    validate_inputs, Budget, EmbeddingMatrix, KernelSpec, Requirements, RunConfig, SelectionResult, TokenStats,
    TokenStatsSequence,
};
pub use uncertainty::{ScoreOptions, UncertaintyKind};
