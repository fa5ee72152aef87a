//! Tools for studying how much sender-receiver structure a batching mix
//! leaks to a counting adversary.
//!
//! The pipeline: ingest a communication trace ([`trace`]), anonymize it with
//! a threshold or timed mix ([`mixer`]), estimate the senders' profiles from
//! the observed counts with a least-squares fit ([`attack`]), and compare
//! the empirical estimation error against closed-form predictions driven by
//! input moments and profile uniformity ([`statistics`], [`theory`]).
//! Synthetic populations with known ground truth ([`generator`]), modelling
//! diagnostics ([`diagnostics`]) and the prefix-grid experiment driver
//! ([`evaluation`]) support validating the whole chain.

pub mod attack;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod mixer;
pub mod statistics;
pub mod theory;
pub mod trace;

pub use attack::{empirical_mse, lsda, lsda_column, LsdaSolution, ProfileKind, ProfileMatrix};
pub use error::{Error, Result};
pub use evaluation::{compare_models, run_evaluation, ModelVerdict, MseReport};
pub use generator::{
    exact_moments, generate_rounds, generate_trace, InputProcess, OutputModel, PopulationConfig,
    PopulationSpec,
};
pub use mixer::{anonymize, round_stats, MixConfig, ObservationWindow, RoundPartition};
pub use statistics::{input_moments, profile_stats, InputMoments, ProfileStats};
pub use trace::{Trace, TraceEvent};
