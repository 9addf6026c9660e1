//! The federated protocol: synthetic cross-assessment, stratified
//! aggregation, consistency loss, baselines, and round orchestration.

mod aggregate;
mod client;
mod consistency;
pub mod experiment;
mod round;
mod server;
mod similarity;
mod synthetic;

pub use aggregate::{dynamic_aggregate, fedavg_aggregate, AggError};
pub use client::{local_train, ClientState, LocalTrainConfig, TrainMetrics};
pub use consistency::{consistency_weights, loss_sc};
pub use experiment::{
    ablate, compare, run_experiment, sweep, write_outputs, LabeledRun, RoundRow, RunResult,
    SweepParam,
};
pub use round::{
    client_worker, serve_rounds, EvalOutcome, MetricsMsg, ProtocolConfig, RegisterMsg, RoundError,
};
pub use server::{AblationFlags, Method, ServerState};
pub use similarity::{cross_assess, normalize_similarity, SimilarityCube};
pub use synthetic::{gen_synthetic, SyntheticBank};
