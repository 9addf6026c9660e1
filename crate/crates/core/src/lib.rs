//! Deterministic federated-learning simulator for heterogeneous binary
//! image segmentation.
//!
//! Implements the FedSODA protocol — synthetic-driven cross-assessment,
//! dynamic stratified-layer aggregation, and the segmentation consistency
//! loss — next to FedAvg, FedProx, and FedBN baselines, over a small
//! fully-convolutional segmentation network with hand-verified gradients.

pub mod config;
pub mod data;
pub mod fedcore;
pub mod ftns;
pub mod gradcheck;
pub mod model;
pub mod seeding;
pub mod tensor;
pub mod transport;

pub use config::{parse_config_file, parse_config_str, ConfigErrors, ExperimentConfig, TransportKind};
pub use data::{dice, pixel_accuracy, ChannelStats, ClientDatasetSpec, Sample};
pub use fedcore::{
    ablate, compare, run_experiment, sweep, AblationFlags, Method, RunResult, SweepParam,
};
pub use ftns::{read_ftns, write_ftns, AnyTensor, FtnsError};
pub use model::{
    build_model, default_model_spec, LayerParams, LayerSpec, LayeredModel, LoadFilter, ModelError,
    ParamSet,
};
pub use tensor::{
    ActKind, AdamState, Mode, NormRunning, ParamBlock, Scalar, Tensor, TensorError,
};
