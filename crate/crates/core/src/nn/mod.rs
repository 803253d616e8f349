//! Desk-scale quantization-aware training harness: layers wired through the
//! quantizer strategies, Adam with linear decay, dataset ingestion,
//! checkpointing, and evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod layers;
pub mod optim;
pub mod trainer;

pub use checkpoint::{network_from_checkpoint, network_to_checkpoint, Checkpoint};
pub use config::{ArchKind, DatasetSpec, TrainConfig};
pub use data::Dataset;
pub use layers::{Layer, LayerKind, LayerSpec, Network, RpReluParams};
pub use optim::{lr_at, Adam};
pub use trainer::{evaluate, train, train_on, worker_threads, TrainOutcome};
