//! Federated travel-mode inference at desk scale.
//!
//! The pipeline turns raw GPS trips into fixed-length motion-feature
//! segments (`geo`), simulates labeled trajectories and non-IID worker
//! shards (`synth`), trains LSTM/GRU/1D-CNN classifiers from scratch with
//! reverse-mode gradients (`nn`), runs synchronous FedAvg rounds between a
//! chief and its workers (`fed`), and combines the federated global models
//! through a stacking ensemble (`ensemble`). `config` and `pipeline` wire
//! everything into a reproducible experiment runner.

pub mod config;
pub mod ensemble;
pub mod fed;
pub mod geo;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use config::ExperimentConfig;
pub use geo::{FeatureSegment, GpsPoint, ModeLabel, Normalizer, Trip};
pub use nn::{Architecture, ModelSpec, ParamSet, Tensor};
