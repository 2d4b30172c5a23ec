//! Federated learning over a proof-of-work chain.
//!
//! Clients train a shared MLP on private data ([`trainer`]), publish
//! sample-weighted updates that miners fold into blocks ([`fedavg`],
//! [`chain`]), and every node derives the same global model from its chain
//! tip. [`net`] carries the two-channel gossip protocol and a deterministic
//! simulator; [`node`] runs one participant.

pub mod bridge;
pub mod chain;
pub mod codec;
pub mod dataset;
pub mod exec;
pub mod experiment;
pub mod fedavg;
pub mod kv;
pub mod net;
pub mod node;
pub mod params;
pub mod runtime;
pub mod simulation;
pub mod trainer;

pub use dataset::{BlobSpec, Dataset};
pub use params::{Activation, Address, ModelConfig, ModelUpdate, ParameterVector};
pub use trainer::TrainSpec;
