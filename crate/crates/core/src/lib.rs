//! Per-flow mean-delay prediction for packet networks.
//!
//! The crate combines two halves:
//!
//! * a learned model: packet traces are binned per millisecond, encoded with a
//!   stacked GRU, and refined by message passing over a flow / link-port /
//!   device graph until the partial flow states stabilise; a readout splits the
//!   predicted delay into queuing, transmission, and propagation components;
//! * a synthetic testbed: a deterministic FIFO store-and-forward simulator that
//!   produces labeled scenarios for training and evaluation, standing in for
//!   hardware captures.
//!
//! Everything is 64-bit and bit-reproducible given a seed: dataset generation,
//! parameter initialisation, training order, and checkpoints.

pub mod model;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod train;

pub use model::{DelayModel, ForwardOutput, MessagePassingConfig};
pub use nn::{ModelConfig, ModelParams, Tape, Tensor, VarId};
pub use scenario::{Device, DeviceKind, Flow, LinkPort, NetworkScenario, TrafficKind};
pub use sim::{ScenarioSkeleton, SimConfig, TrafficSpec};
pub use trace::{Dataset, Feature, NormStats, PacketRecord};
pub use train::{EpochReport, TrainConfig};
