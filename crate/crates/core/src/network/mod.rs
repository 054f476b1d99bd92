//! Small trainable networks with per-layer quantizers, and the training loop.

pub mod checkpoint;
mod model;
mod spec;
mod train;

pub use model::{
    Bindings, FakeQuantRecorder, LayerParams, Network, Probe, QuantRecorder, QuantSite, Quantizer,
};
pub use spec::{LayerKind, LayerSpec, NetworkSpec, INPUT_BITS};
pub use train::{evaluate, train, train_with, EpochMetrics, TrainConfig, TrainTrace};
