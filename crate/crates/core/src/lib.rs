//! Quantization-aware training with learnable scale and offset.

pub mod activation;
pub mod conv;
pub mod data;
pub mod error;
pub mod harness;
pub mod init;
pub mod integer;
pub mod network;
pub mod quantizer;
pub mod tape;
pub mod tensor;

pub use activation::ActivationKind;
pub use error::{Error, Result};
pub use quantizer::{ActivationScheme, OffsetMode, QuantConfig, QuantizerState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
