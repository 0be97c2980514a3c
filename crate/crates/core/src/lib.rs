//! Multimodal brain-tumor segmentation: complementary-gated skip fusion,
//! a compression-interaction transformer bottleneck, BraTS metrics, and the
//! training and sliding-window inference machinery around them.

pub mod autograd;
pub mod config;
pub mod data;
pub mod engine;
pub mod infer;
pub mod metrics;
pub mod modality;
pub mod network;
pub mod scff;
pub mod selfcheck;
pub mod error;
pub mod gradcheck;
pub mod mfci;
pub mod nn;
pub mod tensor;

pub use autograd::{backward, no_grad, Var};
pub use config::ExperimentConfig;
pub use data::MultiModalVolume;
pub use metrics::{LabelVolume, Region};
pub use network::{Model, NetworkConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
