//! The embedding function: backbone features, time-mean pooling per layer,
//! layer flattening, and a `linear(ReLU(·))` projection head, with optional
//! low-rank adapters on the attention projections.

pub mod backbone;
pub mod checkpoint;
pub mod lora;
pub mod model;
pub mod ops;
pub mod pretrained;
pub mod tensors;

pub use backbone::{Backbone, BackboneConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta};
pub use lora::{LoraConfig, Projection};
pub use model::{euclidean, AdaptationMode, BackboneOutput, Embedding, EncoderModel, TrainableReport};
pub use ops::{Gradients, Parameters};
pub use pretrained::{load_pretrained, save_pretrained, PretrainedSource};
