//! Road-ponding segmentation: an RSU encoder/decoder with channel-saliency
//! (CSIF) and spatial-saliency (SSIE) attention, trained with a deep-supervised
//! BCE + Dice loss on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod csif;
pub mod data;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod rsu;
pub mod ssie;
pub mod tape;
mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Variant};
pub use data::{FogParams, Sample};
pub use error::{Error, Result};
pub use loss::LossScales;
pub use metrics::{ConfusionCounts, MetricsReport};
pub use model::{Agsenet, ModelConfig, SaliencyOutputs, SaliencyVars};
pub use ops::Conv2dSpec;
pub use params::{Ctx, Mode, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainReport, Trainer};
