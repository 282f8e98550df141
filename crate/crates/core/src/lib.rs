//! Semantic-driven infrared/visible image fusion.
//!
//! A multi-scale attention fusion network is first trained to reproduce
//! the average of its sources, then fine-tuned jointly with a segmentation
//! network under cross-entropy plus a correlation regularizer. The crate
//! also carries the evaluation metrics, a synthetic scene generator, PNG
//! dataset I/O, checkpoints and the ablation runner.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod seg;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use fusion::{
    efficient_attention, make_variant, strengthen, AttentionProjection, FusionModel, Modality,
};
pub use seg::{predict, SegModel};
pub use tensor::{FeatureMap, Tensor};
pub use types::{
    rgb_to_luma, validate_pair, AttentionVariant, Image, ImagePair, LabelMap, LabelPalette,
    RgbImage, TrainConfig, WarmStartRule,
};
