//! Siamese residual CNN scoring pairs of feature images.

pub mod adam;
pub mod artifact;
pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use artifact::{build_model, ModelMeta, SiameseModel};
pub use model::{bce_loss, sigmoid, ModelConfig, SiameseNet, Stem, BCE_EPS};
pub use tensor::{Real, Tensor};
pub use train::{train, EpochRecord, TrainConfig, TrainData};
