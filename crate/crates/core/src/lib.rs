//! Arbitrary style transfer with attention-aligned features and dynamically
//! predicted separable kernels, on a small hand-written autodiff engine.

pub mod adam;
pub mod bench;
pub mod config;
pub mod decoder;
pub mod discriminator;
pub mod error;
pub mod image_io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod sae;
pub mod skg;
pub mod store;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod vgg;

pub use error::{Error, Result};
pub use image_io::RgbImage;
pub use model::{ModelConfig, StyleModel};
pub use skg::GroupPermutation;
pub use store::WeightStore;
pub use tensor::{Element, Tensor};
