//! Gaussian feature-field engine: projection, tile-based compositing of
//! language and identity features, mask extraction, patch tokenization with
//! scale-shift alignment, closed-form gradients and the training driver.

pub mod backward;
pub mod chat;
pub mod cstf;
pub mod encoder;
pub mod error;
mod gemm;
pub mod map;
pub mod masking;
pub mod model;
pub mod optim;
pub mod projection;
pub mod raster;
pub mod scene;
pub mod teacher;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use map::FeatureMap;
pub use projection::ProjectedSplat;
pub use raster::{render_reference, render_tiled, Channels, RenderOptions, RenderOutput};
pub use scene::{Camera, Gaussians, LabelImage, SceneBundle};
pub use train::{Session, TrainConfig};
