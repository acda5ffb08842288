//! Structured attention matcher: numeric core, feature extraction,
//! latent attention pipeline, training, and evaluation.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod features;
pub mod imageio;
pub mod gradcheck;
pub mod graph;
pub mod homography;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Result, SamError};
pub use model::{BackboneKind, ModelConfig, ParamStore, PeMode, SamModel};
pub use tensor::{DenseArray, Scalar};
