//! Feedforward sparse-view 3D editing at desk scale.
//!
//! Two views and an edit instruction go in; a cross-view consistent pair of
//! edited images, a 3D Gaussian scene, rendered novel views, and metrics come
//! out, all in a single forward pass. Consistency is trained into a toy
//! rectified-flow editor through LoRA adapters using a global diffusion-feature
//! loss and a local editing-feature loss.

pub mod consistency;
pub mod container;
pub mod error;
pub mod flow_editor;
pub mod gaussians;
pub mod imaging;
pub mod instrument;
pub mod lifting;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod perception;
pub mod pipeline;
pub mod rasterizer;
pub mod numerics;
pub mod vocab;

pub use error::{Error, Result};
