//! The neural implicit map: multi-resolution feature grid, one-blob
//! encoding, geometry and colour decoders, and their gradients.

pub mod checkpoint;
pub mod encoding;
pub mod grad;
pub mod grid;
pub mod mlp;
mod model;
pub mod params;

pub use encoding::one_blob_encode;
pub use grad::{grad_objective, RayBatchLoss};
pub use grid::{Aabb, FeatureGrid, GridLevel};
pub use mlp::Activation;
pub use model::{DecoderSpec, FieldArch, FieldConfig, FieldModel, PointTape, Rgb, COLOR_CHANNELS};
pub use params::{GradientVector, ParamLayout, ParamVector, Segment, SegmentKind};
