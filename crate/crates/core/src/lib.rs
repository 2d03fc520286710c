//! Conv-filtered, skinning-canonicalized neural radiance fields for
//! articulated figures.
//!
//! The pipeline per ray sample: build an occupancy/weight voxel volume from
//! the posed body, diffuse it with a box convolution, reject samples whose
//! diffused occupancy is zero, map the survivors to the canonical frame with
//! frozen nearest-voxel skinning weights plus a learned offset, and shade
//! them with a positional-encoded MLP before alpha compositing.
//!
//! All numeric code is generic over [`Real`]; the aliases at the bottom of
//! this file fix the scalar for the common cases.

pub mod body_model;
pub mod canonicalize;
mod error;
pub mod math;
pub mod neural;
pub mod renderer;
mod scalar;
pub mod synthetic;
pub mod trainer;
pub mod voxel_grid;

pub use error::{Error, Result};
pub use scalar::{sigmoid, softplus, Real};

pub type BodyModelF32 = body_model::BodyModel<f32>;
pub type BodyModelF64 = body_model::BodyModel<f64>;
pub type PoseF32 = body_model::Pose<f32>;
pub type PoseF64 = body_model::Pose<f64>;
pub type VoxelVolumeF32 = voxel_grid::VoxelVolume<f32>;
pub type ConvVolumeF32 = voxel_grid::ConvVolume<f32>;
pub type MlpF32 = neural::Mlp<f32>;
pub type MlpF64 = neural::Mlp<f64>;
pub type CameraF32 = renderer::Camera<f32>;
