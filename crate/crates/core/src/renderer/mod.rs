//! Ray generation, sampling within the grid box, alpha compositing, and the
//! per-frame pipeline that ties the filter, canonicalization and networks
//! together.

mod camera;
mod composite;
mod pipeline;
mod sampling;

pub use camera::{generate_ray, generate_rays, load_cameras, save_cameras, Camera, CameraFile, Ray};
pub use composite::{composite, composite_backward, Composite};
pub use pipeline::{
    prepare_frame, render_frame, render_frame_with, render_rays, trace_rays, FrameGeometry, NetworkGrads,
    Networks, RayTrace, RenderConfig, RenderStats, RenderedImage,
};
pub use sampling::{ray_aabb, sample_ray, Aabb, RaySamples};
