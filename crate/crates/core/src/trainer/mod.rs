//! Optimization of the refinement and appearance networks from posed
//! images, plus checkpoints and image-quality metrics.

mod cache;
mod checkpoint;
mod config;
mod dataset;
mod loss;
mod metrics;
mod train;

pub use cache::VolumeCache;
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::TrainConfig;
pub use dataset::{few_shot_indices, Dataset, Frame, FrameRecord, Manifest, PoseRef, Split, MANIFEST_VERSION};
pub use loss::{
    loss_mse, loss_perceptual, mse_backward, Patch, PatchScorer, PrecomputedScores, ProxyScorer, PROXY_SCALES,
};
pub use metrics::{
    pose_similarity_report, psnr, ssim, FrameMetrics, MetricsReport, PoseSimilarity, PoseSimilarityReport, PSNR_CAP,
};
pub use train::{evaluate, sample_batch, train_step, Batch, StepReport, TrainState};
