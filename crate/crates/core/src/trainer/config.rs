use serde::{Deserialize, Serialize};

use crate::neural::{AdamConfig, EncodingSpec, APPEARANCE_DEPTH, APPEARANCE_WIDTH, REFINE_LAYERS, REFINE_WIDTH};
use crate::renderer::RenderConfig;
use crate::voxel_grid::{DEFAULT_KERNEL_SIZE, DEFAULT_VOXEL_SIZE};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Total rays per step: the patches plus extra foreground rays.
    pub rays_per_batch: usize,
    pub patch_count: usize,
    pub patch_size: usize,
    /// Weight of the MSE term.
    pub lambda: f64,
    pub lr: f64,
    pub seed: u64,
    pub voxel_size: f64,
    pub kernel_size: usize,
    /// Train the conv kernel (kept non-negative) instead of freezing it at ones.
    pub learn_kernel: bool,
    /// Samples per ray while training.
    pub n_samples: usize,
    /// Samples per ray for evaluation renders.
    pub eval_samples: usize,
    pub encoding: EncodingSpec,
    pub appearance_width: usize,
    pub appearance_depth: usize,
    pub refine_width: usize,
    pub refine_layers: usize,
    /// Distinct poses whose volumes stay cached.
    pub cache_capacity: usize,
    /// Uniformly subsample the training split to this many frames.
    pub few_shot: Option<usize>,
    pub background: [f64; 3],
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            rays_per_batch: 1024,
            patch_count: 2,
            patch_size: 16,
            lambda: 0.2,
            lr: AdamConfig::default().lr,
            seed: 0,
            voxel_size: DEFAULT_VOXEL_SIZE,
            kernel_size: DEFAULT_KERNEL_SIZE,
            learn_kernel: false,
            n_samples: 128,
            eval_samples: 128,
            encoding: EncodingSpec::default(),
            appearance_width: APPEARANCE_WIDTH,
            appearance_depth: APPEARANCE_DEPTH,
            refine_width: REFINE_WIDTH,
            refine_layers: REFINE_LAYERS,
            cache_capacity: 64,
            few_shot: None,
            background: [0.0; 3],
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rays_per_batch", self.rays_per_batch),
            ("patch_size", self.patch_size),
            ("n_samples", self.n_samples),
            ("eval_samples", self.eval_samples),
            ("appearance_width", self.appearance_width),
            ("appearance_depth", self.appearance_depth),
            ("refine_width", self.refine_width),
            ("refine_layers", self.refine_layers),
            ("cache_capacity", self.cache_capacity),
            ("kernel_size", self.kernel_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.patch_count * self.patch_size * self.patch_size > self.rays_per_batch {
            return Err(Error::param("patches exceed the ray budget"));
        }
        if self.patch_count > 0 && !self.patch_size.is_multiple_of(4) {
            return Err(Error::param("patch_size must be a multiple of 4 for the multiscale loss"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::param("kernel_size must be odd"));
        }
        if !(self.lr > 0.0 && self.voxel_size > 0.0 && self.lambda >= 0.0) {
            return Err(Error::param("lr and voxel_size must be positive, lambda non-negative"));
        }
        if self.few_shot == Some(0) {
            return Err(Error::param("few_shot must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn train_render(&self) -> RenderConfig {
        RenderConfig {
            n_samples: self.n_samples,
            stratified: true,
            background: self.background,
            filter: true,
            voxel_size: self.voxel_size,
            kernel_size: self.kernel_size,
            ..RenderConfig::default()
        }
    }

    pub fn eval_render(&self) -> RenderConfig {
        RenderConfig {
            n_samples: self.eval_samples,
            stratified: false,
            ..self.train_render()
        }
    }
}
