use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::VolumeCache;
use super::config::TrainConfig;
use super::dataset::{Dataset, Frame};
use super::loss::{loss_mse, mse_backward, Patch, PatchScorer};
use super::metrics::{psnr, ssim, FrameMetrics, MetricsReport};
use crate::body_model::{BodyModel, Pose};
use crate::neural::{adam_step, AdamState, AppearanceNet, RefineNet};
use crate::renderer::{
    generate_rays, prepare_frame, render_frame_with, trace_rays, Camera, Networks, RenderStats, RenderedImage,
};
use crate::voxel_grid::ConvKernel;
use crate::{Error, Result};

/// Everything a run needs to continue: networks, optimizer moments,
/// iteration counter and the batch RNG.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub iteration: u64,
    pub appearance: AppearanceNet<f32>,
    pub refine: RefineNet<f32>,
    pub adam_appearance: AdamState<f32>,
    pub adam_refine: AdamState<f32>,
    /// All ones and untouched unless `config.learn_kernel`.
    pub kernel: ConvKernel<f32>,
    pub adam_kernel: AdamState<f32>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh networks for a body with `joints` joints, seeded from the config.
    pub fn new(config: TrainConfig, joints: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let appearance = AppearanceNet::init(config.encoding, config.appearance_width, config.appearance_depth, &mut rng)?;
        let refine = RefineNet::init(joints + 1, config.kernel_size, config.refine_width, config.refine_layers, &mut rng)?;
        let kernel = ConvKernel::ones(config.kernel_size, joints + 1)?;
        Ok(Self {
            iteration: 0,
            adam_kernel: AdamState::new(kernel.weights.len()),
            kernel,
            adam_appearance: AdamState::new(appearance.param_count()),
            adam_refine: AdamState::new(refine.param_count()),
            appearance,
            refine,
            rng,
            config,
        })
    }

    pub fn networks(&self) -> Networks<'_, f32> {
        Networks {
            appearance: &self.appearance,
            refine: Some(&self.refine),
        }
    }

    /// Deterministic evaluation render of one pose.
    pub fn render(
        &self,
        body: &BodyModel<f32>,
        pose: &Pose<f32>,
        camera: &Camera<f32>,
    ) -> Result<(RenderedImage, RenderStats)> {
        if body.num_joints() + 1 != self.refine.feature_channels() {
            return Err(Error::param(format!(
                "checkpoint was trained for {} joints, body has {}",
                self.refine.feature_channels() - 1,
                body.num_joints()
            )));
        }
        let geom = prepare_frame(body, pose, self.config.voxel_size as f32, &self.kernel)?;
        render_frame_with(&geom, &self.networks(), camera, &self.config.eval_render())
    }
}

/// Pixels of one training step. The first `patch_count * patch_size²`
/// pixels are the patches, each row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub frame: usize,
    pub pixels: Vec<(usize, usize)>,
    pub patch_count: usize,
    pub patch_size: usize,
}

/// Patches centred on random foreground pixels, then extra foreground rays.
pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, frame: &Frame, index: usize, cfg: &TrainConfig) -> Result<Batch> {
    let (w, h) = (frame.image.width, frame.image.height);
    let p = cfg.patch_size;
    if cfg.patch_count > 0 && (p > w || p > h) {
        return Err(Error::param(format!("patch size {p} exceeds the {w}x{h} image")));
    }
    let mut fg: Vec<(usize, usize)> = (0..w * h)
        .filter(|&i| frame.image.alpha[i] > 0.5)
        .map(|i| (i % w, i / w))
        .collect();
    if fg.is_empty() {
        log::warn!("frame {} has an empty mask; sampling all pixels", frame.name);
        fg = (0..w * h).map(|i| (i % w, i / w)).collect();
    }
    let mut pixels = Vec::with_capacity(cfg.rays_per_batch);
    for _ in 0..cfg.patch_count {
        let (cx, cy) = fg[rng.random_range(0..fg.len())];
        let x0 = cx.saturating_sub(p / 2).min(w - p);
        let y0 = cy.saturating_sub(p / 2).min(h - p);
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                pixels.push((x, y));
            }
        }
    }
    while pixels.len() < cfg.rays_per_batch {
        pixels.push(fg[rng.random_range(0..fg.len())]);
    }
    Ok(Batch {
        frame: index,
        pixels,
        patch_count: cfg.patch_count,
        patch_size: p,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub frame: usize,
    pub loss: f64,
    pub perceptual: f64,
    pub mse: f64,
    pub foreground_rays: usize,
    pub stats: RenderStats,
}

/// One forward/backward/Adam step on `perceptual + λ·MSE`. Only the two
/// networks change, plus the conv kernel when `learn_kernel` is set; voxel
/// volumes are rebuilt from the body model and never written.
pub fn train_step(
    state: &mut TrainState,
    data: &Dataset,
    cache: &mut VolumeCache,
    scorer: &dyn PatchScorer,
) -> Result<StepReport> {
    let TrainState {
        config: cfg,
        iteration,
        appearance,
        refine,
        adam_appearance,
        adam_refine,
        kernel,
        adam_kernel,
        rng,
    } = state;
    let fi = rng.random_range(0..data.frames.len());
    let frame = &data.frames[fi];
    let geom = cache.get_or_build(&data.body, &frame.pose, cfg.voxel_size as f32, kernel)?;
    let batch = sample_batch(rng, frame, fi, cfg)?;
    let rays = generate_rays(&frame.camera, &batch.pixels)?;
    let rcfg = cfg.train_render();
    let nets = Networks {
        appearance: &*appearance,
        refine: Some(&*refine),
    };
    let trace = trace_rays(&geom, &nets, &rays, &rcfg, rng, true)?;

    let bg = cfg.background.map(|b| b as f32);
    let rendered: Vec<[f64; 3]> = trace.composites.iter().map(|c| c.over(bg).map(|v| v as f64)).collect();
    let w = frame.image.width;
    let target: Vec<[f64; 3]> = batch.pixels.iter().map(|&(x, y)| frame.image.pixel(x, y).map(|v| v as f64)).collect();
    let fg: Vec<bool> = batch.pixels.iter().map(|&(x, y)| frame.image.alpha[y * w + x] > 0.5).collect();

    let mse = loss_mse(&rendered, &target, &fg)?;
    let mut dpixel: Vec<[f64; 3]> = mse_backward(&rendered, &target, &fg)
        .into_iter()
        .map(|g| g.map(|v| v * cfg.lambda))
        .collect();

    let pp = batch.patch_size * batch.patch_size;
    let mut perceptual = 0.0;
    for g in 0..batch.patch_count {
        let span = g * pp..(g + 1) * pp;
        let flat = |v: &[[f64; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
        let r = Patch::unmasked(batch.patch_size, flat(&rendered[span.clone()]))?;
        let mask = batch.pixels[span.clone()]
            .iter()
            .map(|&(x, y)| frame.image.alpha[y * w + x] as f64)
            .collect();
        let t = Patch::new(batch.patch_size, flat(&target[span.clone()]), mask)?;
        let (s, grad) = scorer.score(g, &r, &t)?;
        perceptual += s / batch.patch_count as f64;
        if let Some(grad) = grad {
            for (k, d) in dpixel[span].iter_mut().enumerate() {
                for c in 0..3 {
                    d[c] += grad[k * 3 + c] / batch.patch_count as f64;
                }
            }
        }
    }
    let loss = perceptual + cfg.lambda * mse;
    if !loss.is_finite() || dpixel.iter().flatten().any(|v| !v.is_finite()) {
        let bad = rendered.iter().position(|c| c.iter().any(|v| !v.is_finite()));
        return Err(Error::NonFinite(format!(
            "iteration {} frame {} ({}): loss {loss} (perceptual {perceptual}, mse {mse}); first non-finite pixel {:?}; batch pixels {:?}",
            iteration,
            fi,
            frame.name,
            bad.map(|i| batch.pixels[i]),
            batch.pixels
        )));
    }

    let dpix32: Vec<[f32; 3]> = dpixel.iter().map(|g| g.map(|v| v as f32)).collect();
    let grads = trace.backward(&nets, bg, &dpix32)?;
    let kernel_grad = match (&grads.features, cfg.learn_kernel) {
        (Some(df), true) => Some(trace.kernel_backward(&geom, kernel, df)?),
        _ => None,
    };
    let stats = trace.stats;
    drop(trace);
    let adam = cfg.adam();
    if let Some(g) = kernel_grad {
        adam_step(&mut kernel.weights, &g, adam_kernel, &adam)?;
        // occupancy counting needs a non-negative kernel
        kernel.weights.iter_mut().for_each(|w| *w = w.max(0.0));
    }
    adam_step(appearance.mlp.params_mut(), &grads.appearance.values, adam_appearance, &adam)?;
    if let Some(g) = &grads.refine {
        adam_step(refine.mlp.params_mut(), &g.values, adam_refine, &adam)?;
    }
    *iteration += 1;
    Ok(StepReport {
        iteration: *iteration,
        frame: fi,
        loss,
        perceptual,
        mse,
        foreground_rays: fg.iter().filter(|&&f| f).count(),
        stats,
    })
}

/// Renders every frame of `data` and scores it against the target image.
pub fn evaluate(state: &TrainState, data: &Dataset) -> Result<(MetricsReport, Vec<RenderedImage>)> {
    let mut frames = Vec::with_capacity(data.frames.len());
    let mut images = Vec::with_capacity(data.frames.len());
    for f in &data.frames {
        let (img, _) = state.render(&data.body, &f.pose, &f.camera)?;
        frames.push(FrameMetrics {
            frame: f.name.clone(),
            psnr: psnr(&img.rgb, &f.image.rgb),
            ssim: ssim(&img.rgb, &f.image.rgb, img.width, img.height)?,
        });
        images.push(img);
    }
    Ok((MetricsReport::from_frames(frames), images))
}
