use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::{generate_ray, Camera, Ray};
use super::composite::{composite, composite_backward, Composite};
use super::sampling::{sample_ray, Aabb};
use crate::body_model::{joint_transforms, pose_vertices, BodyModel, JointTransforms, Pose};
use crate::canonicalize::{clamp_offset, refine_inputs, rigid_deform, OFFSET_CLAMP};
use crate::math::{self, Vec3};
use crate::neural::{pe_backward, pe_encode_into, AppearanceCache, AppearanceNet, Gradients, MlpCache, RefineNet};
use crate::voxel_grid::{
    conv_diffuse_with, conv_kernel_backward, nearest_weight_into, voxelize, ConvKernel, ConvVolume, VoxelVolume, VoxelizeParams,
    DEFAULT_KERNEL_SIZE, DEFAULT_VOXEL_SIZE,
};
use crate::{Error, Real, Result};

pub const ALPHA_DUMP_MAGIC: [u8; 8] = *b"HNSEALP\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub stratified: bool,
    pub background: [f64; 3],
    /// `false` evaluates every sample (reference mode for timing).
    pub filter: bool,
    pub voxel_size: f64,
    pub kernel_size: usize,
    /// Rays traced together when rendering whole frames.
    pub ray_block: usize,
    /// Jitter seed, used only when `stratified`.
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_samples: 128,
            stratified: false,
            background: [0.0; 3],
            filter: true,
            voxel_size: DEFAULT_VOXEL_SIZE,
            kernel_size: DEFAULT_KERNEL_SIZE,
            ray_block: 1024,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.ray_block == 0 {
            return Err(Error::param("n_samples and ray_block must be positive"));
        }
        if !(self.voxel_size > 0.0) || self.kernel_size.is_multiple_of(2) {
            return Err(Error::param("voxel_size must be positive and kernel_size odd"));
        }
        if self.background.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::param("background components must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-pose volumes and transforms shared by every ray of a frame.
#[derive(Clone, Debug)]
pub struct FrameGeometry<T> {
    pub volume: VoxelVolume<T>,
    pub conv: ConvVolume<T>,
    pub transforms: JointTransforms<T>,
    pub aabb: Aabb<T>,
}

impl<T: Real> FrameGeometry<T> {
    /// Any sample with positive diffused occupancy has an occupied voxel
    /// within this Chebyshev radius.
    pub fn max_radius(&self) -> usize {
        self.conv.kernel_size() / 2
    }
}

pub fn prepare_frame<T: Real>(
    body: &BodyModel<T>,
    pose: &Pose<T>,
    voxel_size: T,
    kernel: &ConvKernel<T>,
) -> Result<FrameGeometry<T>> {
    let posed = pose_vertices(body, pose)?;
    let volume = voxelize(
        &posed,
        body.skin_weights(),
        VoxelizeParams {
            voxel_size,
            kernel_size: kernel.size(),
        },
    )?;
    let conv = conv_diffuse_with(&volume, kernel)?;
    let (min, max) = volume.spec().aabb();
    Ok(FrameGeometry {
        transforms: joint_transforms(body, pose)?,
        aabb: Aabb { min, max },
        volume,
        conv,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Networks<'a, T> {
    pub appearance: &'a AppearanceNet<T>,
    /// `None` disables the learned offset.
    pub refine: Option<&'a RefineNet<T>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderStats {
    pub rays: usize,
    pub total_samples: usize,
    /// Samples with positive diffused occupancy.
    pub kept_samples: usize,
    /// Rows pushed through the appearance net.
    pub mlp_evaluations: usize,
}

impl RenderStats {
    pub fn add(&mut self, o: &RenderStats) {
        self.rays += o.rays;
        self.total_samples += o.total_samples;
        self.kept_samples += o.kept_samples;
        self.mlp_evaluations += o.mlp_evaluations;
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.total_samples == 0 {
            0.0
        } else {
            self.kept_samples as f64 / self.total_samples as f64
        }
    }
}

pub struct NetworkGrads<T> {
    pub appearance: Gradients<T>,
    pub refine: Option<Gradients<T>>,
    /// `dL/d(feature)` per evaluated sample, row-major `m x (J + 1)`; present
    /// with a refinement net.
    pub features: Option<Vec<T>>,
}

/// Everything a traced ray batch needs for its backward pass. Evaluated
/// samples are stored ray-major; ray `r` owns `offsets[r]..offsets[r + 1]`.
pub struct RayTrace<T> {
    pub composites: Vec<Composite<T>>,
    pub stats: RenderStats,
    offsets: Vec<usize>,
    deltas: Vec<T>,
    colors: Vec<Vec3<T>>,
    densities: Vec<T>,
    canonical: Vec<Vec3<T>>,
    /// Feature voxel of every evaluated sample; kept only with gradients.
    cells: Vec<[i64; 3]>,
    /// Per axis, whether the offset was clamped.
    clamped: Vec<[bool; 3]>,
    appearance_cache: Option<AppearanceCache<T>>,
    refine_caches: Option<Vec<MlpCache<T>>>,
}

const POINT_CHUNK: usize = 2048;

/// Samples, filters, canonicalizes, shades and composites a batch of rays.
/// With `with_grad` the activations needed by [`RayTrace::backward`] are kept.
pub fn trace_rays<T: Real, R: Rng + ?Sized>(
    geom: &FrameGeometry<T>,
    nets: &Networks<T>,
    rays: &[Ray<T>],
    cfg: &RenderConfig,
    rng: &mut R,
    with_grad: bool,
) -> Result<RayTrace<T>> {
    let channels = geom.conv.channels();
    let joints = geom.volume.num_joints();
    if let Some(net) = nets.refine {
        if net.feature_channels() != channels {
            return Err(Error::param(format!(
                "refinement net expects {} feature channels, volume has {channels}",
                net.feature_channels()
            )));
        }
    }

    // sample → filter
    let mut stats = RenderStats {
        rays: rays.len(),
        ..Default::default()
    };
    let mut offsets = Vec::with_capacity(rays.len() + 1);
    offsets.push(0);
    let mut points = Vec::new();
    let mut deltas = Vec::new();
    let mut features = Vec::new();
    let mut cells = Vec::new();
    let mut feat = vec![T::zero(); channels];
    for ray in rays {
        let s = sample_ray(ray, &geom.aabb, cfg.n_samples, cfg.stratified, rng);
        stats.total_samples += s.len();
        for (&p, &d) in s.positions.iter().zip(&s.deltas) {
            let cell = geom.conv.spec().voxel_of(p);
            let occupied = match geom.conv.get(cell) {
                Some(v) if v[0] > T::zero() => {
                    feat.copy_from_slice(v);
                    true
                }
                Some(v) => {
                    feat.copy_from_slice(v);
                    false
                }
                None => {
                    feat.iter_mut().for_each(|f| *f = T::zero());
                    false
                }
            };
            stats.kept_samples += occupied as usize;
            if occupied || !cfg.filter {
                points.push(p);
                deltas.push(d);
                features.extend_from_slice(&feat);
                if with_grad {
                    cells.push(cell);
                }
            }
        }
        offsets.push(points.len());
    }
    let m = points.len();
    stats.mlp_evaluations = m;

    // nearest weights → rigid canonical point
    let radius = geom.max_radius();
    let rigid: Vec<Vec3<T>> = points
        .par_chunks(POINT_CHUNK)
        .map(|chunk| {
            let mut w = vec![T::zero(); joints];
            chunk
                .iter()
                .map(|&p| {
                    if nearest_weight_into(&geom.volume, p, radius, &mut w).is_err() {
                        if cfg.filter {
                            return Err(Error::Internal("kept sample without an occupied neighbour".into()));
                        }
                        // reference mode: far samples follow the root
                        w.iter_mut().for_each(|x| *x = T::zero());
                        w[0] = T::one();
                    }
                    Ok(rigid_deform(p, &w, &geom.transforms))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .concat();

    // learned offset
    let mut canonical = rigid.clone();
    let mut clamped = vec![[false; 3]; m];
    let mut refine_caches = None;
    if let Some(net) = nets.refine {
        let x = refine_inputs(net, &features, &rigid)?;
        let out = if with_grad {
            let (out, caches) = net.mlp.forward_chunked(x.view())?;
            refine_caches = Some(caches);
            out
        } else {
            net.mlp.forward_par(x.view())?
        };
        let c = T::lit(OFFSET_CLAMP);
        for (i, row) in out.rows().into_iter().enumerate() {
            let raw = [row[0], row[1], row[2]];
            clamped[i] = raw.map(|o| !(o.abs() < c));
            canonical[i] = math::add(rigid[i], clamp_offset(raw));
        }
    }

    // encode → shade
    let spec = nets.appearance.encoding;
    let dim = spec.output_dim();
    let mut encoded = Array2::zeros((m, dim));
    encoded
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(dim * POINT_CHUNK)
        .enumerate()
        .for_each(|(ci, block)| {
            for (j, row) in block.chunks_mut(dim).enumerate() {
                pe_encode_into(canonical[ci * POINT_CHUNK + j], spec, row);
            }
        });
    let (color_arr, density_arr, appearance_cache) = if with_grad {
        let (c, d, cache) = nets.appearance.forward_cached(encoded.view())?;
        (c, d, Some(cache))
    } else {
        let (c, d) = nets.appearance.forward(encoded.view())?;
        (c, d, None)
    };
    let colors: Vec<Vec3<T>> = color_arr.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
    let densities = density_arr.to_vec();
    if let Some(i) = densities
        .iter()
        .zip(&colors)
        .position(|(d, c)| !d.is_finite() || c.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite(format!(
            "appearance output at sample {:?} is not finite",
            points[i].map(|v| v.as_f64())
        )));
    }

    let composites = (0..rays.len())
        .map(|r| {
            let (a, b) = (offsets[r], offsets[r + 1]);
            composite(&colors[a..b], &densities[a..b], &deltas[a..b])
        })
        .collect();

    Ok(RayTrace {
        composites,
        stats,
        offsets,
        deltas,
        colors,
        densities,
        canonical,
        cells,
        clamped,
        appearance_cache,
        refine_caches,
    })
}

impl<T: Real> RayTrace<T> {
    /// Parameter gradients for upstream `dL/dC` per ray, where `C` is the
    /// pixel value including `background`.
    pub fn backward(&self, nets: &Networks<T>, background: Vec3<T>, dpixel: &[Vec3<T>]) -> Result<NetworkGrads<T>> {
        let cache = self
            .appearance_cache
            .as_ref()
            .ok_or_else(|| Error::Internal("trace was recorded without gradients".into()))?;
        if dpixel.len() + 1 != self.offsets.len() {
            return Err(Error::param("one pixel gradient per ray is required"));
        }
        let m = self.colors.len();
        let mut dcolors = vec![[T::zero(); 3]; m];
        let mut dsigmas = vec![T::zero(); m];
        for (r, g) in dpixel.iter().enumerate() {
            let (a, b) = (self.offsets[r], self.offsets[r + 1]);
            composite_backward(
                &self.colors[a..b],
                &self.densities[a..b],
                &self.deltas[a..b],
                background,
                *g,
                &mut dcolors[a..b],
                &mut dsigmas[a..b],
            );
        }
        let dcolor = Array2::from_shape_fn((m, 3), |(i, k)| dcolors[i][k]);
        let (appearance, d_encoded) = nets.appearance.backward(cache, dcolor.view(), &dsigmas);

        let (refine, features) = match (nets.refine, &self.refine_caches) {
            (Some(net), Some(caches)) => {
                let spec = nets.appearance.encoding;
                let mut doff = Array2::zeros((m, 3));
                for i in 0..m {
                    let row = d_encoded.row(i);
                    let dx = pe_backward(self.canonical[i], spec, row.as_slice().expect("standard layout"));
                    for k in 0..3 {
                        if !self.clamped[i][k] {
                            doff[(i, k)] = dx[k];
                        }
                    }
                }
                let (g, dx) = net.mlp.backward_chunked(caches, doff.view());
                let c = net.feature_channels();
                let mut df = Vec::with_capacity(m * c);
                for row in dx.rows() {
                    df.extend(row.iter().take(c).map(|&v| v * net.feature_scale));
                }
                (Some(g), Some(df))
            }
            (None, _) => (None, None),
            (Some(_), None) => return Err(Error::Internal("refinement activations missing".into())),
        };
        Ok(NetworkGrads {
            appearance,
            refine,
            features,
        })
    }

    /// Kernel gradient from the feature gradients of [`RayTrace::backward`].
    pub fn kernel_backward(&self, geom: &FrameGeometry<T>, kernel: &ConvKernel<T>, dfeatures: &[T]) -> Result<Vec<T>> {
        if self.cells.len() != self.colors.len() {
            return Err(Error::Internal("trace was recorded without gradients".into()));
        }
        conv_kernel_backward(&geom.volume, kernel, &self.cells, dfeatures)
    }

    pub fn num_evaluated(&self) -> usize {
        self.colors.len()
    }
}

/// Traces rays in blocks of `cfg.ray_block` without keeping activations.
pub fn render_rays<T: Real, R: Rng + ?Sized>(
    geom: &FrameGeometry<T>,
    nets: &Networks<T>,
    rays: &[Ray<T>],
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<(Vec<Composite<T>>, RenderStats)> {
    let mut out = Vec::with_capacity(rays.len());
    let mut stats = RenderStats::default();
    for block in rays.chunks(cfg.ray_block) {
        let t = trace_rays(geom, nets, block, cfg, rng, false)?;
        stats.add(&t.stats);
        out.extend(t.composites);
    }
    Ok((out, stats))
}

/// Linear RGB and accumulated alpha, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// `height x width x 3`.
    pub rgb: Vec<f32>,
    pub alpha: Vec<f32>,
}

impl RenderedImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| image_error(path, e))
    }

    /// Alpha as an 8-bit grayscale PNG (the mask format).
    pub fn save_alpha_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.alpha.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::L8)
            .map_err(|e| image_error(path, e))
    }

    /// Magic, `u32` width and height, then `f32` alpha; little-endian.
    pub fn write_alpha_dump(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.alpha.len() * 4);
        buf.extend_from_slice(&ALPHA_DUMP_MAGIC);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for a in &self.alpha {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_alpha_dump(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let src = path.display().to_string();
        if bytes.len() < 16 || bytes[..8] != ALPHA_DUMP_MAGIC {
            return Err(Error::format(&src, "magic", "not an alpha dump"));
        }
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + w * h * 4 {
            return Err(Error::format(&src, "alpha", "length does not match dimensions"));
        }
        let alpha = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((w, h, alpha))
    }

    /// RGB PNG, optionally with a grayscale mask PNG as alpha.
    pub fn load_png(path: &Path, mask: Option<&Path>) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let rgb = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        let alpha = match mask {
            Some(mp) => {
                let m = image::open(mp).map_err(|e| image_error(mp, e))?.into_luma8();
                if (m.width() as usize, m.height() as usize) != (w, h) {
                    return Err(Error::format(
                        mp.display().to_string(),
                        "size",
                        format!("mask is {}x{}, image is {w}x{h}", m.width(), m.height()),
                    ));
                }
                m.as_raw().iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect()
            }
            None => vec![1.0; w * h],
        };
        Ok(Self {
            width: w,
            height: h,
            rgb,
            alpha,
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path.display().to_string(), "image", other.to_string()),
    }
}

/// Renders a full frame from a prepared geometry.
pub fn render_frame_with<T: Real>(
    geom: &FrameGeometry<T>,
    nets: &Networks<T>,
    camera: &Camera<T>,
    cfg: &RenderConfig,
) -> Result<(RenderedImage, RenderStats)> {
    cfg.validate()?;
    let rays: Vec<Ray<T>> = (0..camera.height)
        .flat_map(|y| (0..camera.width).map(move |x| (x, y)))
        .map(|(x, y)| generate_ray(camera, x, y))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (comps, stats) = render_rays(geom, nets, &rays, cfg, &mut rng)?;
    let bg = cfg.background.map(T::lit);
    let mut img = RenderedImage::new(camera.width, camera.height);
    for (i, c) in comps.iter().enumerate() {
        let p = c.over(bg);
        for k in 0..3 {
            img.rgb[i * 3 + k] = p[k].as_f32();
        }
        img.alpha[i] = c.alpha.as_f32().clamp(0.0, 1.0);
    }
    Ok((img, stats))
}

/// Builds the frame geometry with an all-ones kernel and renders.
pub fn render_frame<T: Real>(
    body: &BodyModel<T>,
    pose: &Pose<T>,
    nets: &Networks<T>,
    camera: &Camera<T>,
    cfg: &RenderConfig,
) -> Result<(RenderedImage, RenderStats)> {
    cfg.validate()?;
    let kernel = ConvKernel::ones(cfg.kernel_size, body.num_joints() + 1)?;
    let geom = prepare_frame(body, pose, T::lit(cfg.voxel_size), &kernel)?;
    render_frame_with(&geom, nets, camera, cfg)
}
