//! Command implementations behind the `hnse` binary. Each command is a plain
//! function so tests can drive the pipeline without spawning processes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hnse_core::body_model::{load_body_model, load_poses, BodyModel, Pose};
use hnse_core::renderer::{load_cameras, Camera, RenderedImage};
use hnse_core::synthetic::{write_dataset, SynthConfig};
use hnse_core::trainer::{
    evaluate, load_checkpoint, pose_similarity_report, psnr, save_checkpoint, ssim, train_step, Dataset,
    FrameMetrics, Manifest, MetricsReport, PoseSimilarityReport, ProxyScorer, Split, StepReport, TrainConfig,
    TrainState, VolumeCache,
};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(hnse_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<hnse_core::Error> for CliError {
    fn from(e: hnse_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        use hnse_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Param(_)) => 1,
            CliError::Core(E::Io { .. } | E::Format { .. } | E::Structure(_)) => 2,
            CliError::Core(E::NonFinite(_) | E::Internal(_)) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(hnse_core::Error::io(path, e))
}

/// Everything configurable from a file; `dump-config` prints this resolved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

pub fn load_config(path: Option<&Path>) -> CliResult<CliConfig> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    // a malformed config is a usage problem, not a data problem
    toml::from_str(&text).map_err(|e| {
        let at = e.span().map_or("<root>".to_string(), |s| format!("bytes {}..{}", s.start, s.end));
        CliError::Usage(format!("{} ({at}): {}", path.display(), e.message()))
    })
}

pub fn cmd_dump_config(cfg: &CliConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn cmd_synth(out: &Path, cfg: &SynthConfig, seed: u64) -> CliResult<Manifest> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    Ok(write_dataset(out, cfg, seed)?)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// One JSON step report per line.
    pub loss_log: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub frames: usize,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Trains up to `cfg.iterations` total iterations and writes the checkpoint.
/// With `iterations = 0` this saves the freshly initialized networks.
pub fn cmd_train(manifest: &Path, cfg: &TrainConfig, out: &Path, opts: &TrainOptions) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let data = Dataset::load(manifest, Split::Train, cfg.few_shot)?;
    let mut state = match &opts.resume {
        Some(p) => {
            let mut s = load_checkpoint(p)?;
            s.config.iterations = cfg.iterations;
            s
        }
        None => TrainState::new(cfg.clone(), data.body.num_joints())?,
    };
    let mut cache = VolumeCache::new(state.config.cache_capacity)?;
    let mut log_file = match &opts.loss_log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => None,
    };
    let start = Instant::now();
    let mut losses = Vec::new();
    while (state.iteration as usize) < state.config.iterations {
        let report = match train_step(&mut state, &data, &mut cache, &ProxyScorer) {
            Ok(r) => r,
            Err(e @ hnse_core::Error::NonFinite(_)) => {
                let diag = out.with_extension("nonfinite.txt");
                let _ = std::fs::write(&diag, e.to_string());
                log::error!("non-finite loss; diagnostics written to {}", diag.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        losses.push(report.loss);
        if let Some(f) = log_file.as_mut() {
            write_report(f, &report).map_err(|e| io_err(opts.loss_log.as_ref().unwrap(), e))?;
        }
        let it = report.iteration as usize;
        if state.config.log_every > 0 && it.is_multiple_of(state.config.log_every) {
            log::info!(
                "iter {it} loss {:.5} (perceptual {:.5}, mse {:.5}) kept {}/{} [{:.1}s]",
                report.loss,
                report.perceptual,
                report.mse,
                report.stats.kept_samples,
                report.stats.total_samples,
                start.elapsed().as_secs_f64()
            );
        }
        if let Some(every) = opts.checkpoint_every {
            if every > 0 && it.is_multiple_of(every) {
                save_checkpoint(out, &state)?;
            }
        }
    }
    if let Some(mut f) = log_file {
        f.flush().map_err(|e| io_err(opts.loss_log.as_ref().unwrap(), e))?;
    }
    save_checkpoint(out, &state)?;
    Ok(TrainSummary {
        iterations: state.iteration,
        frames: data.frames.len(),
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn write_report(f: &mut impl Write, r: &StepReport) -> std::io::Result<()> {
    serde_json::to_writer(&mut *f, r).map_err(std::io::Error::other)?;
    writeln!(f)
}

pub struct RenderInputs {
    pub body: BodyModel<f32>,
    pub poses: Vec<Pose<f32>>,
    pub camera: Camera<f32>,
}

pub fn load_render_inputs(body: &Path, poses: &Path, cameras: &Path, camera_index: usize) -> CliResult<RenderInputs> {
    let body: BodyModel<f32> = load_body_model(body)?;
    let poses: Vec<Pose<f32>> = load_poses(poses)?.into_iter().map(|(_, p)| p).collect();
    let cams: Vec<Camera<f32>> = load_cameras(cameras)?;
    let camera = cams.get(camera_index).cloned().ok_or_else(|| {
        CliError::Core(hnse_core::Error::format(
            cameras.display().to_string(),
            "cameras",
            format!("no camera {camera_index} among {}", cams.len()),
        ))
    })?;
    Ok(RenderInputs { body, poses, camera })
}

/// Renders the selected frames of `inputs` to `out/frame_NNNN.png`, with an
/// optional alpha dump next to each image.
pub fn render_frames(
    state: &TrainState,
    inputs: &RenderInputs,
    frames: &[usize],
    out: &Path,
    alpha_dump: bool,
) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut written = Vec::new();
    for &i in frames {
        let pose = inputs
            .poses
            .get(i)
            .ok_or_else(|| CliError::Usage(format!("frame {i} not in pose file ({} poses)", inputs.poses.len())))?;
        let (img, stats) = state.render(&inputs.body, pose, &inputs.camera)?;
        let path = out.join(format!("frame_{i:04}.png"));
        img.save_png(&path)?;
        if alpha_dump {
            img.write_alpha_dump(&path.with_extension("alpha"))?;
        }
        log::info!(
            "{}: {} MLP evaluations of {} samples",
            path.display(),
            stats.mlp_evaluations,
            stats.total_samples
        );
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_render(checkpoint: &Path, inputs: &RenderInputs, frame: usize, out: &Path, alpha_dump: bool) -> CliResult<PathBuf> {
    let state = load_checkpoint(checkpoint)?;
    Ok(render_frames(&state, inputs, &[frame], out, alpha_dump)?.remove(0))
}

/// Renders every pose of the sequence with no further optimization.
pub fn cmd_animate(checkpoint: &Path, inputs: &RenderInputs, out: &Path, alpha_dump: bool) -> CliResult<Vec<PathBuf>> {
    let state = load_checkpoint(checkpoint)?;
    let all: Vec<usize> = (0..inputs.poses.len()).collect();
    render_frames(&state, inputs, &all, out, alpha_dump)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    /// Iteration of the evaluated checkpoint; absent when scoring stored images.
    pub iteration: Option<u64>,
    pub metrics: MetricsReport,
    /// Eval poses against the manifest's train poses, when both exist.
    pub pose_similarity: Option<PoseSimilarityReport>,
}

pub enum EvalSource<'a> {
    Checkpoint(&'a Path),
    /// Directory holding images at the manifest's relative paths.
    Predictions(&'a Path),
}

pub fn cmd_eval(
    source: EvalSource,
    manifest: &Path,
    split: Split,
    images_out: Option<&Path>,
) -> CliResult<EvalReport> {
    let data = Dataset::load(manifest, split, None)?;
    let (metrics, iteration) = match source {
        EvalSource::Checkpoint(p) => {
            let state = load_checkpoint(p)?;
            let (metrics, images) = evaluate(&state, &data)?;
            if let Some(dir) = images_out {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                for (i, img) in images.iter().enumerate() {
                    img.save_png(&dir.join(format!("frame_{i:04}.png")))?;
                }
            }
            (metrics, Some(state.iteration))
        }
        EvalSource::Predictions(dir) => {
            let mut frames = Vec::new();
            for f in &data.frames {
                let pred = RenderedImage::load_png(&dir.join(&f.name), None)?;
                if (pred.width, pred.height) != (f.image.width, f.image.height) {
                    return Err(CliError::Core(hnse_core::Error::format(
                        dir.join(&f.name).display().to_string(),
                        "size",
                        "prediction size differs from the target",
                    )));
                }
                frames.push(FrameMetrics {
                    frame: f.name.clone(),
                    psnr: psnr(&pred.rgb, &f.image.rgb),
                    ssim: ssim(&pred.rgb, &f.image.rgb, pred.width, pred.height)?,
                });
            }
            (MetricsReport::from_frames(frames), None)
        }
    };
    let pose_similarity = match (split, Dataset::load(manifest, Split::Train, None)) {
        (Split::Eval, Ok(train)) => Some(pose_similarity_report(&train.poses(), &data.poses())?),
        _ => None,
    };
    Ok(EvalReport {
        split,
        iteration,
        metrics,
        pose_similarity,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub appearance: usize,
    pub refine: usize,
    /// Zero unless the conv kernel is trained.
    pub kernel: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn refine_fraction(&self) -> f64 {
        self.refine as f64 / self.total as f64
    }
}

pub fn param_report(state: &TrainState) -> ParamReport {
    let appearance = state.appearance.param_count();
    let refine = state.refine.param_count();
    let kernel = if state.config.learn_kernel {
        state.kernel.weights.len()
    } else {
        0
    };
    ParamReport {
        appearance,
        refine,
        kernel,
        total: appearance + refine + kernel,
    }
}

/// Counts from a checkpoint, or from a fresh initialization of `cfg`.
pub fn cmd_report_params(checkpoint: Option<&Path>, cfg: &TrainConfig, joints: usize) -> CliResult<ParamReport> {
    let state = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::new(cfg.clone(), joints)?,
    };
    Ok(param_report(&state))
}
