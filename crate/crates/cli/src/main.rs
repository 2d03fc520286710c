use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hnse_cli::*;
use hnse_core::trainer::Split;

#[derive(Parser, Debug)]
#[command(name = "hnse", version, about = "Conv-filtered articulated neural radiance fields")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with `[train]` and `[synth]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic capsule-figure dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_frames: Option<usize>,
        #[arg(long)]
        eval_frames: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Optimize the networks on a manifest's train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Uniformly subsample the train split to this many frames.
        #[arg(long)]
        few_shot: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSON lines, one step report each.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Render one pose of a pose file.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        body: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera_index: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the f32 accumulated-alpha buffer.
        #[arg(long)]
        alpha_dump: bool,
    },
    /// Render every pose of a sequence.
    Animate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        body: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera_index: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha_dump: bool,
    },
    /// PSNR/SSIM of a checkpoint (or stored predictions) against a split.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "eval")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Save the rendered frames here.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Learnable parameter counts per network.
    ReportParams {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        joints: usize,
    },
    /// Print the resolved configuration as TOML.
    DumpConfig,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let seed = cfg.train.seed;
    match cli.command {
        Command::Synth {
            out,
            train_frames,
            eval_frames,
            width,
            height,
        } => {
            let s = &mut cfg.synth;
            s.train_frames = train_frames.unwrap_or(s.train_frames);
            s.eval_frames = eval_frames.unwrap_or(s.eval_frames);
            s.width = width.unwrap_or(s.width);
            s.height = height.unwrap_or(s.height);
            let m = cmd_synth(&out, s, seed)?;
            println!("wrote {} frames to {}", m.frames.len(), out.display());
        }
        Command::Train {
            manifest,
            out,
            iterations,
            few_shot,
            resume,
            loss_log,
            checkpoint_every,
        } => {
            let t = &mut cfg.train;
            t.iterations = iterations.unwrap_or(t.iterations);
            t.few_shot = few_shot.or(t.few_shot);
            let opts = TrainOptions {
                resume,
                loss_log,
                checkpoint_every,
            };
            let s = cmd_train(&manifest, t, &out, &opts)?;
            println!(
                "trained {} iterations on {} frames in {:.1}s; final loss {:.5}",
                s.iterations,
                s.frames,
                s.seconds,
                s.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Render {
            checkpoint,
            body,
            poses,
            cameras,
            camera_index,
            frame,
            out,
            alpha_dump,
        } => {
            let inputs = load_render_inputs(&body, &poses, &cameras, camera_index)?;
            let p = cmd_render(&checkpoint, &inputs, frame, &out, alpha_dump)?;
            println!("{}", p.display());
        }
        Command::Animate {
            checkpoint,
            body,
            poses,
            cameras,
            camera_index,
            out,
            alpha_dump,
        } => {
            let inputs = load_render_inputs(&body, &poses, &cameras, camera_index)?;
            let ps = cmd_animate(&checkpoint, &inputs, &out, alpha_dump)?;
            println!("wrote {} frames to {}", ps.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            predictions,
            manifest,
            split,
            out,
            images,
        } => {
            let source = match (&checkpoint, &predictions) {
                (Some(c), _) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                (None, None) => return Err(CliError::Usage("--checkpoint or --predictions is required".into())),
            };
            let report = cmd_eval(source, &manifest, split, images.as_deref())?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Usage(e.to_string()))?;
            std::fs::write(&out, text).map_err(|e| CliError::Core(hnse_core::Error::io(&out, e)))?;
            println!(
                "mean PSNR {:.3} dB, mean SSIM {:.4} over {} frames",
                report.metrics.mean_psnr,
                report.metrics.mean_ssim,
                report.metrics.frames.len()
            );
        }
        Command::ReportParams { checkpoint, joints } => {
            let r = cmd_report_params(checkpoint.as_deref(), &cfg.train, joints)?;
            println!("appearance {}", r.appearance);
            println!("refine {}", r.refine);
            println!("kernel {}", r.kernel);
            println!("total {}", r.total);
            println!("refine_fraction {:.6}", r.refine_fraction());
        }
        Command::DumpConfig => print!("{}", cmd_dump_config(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
