use serde::{Deserialize, Serialize};

use crate::body_model::Pose;
use crate::{Error, Real, Result};

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<()> {
    if a.len() != b.len() || a.len() != width * height * 3 {
        return Err(Error::param(format!(
            "images of {} and {} values for {width}x{height}x3",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` on `[0, 1]` RGB, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "image sizes differ");
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter of a single-channel image.
fn filter_valid(img: &[f64], width: usize, height: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let ow = width + 1 - k;
    let oh = height + 1 - k;
    let mut tmp = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| win[i] * img[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM with an 11x11 Gaussian window (σ 1.5), data range 1, over
/// window positions fully inside the image, averaged over channels.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    check(a, b, width, height)?;
    let k = 2 * SSIM_RADIUS + 1;
    if width < k || height < k {
        return Err(Error::param(format!("SSIM needs at least {k}x{k} pixels")));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = (0..width * height).map(|i| a[i * 3 + ch] as f64).collect();
        let y: Vec<f64> = (0..width * height).map(|i| b[i * 3 + ch] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mx, ow, oh) = filter_valid(&x, width, height, &win);
        let (my, _, _) = filter_valid(&y, width, height, &win);
        let (mxx, _, _) = filter_valid(&prod(&x, &x), width, height, &win);
        let (myy, _, _) = filter_valid(&prod(&y, &y), width, height, &win);
        let (mxy, _, _) = filter_valid(&prod(&x, &y), width, height, &win);
        let mut s = 0.0;
        for i in 0..ow * oh {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cxy = mxy[i] - mx[i] * my[i];
            s += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += s / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Self {
        let n = frames.len().max(1) as f64;
        let mean_psnr = frames.iter().map(|f| f.psnr).sum::<f64>() / n;
        let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
        Self {
            frames,
            mean_psnr,
            mean_ssim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSimilarity {
    pub eval_index: usize,
    pub min: f64,
    pub max: f64,
    /// Train pose achieving `max`.
    pub argmax: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSimilarityReport {
    pub per_pose: Vec<PoseSimilarity>,
    /// Statistics of the per-eval-pose maxima.
    pub min_of_max: f64,
    pub max_of_max: f64,
    pub mean_of_max: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm pose vector; similarity defined as 0");
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Cosine similarity of flattened axis-angle vectors (root translation
/// excluded) between every eval pose and every train pose.
pub fn pose_similarity_report<T: Real>(train: &[Pose<T>], eval: &[Pose<T>]) -> Result<PoseSimilarityReport> {
    if train.is_empty() {
        return Err(Error::param("no training poses"));
    }
    let joints = train[0].num_joints();
    if train.iter().chain(eval).any(|p| p.num_joints() != joints) {
        return Err(Error::param("poses have different joint counts"));
    }
    let flat = |p: &Pose<T>| p.flat_rotations().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let tr: Vec<Vec<f64>> = train.iter().map(flat).collect();
    let per_pose: Vec<PoseSimilarity> = eval
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let e = flat(e);
            let mut best = PoseSimilarity {
                eval_index: i,
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
                argmax: 0,
            };
            for (j, t) in tr.iter().enumerate() {
                let s = cosine(&e, t);
                best.min = best.min.min(s);
                if s > best.max {
                    best.max = s;
                    best.argmax = j;
                }
            }
            best
        })
        .collect();
    let maxima: Vec<f64> = per_pose.iter().map(|p| p.max).collect();
    let n = maxima.len().max(1) as f64;
    Ok(PoseSimilarityReport {
        min_of_max: maxima.iter().copied().fold(f64::INFINITY, f64::min),
        max_of_max: maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_of_max: maxima.iter().sum::<f64>() / n,
        per_pose,
    })
}
