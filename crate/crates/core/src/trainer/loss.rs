use crate::{Error, Result};

/// Square RGB patch with a multiplicative mask; row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize, rgb: Vec<f64>, mask: Vec<f64>) -> Result<Self> {
        if rgb.len() != size * size * 3 || mask.len() != size * size {
            return Err(Error::param(format!("patch buffers do not match size {size}")));
        }
        Ok(Self { size, rgb, mask })
    }

    pub fn unmasked(size: usize, rgb: Vec<f64>) -> Result<Self> {
        Self::new(size, rgb, vec![1.0; size * size])
    }

    fn masked(&self) -> Vec<f64> {
        self.rgb
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.mask[i / 3])
            .collect()
    }
}

/// Dyadic scales in the built-in perceptual proxy.
pub const PROXY_SCALES: usize = 3;

/// Pluggable perceptual term. Returns the score for patch `index` of the
/// batch and, when the scorer can provide it, `d score / d rendered.rgb`.
pub trait PatchScorer: Send + Sync {
    fn score(&self, index: usize, rendered: &Patch, target: &Patch) -> Result<(f64, Option<Vec<f64>>)>;
}

/// Mean over 3 dyadic scales of color L1 plus horizontal and vertical
/// gradient-difference L1, on masked patches.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProxyScorer;

impl PatchScorer for ProxyScorer {
    fn score(&self, _index: usize, rendered: &Patch, target: &Patch) -> Result<(f64, Option<Vec<f64>>)> {
        let (s, g) = proxy(rendered, target)?;
        Ok((s, Some(g)))
    }
}

/// Scores computed elsewhere (for example by a pretrained network), looked
/// up by patch index. No gradient is available, so training with it only
/// reports the term.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedScores {
    pub scores: Vec<f64>,
}

impl PatchScorer for PrecomputedScores {
    fn score(&self, index: usize, rendered: &Patch, target: &Patch) -> Result<(f64, Option<Vec<f64>>)> {
        check_pair(rendered, target)?;
        let s = *self
            .scores
            .get(index)
            .ok_or_else(|| Error::param(format!("no precomputed score for patch {index}")))?;
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::param(format!("precomputed score {s} is not a non-negative number")));
        }
        Ok((s, None))
    }
}

fn check_pair(a: &Patch, b: &Patch) -> Result<()> {
    if a.size != b.size || a.rgb.len() != b.rgb.len() || a.mask.len() != b.mask.len() {
        return Err(Error::param(format!("patch sizes differ: {} vs {}", a.size, b.size)));
    }
    if a.rgb.len() != a.size * a.size * 3 || a.mask.len() != a.size * a.size {
        return Err(Error::param("patch buffers do not match their size"));
    }
    if !a.size.is_multiple_of(1 << (PROXY_SCALES - 1)) {
        return Err(Error::param(format!("patch size {} is not divisible by 4", a.size)));
    }
    Ok(())
}

#[inline]
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pool(e: &[f64], n: usize) -> Vec<f64> {
    let m = n / 2;
    let mut out = vec![0.0; m * m * 3];
    for y in 0..m {
        for x in 0..m {
            for c in 0..3 {
                let at = |yy: usize, xx: usize| e[(yy * n + xx) * 3 + c];
                out[(y * m + x) * 3 + c] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    out
}

fn unpool(g: &[f64], m: usize) -> Vec<f64> {
    let n = 2 * m;
    let mut out = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                out[(y * n + x) * 3 + c] = 0.25 * g[((y / 2) * m + x / 2) * 3 + c];
            }
        }
    }
    out
}

/// One scale: score and gradient with respect to the difference image.
fn scale_term(e: &[f64], n: usize) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; e.len()];
    let nc = (n * n * 3) as f64;
    let mut s = e.iter().map(|v| v.abs()).sum::<f64>() / nc;
    for (gi, v) in g.iter_mut().zip(e) {
        *gi = sgn(*v) / nc;
    }
    if n > 1 {
        let nd = (n * (n - 1) * 3) as f64;
        let mut sh = 0.0;
        let mut sv = 0.0;
        for y in 0..n {
            for x in 0..n {
                for c in 0..3 {
                    let i = (y * n + x) * 3 + c;
                    if x + 1 < n {
                        let j = i + 3;
                        let d = e[j] - e[i];
                        sh += d.abs();
                        g[j] += sgn(d) / nd;
                        g[i] -= sgn(d) / nd;
                    }
                    if y + 1 < n {
                        let j = i + n * 3;
                        let d = e[j] - e[i];
                        sv += d.abs();
                        g[j] += sgn(d) / nd;
                        g[i] -= sgn(d) / nd;
                    }
                }
            }
        }
        s += (sh + sv) / nd;
    }
    (s, g)
}

fn proxy(rendered: &Patch, target: &Patch) -> Result<(f64, Vec<f64>)> {
    check_pair(rendered, target)?;
    let a = rendered.masked();
    let b = target.masked();
    let mut e: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let mut n = rendered.size;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(PROXY_SCALES);
    for s in 0..PROXY_SCALES {
        if s > 0 {
            e = pool(&e, n);
            n /= 2;
        }
        let (v, g) = scale_term(&e, n);
        total += v;
        grads.push((g, n));
    }
    // back through the pooling chain, coarse to fine
    let mut acc: Vec<f64> = Vec::new();
    for (g, n) in grads.into_iter().rev() {
        acc = if acc.is_empty() {
            g
        } else {
            let up = unpool(&acc, n / 2);
            debug_assert_eq!(up.len(), g.len());
            up.iter().zip(&g).map(|(u, v)| u + v).collect()
        };
    }
    let k = PROXY_SCALES as f64;
    let grad = acc
        .iter()
        .enumerate()
        .map(|(i, g)| g / k * rendered.mask[i / 3])
        .collect();
    Ok((total / k, grad))
}

/// Built-in proxy, averaged over patches.
pub fn loss_perceptual(rendered: &[Patch], target: &[Patch]) -> Result<f64> {
    if rendered.len() != target.len() {
        return Err(Error::param("rendered and target patch counts differ"));
    }
    if rendered.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (a, b) in rendered.iter().zip(target) {
        sum += proxy(a, b)?.0;
    }
    Ok(sum / rendered.len() as f64)
}

/// Mean squared color error over foreground rays.
pub fn loss_mse(rendered: &[[f64; 3]], target: &[[f64; 3]], foreground: &[bool]) -> Result<f64> {
    if rendered.len() != target.len() || target.len() != foreground.len() {
        return Err(Error::param("ray counts differ"));
    }
    let n = foreground.iter().filter(|&&f| f).count();
    if n == 0 {
        log::warn!("MSE over an empty foreground selection is defined as 0");
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for ((a, b), &f) in rendered.iter().zip(target).zip(foreground) {
        if f {
            sum += (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        }
    }
    Ok(sum / n as f64)
}

/// `d loss_mse / d rendered`.
pub fn mse_backward(rendered: &[[f64; 3]], target: &[[f64; 3]], foreground: &[bool]) -> Vec<[f64; 3]> {
    let n = foreground.iter().filter(|&&f| f).count().max(1) as f64;
    rendered
        .iter()
        .zip(target)
        .zip(foreground)
        .map(|((a, b), &f)| if f { [0, 1, 2].map(|k| 2.0 * (a[k] - b[k]) / n) } else { [0.0; 3] })
        .collect()
}
