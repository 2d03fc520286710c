use crate::math::Vec3;
use crate::Real;

/// Composited ray. `color` excludes the background; the pixel value is
/// `color + transmittance * background`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite<T> {
    pub color: Vec3<T>,
    /// `Σ T_i α_i`.
    pub alpha: T,
    /// `Π (1 - α_i)`.
    pub transmittance: T,
}

impl<T: Real> Composite<T> {
    pub fn empty() -> Self {
        Self {
            color: [T::zero(); 3],
            alpha: T::zero(),
            transmittance: T::one(),
        }
    }

    pub fn over(&self, background: Vec3<T>) -> Vec3<T> {
        [0, 1, 2].map(|c| self.color[c] + self.transmittance * background[c])
    }
}

#[inline]
fn alpha_of(sigma: f64, delta: f64) -> f64 {
    -(-sigma * delta).exp_m1()
}

/// Front-to-back alpha compositing; accumulation in f64.
pub fn composite<T: Real>(colors: &[Vec3<T>], sigmas: &[T], deltas: &[T]) -> Composite<T> {
    assert!(colors.len() == sigmas.len() && sigmas.len() == deltas.len(), "sample arrays differ in length");
    let mut trans = 1.0f64;
    let mut acc = [0.0f64; 3];
    let mut alpha = 0.0f64;
    for ((c, &s), &d) in colors.iter().zip(sigmas).zip(deltas) {
        let a = alpha_of(s.as_f64(), d.as_f64());
        let w = trans * a;
        for k in 0..3 {
            acc[k] += w * c[k].as_f64();
        }
        alpha += w;
        trans *= 1.0 - a;
    }
    Composite {
        color: acc.map(T::lit),
        alpha: T::lit(alpha),
        transmittance: T::lit(trans),
    }
}

/// Gradients of a pixel loss with respect to every sample's color and
/// density, given `dL/dC` for the pixel `color + T_final * background`.
///
/// `dC/dσ_i = Δt_i (T_{i+1} c_i - Σ_{k>i} w_k c_k - T_final bg)`.
pub fn composite_backward<T: Real>(
    colors: &[Vec3<T>],
    sigmas: &[T],
    deltas: &[T],
    background: Vec3<T>,
    grad: Vec3<T>,
    dcolors: &mut [Vec3<T>],
    dsigmas: &mut [T],
) {
    let n = colors.len();
    assert!(sigmas.len() == n && deltas.len() == n && dcolors.len() == n && dsigmas.len() == n);
    let g = grad.map(|v| v.as_f64());
    // forward pass: weights and post-sample transmittance
    let mut w = vec![0.0f64; n];
    let mut t_after = vec![0.0f64; n];
    let mut trans = 1.0f64;
    for i in 0..n {
        let a = alpha_of(sigmas[i].as_f64(), deltas[i].as_f64());
        w[i] = trans * a;
        trans *= 1.0 - a;
        t_after[i] = trans;
    }
    let bg: f64 = (0..3).map(|k| g[k] * background[k].as_f64()).sum();
    // suffix of g·(Σ_{k>i} w_k c_k) + g·T_final bg
    let mut tail = trans * bg;
    for i in (0..n).rev() {
        let gc: f64 = (0..3).map(|k| g[k] * colors[i][k].as_f64()).sum();
        dsigmas[i] = T::lit(deltas[i].as_f64() * (t_after[i] * gc - tail));
        dcolors[i] = [0, 1, 2].map(|k| T::lit(w[i] * g[k]));
        tail += w[i] * gc;
    }
}
