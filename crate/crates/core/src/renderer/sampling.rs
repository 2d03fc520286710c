use rand::Rng;

use super::camera::Ray;
use crate::math::Vec3;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

/// Parametric `[t_near, t_far]` of the ray inside the box, `t_near >= 0`.
pub fn ray_aabb<T: Real>(ray: &Ray<T>, aabb: &Aabb<T>) -> Option<(T, T)> {
    let mut near = T::zero();
    let mut far = T::infinity();
    for a in 0..3 {
        let d = ray.direction[a];
        if d == T::zero() {
            if ray.origin[a] < aabb.min[a] || ray.origin[a] > aabb.max[a] {
                return None;
            }
            continue;
        }
        let inv = T::one() / d;
        let mut t0 = (aabb.min[a] - ray.origin[a]) * inv;
        let mut t1 = (aabb.max[a] - ray.origin[a]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        near = near.max(t0);
        far = far.min(t1);
    }
    (far > near).then_some((near, far))
}

/// Sample positions along one ray with per-sample segment lengths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples<T> {
    pub t: Vec<T>,
    pub positions: Vec<Vec3<T>>,
    pub deltas: Vec<T>,
}

impl<T> RaySamples<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `n` samples in `n` equal bins over the ray-box overlap: bin centers, or
/// one uniform jitter per bin when `stratified`. `Δt_i = t_{i+1} - t_i`,
/// the last sample takes the bin width.
pub fn sample_ray<T: Real, R: Rng + ?Sized>(
    ray: &Ray<T>,
    aabb: &Aabb<T>,
    n: usize,
    stratified: bool,
    rng: &mut R,
) -> RaySamples<T> {
    let Some((near, far)) = ray_aabb(ray, aabb) else {
        return RaySamples {
            t: Vec::new(),
            positions: Vec::new(),
            deltas: Vec::new(),
        };
    };
    if n == 0 {
        return RaySamples::default();
    }
    let bin = (far - near) / T::of_usize(n);
    let t: Vec<T> = (0..n)
        .map(|i| {
            let u = if stratified {
                T::lit(rng.random::<f64>())
            } else {
                T::lit(0.5)
            };
            near + (T::of_usize(i) + u) * bin
        })
        .collect();
    let deltas = (0..n)
        .map(|i| if i + 1 < n { t[i + 1] - t[i] } else { bin })
        .collect();
    let positions = t.iter().map(|&ti| ray.at(ti)).collect();
    RaySamples { t, positions, deltas }
}
