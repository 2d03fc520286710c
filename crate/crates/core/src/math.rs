//! Small fixed-size vector and matrix helpers.
//!
//! Matrices are row-major `[[T; 3]; 3]` and act on column vectors.

use crate::Real;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Real>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn normalize<T: Real>(a: Vec3<T>) -> Vec3<T> {
    let n = norm(a);
    if n > T::zero() {
        scale(a, T::one() / n)
    } else {
        a
    }
}

pub fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

#[inline]
pub fn mat_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn det<T: Real>(m: &Mat3<T>) -> T {
    dot(m[0], cross(m[1], m[2]))
}

/// Largest absolute entry of `a - b`.
pub fn mat_max_diff<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> T {
    let mut worst = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((a[i][j] - b[i][j]).abs());
        }
    }
    worst
}

/// `max |R Rᵀ - I|` together with `|det R - 1|`.
pub fn orthonormality_error<T: Real>(m: &Mat3<T>) -> T {
    let rrt = mat_mul(m, &transpose(m));
    mat_max_diff(&rrt, &identity()).max((det(m) - T::one()).abs())
}

pub fn cast3<T: Real, U: Real>(v: Vec3<T>) -> Vec3<U> {
    [U::lit(v[0].as_f64()), U::lit(v[1].as_f64()), U::lit(v[2].as_f64())]
}

/// Rigid map `x -> rot * x + trans`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid<T> {
    pub rot: Mat3<T>,
    pub trans: Vec3<T>,
}

impl<T: Real> Rigid<T> {
    pub fn identity() -> Self {
        Self {
            rot: identity(),
            trans: [T::zero(); 3],
        }
    }

    #[inline]
    pub fn apply(&self, x: Vec3<T>) -> Vec3<T> {
        add(mat_vec(&self.rot, x), self.trans)
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rot: mat_mul(&self.rot, &other.rot),
            trans: self.apply(other.trans),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rot);
        let t = mat_vec(&rt, self.trans);
        Self {
            rot: rt,
            trans: [-t[0], -t[1], -t[2]],
        }
    }
}
