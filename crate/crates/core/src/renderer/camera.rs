use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body_model::{read_json, write_json};
use crate::math::{self, Mat3, Rigid, Vec3};
use crate::{Error, Real, Result};

/// Pinhole camera. Camera axes: x right, y down, z forward; pixel `(x, y)`
/// covers `[x, x+1) x [y, y+1)` and rays pass through the pixel center.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    pub intrinsics: Mat3<T>,
    /// World to camera.
    pub extrinsics: Rigid<T>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    /// Unit length.
    pub direction: Vec3<T>,
}

impl<T: Real> Ray<T> {
    #[inline]
    pub fn at(&self, t: T) -> Vec3<T> {
        math::add(self.origin, math::scale(self.direction, t))
    }
}

impl<T: Real> Camera<T> {
    pub fn new(intrinsics: Mat3<T>, extrinsics: Rigid<T>, width: usize, height: usize) -> Result<Self> {
        if !(intrinsics[0][0] > T::zero() && intrinsics[1][1] > T::zero()) {
            return Err(Error::param("focal lengths must be positive"));
        }
        if math::orthonormality_error(&extrinsics.rot) > T::lit(1e-5) {
            return Err(Error::param("extrinsic rotation is not a proper rotation"));
        }
        if width == 0 || height == 0 {
            return Err(Error::param("image size must be positive"));
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            width,
            height,
        })
    }

    pub fn from_focal(fx: T, fy: T, cx: T, cy: T, extrinsics: Rigid<T>, width: usize, height: usize) -> Result<Self> {
        let (z, o) = (T::zero(), T::one());
        Self::new([[fx, z, cx], [z, fy, cy], [z, z, o]], extrinsics, width, height)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>, focal: T, width: usize, height: usize) -> Result<Self> {
        let forward = math::normalize(math::sub(target, eye));
        let right = math::normalize(math::cross(forward, up));
        let down = math::cross(forward, right);
        let rot = [right, down, forward];
        let t = math::mat_vec(&rot, eye);
        let extr = Rigid {
            rot,
            trans: [-t[0], -t[1], -t[2]],
        };
        let half = T::lit(0.5);
        Self::from_focal(
            focal,
            focal,
            T::of_usize(width) * half,
            T::of_usize(height) * half,
            extr,
            width,
            height,
        )
    }

    pub fn fx(&self) -> T {
        self.intrinsics[0][0]
    }

    pub fn fy(&self) -> T {
        self.intrinsics[1][1]
    }

    pub fn cx(&self) -> T {
        self.intrinsics[0][2]
    }

    pub fn cy(&self) -> T {
        self.intrinsics[1][2]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        self.extrinsics.inverse().trans
    }

    /// Continuous pixel coordinates of a world point in front of the camera.
    pub fn project(&self, p: Vec3<T>) -> Option<[T; 2]> {
        let c = self.extrinsics.apply(p);
        if c[2] <= T::zero() {
            return None;
        }
        Some([
            self.fx() * c[0] / c[2] + self.intrinsics[0][1] * c[1] / c[2] + self.cx(),
            self.fy() * c[1] / c[2] + self.cy(),
        ])
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        let m = |m: &Mat3<T>| m.map(|r| math::cast3::<T, U>(r));
        Camera {
            intrinsics: m(&self.intrinsics),
            extrinsics: Rigid {
                rot: m(&self.extrinsics.rot),
                trans: math::cast3(self.extrinsics.trans),
            },
            width: self.width,
            height: self.height,
        }
    }
}

/// Ray through the center of pixel `(x, y)`.
pub fn generate_ray<T: Real>(camera: &Camera<T>, x: usize, y: usize) -> Ray<T> {
    let half = T::lit(0.5);
    let v = (T::of_usize(y) + half - camera.cy()) / camera.fy();
    let u = (T::of_usize(x) + half - camera.cx() - camera.intrinsics[0][1] * v) / camera.fx();
    let world_to_cam = &camera.extrinsics;
    let rt = math::transpose(&world_to_cam.rot);
    Ray {
        origin: camera.center(),
        direction: math::normalize(math::mat_vec(&rt, [u, v, T::one()])),
    }
}

pub fn generate_rays<T: Real>(camera: &Camera<T>, pixels: &[(usize, usize)]) -> Result<Vec<Ray<T>>> {
    pixels
        .iter()
        .map(|&(x, y)| {
            if x >= camera.width || y >= camera.height {
                Err(Error::param(format!(
                    "pixel ({x}, {y}) outside {}x{} image",
                    camera.width, camera.height
                )))
            } else {
                Ok(generate_ray(camera, x, y))
            }
        })
        .collect()
}

/// On-disk camera: `intrinsics` 3x3, `extrinsics` 4x4 world-to-camera.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraFile {
    pub width: usize,
    pub height: usize,
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
}

impl CameraFile {
    pub fn from_camera<T: Real>(c: &Camera<T>) -> Self {
        let mut e = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                e[i][j] = c.extrinsics.rot[i][j].as_f64();
            }
            e[i][3] = c.extrinsics.trans[i].as_f64();
        }
        e[3][3] = 1.0;
        Self {
            width: c.width,
            height: c.height,
            intrinsics: c.intrinsics.map(|r| r.map(|v| v.as_f64())),
            extrinsics: e,
        }
    }

    pub fn into_camera<T: Real>(&self, source: &str, field: &str) -> Result<Camera<T>> {
        let l = |v: f64| T::lit(v);
        let intr = self.intrinsics.map(|r| r.map(l));
        let mut rot = [[T::zero(); 3]; 3];
        let mut trans = [T::zero(); 3];
        for i in 0..3 {
            for j in 0..3 {
                rot[i][j] = l(self.extrinsics[i][j]);
            }
            trans[i] = l(self.extrinsics[i][3]);
        }
        Camera::new(intr, Rigid { rot, trans }, self.width, self.height)
            .map_err(|e| Error::format(source, field, e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct CamerasDoc {
    version: u32,
    cameras: Vec<CameraFile>,
}

pub fn save_cameras<T: Real>(path: &Path, cameras: &[Camera<T>]) -> Result<()> {
    write_json(
        path,
        &CamerasDoc {
            version: 1,
            cameras: cameras.iter().map(CameraFile::from_camera).collect(),
        },
    )
}

pub fn load_cameras<T: Real>(path: &Path) -> Result<Vec<Camera<T>>> {
    let doc: CamerasDoc = read_json(path)?;
    let src = path.display().to_string();
    if doc.version != 1 {
        return Err(Error::format(&src, "version", format!("unsupported version {}", doc.version)));
    }
    doc.cameras
        .iter()
        .enumerate()
        .map(|(i, c)| c.into_camera(&src, &format!("cameras[{i}]")))
        .collect()
}
