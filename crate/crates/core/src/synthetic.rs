//! Procedural capsule figure with an analytic density field, a brute-force
//! ray-marching oracle, and pose scripts. Stands in for captured data: every
//! image it produces is exact up to the march resolution.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{joint_transforms, save_body_model, save_poses, BodyModel, JointTransforms, Pose};
use crate::math::{self, Vec3};
use crate::renderer::{composite, generate_ray, ray_aabb, save_cameras, Aabb, Camera, RenderedImage};
use crate::trainer::{FrameRecord, Manifest, PoseRef, Split, MANIFEST_VERSION};
use crate::{Error, Result};

/// Samples per ray of the oracle march.
pub const ORACLE_STEPS: usize = 512;

/// Rigid capsule attached to one joint, in canonical coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec3<f64>,
    pub b: Vec3<f64>,
    pub radius: f64,
    pub joint: usize,
    pub albedo: [f64; 3],
    /// Surface samples: `segments` around, `rings` along the profile.
    pub segments: usize,
    pub rings: usize,
}

impl Capsule {
    pub fn signed_distance(&self, p: Vec3<f64>) -> f64 {
        let ab = math::sub(self.b, self.a);
        let len2 = math::dot(ab, ab);
        let t = if len2 > 0.0 {
            (math::dot(math::sub(p, self.a), ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        math::norm(math::sub(p, math::add(self.a, math::scale(ab, t)))) - self.radius
    }

    /// `segments * rings + 2` surface points, rings spaced evenly along the
    /// profile arc length (cap, cylinder, cap), plus both poles.
    pub fn surface_points(&self) -> Vec<Vec3<f64>> {
        let ab = math::sub(self.b, self.a);
        let h = math::norm(ab);
        let axis = if h > 0.0 { math::scale(ab, 1.0 / h) } else { [0.0, 1.0, 0.0] };
        let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let u = math::normalize(math::cross(axis, helper));
        let v = math::cross(axis, u);
        let r = self.radius;
        let cap = 0.5 * PI * r;
        let total = 2.0 * cap + h;
        let mut pts = vec![math::sub(self.a, math::scale(axis, r))];
        for i in 0..self.rings {
            let s = total * (i + 1) as f64 / (self.rings + 1) as f64;
            let (along, rad) = if s < cap {
                let phi = s / r;
                (-r * phi.cos(), r * phi.sin())
            } else if s <= cap + h {
                (s - cap, r)
            } else {
                let phi = (s - cap - h) / r;
                (h + r * phi.sin(), r * phi.cos())
            };
            let center = math::add(self.a, math::scale(axis, along));
            for k in 0..self.segments {
                let th = 2.0 * PI * k as f64 / self.segments as f64;
                let dir = math::add(math::scale(u, th.cos()), math::scale(v, th.sin()));
                pts.push(math::add(center, math::scale(dir, rad)));
            }
        }
        pts.push(math::add(self.b, math::scale(axis, r)));
        pts
    }

    pub fn num_surface_points(&self) -> usize {
        self.segments * self.rings + 2
    }
}

/// Body model plus the analytic shape it was sampled from.
#[derive(Clone, Debug)]
pub struct SyntheticFigure {
    pub body: BodyModel<f64>,
    pub capsules: Vec<Capsule>,
    /// Interior density (1/m).
    pub density: f64,
    /// Width of the linear density ramp across the surface (m).
    pub edge: f64,
}

pub const JOINT_PELVIS: usize = 0;
pub const JOINT_NECK: usize = 1;
pub const JOINT_LEFT_SHOULDER: usize = 2;
pub const JOINT_RIGHT_SHOULDER: usize = 3;

/// Distance along an arm over which its weight ramps from 0.5 to 1.
const SHOULDER_BLEND: f64 = 0.08;

impl SyntheticFigure {
    /// Four joints: pelvis (root), neck, two shoulders; arms hang in an A-pose.
    pub fn standard() -> Self {
        let shoulder_y = 0.42;
        let arm_len = 0.36;
        let arm_dir = [(40.0f64).to_radians().cos(), -(40.0f64).to_radians().sin(), 0.0];
        let ls = [0.14, shoulder_y, 0.0];
        let rs = [-0.14, shoulder_y, 0.0];
        let mirror = |d: Vec3<f64>| [-d[0], d[1], d[2]];
        let capsules = vec![
            Capsule {
                a: [0.0, 0.0, 0.0],
                b: [0.0, shoulder_y, 0.0],
                radius: 0.11,
                joint: JOINT_PELVIS,
                albedo: [0.80, 0.30, 0.20],
                segments: 24,
                rings: 20,
            },
            Capsule {
                a: [0.0, 0.60, 0.0],
                b: [0.0, 0.66, 0.0],
                radius: 0.085,
                joint: JOINT_NECK,
                albedo: [0.90, 0.75, 0.60],
                segments: 12,
                rings: 9,
            },
            Capsule {
                a: ls,
                b: math::add(ls, math::scale(arm_dir, arm_len)),
                radius: 0.045,
                joint: JOINT_LEFT_SHOULDER,
                albedo: [0.20, 0.50, 0.85],
                segments: 12,
                rings: 9,
            },
            Capsule {
                a: rs,
                b: math::add(rs, math::scale(mirror(arm_dir), arm_len)),
                radius: 0.045,
                joint: JOINT_RIGHT_SHOULDER,
                albedo: [0.30, 0.75, 0.30],
                segments: 12,
                rings: 9,
            },
        ];
        let joints = vec![[0.0, 0.0, 0.0], [0.0, 0.50, 0.0], ls, rs];
        let parents = vec![None, Some(0), Some(0), Some(0)];
        let mut verts = Vec::new();
        let mut weights = Vec::new();
        for cap in &capsules {
            for p in cap.surface_points() {
                let mut w = vec![0.0; 4];
                if cap.joint == JOINT_LEFT_SHOULDER || cap.joint == JOINT_RIGHT_SHOULDER {
                    let axis = math::normalize(math::sub(cap.b, cap.a));
                    let t = math::dot(math::sub(p, cap.a), axis).max(0.0);
                    let own = 0.5 + 0.5 * (t / SHOULDER_BLEND).min(1.0);
                    w[cap.joint] = own;
                    w[JOINT_PELVIS] = 1.0 - own;
                } else {
                    w[cap.joint] = 1.0;
                }
                verts.push(p);
                weights.push(w);
            }
        }
        let body = BodyModel::new(verts, weights, parents, joints).expect("standard figure is valid");
        Self {
            body,
            capsules,
            density: 50.0,
            edge: 0.01,
        }
    }

    /// Random tree of `joints` capsules; vertex weights blend each capsule's
    /// joint with its parent near the attachment.
    pub fn random<R: Rng + ?Sized>(joints: usize, rng: &mut R) -> Result<Self> {
        if joints == 0 {
            return Err(Error::param("a figure needs at least one joint"));
        }
        let mut parents = vec![None];
        let mut rest = vec![[rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]];
        let mut capsules = Vec::new();
        for j in 0..joints {
            if j > 0 {
                let p = rng.random_range(0..j);
                parents.push(Some(p));
                let pc: &Capsule = &capsules[p];
                rest.push(pc.b);
            }
            let dir = math::normalize([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0f64),
            ]);
            let a = rest[j];
            let b = math::add(a, math::scale(dir, rng.random_range(0.08..0.3)));
            capsules.push(Capsule {
                a,
                b,
                radius: rng.random_range(0.02..0.08),
                joint: j,
                albedo: [rng.random(), rng.random(), rng.random()],
                segments: rng.random_range(6..16),
                rings: rng.random_range(4..10),
            });
        }
        let mut verts = Vec::new();
        let mut weights = Vec::new();
        for cap in &capsules {
            for p in cap.surface_points() {
                let mut w = vec![0.0; joints];
                match parents[cap.joint] {
                    Some(par) => {
                        let own = rng.random_range(0.5..=1.0);
                        w[cap.joint] = own;
                        w[par] += 1.0 - own;
                    }
                    None => w[cap.joint] = 1.0,
                }
                verts.push(p);
                weights.push(w);
            }
        }
        let body = BodyModel::new(verts, weights, parents, rest)?;
        Ok(Self {
            body,
            capsules,
            density: 50.0,
            edge: 0.01,
        })
    }

    /// Density and color at an observation-space point.
    pub fn density_color(&self, transforms: &JointTransforms<f64>, x: Vec3<f64>) -> (f64, [f64; 3]) {
        let mut best = f64::INFINITY;
        let mut color = [0.0; 3];
        for cap in &self.capsules {
            let d = cap.signed_distance(transforms.apply(cap.joint, x));
            if d < best {
                best = d;
                color = cap.albedo;
            }
        }
        let ramp = (0.5 - best / self.edge).clamp(0.0, 1.0);
        (self.density * ramp, color)
    }

    /// Observation-space box around every posed capsule.
    pub fn posed_bounds(&self, pose: &Pose<f64>) -> Result<Aabb<f64>> {
        let forward = self.body.skinning_transforms(pose)?;
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for cap in &self.capsules {
            let pad = cap.radius + self.edge;
            for e in [cap.a, cap.b] {
                let p = forward[cap.joint].apply(e);
                for k in 0..3 {
                    min[k] = min[k].min(p[k] - pad);
                    max[k] = max[k].max(p[k] + pad);
                }
            }
        }
        Ok(Aabb { min, max })
    }
}

/// Brute-force march of the analytic density: `steps` bin-centered samples
/// over the posed bounding box, composited over `background`.
pub fn render_oracle(
    figure: &SyntheticFigure,
    pose: &Pose<f64>,
    camera: &Camera<f64>,
    steps: usize,
    background: [f64; 3],
) -> Result<RenderedImage> {
    if steps == 0 {
        return Err(Error::param("oracle needs at least one step"));
    }
    let transforms = joint_transforms(&figure.body, pose)?;
    let bounds = figure.posed_bounds(pose)?;
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<([f32; 3], f32)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = generate_ray(camera, i % w, i / w);
            let Some((near, far)) = ray_aabb(&ray, &bounds) else {
                return (background.map(|b| b as f32), 0.0);
            };
            let dt = (far - near) / steps as f64;
            let mut colors = Vec::with_capacity(steps);
            let mut sigmas = Vec::with_capacity(steps);
            for s in 0..steps {
                let (sig, c) = figure.density_color(&transforms, ray.at(near + (s as f64 + 0.5) * dt));
                colors.push(c);
                sigmas.push(sig);
            }
            let comp = composite(&colors, &sigmas, &vec![dt; steps]);
            (comp.over(background).map(|v| v as f32), comp.alpha as f32)
        })
        .collect();
    let mut img = RenderedImage::new(w, h);
    for (i, (c, a)) in pixels.into_iter().enumerate() {
        img.rgb[i * 3..i * 3 + 3].copy_from_slice(&c);
        img.alpha[i] = a;
    }
    Ok(img)
}

/// Fixed camera facing the figure along -z; focal length scales with width.
pub fn standard_camera(width: usize, height: usize) -> Camera<f64> {
    let focal = 110.0 * width as f64 / 64.0;
    Camera::look_at([0.0, 0.30, 2.6], [0.0, 0.30, 0.0], [0.0, 1.0, 0.0], focal, width, height)
        .expect("standard camera is valid")
}

fn pose_of(rotations: Vec<Vec3<f64>>) -> Pose<f64> {
    Pose::new(rotations, [0.0; 3]).expect("script poses are finite")
}

/// One full turn about the vertical axis in `n` frames at rest articulation,
/// phase-shifted half a step so no frame is the zero pose.
pub fn spin_poses(joints: usize, n: usize, phase: f64) -> Vec<Pose<f64>> {
    (0..n)
        .map(|i| {
            let mut r = vec![[0.0; 3]; joints];
            r[0] = [0.0, 2.0 * PI * (i as f64 + 0.5 + phase) / n as f64, 0.0];
            pose_of(r)
        })
        .collect()
}

/// Repetitive capture: `turns` full spins over `n` frames with a small arm
/// sway locked to the spin phase.
pub fn repetitive_spin(n: usize, turns: usize) -> Vec<Pose<f64>> {
    (0..n)
        .map(|i| {
            let ph = 2.0 * PI * turns as f64 * (i as f64 + 0.5) / n as f64;
            let mut r = vec![[0.0; 3]; 4];
            r[JOINT_PELVIS] = [0.0, ph.rem_euclid(2.0 * PI), 0.0];
            r[JOINT_LEFT_SHOULDER] = [0.0, 0.0, 0.15 * ph.sin()];
            r[JOINT_RIGHT_SHOULDER] = [0.0, 0.0, -0.15 * ph.sin()];
            pose_of(r)
        })
        .collect()
}

/// Articulated motion unlike the spin: arm raises and swings, head turns,
/// modest body yaw. `jitter` scales per-frame random perturbations.
pub fn articulated_poses<R: Rng + ?Sized>(n: usize, jitter: f64, rng: &mut R) -> Vec<Pose<f64>> {
    (0..n)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / n as f64;
            let mut j = || jitter * rng.random_range(-1.0..1.0);
            let mut r = vec![[0.0; 3]; 4];
            r[JOINT_PELVIS] = [0.0, 0.5 * t.sin() + j(), 0.0];
            r[JOINT_NECK] = [0.15 * (2.0 * t).cos() + j(), 0.4 * (2.0 * t).sin() + j(), 0.0];
            r[JOINT_LEFT_SHOULDER] = [0.35 * t.cos() + j(), 0.0, 0.45 + 0.15 * (3.0 * t).sin() + j()];
            r[JOINT_RIGHT_SHOULDER] = [-0.35 * t.sin() + j(), 0.0, -0.45 + 0.15 * (3.0 * t).cos() + j()];
            pose_of(r)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_frames: usize,
    pub eval_frames: usize,
    pub width: usize,
    pub height: usize,
    pub oracle_steps: usize,
    /// Amplitude (rad) of the seeded per-frame eval pose perturbation.
    pub eval_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_frames: 30,
            eval_frames: 20,
            width: 64,
            height: 64,
            oracle_steps: ORACLE_STEPS,
            eval_jitter: 0.05,
        }
    }
}

/// Writes the standard figure's body model, poses, camera, oracle images,
/// masks and manifest into `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<Manifest> {
    if cfg.width == 0 || cfg.height == 0 || cfg.train_frames == 0 {
        return Err(Error::param("synthetic dataset needs a positive size and train frame count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fig = SyntheticFigure::standard();
    let cam = standard_camera(cfg.width, cfg.height);
    let train = spin_poses(4, cfg.train_frames, 0.0);
    let eval = articulated_poses(cfg.eval_frames, cfg.eval_jitter, &mut rng);

    for sub in ["train", "eval"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    save_body_model(&dir.join("body.json"), &fig.body)?;
    save_cameras(&dir.join("cameras.json"), std::slice::from_ref(&cam))?;
    save_poses(&dir.join("poses_train.json"), &train)?;
    save_poses(&dir.join("poses_eval.json"), &eval)?;

    let mut frames = Vec::new();
    for (split, poses, file) in [
        (Split::Train, &train, "poses_train.json"),
        (Split::Eval, &eval, "poses_eval.json"),
    ] {
        let sub = split.as_str();
        for (i, pose) in poses.iter().enumerate() {
            let img = render_oracle(&fig, pose, &cam, cfg.oracle_steps, [0.0; 3])?;
            let mut mask = img.clone();
            mask.alpha.iter_mut().for_each(|a| *a = if *a > 0.5 { 1.0 } else { 0.0 });
            let image = format!("{sub}/{i:04}.png");
            let mask_path = format!("{sub}/{i:04}_mask.png");
            img.save_png(&dir.join(&image))?;
            mask.save_alpha_png(&dir.join(&mask_path))?;
            frames.push(FrameRecord {
                split,
                image,
                mask: mask_path,
                camera: 0,
                pose: PoseRef {
                    file: file.to_string(),
                    index: i,
                },
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        body: "body.json".into(),
        cameras: "cameras.json".into(),
        frames,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vertex_count() {
        let f = SyntheticFigure::standard();
        assert_eq!(f.body.num_vertices(), 482 + 3 * 110);
        assert_eq!(f.body.num_joints(), 4);
    }

    #[test]
    fn surface_points_lie_on_capsule() {
        let f = SyntheticFigure::standard();
        for cap in &f.capsules {
            let pts = cap.surface_points();
            assert_eq!(pts.len(), cap.num_surface_points());
            for p in pts {
                assert!(cap.signed_distance(p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn density_inside_and_outside() {
        let f = SyntheticFigure::standard();
        let t = JointTransforms::identity(4);
        let (s, c) = f.density_color(&t, [0.0, 0.2, 0.0]);
        assert_eq!(s, 50.0);
        assert_eq!(c, [0.80, 0.30, 0.20]);
        assert_eq!(f.density_color(&t, [0.0, 0.2, 0.5]).0, 0.0);
    }

    #[test]
    fn oracle_sees_the_figure() {
        let f = SyntheticFigure::standard();
        let cam = standard_camera(32, 32);
        let img = render_oracle(&f, &f.body.rest_pose(), &cam, 128, [0.0; 3]).unwrap();
        let covered = img.alpha.iter().filter(|&&a| a > 0.5).count();
        assert!(covered > 20 && covered < 32 * 32 / 2, "{covered}");
        // torso center pixel is opaque and torso-colored
        let px = cam.project([0.0, 0.2, 0.11]).unwrap();
        let (x, y) = (px[0] as usize, px[1] as usize);
        assert!(img.alpha[y * 32 + x] > 0.99);
        let c = img.pixel(x, y);
        assert!((c[0] - 0.8).abs() < 0.01 && (c[1] - 0.3).abs() < 0.01);
    }

    #[test]
    fn random_figures_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for j in 1..6 {
            let f = SyntheticFigure::random(j, &mut rng).unwrap();
            assert_eq!(f.body.num_joints(), j);
        }
    }

    #[test]
    fn spin_is_pure_yaw() {
        let p = spin_poses(4, 30, 0.0);
        assert_eq!(p.len(), 30);
        assert!(p.iter().all(|q| q.joint_rotations[1..].iter().all(|r| *r == [0.0; 3])));
    }
}
