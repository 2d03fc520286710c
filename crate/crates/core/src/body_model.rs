//! Articulated body prior: rest mesh, skinning weights and kinematic tree.
//!
//! Transforms act on column vectors: a joint transform maps a point `x` to
//! `R x + T`. The rest pose (all joint rotations zero, no root translation)
//! is the canonical frame, so its joint transforms are all identity.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::math::{self, Mat3, Rigid, Vec3};
use crate::{Error, Real, Result};

pub const BODY_FORMAT_VERSION: u32 = 1;
pub const POSE_FORMAT_VERSION: u32 = 1;

const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BodyModel<T> {
    rest_vertices: Vec<Vec3<T>>,
    /// Row-major `N x J`.
    skin_weights: Vec<T>,
    parents: Vec<Option<usize>>,
    rest_joints: Vec<Vec3<T>>,
    /// Joints ordered so every parent precedes its children.
    order: Vec<usize>,
}

impl<T: Real> BodyModel<T> {
    pub fn new(
        rest_vertices: Vec<Vec3<T>>,
        skin_weights: Vec<Vec<T>>,
        parents: Vec<Option<usize>>,
        rest_joints: Vec<Vec3<T>>,
    ) -> Result<Self> {
        let joints = parents.len();
        let n = rest_vertices.len();
        if joints == 0 {
            return Err(Error::Structure("model has no joints".into()));
        }
        if n < joints {
            return Err(Error::Structure(format!(
                "{n} vertices is fewer than {joints} joints"
            )));
        }
        if rest_joints.len() != joints {
            return Err(Error::Structure(format!(
                "{} rest joints for {joints} parents",
                rest_joints.len()
            )));
        }
        if skin_weights.len() != n {
            return Err(Error::Structure(format!(
                "{} weight rows for {n} vertices",
                skin_weights.len()
            )));
        }
        let order = topological_order(&parents)?;

        let mut flat = Vec::with_capacity(n * joints);
        for (k, row) in skin_weights.iter().enumerate() {
            if row.len() != joints {
                return Err(Error::Structure(format!(
                    "weight row {k} has {} entries, expected {joints}",
                    row.len()
                )));
            }
            let mut sum = 0.0f64;
            for &w in row {
                let w = w.as_f64();
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Structure(format!("weight row {k} has entry {w}")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::Structure(format!("weight row {k} sums to {sum}")));
            }
            flat.extend_from_slice(row);
        }
        for v in rest_vertices.iter().chain(rest_joints.iter()) {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::Structure("non-finite coordinate".into()));
            }
        }

        Ok(Self {
            rest_vertices,
            skin_weights: flat,
            parents,
            rest_joints,
            order,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn rest_vertices(&self) -> &[Vec3<T>] {
        &self.rest_vertices
    }

    /// Flat row-major `N x J` weight matrix.
    pub fn skin_weights(&self) -> &[T] {
        &self.skin_weights
    }

    pub fn weight_row(&self, vertex: usize) -> &[T] {
        let j = self.num_joints();
        &self.skin_weights[vertex * j..(vertex + 1) * j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_joints(&self) -> &[Vec3<T>] {
        &self.rest_joints
    }

    pub fn rest_pose(&self) -> Pose<T> {
        Pose {
            joint_rotations: vec![[T::zero(); 3]; self.num_joints()],
            root_translation: [T::zero(); 3],
        }
    }

    pub fn cast<U: Real>(&self) -> BodyModel<U> {
        BodyModel {
            rest_vertices: self.rest_vertices.iter().map(|&v| math::cast3(v)).collect(),
            skin_weights: self.skin_weights.iter().map(|w| U::lit(w.as_f64())).collect(),
            parents: self.parents.clone(),
            rest_joints: self.rest_joints.iter().map(|&v| math::cast3(v)).collect(),
            order: self.order.clone(),
        }
    }

    /// World transform of every joint frame for the given pose.
    fn world_frames(&self, pose: &Pose<T>) -> Vec<Rigid<T>> {
        let mut frames = vec![Rigid::identity(); self.num_joints()];
        for &j in &self.order {
            let rot = rodrigues(pose.joint_rotations[j]);
            let frame = match self.parents[j] {
                None => Rigid {
                    rot,
                    trans: math::add(self.rest_joints[j], pose.root_translation),
                },
                Some(p) => frames[p].compose(&Rigid {
                    rot,
                    trans: math::sub(self.rest_joints[j], self.rest_joints[p]),
                }),
            };
            frames[j] = frame;
        }
        frames
    }

    /// Forward skinning maps: canonical point on bone `j` to observation space.
    pub fn skinning_transforms(&self, pose: &Pose<T>) -> Result<Vec<Rigid<T>>> {
        self.check_pose(pose)?;
        Ok(self
            .world_frames(pose)
            .iter()
            .zip(&self.rest_joints)
            .map(|(g, &o)| {
                g.compose(&Rigid {
                    rot: math::identity(),
                    trans: [-o[0], -o[1], -o[2]],
                })
            })
            .collect())
    }

    fn check_pose(&self, pose: &Pose<T>) -> Result<()> {
        if pose.joint_rotations.len() != self.num_joints() {
            return Err(Error::param(format!(
                "pose has {} joint rotations, model has {} joints",
                pose.joint_rotations.len(),
                self.num_joints()
            )));
        }
        Ok(())
    }
}

fn topological_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let joints = parents.len();
    if parents[0].is_some() {
        return Err(Error::Structure("joint 0 must be the root".into()));
    }
    let mut children = vec![Vec::new(); joints];
    for (j, p) in parents.iter().enumerate().skip(1) {
        match *p {
            None => return Err(Error::Structure(format!("joint {j} has no parent"))),
            Some(p) if p >= joints => {
                return Err(Error::Structure(format!("joint {j} has parent {p} out of range")))
            }
            Some(p) if p == j => return Err(Error::Structure(format!("joint {j} is its own parent"))),
            Some(p) => children[p].push(j),
        }
    }
    let mut order = Vec::with_capacity(joints);
    let mut stack = vec![0usize];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != joints {
        return Err(Error::Structure("kinematic tree contains a cycle".into()));
    }
    Ok(order)
}

/// Per-frame articulation: one axis-angle vector per joint plus a root offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose<T> {
    pub joint_rotations: Vec<Vec3<T>>,
    pub root_translation: Vec3<T>,
}

impl<T: Real> Pose<T> {
    /// Validates finiteness and wraps rotation angles into `[0, 2π)`.
    pub fn new(joint_rotations: Vec<Vec3<T>>, root_translation: Vec3<T>) -> Result<Self> {
        if joint_rotations
            .iter()
            .chain(std::iter::once(&root_translation))
            .any(|v| v.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::param("pose has non-finite entries"));
        }
        let two_pi = T::PI() + T::PI();
        let joint_rotations = joint_rotations
            .into_iter()
            .map(|w| {
                let angle = math::norm(w);
                if angle >= two_pi {
                    let wrapped = angle % two_pi;
                    math::scale(w, wrapped / angle)
                } else {
                    w
                }
            })
            .collect();
        Ok(Self {
            joint_rotations,
            root_translation,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.joint_rotations.len()
    }

    /// Flattened axis-angle vector, root translation excluded.
    pub fn flat_rotations(&self) -> Vec<T> {
        self.joint_rotations.iter().flatten().copied().collect()
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            joint_rotations: self.joint_rotations.iter().map(|&w| math::cast3(w)).collect(),
            root_translation: math::cast3(self.root_translation),
        }
    }
}

/// Observation-to-canonical rigid map for every joint.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransforms<T> {
    pub rotations: Vec<Mat3<T>>,
    pub translations: Vec<Vec3<T>>,
}

impl<T: Real> JointTransforms<T> {
    pub fn identity(joints: usize) -> Self {
        Self {
            rotations: vec![math::identity(); joints],
            translations: vec![[T::zero(); 3]; joints],
        }
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    #[inline]
    pub fn apply(&self, joint: usize, x: Vec3<T>) -> Vec3<T> {
        math::add(math::mat_vec(&self.rotations[joint], x), self.translations[joint])
    }

    pub fn rigid(&self, joint: usize) -> Rigid<T> {
        Rigid {
            rot: self.rotations[joint],
            trans: self.translations[joint],
        }
    }
}

/// Axis-angle to rotation matrix.
pub fn rodrigues<T: Real>(omega: Vec3<T>) -> Mat3<T> {
    let theta2 = math::dot(omega, omega);
    let theta = theta2.sqrt();
    // R = I + a K + b K², K = [ω]x
    let (a, b) = if theta < T::lit(1e-4) {
        (
            T::one() - theta2 / T::lit(6.0),
            T::lit(0.5) - theta2 / T::lit(24.0),
        )
    } else {
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    let [x, y, z] = omega;
    let k = [
        [T::zero(), -z, y],
        [z, T::zero(), -x],
        [-y, x, T::zero()],
    ];
    let k2 = math::mat_mul(&k, &k);
    let mut r = math::identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Per-joint maps from observation space back to the canonical rest frame.
pub fn joint_transforms<T: Real>(model: &BodyModel<T>, pose: &Pose<T>) -> Result<JointTransforms<T>> {
    let forward = model.skinning_transforms(pose)?;
    let mut out = JointTransforms::identity(model.num_joints());
    for (j, a) in forward.iter().enumerate() {
        let b = a.inverse();
        out.rotations[j] = b.rot;
        out.translations[j] = b.trans;
    }
    Ok(out)
}

/// Forward linear blend skinning of the rest mesh.
pub fn pose_vertices<T: Real>(model: &BodyModel<T>, pose: &Pose<T>) -> Result<Vec<Vec3<T>>> {
    let forward = model.skinning_transforms(pose)?;
    Ok(model
        .rest_vertices
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let mut acc = [T::zero(); 3];
            for (j, &w) in model.weight_row(k).iter().enumerate() {
                if w != T::zero() {
                    acc = math::add(acc, math::scale(forward[j].apply(v), w));
                }
            }
            acc
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BodyModelFile {
    pub version: u32,
    pub joints: usize,
    /// `-1` marks the root.
    pub parents: Vec<i64>,
    pub rest_joints: Vec<[f64; 3]>,
    pub rest_vertices: Vec<[f64; 3]>,
    pub skin_weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: usize,
    pub rotations: Vec<[f64; 3]>,
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseFile {
    pub version: u32,
    pub joints: usize,
    pub frames: Vec<PoseRecord>,
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(
            path.display().to_string(),
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path.display().to_string(), "<root>", e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl BodyModelFile {
    pub fn into_model<T: Real>(self, source: &str) -> Result<BodyModel<T>> {
        if self.version != BODY_FORMAT_VERSION {
            return Err(Error::format(
                source,
                "version",
                format!("unsupported version {}", self.version),
            ));
        }
        if self.parents.len() != self.joints {
            return Err(Error::format(source, "parents", "length differs from `joints`"));
        }
        let parents = self
            .parents
            .iter()
            .enumerate()
            .map(|(j, &p)| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(Error::format(source, format!("parents[{j}]"), format!("invalid index {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let v3 = |v: &[f64; 3]| [T::lit(v[0]), T::lit(v[1]), T::lit(v[2])];
        BodyModel::new(
            self.rest_vertices.iter().map(v3).collect(),
            self.skin_weights
                .iter()
                .map(|row| row.iter().map(|&w| T::lit(w)).collect())
                .collect(),
            parents,
            self.rest_joints.iter().map(v3).collect(),
        )
    }

    pub fn from_model<T: Real>(model: &BodyModel<T>) -> Self {
        let v3 = |v: &Vec3<T>| [v[0].as_f64(), v[1].as_f64(), v[2].as_f64()];
        Self {
            version: BODY_FORMAT_VERSION,
            joints: model.num_joints(),
            parents: model
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            rest_joints: model.rest_joints.iter().map(v3).collect(),
            rest_vertices: model.rest_vertices.iter().map(v3).collect(),
            skin_weights: (0..model.num_vertices())
                .map(|k| model.weight_row(k).iter().map(|w| w.as_f64()).collect())
                .collect(),
        }
    }
}

pub fn load_body_model<T: Real>(path: &Path) -> Result<BodyModel<T>> {
    let doc: BodyModelFile = read_json(path)?;
    doc.into_model(&path.display().to_string())
}

pub fn save_body_model<T: Real>(path: &Path, model: &BodyModel<T>) -> Result<()> {
    write_json(path, &BodyModelFile::from_model(model))
}

impl PoseFile {
    pub fn from_poses<T: Real>(poses: &[Pose<T>]) -> Self {
        Self {
            version: POSE_FORMAT_VERSION,
            joints: poses.first().map_or(0, |p| p.num_joints()),
            frames: poses
                .iter()
                .enumerate()
                .map(|(frame, p)| PoseRecord {
                    frame,
                    rotations: p
                        .joint_rotations
                        .iter()
                        .map(|w| [w[0].as_f64(), w[1].as_f64(), w[2].as_f64()])
                        .collect(),
                    translation: [
                        p.root_translation[0].as_f64(),
                        p.root_translation[1].as_f64(),
                        p.root_translation[2].as_f64(),
                    ],
                })
                .collect(),
        }
    }

    /// Poses in frame-index order.
    pub fn into_poses<T: Real>(self, source: &str) -> Result<Vec<(usize, Pose<T>)>> {
        if self.version != POSE_FORMAT_VERSION {
            return Err(Error::format(
                source,
                "version",
                format!("unsupported version {}", self.version),
            ));
        }
        let mut out = Vec::with_capacity(self.frames.len());
        for (i, rec) in self.frames.into_iter().enumerate() {
            if rec.rotations.len() != self.joints {
                return Err(Error::format(
                    source,
                    format!("frames[{i}].rotations"),
                    format!("expected {} entries, found {}", self.joints, rec.rotations.len()),
                ));
            }
            let pose = Pose::new(
                rec.rotations
                    .iter()
                    .map(|w| [T::lit(w[0]), T::lit(w[1]), T::lit(w[2])])
                    .collect(),
                [
                    T::lit(rec.translation[0]),
                    T::lit(rec.translation[1]),
                    T::lit(rec.translation[2]),
                ],
            )
            .map_err(|e| Error::format(source, format!("frames[{i}]"), e.to_string()))?;
            out.push((rec.frame, pose));
        }
        out.sort_by_key(|(f, _)| *f);
        Ok(out)
    }
}

pub fn load_poses<T: Real>(path: &Path) -> Result<Vec<(usize, Pose<T>)>> {
    let doc: PoseFile = read_json(path)?;
    doc.into_poses(&path.display().to_string())
}

pub fn save_poses<T: Real>(path: &Path, poses: &[Pose<T>]) -> Result<()> {
    write_json(path, &PoseFile::from_poses(poses))
}
