use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body_model::{load_body_model, load_poses, read_json, write_json, BodyModel, Pose};
use crate::renderer::{load_cameras, Camera, RenderedImage};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::param(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseRef {
    pub file: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub split: Split,
    pub image: String,
    pub mask: String,
    /// Index into the manifest's camera file.
    pub camera: usize,
    pub pose: PoseRef,
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub body: String,
    pub cameras: String,
    pub frames: Vec<FrameRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(
                path.display().to_string(),
                "version",
                format!("unsupported version {}", m.version),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Uniform-stride subsample of `n` frames down to `k`.
pub fn few_shot_indices(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub name: String,
    /// Target colors with the binary foreground mask in `alpha`.
    pub image: RenderedImage,
    pub camera: Camera<f32>,
    pub pose: Pose<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub body: BodyModel<f32>,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn load(manifest_path: &Path, split: Split, few_shot: Option<usize>) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let src = manifest_path.display().to_string();
        let body: BodyModel<f32> = load_body_model(&root.join(&manifest.body))?;
        let cameras: Vec<Camera<f32>> = load_cameras(&root.join(&manifest.cameras))?;
        let mut pose_files: HashMap<String, Vec<Pose<f32>>> = HashMap::new();

        let selected: Vec<(usize, &FrameRecord)> =
            manifest.frames.iter().enumerate().filter(|(_, f)| f.split == split).collect();
        let keep = few_shot_indices(selected.len(), few_shot.unwrap_or(usize::MAX));
        let mut frames = Vec::with_capacity(keep.len());
        for k in keep {
            let (i, rec) = selected[k];
            let field = |f: &str| format!("frames[{i}].{f}");
            let camera = cameras
                .get(rec.camera)
                .cloned()
                .ok_or_else(|| Error::format(&src, field("camera"), format!("no camera {}", rec.camera)))?;
            if !pose_files.contains_key(&rec.pose.file) {
                let poses = load_poses::<f32>(&root.join(&rec.pose.file))?;
                pose_files.insert(rec.pose.file.clone(), poses.into_iter().map(|(_, p)| p).collect());
            }
            let pose = pose_files[&rec.pose.file]
                .get(rec.pose.index)
                .cloned()
                .ok_or_else(|| Error::format(&src, field("pose.index"), format!("no pose {}", rec.pose.index)))?;
            if pose.num_joints() != body.num_joints() {
                return Err(Error::format(&src, field("pose"), "joint count differs from the body model"));
            }
            let image = RenderedImage::load_png(&root.join(&rec.image), Some(&root.join(&rec.mask)))?;
            if (image.width, image.height) != (camera.width, camera.height) {
                return Err(Error::format(
                    &src,
                    field("image"),
                    format!(
                        "image is {}x{}, camera is {}x{}",
                        image.width, image.height, camera.width, camera.height
                    ),
                ));
            }
            frames.push(Frame {
                name: rec.image.clone(),
                image,
                camera,
                pose,
            });
        }
        if frames.is_empty() {
            return Err(Error::format(&src, "frames", format!("no {} frames", split.as_str())));
        }
        Ok(Self { body, frames })
    }

    pub fn poses(&self) -> Vec<Pose<f32>> {
        self.frames.iter().map(|f| f.pose.clone()).collect()
    }
}
