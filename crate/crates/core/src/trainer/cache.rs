use std::sync::Arc;

use crate::body_model::{BodyModel, Pose};
use crate::renderer::{prepare_frame, FrameGeometry};
use crate::voxel_grid::ConvKernel;
use crate::{Error, Result};

/// Per-pose frame geometry, least recently used evicted first. Entries are
/// keyed by the exact pose and kernel bits, so a trained kernel never reads
/// a stale diffusion.
pub struct VolumeCache {
    capacity: usize,
    clock: u64,
    entries: Vec<(Vec<u32>, Arc<FrameGeometry<f32>>, u64)>,
    pub hits: u64,
    pub misses: u64,
}

fn key(pose: &Pose<f32>, kernel: &ConvKernel<f32>) -> Vec<u32> {
    pose.joint_rotations
        .iter()
        .flatten()
        .chain(pose.root_translation.iter())
        .chain(kernel.weights.iter())
        .map(|v| v.to_bits())
        .collect()
}

impl VolumeCache {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("cache capacity must be positive"));
        }
        Ok(Self {
            capacity,
            clock: 0,
            entries: Vec::new(),
            hits: 0,
            misses: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_build(
        &mut self,
        body: &BodyModel<f32>,
        pose: &Pose<f32>,
        voxel_size: f32,
        kernel: &ConvKernel<f32>,
    ) -> Result<Arc<FrameGeometry<f32>>> {
        self.clock += 1;
        let k = key(pose, kernel);
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == k) {
            e.2 = self.clock;
            self.hits += 1;
            return Ok(e.1.clone());
        }
        self.misses += 1;
        let geom = Arc::new(prepare_frame(body, pose, voxel_size, kernel)?);
        if self.entries.len() == self.capacity {
            let oldest = self
                .entries
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.2)
                .map(|(i, _)| i)
                .expect("non-empty");
            self.entries.swap_remove(oldest);
        }
        self.entries.push((k, geom.clone(), self.clock));
        Ok(geom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{spin_poses, SyntheticFigure};

    #[test]
    fn lru_eviction() {
        let body = SyntheticFigure::standard().body.cast::<f32>();
        let poses: Vec<Pose<f32>> = spin_poses(4, 3, 0.0).iter().map(|p| p.cast()).collect();
        let kernel = ConvKernel::ones(3, 5).unwrap();
        let mut c = VolumeCache::new(2).unwrap();
        let a = c.get_or_build(&body, &poses[0], 0.02, &kernel).unwrap();
        c.get_or_build(&body, &poses[1], 0.02, &kernel).unwrap();
        let a2 = c.get_or_build(&body, &poses[0], 0.02, &kernel).unwrap();
        assert!(Arc::ptr_eq(&a, &a2));
        c.get_or_build(&body, &poses[2], 0.02, &kernel).unwrap();
        assert_eq!(c.len(), 2);
        // pose 1 was least recently used
        c.get_or_build(&body, &poses[0], 0.02, &kernel).unwrap();
        assert_eq!((c.hits, c.misses), (2, 3));
        c.get_or_build(&body, &poses[1], 0.02, &kernel).unwrap();
        assert_eq!(c.misses, 4);
    }
}
