//! Observation-to-canonical mapping of filtered samples: frozen
//! nearest-voxel skinning (rigid blend) plus a learned per-point offset.

use ndarray::Array2;

use crate::body_model::JointTransforms;
use crate::math::{self, Vec3};
use crate::neural::RefineNet;
use crate::voxel_grid::{nearest_weight_into, SpatialFeature, VoxelVolume};
use crate::{Error, Real, Result};

/// Offsets are clamped to this magnitude per axis (meters) when applied.
pub const OFFSET_CLAMP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalSample<T> {
    pub observation: Vec3<T>,
    pub rigid_canonical: Vec3<T>,
    pub refined_canonical: Vec3<T>,
    pub feature: SpatialFeature<T>,
    pub weight: Vec<T>,
}

impl<T: Real> CanonicalSample<T> {
    pub fn offset(&self) -> Vec3<T> {
        math::sub(self.refined_canonical, self.rigid_canonical)
    }
}

/// `Σ_j w_j (R_j x + T_j)`.
#[inline]
pub fn rigid_deform<T: Real>(point: Vec3<T>, weight: &[T], transforms: &JointTransforms<T>) -> Vec3<T> {
    debug_assert_eq!(weight.len(), transforms.len());
    let mut acc = [T::zero(); 3];
    for (j, &w) in weight.iter().enumerate() {
        if w != T::zero() {
            acc = math::add(acc, math::scale(transforms.apply(j, point), w));
        }
    }
    acc
}

/// Raw refinement offset for one sample (no clamping).
pub fn refine<T: Real>(net: &RefineNet<T>, feature: &SpatialFeature<T>, point: Vec3<T>) -> Result<Vec3<T>> {
    if feature.0.len() != net.feature_channels() {
        return Err(Error::param(format!(
            "feature has {} channels, refinement net expects {}",
            feature.0.len(),
            net.feature_channels()
        )));
    }
    let mut row = vec![T::zero(); feature.0.len() + 3];
    net.input_row(&feature.0, point, &mut row);
    let out = net.mlp.apply_to_row(&row)?;
    Ok([out[0], out[1], out[2]])
}

#[inline]
pub fn clamp_offset<T: Real>(offset: Vec3<T>) -> Vec3<T> {
    let c = T::lit(OFFSET_CLAMP);
    offset.map(|o| o.max(-c).min(c))
}

/// Nearest weights and rigid canonical points for a batch.
pub struct RigidBatch<T> {
    /// Row-major `n x J`.
    pub weights: Vec<T>,
    pub rigid: Vec<Vec3<T>>,
}

pub fn rigid_batch<T: Real>(
    points: &[Vec3<T>],
    volume: &VoxelVolume<T>,
    max_radius: usize,
    transforms: &JointTransforms<T>,
) -> Result<RigidBatch<T>> {
    let joints = volume.num_joints();
    if transforms.len() != joints {
        return Err(Error::param(format!(
            "{} joint transforms for a {joints}-joint volume",
            transforms.len()
        )));
    }
    let mut weights = vec![T::zero(); points.len() * joints];
    let mut rigid = Vec::with_capacity(points.len());
    for (i, &p) in points.iter().enumerate() {
        let w = &mut weights[i * joints..(i + 1) * joints];
        nearest_weight_into(volume, p, max_radius, w)?;
        rigid.push(rigid_deform(p, w, transforms));
    }
    Ok(RigidBatch { weights, rigid })
}

/// Refinement-net input matrix `n x (C + 3)` for a batch.
pub fn refine_inputs<T: Real>(net: &RefineNet<T>, features: &[T], points: &[Vec3<T>]) -> Result<Array2<T>> {
    let c = net.feature_channels();
    if features.len() != points.len() * c {
        return Err(Error::param(format!(
            "{} feature values for {} points of {c} channels",
            features.len(),
            points.len()
        )));
    }
    let mut x = Array2::zeros((points.len(), c + 3));
    for (i, (row, &p)) in x.rows_mut().into_iter().zip(points).enumerate() {
        let row = row.into_slice().expect("standard layout");
        net.input_row(&features[i * c..(i + 1) * c], p, row);
    }
    Ok(x)
}

/// Full canonicalization of points previously kept by the filter.
/// `features` is row-major `n x (J + 1)`; `refine_net = None` disables the
/// learned offset.
pub fn canonicalize_batch<T: Real>(
    points: &[Vec3<T>],
    features: &[T],
    volume: &VoxelVolume<T>,
    max_radius: usize,
    transforms: &JointTransforms<T>,
    refine_net: Option<&RefineNet<T>>,
) -> Result<Vec<CanonicalSample<T>>> {
    let channels = volume.channels();
    if features.len() != points.len() * channels {
        return Err(Error::param("feature rows do not match points"));
    }
    let rb = rigid_batch(points, volume, max_radius, transforms)?;
    let offsets = match refine_net {
        Some(net) => {
            let x = refine_inputs(net, features, points)?;
            let out = net.mlp.forward(x.view())?;
            out.rows()
                .into_iter()
                .map(|r| clamp_offset([r[0], r[1], r[2]]))
                .collect()
        }
        None => vec![[T::zero(); 3]; points.len()],
    };
    let joints = volume.num_joints();
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, &p)| CanonicalSample {
            observation: p,
            rigid_canonical: rb.rigid[i],
            refined_canonical: math::add(rb.rigid[i], offsets[i]),
            feature: SpatialFeature(features[i * channels..(i + 1) * channels].to_vec()),
            weight: rb.weights[i * joints..(i + 1) * joints].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::rodrigues;
    use crate::neural::Mlp;
    use crate::voxel_grid::{conv_diffuse, filter_points, voxelize, VoxelizeParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_transforms() -> JointTransforms<f64> {
        JointTransforms {
            rotations: vec![rodrigues([0.0, 0.0, 0.5]), rodrigues([0.3, -0.1, 0.0])],
            translations: vec![[0.1, 0.0, -0.2], [0.0, 1.0, 0.5]],
        }
    }

    #[test]
    fn identity_transforms_fix_points() {
        let t = JointTransforms::<f64>::identity(3);
        let p = [0.3, -0.7, 1.1];
        let out = rigid_deform(p, &[0.2, 0.5, 0.3], &t);
        for a in 0..3 {
            assert!((out[a] - p[a]).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_selects_a_joint() {
        let t = two_transforms();
        let p = [0.4, 0.2, -0.1];
        assert_eq!(rigid_deform(p, &[0.0, 1.0], &t), t.apply(1, p));
    }

    #[test]
    fn half_blend_is_mean() {
        let t = two_transforms();
        let p = [0.4, 0.2, -0.1];
        let a = t.apply(0, p);
        let b = t.apply(1, p);
        let out = rigid_deform(p, &[0.5, 0.5], &t);
        for k in 0..3 {
            assert!((out[k] - 0.5 * (a[k] + b[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_permutation_equivariance() {
        let t = two_transforms();
        let swapped = JointTransforms {
            rotations: vec![t.rotations[1], t.rotations[0]],
            translations: vec![t.translations[1], t.translations[0]],
        };
        let p = [0.1, 0.9, 0.3];
        let a = rigid_deform(p, &[0.3, 0.7], &t);
        let b = rigid_deform(p, &[0.7, 0.3], &swapped);
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn fresh_refine_head_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = RefineNet::<f32>::init(5, 5, 128, 4, &mut rng).unwrap();
        for i in 0..50 {
            let t = i as f32 * 0.1;
            let feat = SpatialFeature(vec![125.0 * t.sin().abs(), 30.0, 20.0 * t.cos().abs(), 50.0, 25.0]);
            let off = refine(&net, &feat, [t.sin(), t.cos(), 0.5 * t]).unwrap();
            assert!(off.iter().all(|o| o.abs() <= 1e-3), "{off:?}");
        }
    }

    #[test]
    fn zero_input_gives_bias_path_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = RefineNet::<f64>::init(3, 5, 16, 4, &mut rng).unwrap();
        for (i, p) in net.mlp.params_mut().iter_mut().enumerate() {
            *p += ((i % 13) as f64 - 6.0) * 0.01;
        }
        // hand-rolled forward of the bias chain: h1 = relu(b1), h_{k+1} = relu(W h_k + b)
        let mut h: Vec<f64> = net.mlp.bias(0).iter().map(|b| b.max(0.0)).collect();
        for layer in 1..4 {
            let w = net.mlp.weight(layer);
            let b = net.mlp.bias(layer);
            h = (0..b.len())
                .map(|o| {
                    let z: f64 = b[o] + (0..h.len()).map(|i| h[i] * w[(i, o)]).sum::<f64>();
                    if layer < 3 { z.max(0.0) } else { z }
                })
                .collect();
        }
        let off = refine(&net, &SpatialFeature(vec![0.0; 3]), [0.0; 3]).unwrap();
        for k in 0..3 {
            assert!((off[k] - h[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = RefineNet::<f32>::init(5, 5, 128, 4, &mut rng).unwrap();
        let f = SpatialFeature(vec![3.0, 1.0, 0.5, 1.5, 0.0]);
        let a = refine(&net, &f, [0.1, 0.2, 0.3]).unwrap();
        let b = refine(&net, &f, [0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a.map(f32::to_bits), b.map(f32::to_bits));
    }

    #[test]
    fn refine_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = RefineNet::<f32>::init(5, 5, 16, 4, &mut rng).unwrap();
        assert!(matches!(refine(&net, &SpatialFeature(vec![0.0; 4]), [0.0; 3]), Err(Error::Param(_))));
    }

    #[test]
    fn offsets_are_clamped() {
        assert_eq!(clamp_offset([0.5, -0.05, -3.0]), [0.1, -0.05, -0.1]);
    }

    #[test]
    fn identity_pose_zero_head_is_identity_map() {
        let verts: Vec<[f64; 3]> = (0..60).map(|i| {
            let t = i as f64 * 0.21;
            [0.2 * t.sin(), 0.01 * i as f64, 0.2 * t.cos()]
        }).collect();
        let w: Vec<f64> = (0..60).flat_map(|i| if i < 30 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        let vol = voxelize(&verts, &w, VoxelizeParams::default()).unwrap();
        let conv = conv_diffuse(&vol, 5).unwrap();
        let probe: Vec<[f64; 3]> = verts.iter().map(|v| [v[0] + 0.011, v[1] - 0.007, v[2]]).collect();
        let f = filter_points(&conv, &probe);
        assert_eq!(f.kept.len(), probe.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = RefineNet::<f64>::init(3, 5, 16, 4, &mut rng).unwrap();
        let last = net.mlp.num_layers() - 1;
        let mut zeroed = Mlp::zeros(net.mlp.arch().clone()).unwrap();
        zeroed.params_mut().copy_from_slice(net.mlp.params());
        net.mlp = zeroed;
        net.mlp.fill_uniform(last, 0.0, &mut rng);
        let out = canonicalize_batch(&probe, &f.features, &vol, 2, &JointTransforms::identity(2), Some(&net)).unwrap();
        for (s, p) in out.iter().zip(&probe) {
            assert!(math::norm(math::sub(s.refined_canonical, *p)) < 1e-6);
            assert_eq!(s.offset(), [0.0; 3]);
        }
        // batch of one equals the element-wise call
        let single = canonicalize_batch(&probe[3..4], &f.features[3 * 3..4 * 3], &vol, 2, &JointTransforms::identity(2), Some(&net)).unwrap();
        assert_eq!(single[0], out[3]);
    }
}
