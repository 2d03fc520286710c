//! The two networks of the pipeline: the appearance field and the point
//! refinement head.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;

use super::encoding::EncodingSpec;
use super::mlp::{Activation, Gradients, LayerSpec, Mlp, MlpArch, MlpCache};
use crate::math::Vec3;
use crate::{sigmoid, softplus, Error, Real, Result};

pub const APPEARANCE_WIDTH: usize = 256;
pub const APPEARANCE_DEPTH: usize = 8;
/// Hidden layer that re-reads the encoded input.
pub const APPEARANCE_SKIP: usize = 5;
pub const REFINE_WIDTH: usize = 128;
pub const REFINE_LAYERS: usize = 4;
const REFINE_HEAD_BOUND: f64 = 1e-5;

/// `depth` ReLU layers of `width`, skip at `skip`, then a linear
/// 4-output head (`rgb` logits, density pre-activation).
pub fn appearance_arch(input_dim: usize, width: usize, depth: usize, skip: Option<usize>) -> MlpArch {
    let mut layers = vec![
        LayerSpec {
            out: width,
            activation: Activation::Relu
        };
        depth
    ];
    layers.push(LayerSpec {
        out: 4,
        activation: Activation::Identity,
    });
    MlpArch {
        input_dim,
        layers,
        skips: skip.into_iter().collect(),
    }
}

/// `layers - 1` ReLU layers of `width` and a linear 3-output offset head.
pub fn refine_arch(input_dim: usize, width: usize, layers: usize) -> MlpArch {
    let mut specs = vec![
        LayerSpec {
            out: width,
            activation: Activation::Relu
        };
        layers.saturating_sub(1)
    ];
    specs.push(LayerSpec {
        out: 3,
        activation: Activation::Identity,
    });
    MlpArch {
        input_dim,
        layers: specs,
        skips: vec![],
    }
}

/// Canonical-point radiance field: `γ(x) -> (sigmoid rgb, softplus σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceNet<T> {
    pub mlp: Mlp<T>,
    pub encoding: EncodingSpec,
}

pub struct AppearanceCache<T> {
    caches: Vec<MlpCache<T>>,
    raw: Array2<T>,
}

impl<T: Real> AppearanceNet<T> {
    pub fn new(mlp: Mlp<T>, encoding: EncodingSpec) -> Result<Self> {
        let arch = mlp.arch();
        if arch.input_dim != encoding.output_dim() || arch.output_dim() != 4 {
            return Err(Error::param(format!(
                "appearance net maps {} -> {}, expected {} -> 4",
                arch.input_dim,
                arch.output_dim(),
                encoding.output_dim()
            )));
        }
        Ok(Self { mlp, encoding })
    }

    /// Default 8 x 256 layout with He-uniform initialization.
    pub fn init<R: Rng>(encoding: EncodingSpec, width: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let skip = (APPEARANCE_SKIP < depth).then_some(APPEARANCE_SKIP);
        let arch = appearance_arch(encoding.output_dim(), width, depth, skip);
        let mut mlp = Mlp::he_uniform(arch, rng)?;
        let last = mlp.num_layers() - 1;
        let fan_in = mlp.arch().layer_input_dim(last) as f64;
        mlp.fill_uniform(last, (1.0 / fan_in).sqrt(), rng);
        Self::new(mlp, encoding)
    }

    /// Colors `(n x 3)` and densities `(n)` for encoded rows.
    pub fn forward(&self, encoded: ArrayView2<T>) -> Result<(Array2<T>, Array1<T>)> {
        let raw = self.mlp.forward_par(encoded)?;
        Ok(split_head(&raw))
    }

    pub fn forward_cached(&self, encoded: ArrayView2<T>) -> Result<(Array2<T>, Array1<T>, AppearanceCache<T>)> {
        let (raw, caches) = self.mlp.forward_chunked(encoded)?;
        let (c, d) = split_head(&raw);
        Ok((c, d, AppearanceCache { caches, raw }))
    }

    /// Gradients for upstream `dL/dc` `(n x 3)` and `dL/dσ` `(n)`.
    /// Returns parameter gradients and `dL/d(encoded)`.
    pub fn backward(
        &self,
        cache: &AppearanceCache<T>,
        dcolor: ArrayView2<T>,
        ddensity: &[T],
    ) -> (Gradients<T>, Array2<T>) {
        let n = cache.raw.nrows();
        let mut draw = Array2::zeros((n, 4));
        for r in 0..n {
            for c in 0..3 {
                let s = sigmoid(cache.raw[(r, c)]);
                draw[(r, c)] = dcolor[(r, c)] * s * (T::one() - s);
            }
            draw[(r, 3)] = ddensity[r] * sigmoid(cache.raw[(r, 3)]);
        }
        self.mlp.backward_chunked(&cache.caches, draw.view())
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

fn split_head<T: Real>(raw: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let color = raw.slice(s![.., ..3]).mapv(sigmoid);
    let density = raw.column(3).mapv(softplus);
    (color, density)
}

/// Single-point appearance evaluation.
pub fn appearance_forward<T: Real>(net: &AppearanceNet<T>, encoded: &[T]) -> Result<(Vec3<T>, T)> {
    if encoded.len() != net.mlp.arch().input_dim {
        return Err(Error::param(format!(
            "encoded input has {} entries, expected {}",
            encoded.len(),
            net.mlp.arch().input_dim
        )));
    }
    let raw = net.mlp.apply_to_row(encoded)?;
    Ok(([sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])], softplus(raw[3])))
}

/// Point-level offset network fed with `(F_s · feature_scale, x_r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineNet<T> {
    pub mlp: Mlp<T>,
    /// Multiplies the raw spatial feature; `1 / k³` keeps the inputs O(1).
    pub feature_scale: T,
}

impl<T: Real> RefineNet<T> {
    pub fn new(mlp: Mlp<T>, feature_scale: T) -> Result<Self> {
        if mlp.arch().output_dim() != 3 || mlp.arch().input_dim < 4 {
            return Err(Error::param("refinement net must map (features, xyz) -> 3"));
        }
        Ok(Self { mlp, feature_scale })
    }

    /// Hidden layers He-uniform; the head starts near zero with
    /// weights in `±1e-5` and zero bias.
    pub fn init<R: Rng>(channels: usize, kernel_size: usize, width: usize, layers: usize, rng: &mut R) -> Result<Self> {
        let mut mlp = Mlp::he_uniform(refine_arch(channels + 3, width, layers), rng)?;
        let last = mlp.num_layers() - 1;
        mlp.fill_uniform(last, REFINE_HEAD_BOUND, rng);
        let k3 = (kernel_size * kernel_size * kernel_size) as f64;
        Self::new(mlp, T::lit(1.0 / k3))
    }

    pub fn feature_channels(&self) -> usize {
        self.mlp.arch().input_dim - 3
    }

    /// Network input row for one sample.
    pub fn input_row(&self, feature: &[T], point: Vec3<T>, out: &mut [T]) {
        let c = feature.len();
        for (o, f) in out[..c].iter_mut().zip(feature) {
            *o = *f * self.feature_scale;
        }
        out[c..c + 3].copy_from_slice(&point);
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}
