use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Rows per independently processed chunk. Gradients are reduced over
/// chunks in index order, so results do not depend on the thread count.
pub const CHUNK_ROWS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out: usize,
    pub activation: Activation,
}

/// Layer widths, activations, and skip connections.
///
/// A layer index `s` in `skips` receives `concat(h_{s-1}, input)` instead
/// of `h_{s-1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub skips: Vec<usize>,
}

impl MlpArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layers.is_empty() {
            return Err(Error::param("MLP needs a non-empty input and at least one layer"));
        }
        if self.layers.iter().any(|l| l.out == 0) {
            return Err(Error::param("MLP layer with zero outputs"));
        }
        if let Some(&s) = self.skips.iter().find(|&&s| s == 0 || s >= self.layers.len()) {
            return Err(Error::param(format!("skip index {s} does not name an inner layer")));
        }
        Ok(())
    }

    pub fn layer_input_dim(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim
        } else {
            self.layers[i - 1].out + if self.skips.contains(&i) { self.input_dim } else { 0 }
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out)
    }

    pub fn param_count(&self) -> usize {
        (0..self.layers.len())
            .map(|i| (self.layer_input_dim(i) + 1) * self.layers[i].out)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerLayout {
    weight: usize,
    bias: usize,
    inp: usize,
    out: usize,
}

fn layout(arch: &MlpArch) -> Vec<LayerLayout> {
    let mut off = 0;
    (0..arch.layers.len())
        .map(|i| {
            let inp = arch.layer_input_dim(i);
            let out = arch.layers[i].out;
            let l = LayerLayout {
                weight: off,
                bias: off + inp * out,
                inp,
                out,
            };
            off += (inp + 1) * out;
            l
        })
        .collect()
}

/// Dense network with flat parameter storage: per layer, an `in x out`
/// row-major weight block followed by the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    arch: MlpArch,
    params: Vec<T>,
    layout: Vec<LayerLayout>,
}

/// Per-layer inputs (and the final output) kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
    output: Array2<T>,
}

impl<T: Real> MlpCache<T> {
    pub fn output(&self) -> &Array2<T> {
        &self.output
    }

    pub fn rows(&self) -> usize {
        self.output.nrows()
    }
}

/// Parameter gradients, same layout as [`Mlp::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub values: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&g| g == T::zero())
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, g| m.max(g.abs()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    /// Ordered sum with `f64` accumulation.
    pub fn sum_ordered(parts: &[Self], len: usize) -> Self {
        let mut acc = vec![0.0f64; len];
        for p in parts {
            for (a, g) in acc.iter_mut().zip(&p.values) {
                *a += g.as_f64();
            }
        }
        Self {
            values: acc.into_iter().map(T::lit).collect(),
        }
    }
}

impl<T: Real> Mlp<T> {
    pub fn zeros(arch: MlpArch) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(Self {
            layout: layout(&arch),
            params: vec![T::zero(); n],
            arch,
        })
    }

    pub fn from_params(arch: MlpArch, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::param(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self {
            layout: layout(&arch),
            params,
            arch,
        })
    }

    /// He-uniform weights `U(±√(6/fan_in))`, zero biases.
    pub fn he_uniform<R: Rng>(arch: MlpArch, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(arch)?;
        for i in 0..mlp.layout.len() {
            let bound = (6.0 / mlp.layout[i].inp as f64).sqrt();
            mlp.fill_uniform(i, bound, rng);
        }
        Ok(mlp)
    }

    /// Refills layer `i` weights with `U(-bound, bound)` and zeroes its bias.
    pub fn fill_uniform<R: Rng>(&mut self, i: usize, bound: f64, rng: &mut R) {
        let l = self.layout[i];
        for w in &mut self.params[l.weight..l.bias] {
            *w = T::lit(rng.random_range(-bound..=bound));
        }
        for b in &mut self.params[l.bias..l.bias + l.out] {
            *b = T::zero();
        }
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn weight(&self, i: usize) -> ArrayView2<'_, T> {
        let l = self.layout[i];
        ArrayView2::from_shape((l.inp, l.out), &self.params[l.weight..l.bias]).expect("layout")
    }

    pub fn bias(&self, i: usize) -> ArrayView1<'_, T> {
        let l = self.layout[i];
        ArrayView1::from(&self.params[l.bias..l.bias + l.out])
    }

    /// Weight and bias slices of layer `i` (for serialization).
    pub fn layer_slices(&self, i: usize) -> (&[T], &[T]) {
        let l = self.layout[i];
        (&self.params[l.weight..l.bias], &self.params[l.bias..l.bias + l.out])
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::param(format!(
                "MLP input has {} columns, expected {}",
                x.ncols(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    fn affine(&self, i: usize, x: &ArrayView2<T>) -> Array2<T> {
        let mut z = Array2::from_shape_fn((x.nrows(), self.layout[i].out), |(_, c)| self.bias(i)[c]);
        general_mat_mul(T::one(), x, &self.weight(i), T::one(), &mut z);
        if self.arch.layers[i].activation == Activation::Relu {
            // written so NaN passes through to the non-finite checks
            z.mapv_inplace(|v| if v < T::zero() { T::zero() } else { v });
        }
        z
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for i in 0..self.layout.len() {
            if self.arch.skips.contains(&i) {
                h = concatenate(Axis(1), &[h.view(), x]).expect("row counts agree");
            }
            h = self.affine(i, &h.view());
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> Result<(Array2<T>, MlpCache<T>)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layout.len());
        let mut h = x.to_owned();
        for i in 0..self.layout.len() {
            if self.arch.skips.contains(&i) {
                h = concatenate(Axis(1), &[h.view(), x]).expect("row counts agree");
            }
            let next = self.affine(i, &h.view());
            inputs.push(std::mem::replace(&mut h, next));
        }
        Ok((
            h.clone(),
            MlpCache {
                inputs,
                output: h,
            },
        ))
    }

    /// Parameter gradients and input gradient for upstream gradient `dout`.
    pub fn backward_cached(&self, cache: &MlpCache<T>, dout: ArrayView2<T>) -> (Gradients<T>, Array2<T>) {
        let rows = cache.rows();
        assert_eq!(dout.dim(), (rows, self.arch.output_dim()), "output gradient shape");
        let mut grads = Gradients::zeros(self.params.len());
        let mut dskip = Array2::<T>::zeros((rows, self.arch.input_dim));
        let mut g = dout.to_owned();
        let last = self.layout.len() - 1;
        // Subnormal deltas (a saturated softplus head produces them) carry no
        // usable gradient but slow every matmul they reach by orders of magnitude.
        let tiny = T::min_positive_value();
        for i in (0..=last).rev() {
            let l = self.layout[i];
            if self.arch.layers[i].activation == Activation::Relu {
                let act = if i == last {
                    cache.output.view()
                } else {
                    cache.inputs[i + 1].slice(s![.., ..l.out])
                };
                Zip::from(&mut g).and(&act).for_each(|gv, &a| {
                    if a <= T::zero() || gv.abs() < tiny {
                        *gv = T::zero();
                    }
                });
            } else {
                g.mapv_inplace(|v| if v.abs() < tiny { T::zero() } else { v });
            }
            {
                let mut dw = ArrayViewMut2::from_shape((l.inp, l.out), &mut grads.values[l.weight..l.bias])
                    .expect("layout");
                general_mat_mul(T::one(), &cache.inputs[i].t(), &g, T::zero(), &mut dw);
            }
            let db = g.sum_axis(Axis(0));
            grads.values[l.bias..l.bias + l.out].copy_from_slice(db.as_slice().expect("contiguous"));
            let dx = g.dot(&self.weight(i).t());
            if i == 0 {
                g = dx;
            } else if self.arch.skips.contains(&i) {
                let prev = self.layout[i - 1].out;
                dskip += &dx.slice(s![.., prev..]);
                g = dx.slice(s![.., ..prev]).to_owned();
            } else {
                g = dx;
            }
        }
        g += &dskip;
        (grads, g)
    }

    /// Recomputes the forward pass, then runs [`Mlp::backward_cached`].
    pub fn backward(&self, x: ArrayView2<T>, dout: ArrayView2<T>) -> Result<(Gradients<T>, Array2<T>)> {
        let (_, cache) = self.forward_cached(x)?;
        if dout.dim() != (x.nrows(), self.arch.output_dim()) {
            return Err(Error::param("output gradient shape does not match the batch"));
        }
        Ok(self.backward_cached(&cache, dout))
    }

    /// Forward over fixed-size row chunks, possibly in parallel.
    pub fn forward_chunked(&self, x: ArrayView2<T>) -> Result<(Array2<T>, Vec<MlpCache<T>>)> {
        self.check_input(&x)?;
        let caches: Vec<MlpCache<T>> = x
            .axis_chunks_iter(Axis(0), CHUNK_ROWS)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|chunk| self.forward_cached(chunk).map(|(_, c)| c))
            .collect::<Result<_>>()?;
        let views: Vec<_> = caches.iter().map(|c| c.output.view()).collect();
        let out = if views.is_empty() {
            Array2::zeros((0, self.arch.output_dim()))
        } else {
            concatenate(Axis(0), &views).expect("same width")
        };
        Ok((out, caches))
    }

    /// Forward over fixed-size row chunks without keeping activations.
    pub fn forward_par(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        if x.nrows() <= CHUNK_ROWS {
            return self.forward(x);
        }
        let outs: Vec<Array2<T>> = x
            .axis_chunks_iter(Axis(0), CHUNK_ROWS)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|chunk| self.forward(chunk))
            .collect::<Result<_>>()?;
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("same width"))
    }

    /// Chunked backward; gradients reduced in chunk order.
    pub fn backward_chunked(&self, caches: &[MlpCache<T>], dout: ArrayView2<T>) -> (Gradients<T>, Array2<T>) {
        let mut starts = Vec::with_capacity(caches.len());
        let mut s = 0;
        for c in caches {
            starts.push(s);
            s += c.rows();
        }
        assert_eq!(s, dout.nrows(), "output gradient rows");
        let parts: Vec<(Gradients<T>, Array2<T>)> = caches
            .par_iter()
            .zip(starts.par_iter())
            .map(|(c, &st)| self.backward_cached(c, dout.slice(s![st..st + c.rows(), ..])))
            .collect();
        let grads: Vec<Gradients<T>> = parts.iter().map(|p| p.0.clone()).collect();
        let total = Gradients::sum_ordered(&grads, self.params.len());
        let views: Vec<_> = parts.iter().map(|p| p.1.view()).collect();
        let dx = if views.is_empty() {
            Array2::zeros((0, self.arch.input_dim))
        } else {
            concatenate(Axis(0), &views).expect("same width")
        };
        (total, dx)
    }

    pub fn apply_to_row(&self, x: &[T]) -> Result<Array1<T>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward(view)?.row(0).to_owned())
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
            layout: self.layout.clone(),
        }
    }
}
