use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::Real;

/// Frequency layout of the positional encoding.
///
/// Output order: `[x, y, z]` (when `include_input`), then for each
/// frequency `k` in `0..L` the block
/// `[sin(2ᵏπx), sin(2ᵏπy), sin(2ᵏπz), cos(2ᵏπx), cos(2ᵏπy), cos(2ᵏπz)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for EncodingSpec {
    fn default() -> Self {
        Self {
            num_frequencies: 10,
            include_input: true,
        }
    }
}

impl EncodingSpec {
    pub fn output_dim(&self) -> usize {
        (if self.include_input { 3 } else { 0 }) + 6 * self.num_frequencies
    }
}

pub fn pe_encode<T: Real>(p: Vec3<T>, spec: EncodingSpec) -> Vec<T> {
    let mut out = vec![T::zero(); spec.output_dim()];
    pe_encode_into(p, spec, &mut out);
    out
}

pub fn pe_encode_into<T: Real>(p: Vec3<T>, spec: EncodingSpec, out: &mut [T]) {
    debug_assert_eq!(out.len(), spec.output_dim());
    let mut o = 0;
    if spec.include_input {
        out[..3].copy_from_slice(&p);
        o = 3;
    }
    let mut freq = T::PI();
    for _ in 0..spec.num_frequencies {
        for a in 0..3 {
            let (s, c) = (p[a] * freq).sin_cos();
            out[o + a] = s;
            out[o + 3 + a] = c;
        }
        o += 6;
        freq = freq + freq;
    }
}

/// Pulls a gradient on the encoding back to the input point.
pub fn pe_backward<T: Real>(p: Vec3<T>, spec: EncodingSpec, grad: &[T]) -> Vec3<T> {
    debug_assert_eq!(grad.len(), spec.output_dim());
    let mut g = [T::zero(); 3];
    let mut o = 0;
    if spec.include_input {
        g.copy_from_slice(&grad[..3]);
        o = 3;
    }
    let mut freq = T::PI();
    for _ in 0..spec.num_frequencies {
        for a in 0..3 {
            let (s, c) = (p[a] * freq).sin_cos();
            g[a] += freq * (c * grad[o + a] - s * grad[o + 3 + a]);
        }
        o += 6;
        freq = freq + freq;
    }
    g
}
