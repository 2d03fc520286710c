//! Binary checkpoint, all integers and floats little-endian:
//!
//! ```text
//! magic "HNSECKPT", version u32
//! config        u32 length + JSON
//! iteration     u64
//! rng           seed [u8; 32], stream u64, word position u128
//! networks      u32 count, then per network:
//!   name        u32 length + UTF-8
//!   descriptor  u32 length + JSON (architecture, encoding or feature scale)
//!   layers      u32 count, per layer: u64 n + n f32 weights, u64 n + n f32 biases
//!   adam        u64 step, u64 n + n f32 first moments, u64 n + n f32 second moments
//! kernel        u32 size, u32 channels, u64 n + n f32 weights, adam as above
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::TrainState;
use crate::neural::{AdamState, AppearanceNet, EncodingSpec, Mlp, MlpArch, RefineNet};
use crate::voxel_grid::ConvKernel;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HNSECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type Checkpoint = TrainState;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: MlpArch,
    #[serde(skip_serializing_if = "Option::is_none")]
    encoding: Option<EncodingSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_scale: Option<f32>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn network(&mut self, name: &str, desc: &Descriptor, mlp: &Mlp<f32>, adam: &AdamState<f32>) {
        self.bytes(name.as_bytes());
        self.bytes(&serde_json::to_vec(desc).expect("descriptor serializes"));
        self.u32(mlp.num_layers() as u32);
        for i in 0..mlp.num_layers() {
            let (w, b) = mlp.layer_slices(i);
            self.floats(w);
            self.floats(b);
        }
        self.adam(adam);
    }
    fn adam(&mut self, adam: &AdamState<f32>) {
        self.u64(adam.step);
        self.floats(&adam.m);
        self.floats(&adam.v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    src: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(&self.src, field, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, f: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, f)?.try_into().unwrap()))
    }
    fn u64(&mut self, f: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, f)?.try_into().unwrap()))
    }
    fn bytes(&mut self, f: &str) -> Result<&'a [u8]> {
        let n = self.u32(f)? as usize;
        self.take(n, f)
    }
    fn floats(&mut self, f: &str) -> Result<Vec<f32>> {
        let n = self.u64(f)? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(&self.src, f, "length overflow"))?, f)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn json<D: serde::de::DeserializeOwned>(&mut self, f: &str) -> Result<D> {
        let b = self.bytes(f)?;
        serde_json::from_slice(b).map_err(|e| Error::format(&self.src, f, e.to_string()))
    }
    fn network(&mut self, expect: &str) -> Result<(Descriptor, Mlp<f32>, AdamState<f32>)> {
        let name = self.bytes("network name")?;
        if name != expect.as_bytes() {
            return Err(Error::format(
                &self.src,
                "network name",
                format!("expected `{expect}`, found `{}`", String::from_utf8_lossy(name)),
            ));
        }
        let desc: Descriptor = self.json(&format!("{expect}.descriptor"))?;
        desc.arch
            .validate()
            .map_err(|e| Error::format(&self.src, format!("{expect}.descriptor"), e.to_string()))?;
        let layers = self.u32(&format!("{expect}.layers"))? as usize;
        if layers != desc.arch.layers.len() {
            return Err(Error::format(&self.src, format!("{expect}.layers"), "layer count disagrees with descriptor"));
        }
        let mut params = Vec::with_capacity(desc.arch.param_count());
        for i in 0..layers {
            let field = format!("{expect}.layers[{i}]");
            let w = self.floats(&field)?;
            let b = self.floats(&field)?;
            if w.len() != desc.arch.layer_input_dim(i) * desc.arch.layers[i].out || b.len() != desc.arch.layers[i].out {
                return Err(Error::format(&self.src, field, "blob length disagrees with descriptor"));
            }
            params.extend(w);
            params.extend(b);
        }
        let mlp = Mlp::from_params(desc.arch.clone(), params)
            .map_err(|e| Error::format(&self.src, expect, e.to_string()))?;
        let adam = self.adam(expect, mlp.param_count())?;
        Ok((desc, mlp, adam))
    }
    fn adam(&mut self, owner: &str, len: usize) -> Result<AdamState<f32>> {
        let step = self.u64(&format!("{owner}.adam.step"))?;
        let m = self.floats(&format!("{owner}.adam.m"))?;
        let v = self.floats(&format!("{owner}.adam.v"))?;
        if m.len() != len || v.len() != len {
            return Err(Error::format(&self.src, format!("{owner}.adam"), "moment length disagrees with parameters"));
        }
        Ok(AdamState { m, v, step })
    }
    fn kernel(&mut self) -> Result<(ConvKernel<f32>, AdamState<f32>)> {
        let size = self.u32("kernel.size")? as usize;
        let channels = self.u32("kernel.channels")? as usize;
        let weights = self.floats("kernel.weights")?;
        let kernel = ConvKernel::from_weights(size, channels, weights)
            .map_err(|e| Error::format(&self.src, "kernel.weights", e.to_string()))?;
        let adam = self.adam("kernel", kernel.weights.len())?;
        Ok((kernel, adam))
    }
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(&serde_json::to_vec(&state.config).expect("config serializes"));
    w.u64(state.iteration);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    w.u32(2);
    w.network(
        "appearance",
        &Descriptor {
            arch: state.appearance.mlp.arch().clone(),
            encoding: Some(state.appearance.encoding),
            feature_scale: None,
        },
        &state.appearance.mlp,
        &state.adam_appearance,
    );
    w.network(
        "refine",
        &Descriptor {
            arch: state.refine.mlp.arch().clone(),
            encoding: None,
            feature_scale: Some(state.refine.feature_scale),
        },
        &state.refine.mlp,
        &state.adam_refine,
    );
    w.u32(state.kernel.size() as u32);
    w.u32(state.kernel.channels() as u32);
    w.floats(&state.kernel.weights);
    w.adam(&state.adam_kernel);
    w.0
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&checkpoint_bytes(state)))
        .map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8], source: &str) -> Result<TrainState> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        src: source.to_string(),
    };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(source, "magic", "not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(source, "version", format!("unsupported version {version}")));
    }
    let config: TrainConfig = r.json("config")?;
    let iteration = r.u64("iteration")?;
    let seed: [u8; 32] = r.take(32, "rng.seed")?.try_into().unwrap();
    let stream = r.u64("rng.stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng.word_pos")?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    if r.u32("networks")? != 2 {
        return Err(Error::format(source, "networks", "expected 2 networks"));
    }
    let (ad, amlp, aadam) = r.network("appearance")?;
    let (rd, rmlp, radam) = r.network("refine")?;
    let (kernel, adam_kernel) = r.kernel()?;
    if r.pos != bytes.len() {
        return Err(Error::format(source, "<end>", "trailing bytes"));
    }
    if kernel.size() != config.kernel_size || kernel.channels() + 3 != rd.arch.input_dim {
        return Err(Error::format(source, "kernel", "shape disagrees with config or refinement net"));
    }
    let enc = ad.encoding.ok_or_else(|| Error::format(source, "appearance.descriptor", "missing encoding"))?;
    let scale = rd
        .feature_scale
        .ok_or_else(|| Error::format(source, "refine.descriptor", "missing feature_scale"))?;
    Ok(TrainState {
        config,
        iteration,
        appearance: AppearanceNet::new(amlp, enc).map_err(|e| Error::format(source, "appearance", e.to_string()))?,
        refine: RefineNet::new(rmlp, scale).map_err(|e| Error::format(source, "refine", e.to_string()))?,
        adam_appearance: aadam,
        adam_refine: radam,
        kernel,
        adam_kernel,
        rng,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, &path.display().to_string())
}
