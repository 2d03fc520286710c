//! Observation-space voxel volume built from posed vertices, its
//! channel-wise box diffusion, and the point queries used to filter and
//! canonicalize ray samples.
//!
//! A voxel value has `J + 1` channels: channel 0 is the number of vertices
//! inside the voxel, channels `1..=J` the mean skinning weight row of those
//! vertices. Empty voxels are not stored.

use std::io::{Read, Write};

use crate::math::{self, Vec3};
use crate::{Error, Real, Result};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.02;
pub const DEFAULT_KERNEL_SIZE: usize = 5;
pub const DUMP_MAGIC: [u8; 8] = *b"HNSEVOX\0";
pub const DUMP_VERSION: u32 = 1;

const EMPTY: u32 = u32::MAX;
const WEIGHT_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec<T> {
    /// Min corner of voxel (0, 0, 0).
    pub origin: Vec3<T>,
    pub voxel_size: T,
    pub dims: [usize; 3],
}

impl<T: Real> GridSpec<T> {
    pub fn new(origin: Vec3<T>, voxel_size: T, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > T::zero() && voxel_size.is_finite()) {
            return Err(Error::param(format!("voxel size {voxel_size} must be positive")));
        }
        if dims.iter().any(|&d| d < 32 || d % 32 != 0) {
            return Err(Error::param(format!("grid dims {dims:?} must be multiples of 32")));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Grid enclosing `points` with `margin` free voxels on every side (plus
    /// one voxel of rounding slack), each axis rounded up to a multiple of 32
    /// and the points centered in the result.
    pub fn enclosing(points: &[Vec3<T>], voxel_size: T, margin: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::param("cannot build a grid around zero points"));
        }
        if !(voxel_size > T::zero() && voxel_size.is_finite()) {
            return Err(Error::param(format!("voxel size {voxel_size} must be positive")));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                if !p[a].is_finite() {
                    return Err(Error::param("non-finite vertex"));
                }
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut origin = lo;
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let extent = ((hi[a] - lo[a]) / voxel_size).floor().as_f64() as usize + 1;
            let needed = extent + 2 * (margin + 1);
            dims[a] = needed.div_ceil(32) * 32;
            let shift = margin + 1 + (dims[a] - needed) / 2;
            origin[a] = lo[a] - T::of_usize(shift) * voxel_size;
        }
        Self::new(origin, voxel_size, dims)
    }

    #[inline]
    pub fn voxel_of(&self, p: Vec3<T>) -> [i64; 3] {
        let inv = T::one() / self.voxel_size;
        [
            ((p[0] - self.origin[0]) * inv).floor().as_f64() as i64,
            ((p[1] - self.origin[1]) * inv).floor().as_f64() as i64,
            ((p[2] - self.origin[2]) * inv).floor().as_f64() as i64,
        ]
    }

    #[inline]
    pub fn contains(&self, c: [i64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < self.dims[a])
    }

    #[inline]
    pub fn linear(&self, c: [i64; 3]) -> Option<usize> {
        if self.contains(c) {
            Some(((c[0] as usize * self.dims[1]) + c[1] as usize) * self.dims[2] + c[2] as usize)
        } else {
            None
        }
    }

    pub fn num_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn center(&self, c: [i64; 3]) -> Vec3<T> {
        let h = T::lit(0.5);
        [
            self.origin[0] + (T::lit(c[0] as f64) + h) * self.voxel_size,
            self.origin[1] + (T::lit(c[1] as f64) + h) * self.voxel_size,
            self.origin[2] + (T::lit(c[2] as f64) + h) * self.voxel_size,
        ]
    }

    /// Axis-aligned box covered by the grid.
    pub fn aabb(&self) -> (Vec3<T>, Vec3<T>) {
        let ext = [
            T::of_usize(self.dims[0]) * self.voxel_size,
            T::of_usize(self.dims[1]) * self.voxel_size,
            T::of_usize(self.dims[2]) * self.voxel_size,
        ];
        (self.origin, math::add(self.origin, ext))
    }
}

/// Dense cell index over sparse storage; coordinates kept in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
struct SparseGrid<T> {
    spec: GridSpec<T>,
    channels: usize,
    index: Vec<u32>,
    coords: Vec<[i32; 3]>,
    values: Vec<T>,
}

impl<T: Real> SparseGrid<T> {
    /// `entries` must be sorted by coordinate and inside the grid.
    fn from_sorted(spec: GridSpec<T>, channels: usize, coords: Vec<[i32; 3]>, values: Vec<T>) -> Self {
        debug_assert_eq!(coords.len() * channels, values.len());
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        let mut index = vec![EMPTY; spec.num_cells()];
        for (slot, c) in coords.iter().enumerate() {
            let cell = spec
                .linear([c[0] as i64, c[1] as i64, c[2] as i64])
                .expect("stored voxel inside grid");
            index[cell] = slot as u32;
        }
        Self {
            spec,
            channels,
            index,
            coords,
            values,
        }
    }

    #[inline]
    fn get(&self, c: [i64; 3]) -> Option<&[T]> {
        let cell = self.spec.linear(c)?;
        match self.index[cell] {
            EMPTY => None,
            slot => {
                let s = slot as usize * self.channels;
                Some(&self.values[s..s + self.channels])
            }
        }
    }

    fn iter(&self) -> impl Iterator<Item = ([i32; 3], &[T])> + '_ {
        self.coords
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.channels))
    }

    fn channel_total(&self, channel: usize) -> f64 {
        self.values
            .chunks_exact(self.channels)
            .map(|v| v[channel].as_f64())
            .sum()
    }
}

/// Pre-convolution volume: `(count, w_1..w_J)` per occupied voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelVolume<T> {
    grid: SparseGrid<T>,
}

/// Windowed channel sums of a [`VoxelVolume`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvVolume<T> {
    grid: SparseGrid<T>,
    kernel_size: usize,
}

macro_rules! volume_accessors {
    ($ty:ident) => {
        impl<T: Real> $ty<T> {
            pub fn spec(&self) -> &GridSpec<T> {
                &self.grid.spec
            }

            /// `J + 1`.
            pub fn channels(&self) -> usize {
                self.grid.channels
            }

            pub fn num_joints(&self) -> usize {
                self.grid.channels - 1
            }

            /// Number of stored (non-empty) voxels.
            pub fn len(&self) -> usize {
                self.grid.coords.len()
            }

            pub fn is_empty(&self) -> bool {
                self.grid.coords.is_empty()
            }

            /// Stored value at integer voxel coordinate, `None` when empty.
            pub fn get(&self, c: [i64; 3]) -> Option<&[T]> {
                self.grid.get(c)
            }

            /// Stored voxels in lexicographic coordinate order.
            pub fn iter(&self) -> impl Iterator<Item = ([i32; 3], &[T])> + '_ {
                self.grid.iter()
            }

            /// Sum of one channel over all stored voxels.
            pub fn channel_total(&self, channel: usize) -> f64 {
                self.grid.channel_total(channel)
            }
        }
    };
}

volume_accessors!(VoxelVolume);
volume_accessors!(ConvVolume);

impl<T: Real> ConvVolume<T> {
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelizeParams<T> {
    pub voxel_size: T,
    /// Kernel the volume will be diffused with; sets the padding margin.
    pub kernel_size: usize,
}

impl<T: Real> Default for VoxelizeParams<T> {
    fn default() -> Self {
        Self {
            voxel_size: T::lit(DEFAULT_VOXEL_SIZE),
            kernel_size: DEFAULT_KERNEL_SIZE,
        }
    }
}

/// Bins vertices into a fresh grid. `weights` is row-major `N x J`.
pub fn voxelize<T: Real>(
    vertices: &[Vec3<T>],
    weights: &[T],
    params: VoxelizeParams<T>,
) -> Result<VoxelVolume<T>> {
    let n = vertices.len();
    if n == 0 {
        return Err(Error::param("voxelize needs at least one vertex"));
    }
    if !weights.len().is_multiple_of(n) || weights.is_empty() {
        return Err(Error::param(format!(
            "{} weights do not form {n} rows",
            weights.len()
        )));
    }
    check_kernel_size(params.kernel_size)?;
    let joints = weights.len() / n;
    let channels = joints + 1;
    let spec = GridSpec::enclosing(vertices, params.voxel_size, params.kernel_size / 2)?;

    let mut binned: Vec<([i32; 3], usize)> = Vec::with_capacity(n);
    for (k, &v) in vertices.iter().enumerate() {
        let c = spec.voxel_of(v);
        if !spec.contains(c) {
            return Err(Error::Internal(format!("vertex {k} binned outside its own grid")));
        }
        binned.push(([c[0] as i32, c[1] as i32, c[2] as i32], k));
    }
    binned.sort_unstable();

    let mut coords = Vec::new();
    let mut values = Vec::new();
    let mut acc = vec![0.0f64; joints];
    let mut i = 0;
    while i < binned.len() {
        let c = binned[i].0;
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut count = 0usize;
        while i < binned.len() && binned[i].0 == c {
            let k = binned[i].1;
            for (a, w) in acc.iter_mut().zip(&weights[k * joints..(k + 1) * joints]) {
                *a += w.as_f64();
            }
            count += 1;
            i += 1;
        }
        let total: f64 = acc.iter().sum();
        if !(total > 0.0) {
            return Err(Error::param(format!("weight rows in voxel {c:?} sum to {total}")));
        }
        coords.push(c);
        values.push(T::of_usize(count));
        values.extend(acc.iter().map(|a| T::lit(a / total)));
    }
    Ok(VoxelVolume {
        grid: SparseGrid::from_sorted(spec, channels, coords, values),
    })
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::param(format!("kernel size {k} must be odd and positive")));
    }
    Ok(())
}

/// Per-channel `k³` kernel weights; all ones unless trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    size: usize,
    channels: usize,
    /// `[channel][dx][dy][dz]`, offsets shifted by `size / 2`.
    pub weights: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn ones(size: usize, channels: usize) -> Result<Self> {
        check_kernel_size(size)?;
        Ok(Self {
            size,
            channels,
            weights: vec![T::one(); channels * size * size * size],
        })
    }

    pub fn from_weights(size: usize, channels: usize, weights: Vec<T>) -> Result<Self> {
        check_kernel_size(size)?;
        if weights.len() != channels * size * size * size {
            return Err(Error::param(format!(
                "{} kernel weights for {channels} channels of size {size}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= T::zero())) {
            return Err(Error::param("kernel weights must be finite and non-negative"));
        }
        Ok(Self { size, channels, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Flat index of channel `ch` at window offset `d` (each in `-r..=r`).
    #[inline]
    pub fn offset_index(&self, ch: usize, d: [i64; 3]) -> usize {
        let r = (self.size / 2) as i64;
        let s = self.size;
        ch * s * s * s
            + (((d[0] + r) as usize * s) + (d[1] + r) as usize) * s
            + (d[2] + r) as usize
    }

    pub fn is_all_ones(&self) -> bool {
        self.weights.iter().all(|&w| w == T::one())
    }
}

/// Box-sum diffusion (ones kernel), stride 1, zero padding, same grid.
pub fn conv_diffuse<T: Real>(volume: &VoxelVolume<T>, kernel_size: usize) -> Result<ConvVolume<T>> {
    let kernel = ConvKernel::ones(kernel_size, volume.channels())?;
    conv_diffuse_with(volume, &kernel)
}

/// Channel-wise convolution:
/// `out[u][c] = Σ_d kernel[c][d] · in[u + d][c]` over the `k³` window.
pub fn conv_diffuse_with<T: Real>(volume: &VoxelVolume<T>, kernel: &ConvKernel<T>) -> Result<ConvVolume<T>> {
    let channels = volume.channels();
    if kernel.channels() != channels {
        return Err(Error::param(format!(
            "kernel has {} channels, volume has {channels}",
            kernel.channels()
        )));
    }
    let spec = *volume.spec();
    let r = (kernel.size() / 2) as i64;
    let mut slot = vec![EMPTY; spec.num_cells()];
    let mut coords: Vec<[i32; 3]> = Vec::new();
    let mut acc: Vec<f64> = Vec::new();

    for (c, vals) in volume.iter() {
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    let u = [c[0] as i64 - dx, c[1] as i64 - dy, c[2] as i64 - dz];
                    let Some(cell) = spec.linear(u) else { continue };
                    let s = match slot[cell] {
                        EMPTY => {
                            let s = coords.len();
                            slot[cell] = s as u32;
                            coords.push([u[0] as i32, u[1] as i32, u[2] as i32]);
                            acc.extend(std::iter::repeat_n(0.0, channels));
                            s
                        }
                        s => s as usize,
                    };
                    let out = &mut acc[s * channels..(s + 1) * channels];
                    for (ch, (o, v)) in out.iter_mut().zip(vals).enumerate() {
                        let w = kernel.weights[kernel.offset_index(ch, [dx, dy, dz])];
                        *o += (w * *v).as_f64();
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_unstable_by_key(|&s| coords[s]);
    let mut sorted_coords = Vec::with_capacity(order.len());
    let mut values = Vec::with_capacity(order.len() * channels);
    for s in order {
        let v = &acc[s * channels..(s + 1) * channels];
        if v[0] <= 0.0 {
            continue;
        }
        sorted_coords.push(coords[s]);
        values.extend(v.iter().map(|&x| T::lit(x)));
    }
    Ok(ConvVolume {
        grid: SparseGrid::from_sorted(spec, channels, sorted_coords, values),
        kernel_size: kernel.size(),
    })
}

/// Gradient of a loss with respect to the kernel weights, given `dL/d(feature)`
/// for features read at `cells` (row-major `cells.len() x (J + 1)`).
pub fn conv_kernel_backward<T: Real>(
    volume: &VoxelVolume<T>,
    kernel: &ConvKernel<T>,
    cells: &[[i64; 3]],
    dfeatures: &[T],
) -> Result<Vec<T>> {
    let channels = volume.channels();
    if kernel.channels() != channels || dfeatures.len() != cells.len() * channels {
        return Err(Error::param("kernel gradient inputs disagree in shape"));
    }
    let r = (kernel.size() / 2) as i64;
    let mut grad = vec![0.0f64; kernel.weights.len()];
    for (u, df) in cells.iter().zip(dfeatures.chunks_exact(channels)) {
        if df.iter().all(|&g| g == T::zero()) {
            continue;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    let Some(v) = volume.get([u[0] + dx, u[1] + dy, u[2] + dz]) else { continue };
                    for ch in 0..channels {
                        grad[kernel.offset_index(ch, [dx, dy, dz])] += (df[ch] * v[ch]).as_f64();
                    }
                }
            }
        }
    }
    Ok(grad.into_iter().map(T::lit).collect())
}

/// Diffused `(occupancy, weight mass)` feature at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeature<T>(pub Vec<T>);

impl<T: Real> SpatialFeature<T> {
    pub fn occupancy(&self) -> T {
        self.0[0]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == T::zero())
    }
}

/// Containing-voxel lookup; zero outside the grid or in empty voxels.
pub fn query_feature<T: Real>(conv: &ConvVolume<T>, point: Vec3<T>) -> SpatialFeature<T> {
    let mut out = vec![T::zero(); conv.channels()];
    query_feature_into(conv, point, &mut out);
    SpatialFeature(out)
}

/// Writes the feature into `out`; returns whether the voxel is occupied.
#[inline]
pub fn query_feature_into<T: Real>(conv: &ConvVolume<T>, point: Vec3<T>, out: &mut [T]) -> bool {
    match conv.get(conv.spec().voxel_of(point)) {
        Some(v) => {
            out.copy_from_slice(v);
            true
        }
        None => {
            out.iter_mut().for_each(|o| *o = T::zero());
            false
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterResult<T> {
    /// Indices of points with positive diffused occupancy, ascending.
    pub kept: Vec<usize>,
    /// Indices whose density is forced to zero.
    pub rejected: Vec<usize>,
    /// Row-major `kept.len() x (J + 1)` features.
    pub features: Vec<T>,
}

pub fn filter_points<T: Real>(conv: &ConvVolume<T>, points: &[Vec3<T>]) -> FilterResult<T> {
    let channels = conv.channels();
    let mut result = FilterResult::default();
    for (i, &p) in points.iter().enumerate() {
        match conv.get(conv.spec().voxel_of(p)) {
            Some(v) if v[0] > T::zero() => {
                result.kept.push(i);
                result.features.extend_from_slice(v);
            }
            _ => result.rejected.push(i),
        }
    }
    debug_assert_eq!(result.features.len(), result.kept.len() * channels);
    result
}

/// Skinning weights of the nearest occupied voxel, searching Chebyshev shells
/// of radius `0..=max_radius` around the point's voxel. Within a shell the
/// voxel whose center is closest to the point wins, then the smallest
/// coordinate.
pub fn nearest_weight<T: Real>(volume: &VoxelVolume<T>, point: Vec3<T>, max_radius: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); volume.num_joints()];
    nearest_weight_into(volume, point, max_radius, &mut out)?;
    Ok(out)
}

pub fn nearest_weight_into<T: Real>(
    volume: &VoxelVolume<T>,
    point: Vec3<T>,
    max_radius: usize,
    out: &mut [T],
) -> Result<()> {
    let spec = volume.spec();
    let c = spec.voxel_of(point);
    for r in 0..=max_radius as i64 {
        let mut best: Option<(T, [i64; 3], &[T])> = None;
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    let u = [c[0] + dx, c[1] + dy, c[2] + dz];
                    let Some(v) = volume.get(u) else { continue };
                    let d = math::sub(spec.center(u), point);
                    let dist = math::dot(d, d);
                    let better = match &best {
                        None => true,
                        Some((bd, bu, _)) => dist < *bd || (dist == *bd && u < *bu),
                    };
                    if better {
                        best = Some((dist, u, v));
                    }
                }
            }
        }
        if let Some((_, _, v)) = best {
            out.copy_from_slice(&v[1..]);
            debug_assert!(
                (out.iter().map(|w| w.as_f64()).sum::<f64>() - 1.0).abs() < WEIGHT_SUM_TOL * 10.0
            );
            return Ok(());
        }
    }
    Err(Error::Internal(format!(
        "no occupied voxel within {max_radius} voxels of {:?}",
        point.map(|x| x.as_f64())
    )))
}

/// Which stage a dump holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpKind {
    Voxel,
    Conv { kernel_size: usize },
}

fn write_grid<T: Real, W: Write>(out: &mut W, grid: &SparseGrid<T>, kernel_size: u32) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(64 + grid.coords.len() * (12 + 4 * grid.channels));
    buf.extend_from_slice(&DUMP_MAGIC);
    buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    for a in 0..3 {
        buf.extend_from_slice(&grid.spec.origin[a].as_f64().to_le_bytes());
    }
    buf.extend_from_slice(&grid.spec.voxel_size.as_f64().to_le_bytes());
    for a in 0..3 {
        buf.extend_from_slice(&(grid.spec.dims[a] as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(grid.channels as u32).to_le_bytes());
    buf.extend_from_slice(&kernel_size.to_le_bytes());
    buf.extend_from_slice(&(grid.coords.len() as u64).to_le_bytes());
    for (c, v) in grid.iter() {
        for x in c {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for x in v {
            buf.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    out.write_all(&buf)
}

impl<T: Real> VoxelVolume<T> {
    /// Binary dump; see `docs/FORMATS.md`.
    pub fn write_dump<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write_grid(out, &self.grid, 0)
    }

    pub fn dump_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_dump(&mut v).expect("writing to a Vec cannot fail");
        v
    }
}

impl<T: Real> ConvVolume<T> {
    pub fn write_dump<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write_grid(out, &self.grid, self.kernel_size as u32)
    }

    pub fn dump_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_dump(&mut v).expect("writing to a Vec cannot fail");
        v
    }
}

/// Decoded volume dump.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeDump {
    pub kind: DumpKind,
    pub spec: GridSpec<f64>,
    pub channels: usize,
    pub voxels: Vec<([i32; 3], Vec<f32>)>,
}

pub fn read_dump<R: Read>(input: &mut R) -> Result<VolumeDump> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<volume dump>", e))?;
    let bad = |field: &str, msg: &str| Error::format("<volume dump>", field, msg);
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8).ok_or_else(|| bad("magic", "truncated"))? != DUMP_MAGIC {
        return Err(bad("magic", "not a volume dump"));
    }
    let version = cur.u32().ok_or_else(|| bad("version", "truncated"))?;
    if version != DUMP_VERSION {
        return Err(bad("version", &format!("unsupported version {version}")));
    }
    let mut origin = [0.0; 3];
    for o in &mut origin {
        *o = cur.f64().ok_or_else(|| bad("origin", "truncated"))?;
    }
    let voxel_size = cur.f64().ok_or_else(|| bad("voxel_size", "truncated"))?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cur.u32().ok_or_else(|| bad("dims", "truncated"))? as usize;
    }
    let spec = GridSpec::new(origin, voxel_size, dims).map_err(|e| bad("grid", &e.to_string()))?;
    let channels = cur.u32().ok_or_else(|| bad("channels", "truncated"))? as usize;
    let kernel = cur.u32().ok_or_else(|| bad("kernel_size", "truncated"))? as usize;
    let count = cur.u64().ok_or_else(|| bad("count", "truncated"))? as usize;
    let mut voxels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut c = [0i32; 3];
        for x in &mut c {
            *x = cur.u32().ok_or_else(|| bad("records", "truncated"))? as i32;
        }
        let mut v = Vec::with_capacity(channels);
        for _ in 0..channels {
            v.push(f32::from_bits(cur.u32().ok_or_else(|| bad("records", "truncated"))?));
        }
        voxels.push((c, v));
    }
    if cur.pos != bytes.len() {
        return Err(bad("records", "trailing bytes"));
    }
    Ok(VolumeDump {
        kind: if kernel == 0 {
            DumpKind::Voxel
        } else {
            DumpKind::Conv { kernel_size: kernel }
        },
        spec,
        channels,
        voxels,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> VoxelizeParams<f64> {
        VoxelizeParams::default()
    }

    fn e(j: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[j] = 1.0;
        v
    }

    fn single() -> VoxelVolume<f64> {
        // one-hot on joint index 1, i.e. e_2 in 1-based channel naming
        voxelize(&[[0.1, 0.2, -0.3]], &e(1, 3), params()).unwrap()
    }

    #[test]
    fn single_vertex_volume() {
        let v = single();
        assert_eq!(v.len(), 1);
        assert_eq!(v.spec().dims, [32, 32, 32]);
        let (c, val) = v.iter().next().unwrap();
        assert_eq!(val, &[1.0, 0.0, 1.0, 0.0]);
        // centered on the point
        assert!(c.iter().all(|&x| (14..=17).contains(&x)), "{c:?}");
    }

    #[test]
    fn two_vertices_share_a_voxel() {
        let a = [0.2, 0.5, 0.3];
        let b = [0.6, 0.1, 0.3];
        let mut w = a.to_vec();
        w.extend_from_slice(&b);
        let v = voxelize(&[[0.001, 0.001, 0.001], [0.002, 0.0015, 0.001]], &w, params()).unwrap();
        assert_eq!(v.len(), 1);
        let (_, val) = v.iter().next().unwrap();
        let expect = [2.0, 0.4, 0.3, 0.3];
        for (x, y) in val.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_spreads_to_full_window() {
        let conv = conv_diffuse(&single(), 5).unwrap();
        assert_eq!(conv.len(), 125);
        for (_, v) in conv.iter() {
            assert_eq!(v, &[1.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let verts: Vec<[f64; 3]> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.37;
                [t.sin() * 0.3, t.cos() * 0.2, (t * 0.5).sin() * 0.1]
            })
            .collect();
        let w: Vec<f64> = (0..40).flat_map(|i| e(i % 3, 3)).collect();
        let vol = voxelize(&verts, &w, VoxelizeParams { voxel_size: 0.02, kernel_size: 1 }).unwrap();
        let conv = conv_diffuse(&vol, 1).unwrap();
        let a: Vec<_> = vol.iter().collect();
        let b: Vec<_> = conv.iter().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(matches!(conv_diffuse(&single(), 4), Err(Error::Param(_))));
        assert!(matches!(conv_diffuse(&single(), 0), Err(Error::Param(_))));
    }

    #[test]
    fn conservation_of_occupancy_mass() {
        let verts: Vec<[f64; 3]> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.11;
                [t.sin() * 0.4, t * 0.01, (t * 1.7).cos() * 0.2]
            })
            .collect();
        let w: Vec<f64> = (0..200).flat_map(|i| e(i % 2, 2)).collect();
        let vol = voxelize(&verts, &w, params()).unwrap();
        let conv = conv_diffuse(&vol, 5).unwrap();
        assert!((conv.channel_total(0) - 125.0 * vol.channel_total(0)).abs() < 1e-9);
        assert_eq!(vol.channel_total(0), 200.0);
    }

    #[test]
    fn query_center_and_far_point() {
        let vol = single();
        let conv = conv_diffuse(&vol, 5).unwrap();
        let f = query_feature(&conv, [0.1, 0.2, -0.3]);
        assert_eq!(f.0, vec![1.0, 0.0, 1.0, 0.0]);
        let far = query_feature(&conv, [0.1 + 10.0 * 0.02, 0.2, -0.3]);
        assert!(far.is_zero());
        let outside = query_feature(&conv, [50.0, 0.0, 0.0]);
        assert!(outside.is_zero());
    }

    #[test]
    fn filter_splits_points() {
        let conv = conv_diffuse(&single(), 5).unwrap();
        let pts = [[0.1, 0.2, -0.3], [1.0, 1.0, 1.0], [0.12, 0.2, -0.3], [0.1, 0.2, 0.3]];
        let f = filter_points(&conv, &pts);
        assert_eq!(f.kept, vec![0, 2]);
        assert_eq!(f.rejected, vec![1, 3]);
        assert_eq!(f.features.len(), 2 * 4);
    }

    #[test]
    fn nearest_weight_shells() {
        let vol = single();
        assert_eq!(nearest_weight(&vol, [0.1, 0.2, -0.3], 2).unwrap(), e(1, 3));
        assert_eq!(nearest_weight(&vol, [0.1 - 0.02, 0.2, -0.3], 2).unwrap(), e(1, 3));
        assert!(matches!(
            nearest_weight(&vol, [0.1 + 0.2, 0.2, -0.3], 2),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn nearest_weight_tie_breaks_lexicographically() {
        // two occupied voxels symmetric about the query point
        let spec_pts = [[0.0, 0.0, 0.0], [0.04, 0.0, 0.0]];
        let mut w = e(0, 2);
        w.extend(e(1, 2));
        let vol = voxelize(&spec_pts, &w, params()).unwrap();
        let (c0, _) = vol.iter().next().unwrap();
        let mid = vol.spec().center([c0[0] as i64 + 1, c0[1] as i64, c0[2] as i64]);
        assert_eq!(nearest_weight(&vol, mid, 2).unwrap(), e(0, 2));
    }

    #[test]
    fn dump_layout_is_bit_exact() {
        let spec = GridSpec::new([0.5, -1.0, 0.25], 0.5, [32, 32, 64]).unwrap();
        let grid = SparseGrid::from_sorted(spec, 2, vec![[1, 2, 3], [4, 0, 0]], vec![1.0, 0.5, 3.0, 0.25]);
        let vol = VoxelVolume { grid };
        let mut expect = Vec::new();
        expect.extend_from_slice(b"HNSEVOX\0");
        expect.extend_from_slice(&[1, 0, 0, 0]);
        expect.extend_from_slice(&0.5f64.to_le_bytes());
        expect.extend_from_slice(&(-1.0f64).to_le_bytes());
        expect.extend_from_slice(&0.25f64.to_le_bytes());
        expect.extend_from_slice(&0.5f64.to_le_bytes());
        expect.extend_from_slice(&[32, 0, 0, 0, 32, 0, 0, 0, 64, 0, 0, 0]);
        expect.extend_from_slice(&[2, 0, 0, 0]);
        expect.extend_from_slice(&[0, 0, 0, 0]);
        expect.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        expect.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        expect.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x3f]);
        expect.extend_from_slice(&[4, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        expect.extend_from_slice(&[0x00, 0x00, 0x40, 0x40, 0x00, 0x00, 0x80, 0x3e]);
        assert_eq!(vol.dump_bytes(), expect);

        let back = read_dump(&mut expect.as_slice()).unwrap();
        assert_eq!(back.kind, DumpKind::Voxel);
        assert_eq!(back.voxels[1], ([4, 0, 0], vec![3.0, 0.25]));
        assert!(read_dump(&mut &expect[..20]).is_err());
    }

    #[test]
    fn grid_spec_validation() {
        assert!(GridSpec::new([0.0; 3], 0.0, [32, 32, 32]).is_err());
        assert!(GridSpec::new([0.0; 3], 0.02, [48, 32, 32]).is_err());
        assert!(GridSpec::new([0.0; 3], 0.02, [64, 32, 96]).is_ok());
    }

    #[test]
    fn kernel_gradient_matches_perturbation() {
        // features are linear in the kernel, so a unit bump is an exact probe
        let verts = [[0.0, 0.0, 0.0], [0.03, 0.01, 0.0], [0.05, 0.04, 0.02]];
        let w = [e(0, 2), e(1, 2), vec![0.5, 0.5]].concat();
        let vol = voxelize(&verts, &w, VoxelizeParams { voxel_size: 0.02, kernel_size: 3 }).unwrap();
        let k = ConvKernel::from_weights(3, 3, (0..81).map(|i| 0.5 + (i % 7) as f64 * 0.1).collect()).unwrap();
        let base = conv_diffuse_with(&vol, &k).unwrap();
        let cells: Vec<[i64; 3]> = base.iter().map(|(c, _)| c.map(i64::from)).step_by(3).collect();
        let df: Vec<f64> = (0..cells.len() * 3).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let loss = |conv: &ConvVolume<f64>| -> f64 {
            cells
                .iter()
                .enumerate()
                .map(|(s, &u)| {
                    let v = conv.get(u).map(|v| v.to_vec()).unwrap_or(vec![0.0; 3]);
                    (0..3).map(|c| df[s * 3 + c] * v[c]).sum::<f64>()
                })
                .sum()
        };
        let g = conv_kernel_backward(&vol, &k, &cells, &df).unwrap();
        for i in [0, 13, 40, 54, 80] {
            let mut kp = k.clone();
            kp.weights[i] += 1.0;
            let fd = loss(&conv_diffuse_with(&vol, &kp).unwrap()) - loss(&base);
            assert!((fd - g[i]).abs() < 1e-9, "weight {i}: {fd} vs {}", g[i]);
        }
        assert!(ConvKernel::from_weights(3, 3, vec![-1.0; 81]).is_err());
    }
}
