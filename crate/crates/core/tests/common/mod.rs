// Brute-force oracles and measurement helpers shared by the integration
// tests and the acceptance target. Every function returns the measured
// error so callers decide how to report it.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use hnse_core::body_model::{joint_transforms, pose_vertices, rodrigues, BodyModel, Pose};
use hnse_core::canonicalize::{canonicalize_batch, rigid_deform};
use hnse_core::math::{self, Mat3, Vec3};
use hnse_core::neural::{appearance_arch, refine_arch, AppearanceNet, EncodingSpec, Mlp, RefineNet};
use hnse_core::renderer::composite;
use hnse_core::synthetic::SyntheticFigure;
use hnse_core::voxel_grid::{
    conv_diffuse, filter_points, nearest_weight, query_feature, voxelize, ConvVolume, GridSpec, VoxelVolume,
    VoxelizeParams,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOXEL_SIZE: f64 = 0.02;
pub const KERNEL_SIZE: usize = 5;

pub fn random_pose<R: Rng>(joints: usize, spread: f64, rng: &mut R) -> Pose<f64> {
    let rots = (0..joints)
        .map(|_| [0; 3].map(|_| rng.random_range(-spread..spread)))
        .collect();
    let trans = [0; 3].map(|_| rng.random_range(-0.2..0.2));
    Pose::new(rots, trans).unwrap()
}

/// A random figure in a random pose, voxelized and diffused.
pub struct PosedFigure {
    pub figure: SyntheticFigure,
    pub pose: Pose<f64>,
    pub posed: Vec<Vec3<f64>>,
    pub volume: VoxelVolume<f64>,
    pub conv: ConvVolume<f64>,
}

pub fn posed_figure(seed: u64) -> PosedFigure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joints = rng.random_range(2..7);
    let figure = SyntheticFigure::random(joints, &mut rng).unwrap();
    let pose = random_pose(joints, 0.6, &mut rng);
    let posed = pose_vertices(&figure.body, &pose).unwrap();
    let volume = voxelize(
        &posed,
        figure.body.skin_weights(),
        VoxelizeParams {
            voxel_size: VOXEL_SIZE,
            kernel_size: KERNEL_SIZE,
        },
    )
    .unwrap();
    let conv = conv_diffuse(&volume, KERNEL_SIZE).unwrap();
    PosedFigure {
        figure,
        pose,
        posed,
        volume,
        conv,
    }
}

type CellMap = BTreeMap<[i64; 3], Vec<f64>>;

fn cell_of(spec: &GridSpec<f64>, p: Vec3<f64>) -> [i64; 3] {
    let inv = 1.0 / spec.voxel_size;
    [0, 1, 2].map(|a| ((p[a] - spec.origin[a]) * inv).floor() as i64)
}

/// Per-voxel vertex count and mean weight row, renormalized.
pub fn oracle_voxelize(spec: &GridSpec<f64>, verts: &[Vec3<f64>], weights: &[f64]) -> CellMap {
    let joints = weights.len() / verts.len();
    let mut sums: CellMap = BTreeMap::new();
    for (k, &v) in verts.iter().enumerate() {
        let e = sums.entry(cell_of(spec, v)).or_insert_with(|| vec![0.0; joints + 1]);
        e[0] += 1.0;
        for j in 0..joints {
            e[1 + j] += weights[k * joints + j];
        }
    }
    for v in sums.values_mut() {
        let n = v[0];
        let mean: Vec<f64> = v[1..].iter().map(|w| w / n).collect();
        let total: f64 = mean.iter().sum();
        for (j, m) in mean.iter().enumerate() {
            v[1 + j] = m / total;
        }
    }
    sums
}

/// Gathered `k³` window sums at every cell of the grid that can be nonzero.
pub fn oracle_conv(spec: &GridSpec<f64>, vox: &CellMap, k: usize) -> CellMap {
    let r = (k / 2) as i64;
    let lookup: HashMap<[i64; 3], &Vec<f64>> = vox.iter().map(|(c, v)| (*c, v)).collect();
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for c in vox.keys() {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a] - r);
            hi[a] = hi[a].max(c[a] + r);
        }
    }
    let channels = vox.values().next().map_or(0, |v| v.len());
    let mut out = BTreeMap::new();
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for z in lo[2]..=hi[2] {
                let u = [x, y, z];
                if !spec.contains(u) {
                    continue;
                }
                let mut acc = vec![0.0; channels];
                for dx in -r..=r {
                    for dy in -r..=r {
                        for dz in -r..=r {
                            if let Some(v) = lookup.get(&[x + dx, y + dy, z + dz]) {
                                for (a, b) in acc.iter_mut().zip(v.iter()) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
                if acc[0] > 0.0 {
                    out.insert(u, acc);
                }
            }
        }
    }
    out
}

/// Weights of the occupied voxel with the smallest Chebyshev distance, then
/// the smallest squared center distance, then the smallest coordinate.
pub fn oracle_nearest(spec: &GridSpec<f64>, vox: &CellMap, p: Vec3<f64>, max_radius: i64) -> Option<Vec<f64>> {
    let c = cell_of(spec, p);
    let mut best: Option<(i64, f64, [i64; 3])> = None;
    for u in vox.keys() {
        let cheb = (0..3).map(|a| (u[a] - c[a]).abs()).max().unwrap();
        if cheb > max_radius {
            continue;
        }
        let d = math::sub(spec.center(*u), p);
        let key = (cheb, math::dot(d, d), *u);
        let better = match &best {
            None => true,
            Some(b) => (key.0, key.1) < (b.0, b.1) || ((key.0, key.1) == (b.0, b.1) && key.2 < b.2),
        };
        if better {
            best = Some(key);
        }
    }
    best.map(|(_, _, u)| vox[&u][1..].to_vec())
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub figures: usize,
    /// Integer-channel mismatches (counts, key sets, kept indices).
    pub exact_mismatches: usize,
    pub max_float_error: f64,
    pub checked_queries: usize,
}

impl OracleReport {
    fn float(&mut self, a: f64, b: f64) {
        self.max_float_error = self.max_float_error.max((a - b).abs());
    }
}

/// Voxelize, conv, query, filter and nearest-weight against their oracles.
pub fn voxel_oracle_report(seeds: &[u64], queries: usize) -> OracleReport {
    let mut rep = OracleReport::default();
    for &seed in seeds {
        let f = posed_figure(seed);
        let spec = *f.volume.spec();
        rep.figures += 1;

        // grid contract: aligned dims, every vertex at least a kernel radius inside
        let margin = (KERNEL_SIZE / 2) as i64;
        if spec.dims.iter().any(|d| d % 32 != 0) {
            rep.exact_mismatches += 1;
        }
        for &v in &f.posed {
            let c = cell_of(&spec, v);
            if (0..3).any(|a| c[a] < margin || c[a] >= spec.dims[a] as i64 - margin) {
                rep.exact_mismatches += 1;
            }
        }

        let vox = oracle_voxelize(&spec, &f.posed, f.figure.body.skin_weights());
        compare_maps(&mut rep, &vox, f.volume.iter());
        let conv = oracle_conv(&spec, &vox, KERNEL_SIZE);
        compare_maps(&mut rep, &conv, f.conv.iter());

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (lo, hi) = spec.aabb();
        let mut pts: Vec<Vec3<f64>> = (0..queries)
            .map(|i| {
                if i % 2 == 0 {
                    // near the surface, where every branch is exercised
                    let v = f.posed[rng.random_range(0..f.posed.len())];
                    v.map(|x| x + rng.random_range(-0.08..0.08))
                } else {
                    [0, 1, 2].map(|a| rng.random_range(lo[a] - 0.05..hi[a] + 0.05))
                }
            })
            .collect();
        // exact voxel corners and centers
        pts.push(spec.origin);
        pts.push(spec.center([3, 3, 3]));

        let channels = f.volume.channels();
        let zero = vec![0.0; channels];
        let filt = filter_points(&f.conv, &pts);
        let mut expect_kept = Vec::new();
        for (i, &p) in pts.iter().enumerate() {
            let c = cell_of(&spec, p);
            let want = conv.get(&c).unwrap_or(&zero);
            let got = query_feature(&f.conv, p);
            if (got.0[0] - want[0]).abs() != 0.0 {
                rep.exact_mismatches += 1;
            }
            for (a, b) in got.0.iter().zip(want) {
                rep.float(*a, *b);
            }
            if want[0] > 0.0 {
                expect_kept.push(i);
                let nw = nearest_weight(&f.volume, p, KERNEL_SIZE / 2).unwrap();
                let ow = oracle_nearest(&spec, &vox, p, margin).unwrap();
                for (a, b) in nw.iter().zip(&ow) {
                    rep.float(*a, *b);
                }
            } else if nearest_weight(&f.volume, p, KERNEL_SIZE / 2).is_ok()
                != oracle_nearest(&spec, &vox, p, margin).is_some()
            {
                rep.exact_mismatches += 1;
            }
            rep.checked_queries += 1;
        }
        if filt.kept != expect_kept || filt.kept.len() + filt.rejected.len() != pts.len() {
            rep.exact_mismatches += 1;
        }
        for (row, &i) in filt.kept.iter().enumerate() {
            let want = &conv[&cell_of(&spec, pts[i])];
            for (a, b) in filt.features[row * channels..(row + 1) * channels].iter().zip(want) {
                rep.float(*a, *b);
            }
        }
    }
    rep
}

fn compare_maps<'a>(rep: &mut OracleReport, want: &CellMap, got: impl Iterator<Item = ([i32; 3], &'a [f64])>) {
    let got: Vec<_> = got.collect();
    if got.len() != want.len() {
        rep.exact_mismatches += 1;
        return;
    }
    for ((gc, gv), (wc, wv)) in got.iter().zip(want) {
        if gc.map(i64::from) != *wc || gv[0] != wv[0] {
            rep.exact_mismatches += 1;
        }
        for (a, b) in gv.iter().zip(wv) {
            rep.float(*a, *b);
        }
    }
}

#[derive(Debug, Default)]
pub struct DeformationReport {
    pub identity_error: f64,
    pub one_hot_error: f64,
    pub one_hot_checked: usize,
    pub rodrigues_error: f64,
}

/// Rotation matrix through a unit quaternion.
pub fn quaternion_rotation(omega: Vec3<f64>) -> Mat3<f64> {
    let theta = math::norm(omega);
    let (w, v) = if theta == 0.0 {
        (1.0, [0.0; 3])
    } else {
        let s = (theta / 2.0).sin() / theta;
        ((theta / 2.0).cos(), math::scale(omega, s))
    };
    let [x, y, z] = v;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn max_diff(a: Vec3<f64>, b: Vec3<f64>) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
}

pub fn deformation_report(seeds: &[u64]) -> DeformationReport {
    let mut rep = DeformationReport::default();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let joints = rng.random_range(2..7);
        let figure = SyntheticFigure::random(joints, &mut rng).unwrap();
        let body: &BodyModel<f64> = &figure.body;
        let params = VoxelizeParams {
            voxel_size: VOXEL_SIZE,
            kernel_size: KERNEL_SIZE,
        };
        let r = KERNEL_SIZE / 2;

        // identity pose, with and without an all-zero offset net
        let rest = body.rest_pose();
        let verts = pose_vertices(body, &rest).unwrap();
        let volume = voxelize(&verts, body.skin_weights(), params).unwrap();
        let conv = conv_diffuse(&volume, KERNEL_SIZE).unwrap();
        let tr = joint_transforms(body, &rest).unwrap();
        let pts: Vec<Vec3<f64>> = verts
            .iter()
            .map(|v| v.map(|x| x + rng.random_range(-0.02..0.02)))
            .collect();
        let filt = filter_points(&conv, &pts);
        let kept: Vec<Vec3<f64>> = filt.kept.iter().map(|&i| pts[i]).collect();
        let zero_net = RefineNet::new(Mlp::zeros(refine_arch(joints + 4, 32, 3)).unwrap(), 1.0 / 125.0).unwrap();
        for net in [None, Some(&zero_net)] {
            let out = canonicalize_batch(&kept, &filt.features, &volume, r, &tr, net).unwrap();
            for (s, p) in out.iter().zip(&kept) {
                rep.identity_error = rep.identity_error.max(max_diff(s.refined_canonical, *p));
            }
        }

        // one-hot round trips: pose a point by one joint, bring it back
        let pose = random_pose(joints, 1.2, &mut rng);
        let fwd = body.skinning_transforms(&pose).unwrap();
        let inv = joint_transforms(body, &pose).unwrap();
        for v in body.rest_vertices() {
            for j in 0..joints {
                let mut w = vec![0.0; joints];
                w[j] = 1.0;
                let back = rigid_deform(fwd[j].apply(*v), &w, &inv);
                rep.one_hot_error = rep.one_hot_error.max(max_diff(back, *v));
            }
        }
        // through the volume: posed vertices whose voxel holds a single joint
        let posed = pose_vertices(body, &pose).unwrap();
        let volume = voxelize(&posed, body.skin_weights(), params).unwrap();
        let conv = conv_diffuse(&volume, KERNEL_SIZE).unwrap();
        let mut pts = Vec::new();
        let mut rest_pts = Vec::new();
        for (k, &p) in posed.iter().enumerate() {
            let cell = volume.get(volume.spec().voxel_of(p)).unwrap();
            if cell[1..].iter().filter(|&&x| x != 0.0).count() == 1 {
                pts.push(p);
                rest_pts.push(body.rest_vertices()[k]);
            }
        }
        let filt = filter_points(&conv, &pts);
        assert_eq!(filt.kept.len(), pts.len(), "posed vertices must survive the filter");
        let out = canonicalize_batch(&pts, &filt.features, &volume, r, &inv, None).unwrap();
        for (s, v) in out.iter().zip(&rest_pts) {
            rep.one_hot_error = rep.one_hot_error.max(max_diff(s.refined_canonical, *v));
            rep.one_hot_checked += 1;
        }

        // Rodrigues against the quaternion construction, small angles included
        for i in 0..200 {
            let scale = [1e-9, 1e-5, 1e-3, 0.5, 3.0][i % 5];
            let omega = [0; 3].map(|_| rng.random_range(-1.0..1.0) * scale);
            let a = rodrigues(omega);
            let b = quaternion_rotation(omega);
            rep.rodrigues_error = rep.rodrigues_error.max(math::mat_max_diff(&a, &b));
        }
    }
    rep
}

/// Worst relative gradient error over the draws, measured as
/// `|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)` on the vector of
/// sampled partials. Analytic gradients run in f32; the central differences
/// run on an f64 copy of the same parameters so that truncation and rounding
/// in the reference stay far below the tolerance.
#[derive(Debug, Default)]
pub struct GradientReport {
    pub appearance: f64,
    pub refine: f64,
    pub draws: usize,
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(f64::MIN_POSITIVE)
}

const FD_STEP: f64 = 1e-6;
const ROWS: usize = 6;
const PROBES: usize = 48;

pub fn gradient_report(draws: usize, width: usize, depth: usize) -> GradientReport {
    let mut rep = GradientReport::default();
    let enc = EncodingSpec::default();
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + d as u64);

        // appearance net: L = Σ r_c · color + r_σ · density
        let arch = appearance_arch(enc.output_dim(), width, depth, Some(depth.min(5)));
        let mlp = Mlp::<f32>::he_uniform(arch, &mut rng).unwrap();
        let net = AppearanceNet::new(mlp, enc).unwrap();
        let x = Array2::from_shape_fn((ROWS, enc.output_dim()), |_| rng.random_range(-1.0f32..1.0));
        let proj = Array2::from_shape_fn((ROWS, 4), |_| rng.random_range(-1.0f32..1.0));
        let (_, _, cache) = net.forward_cached(x.view()).unwrap();
        let dcolor = proj.slice(ndarray::s![.., ..3]).to_owned();
        let dsigma: Vec<f32> = proj.column(3).to_vec();
        let (g, gx) = net.backward(&cache, dcolor.view(), &dsigma);

        let net64 = AppearanceNet::new(net.mlp.cast::<f64>(), enc).unwrap();
        let x64 = x.mapv(f64::from);
        let proj64 = proj.mapv(f64::from);
        let loss = |n: &AppearanceNet<f64>, x: &Array2<f64>| {
            let (c, s) = n.forward(x.view()).unwrap();
            (0..ROWS)
                .map(|r| (0..3).map(|k| c[(r, k)] * proj64[(r, k)]).sum::<f64>() + s[r] * proj64[(r, 3)])
                .sum::<f64>()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..PROBES {
            let i = rng.random_range(0..net64.param_count());
            let mut n = net64.clone();
            n.mlp.params_mut()[i] += FD_STEP;
            let up = loss(&n, &x64);
            n.mlp.params_mut()[i] -= 2.0 * FD_STEP;
            let dn = loss(&n, &x64);
            analytic.push(f64::from(g.values[i]));
            numeric.push((up - dn) / (2.0 * FD_STEP));
        }
        for _ in 0..PROBES / 4 {
            let (r, c) = (rng.random_range(0..ROWS), rng.random_range(0..enc.output_dim()));
            let mut xp = x64.clone();
            xp[(r, c)] += FD_STEP;
            let up = loss(&net64, &xp);
            xp[(r, c)] -= 2.0 * FD_STEP;
            let dn = loss(&net64, &xp);
            analytic.push(f64::from(gx[(r, c)]));
            numeric.push((up - dn) / (2.0 * FD_STEP));
        }
        rep.appearance = rep.appearance.max(rel_error(&analytic, &numeric));

        // refinement net: L = Σ r · offset
        let joints = 4;
        let rnet = RefineNet::<f32>::init(joints + 1, KERNEL_SIZE, width / 2, 4, &mut rng).unwrap();
        // a zero-ish head would make the check vacuous
        let last = rnet.mlp.num_layers() - 1;
        let mut rnet = rnet;
        rnet.mlp.fill_uniform(last, 0.3, &mut rng);
        let xin = Array2::from_shape_fn((ROWS, joints + 4), |_| rng.random_range(-1.0f32..1.0));
        let rproj = Array2::from_shape_fn((ROWS, 3), |_| rng.random_range(-1.0f32..1.0));
        let (g, gx) = rnet.mlp.backward(xin.view(), rproj.view()).unwrap();
        let m64 = rnet.mlp.cast::<f64>();
        let xin64 = xin.mapv(f64::from);
        let rproj64 = rproj.mapv(f64::from);
        let rloss = |m: &Mlp<f64>, x: &Array2<f64>| (m.forward(x.view()).unwrap() * &rproj64).sum();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..PROBES {
            let i = rng.random_range(0..m64.param_count());
            let mut m = m64.clone();
            m.params_mut()[i] += FD_STEP;
            let up = rloss(&m, &xin64);
            m.params_mut()[i] -= 2.0 * FD_STEP;
            let dn = rloss(&m, &xin64);
            analytic.push(f64::from(g.values[i]));
            numeric.push((up - dn) / (2.0 * FD_STEP));
        }
        for _ in 0..PROBES / 4 {
            let (r, c) = (rng.random_range(0..ROWS), rng.random_range(0..joints + 4));
            let mut xp = xin64.clone();
            xp[(r, c)] += FD_STEP;
            let up = rloss(&m64, &xp);
            xp[(r, c)] -= 2.0 * FD_STEP;
            let dn = rloss(&m64, &xp);
            analytic.push(f64::from(gx[(r, c)]));
            numeric.push((up - dn) / (2.0 * FD_STEP));
        }
        rep.refine = rep.refine.max(rel_error(&analytic, &numeric));
        rep.draws += 1;
    }
    rep
}

#[derive(Debug, Default)]
pub struct CompositeReport {
    pub rays: usize,
    /// `|alpha + T_final - 1|`.
    pub identity_error: f64,
    /// Against a sequential loop written from the definition.
    pub loop_error: f64,
    pub zero_sigma_exact: bool,
    pub saturation_error: f64,
}

pub fn composite_report(rays: usize, seed: u64) -> CompositeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = CompositeReport {
        zero_sigma_exact: true,
        ..Default::default()
    };
    for _ in 0..rays {
        let n = rng.random_range(1..200);
        let colors: Vec<Vec3<f64>> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let sigmas: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..80.0) })
            .collect();
        let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..0.05)).collect();
        let c = composite(&colors, &sigmas, &deltas);
        rep.identity_error = rep.identity_error.max((c.alpha + c.transmittance - 1.0).abs());

        let mut t = 1.0;
        let mut acc = [0.0; 3];
        let mut alpha = 0.0;
        for i in 0..n {
            let a = 1.0 - (-sigmas[i] * deltas[i]).exp();
            for k in 0..3 {
                acc[k] += t * a * colors[i][k];
            }
            alpha += t * a;
            t *= 1.0 - a;
        }
        rep.loop_error = rep.loop_error.max(max_diff(acc, c.color)).max((alpha - c.alpha).abs());

        let z = composite(&colors, &vec![0.0; n], &deltas);
        if z.color != [0.0; 3] || z.alpha != 0.0 || z.transmittance != 1.0 {
            rep.zero_sigma_exact = false;
        }
        rep.rays += 1;
    }
    let c1 = [0.2, 0.7, 0.4];
    let s = composite(&[c1], &[20.0], &[1.0]);
    rep.saturation_error = max_diff(s.color, c1).max((s.alpha - 1.0).abs());
    rep
}
