//! Replaceable pooling: lift → pool → drop with a named, registrable
//! reduction operator, plus the legacy rotation-pooling baseline it replaces
//! and the instrumentation comparing the two.
//!
//! The pipeline raises the input tensor by one unit axis, pools regions of
//! the lifted tensor with a [`PoolFn`], and removes the unit axis again.
//! Both dimensionality edits are metadata-only (the flat data buffer is
//! untouched), which is what makes the pipeline cheaper than the legacy
//! slice/normalize/rotate-max procedure: pooling is the only pass over the
//! data.
//!
//! Counter conventions (see [`crate::count`] for the cost model): each pool
//! function declares its per-region op cost; the pooling engine adds one
//! `move` per output element written; the pipeline tallies each of the two
//! dimensionality edits as one `add` (the O(1) insertion/removal of a unit
//! extent in the shape tuple). The standalone lift/drop ops move no data at
//! all.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::count::{OpCounter, Profiler};
use crate::error::{Error, Result};
use crate::fmath;
use crate::layer::{DiffLayer, LayerGrad};
use crate::tensor::{strides_of, Tensor};

/// A named pooling reduction over a finite region of values.
///
/// `reduce` maps the region (in row-major scan order) to one value;
/// `grad_mask` assigns each region element its weight in the backward pass,
/// i.e. `d reduce / d x[i]`; `cost` declares the op count of one reduction
/// over a region of the given length, excluding the output write.
#[derive(Clone)]
pub struct PoolFn {
    name: String,
    reduce: fn(&[f64]) -> f64,
    grad_mask: fn(&[f64]) -> Vec<f64>,
    cost: fn(usize) -> OpCounter,
}

impl core::fmt::Debug for PoolFn {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("PoolFn").field("name", &self.name).finish()
    }
}

impl PoolFn {
    pub fn new(
        name: &str,
        reduce: fn(&[f64]) -> f64,
        grad_mask: fn(&[f64]) -> Vec<f64>,
        cost: fn(usize) -> OpCounter,
    ) -> Self {
        PoolFn {
            name: name.to_string(),
            reduce,
            grad_mask,
            cost,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn reduce(&self, region: &[f64]) -> f64 {
        (self.reduce)(region)
    }

    pub fn grad_mask(&self, region: &[f64]) -> Vec<f64> {
        (self.grad_mask)(region)
    }

    pub fn cost(&self, region_len: usize) -> OpCounter {
        (self.cost)(region_len)
    }
}

fn reduce_max(region: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &v in region {
        if v > best {
            best = v;
        }
    }
    best
}

fn mask_max(region: &[f64]) -> Vec<f64> {
    // One-hot on the first maximizer in scan order (deterministic ties).
    let mut best = f64::NEG_INFINITY;
    let mut best_i = 0;
    for (i, &v) in region.iter().enumerate() {
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let mut mask = vec![0.0; region.len()];
    if !region.is_empty() {
        mask[best_i] = 1.0;
    }
    mask
}

fn cost_max(len: usize) -> OpCounter {
    OpCounter {
        compares: len as u64,
        ..OpCounter::ZERO
    }
}

fn reduce_avg(region: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in region {
        acc += v;
    }
    acc / region.len() as f64
}

fn mask_avg(region: &[f64]) -> Vec<f64> {
    vec![1.0 / region.len() as f64; region.len()]
}

fn cost_avg(len: usize) -> OpCounter {
    OpCounter {
        adds: len as u64,
        multiplies: 1,
        ..OpCounter::ZERO
    }
}

/// Signed p=2 power mean: `sign(sum) * sqrt(mean(x^2))`.
///
/// The sign factor keeps the singleton identity `reduce({v}) = v` for
/// negative values, which the plain power mean would break.
fn reduce_lp(region: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut sq = 0.0;
    for &v in region {
        sum += v;
        sq += v * v;
    }
    let m2 = fmath::sqrt(sq / region.len() as f64);
    if sum < 0.0 {
        -m2
    } else {
        m2
    }
}

fn mask_lp(region: &[f64]) -> Vec<f64> {
    let n = region.len() as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for &v in region {
        sum += v;
        sq += v * v;
    }
    let m2 = fmath::sqrt(sq / n);
    let s = if sum < 0.0 { -1.0 } else { 1.0 };
    if m2 == 0.0 {
        return vec![0.0; region.len()];
    }
    region.iter().map(|&v| s * v / (n * m2)).collect()
}

fn cost_lp(len: usize) -> OpCounter {
    OpCounter {
        compares: 1,
        adds: 2 * len as u64,
        multiplies: len as u64 + 2,
        ..OpCounter::ZERO
    }
}

/// Exponential-weighted mean: `sum(x * e^x) / sum(e^x)`, computed with a
/// max shift for stability. Occupies the replaceable slot where an external
/// softmax-family pooling would plug in.
fn reduce_soft(region: &[f64]) -> f64 {
    let m = reduce_max(region);
    let mut num = 0.0;
    let mut den = 0.0;
    for &v in region {
        let w = fmath::exp(v - m);
        num += v * w;
        den += w;
    }
    num / den
}

fn mask_soft(region: &[f64]) -> Vec<f64> {
    let m = reduce_max(region);
    let mut den = 0.0;
    let weights: Vec<f64> = region
        .iter()
        .map(|&v| {
            let w = fmath::exp(v - m);
            den += w;
            w
        })
        .collect();
    let out = {
        let mut num = 0.0;
        for (&v, &w) in region.iter().zip(weights.iter()) {
            num += v * w;
        }
        num / den
    };
    region
        .iter()
        .zip(weights.iter())
        .map(|(&v, &w)| (w / den) * (1.0 + v - out))
        .collect()
}

fn cost_soft(len: usize) -> OpCounter {
    OpCounter {
        compares: len as u64,
        adds: 2 * len as u64,
        multiplies: 2 * len as u64 + 1,
        ..OpCounter::ZERO
    }
}

/// Registry of pool functions, looked up by name from configuration.
///
/// Registration is expected to complete before pooling runs (write-once,
/// then read-only); the registry itself holds no interior mutability.
#[derive(Debug, Clone)]
pub struct PoolRegistry {
    fns: Vec<PoolFn>,
}

impl PoolRegistry {
    pub fn empty() -> Self {
        PoolRegistry { fns: Vec::new() }
    }

    /// Registry preloaded with the built-ins: `max`, `avg`, `lp`, `soft`.
    pub fn with_builtins() -> Self {
        let mut r = PoolRegistry::empty();
        r.register(PoolFn::new("max", reduce_max, mask_max, cost_max))
            .unwrap();
        r.register(PoolFn::new("avg", reduce_avg, mask_avg, cost_avg))
            .unwrap();
        r.register(PoolFn::new("lp", reduce_lp, mask_lp, cost_lp))
            .unwrap();
        r.register(PoolFn::new("soft", reduce_soft, mask_soft, cost_soft))
            .unwrap();
        r
    }

    pub fn register(&mut self, f: PoolFn) -> Result<()> {
        if self.fns.iter().any(|g| g.name == f.name) {
            return Err(Error::DuplicateName(f.name.clone()));
        }
        self.fns.push(f);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&PoolFn> {
        self.fns
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::UnknownPoolFn(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fns.iter().map(|f| f.name.as_str())
    }
}

/// Window/stride/axes parameterization of the pooled regions.
///
/// `axes` index into the *lifted* tensor; `window` and `stride` run parallel
/// to `axes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolRegionSpec {
    pub window: Vec<usize>,
    pub stride: Vec<usize>,
    pub axes: Vec<usize>,
}

impl PoolRegionSpec {
    pub fn new(window: &[usize], stride: &[usize], axes: &[usize]) -> Result<Self> {
        if window.len() != stride.len() || window.len() != axes.len() {
            return Err(Error::InvalidHyperparam(format!(
                "pool spec lengths disagree: window {}, stride {}, axes {}",
                window.len(),
                stride.len(),
                axes.len()
            )));
        }
        if window.iter().any(|&w| w == 0) || stride.iter().any(|&s| s == 0) {
            return Err(Error::InvalidHyperparam(
                "pool window and stride entries must be >= 1".to_string(),
            ));
        }
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != axes.len() {
            return Err(Error::InvalidHyperparam(
                "pool axes must be distinct".to_string(),
            ));
        }
        Ok(PoolRegionSpec {
            window: window.to_vec(),
            stride: stride.to_vec(),
            axes: axes.to_vec(),
        })
    }

    /// Full-extent window over the given axes of `shape`, stride = window.
    pub fn full(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let window: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        PoolRegionSpec::new(&window, &window, axes)
    }
}

/// Dimensionality increase: `[N, C, H, W]` -> `[N, C, 1, H, W]`.
///
/// Metadata-only; the flat data buffer is reused, so no element moves and no
/// allocation happen.
pub fn rp_lift(t: Tensor) -> Result<Tensor> {
    if t.rank() != 4 {
        return Err(Error::RankMismatch {
            expected: 4,
            got: t.rank(),
        });
    }
    let s = t.shape().to_vec();
    t.reshape(&[s[0], s[1], 1, s[2], s[3]])
}

/// Dimensionality reduction: `[N, C, 1, H, W]` -> `[N, C, H, W]`.
pub fn rp_drop(t: Tensor) -> Result<Tensor> {
    if t.rank() != 5 {
        return Err(Error::RankMismatch {
            expected: 5,
            got: t.rank(),
        });
    }
    let s = t.shape().to_vec();
    if s[2] != 1 {
        return Err(Error::NonUnitLiftedAxis { extent: s[2] });
    }
    t.reshape(&[s[0], s[1], s[3], s[4]])
}

/// Generic pooling engine over any rank; regions follow `spec`.
///
/// Regions that are contiguous in the flat buffer are reduced in place;
/// otherwise one scratch buffer of window volume is allocated for the whole
/// call and reused per region.
fn pool_nd_profiled(
    t: &Tensor,
    spec: &PoolRegionSpec,
    f: &PoolFn,
    profiler: &mut Profiler,
) -> Result<Tensor> {
    let shape = t.shape();
    let rank = shape.len();
    for &a in &spec.axes {
        if a >= rank {
            return Err(Error::InvalidHyperparam(format!(
                "pool axis {a} out of range for rank {rank}"
            )));
        }
    }
    // Per-axis region length: window on pooled axes, 1 elsewhere.
    let mut region_len_by_axis = vec![1usize; rank];
    let mut out_shape = shape.to_vec();
    for (j, &a) in spec.axes.iter().enumerate() {
        if spec.window[j] > shape[a] {
            return Err(Error::WindowTooLarge {
                axis: a,
                window: spec.window[j],
                extent: shape[a],
            });
        }
        region_len_by_axis[a] = spec.window[j];
        out_shape[a] = (shape[a] - spec.window[j]) / spec.stride[j] + 1;
    }
    let region_len: usize = region_len_by_axis.iter().product();
    let strides = strides_of(shape);

    // A region is one flat contiguous run iff every axis inner to the
    // outermost varying axis is covered in full.
    let contiguous = {
        let outer_varying = region_len_by_axis.iter().position(|&l| l > 1);
        match outer_varying {
            None => true,
            Some(a) => ((a + 1)..rank).all(|b| region_len_by_axis[b] == shape[b]),
        }
    };

    let out_numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; out_numel];
    profiler.alloc.alloc(out_numel);
    let mut scratch = if contiguous {
        Vec::new()
    } else {
        profiler.alloc.alloc(region_len);
        vec![0.0; region_len]
    };

    let data = t.data();
    let mut out_pos = vec![0usize; rank];
    for out_flat in 0..out_numel {
        // Flat start of this region in the input.
        let mut start = 0usize;
        for a in 0..rank {
            let in_coord = match spec.axes.iter().position(|&x| x == a) {
                Some(j) => out_pos[a] * spec.stride[j],
                None => out_pos[a],
            };
            start += in_coord * strides[a];
        }

        let value = if contiguous {
            let region = &data[start..start + region_len];
            f.reduce(region)
        } else {
            gather_region(data, &strides, &region_len_by_axis, start, &mut scratch);
            f.reduce(&scratch)
        };
        profiler.ops += f.cost(region_len);
        out[out_flat] = value;
        profiler.ops.moves += 1;

        // Odometer increment over the output coordinates.
        for a in (0..rank).rev() {
            out_pos[a] += 1;
            if out_pos[a] < out_shape[a] {
                break;
            }
            out_pos[a] = 0;
        }
    }
    if !contiguous {
        profiler.alloc.free(region_len);
        drop(scratch);
    }

    let t = Tensor::new(&out_shape, out)?;
    t.debug_check_finite("pool");
    Ok(t)
}

/// Copy a (possibly strided) region into `scratch`, row-major scan order.
fn gather_region(
    data: &[f64],
    strides: &[usize],
    region_len_by_axis: &[usize],
    start: usize,
    scratch: &mut [f64],
) {
    let rank = strides.len();
    let mut off = vec![0usize; rank];
    for slot in scratch.iter_mut() {
        let mut idx = start;
        for a in 0..rank {
            idx += off[a] * strides[a];
        }
        *slot = data[idx];
        for a in (0..rank).rev() {
            off[a] += 1;
            if off[a] < region_len_by_axis[a] {
                break;
            }
            off[a] = 0;
        }
    }
}

/// Pool the lifted rank-5 tensor `[N, C, D, H, W]`; `spec.axes` must lie
/// within the D/H/W axes (2, 3, 4).
pub fn rp_pool(t: &Tensor, spec: &PoolRegionSpec, f: &PoolFn) -> Result<(Tensor, OpCounter)> {
    let mut profiler = Profiler::new();
    let out = rp_pool_profiled(t, spec, f, &mut profiler)?;
    Ok((out, profiler.ops))
}

pub fn rp_pool_profiled(
    t: &Tensor,
    spec: &PoolRegionSpec,
    f: &PoolFn,
    profiler: &mut Profiler,
) -> Result<Tensor> {
    if t.rank() != 5 {
        return Err(Error::RankMismatch {
            expected: 5,
            got: t.rank(),
        });
    }
    for &a in &spec.axes {
        if !(2..=4).contains(&a) {
            return Err(Error::InvalidHyperparam(format!(
                "rp_pool axes must lie within the D/H/W axes (2..=4), got {a}"
            )));
        }
    }
    pool_nd_profiled(t, spec, f, profiler)
}

/// Full 3D replaceable pooling: lift, pool, drop.
///
/// The counter aggregates all three stages: the pool pass per the pool
/// function's cost plus one move per output element, and one `add` for each
/// of the two O(1) dimensionality edits.
pub fn replaceable_pool_3d(
    t: Tensor,
    spec: &PoolRegionSpec,
    f: &PoolFn,
) -> Result<(Tensor, OpCounter)> {
    let mut profiler = Profiler::new();
    let out = replaceable_pool_3d_profiled(t, spec, f, &mut profiler)?;
    Ok((out, profiler.ops))
}

pub fn replaceable_pool_3d_profiled(
    t: Tensor,
    spec: &PoolRegionSpec,
    f: &PoolFn,
    profiler: &mut Profiler,
) -> Result<Tensor> {
    let lifted = rp_lift(t)?;
    profiler.ops.adds += 1; // shape tuple gains a unit extent
    let pooled = rp_pool_profiled(&lifted, spec, f, profiler)?;
    let dropped = rp_drop(pooled)?;
    profiler.ops.adds += 1; // shape tuple loses the unit extent
    Ok(dropped)
}

/// 2D replaceable pooling over an image `[C, H, W]`: lift to `[C, 1, H, W]`,
/// pool the H/W axes, drop back to rank 3.
pub fn replaceable_pool_2d(
    img: Tensor,
    window: (usize, usize),
    stride: (usize, usize),
    f: &PoolFn,
) -> Result<(Tensor, OpCounter)> {
    let mut profiler = Profiler::new();
    let out = replaceable_pool_2d_profiled(img, window, stride, f, &mut profiler)?;
    Ok((out, profiler.ops))
}

pub fn replaceable_pool_2d_profiled(
    img: Tensor,
    window: (usize, usize),
    stride: (usize, usize),
    f: &PoolFn,
    profiler: &mut Profiler,
) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::RankMismatch {
            expected: 3,
            got: img.rank(),
        });
    }
    let s = img.shape().to_vec();
    let lifted = img.reshape(&[s[0], 1, s[1], s[2]])?;
    profiler.ops.adds += 1;
    let spec = PoolRegionSpec::new(&[window.0, window.1], &[stride.0, stride.1], &[2, 3])?;
    let pooled = pool_nd_profiled(&lifted, &spec, f, profiler)?;
    let ps = pooled.shape().to_vec();
    if ps[1] != 1 {
        return Err(Error::NonUnitLiftedAxis { extent: ps[1] });
    }
    let dropped = pooled.reshape(&[ps[0], ps[2], ps[3]])?;
    profiler.ops.adds += 1;
    Ok(dropped)
}

/// Voxel features with their rotation variants: `[K, N_rot, n]` plus the
/// explicit rotation maps that produced (or are declared to relate) the
/// variants. Index 0 is the identity map.
///
/// The rotation operator itself is caller-supplied as a bijection on the
/// feature slots; nothing geometric is assumed.
#[derive(Debug, Clone)]
pub struct VoxelFeatureSet {
    features: Tensor,
    rotations: Vec<Vec<usize>>,
}

impl VoxelFeatureSet {
    /// Wrap pre-materialized rotation variants.
    pub fn from_variants(features: Tensor, rotations: Vec<Vec<usize>>) -> Result<Self> {
        if features.rank() != 3 {
            return Err(Error::RankMismatch {
                expected: 3,
                got: features.rank(),
            });
        }
        let n_rot = features.shape()[1];
        let n = features.shape()[2];
        if n == 0 {
            return Err(Error::EmptyVoxel);
        }
        if n_rot == 0 || rotations.len() != n_rot {
            return Err(Error::ShapeMismatch(format!(
                "feature tensor declares {n_rot} rotation variants but {} maps were supplied",
                rotations.len()
            )));
        }
        for (j, map) in rotations.iter().enumerate() {
            validate_bijection(map, n, j)?;
        }
        if !rotations[0].iter().enumerate().all(|(i, &m)| i == m) {
            return Err(Error::InvalidHyperparam(
                "rotation map 0 must be the identity".to_string(),
            ));
        }
        Ok(VoxelFeatureSet {
            features,
            rotations,
        })
    }

    /// Materialize the variants from base features `[K, n]` by applying each
    /// rotation map: `features[k][j][i] = base[k][map_j[i]]`.
    pub fn from_base(base: &Tensor, rotations: Vec<Vec<usize>>) -> Result<Self> {
        if base.rank() != 2 {
            return Err(Error::RankMismatch {
                expected: 2,
                got: base.rank(),
            });
        }
        let (k, n) = (base.shape()[0], base.shape()[1]);
        if n == 0 {
            return Err(Error::EmptyVoxel);
        }
        let n_rot = rotations.len();
        let mut data = Vec::with_capacity(k * n_rot * n);
        for v in 0..k {
            for map in &rotations {
                for i in 0..n {
                    data.push(base.data()[v * n + map[i]]);
                }
            }
        }
        VoxelFeatureSet::from_variants(Tensor::new(&[k, n_rot, n], data)?, rotations)
    }

    pub fn voxels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn num_rotations(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn points_per_voxel(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn rotations(&self) -> &[Vec<usize>] {
        &self.rotations
    }

    /// The same workload shaped for the replaceable-pooling pipeline:
    /// `[K, 1, N_rot, n]`, so a full-window (N_rot x n) pool reduces each
    /// voxel's entire variant set in one region.
    pub fn to_rp_tensor(&self) -> Tensor {
        let k = self.voxels();
        let n_rot = self.num_rotations();
        let n = self.points_per_voxel();
        Tensor::new(&[k, 1, n_rot, n], self.features.data().to_vec()).unwrap()
    }
}

fn validate_bijection(map: &[usize], n: usize, which: usize) -> Result<()> {
    if map.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "rotation map {which} has {} entries, expected {n}",
            map.len()
        )));
    }
    let mut seen = vec![false; n];
    for &m in map {
        if m >= n || seen[m] {
            return Err(Error::InvalidHyperparam(format!(
                "rotation map {which} is not a bijection on 0..{n}"
            )));
        }
        seen[m] = true;
    }
    Ok(())
}

/// Legacy rotation pooling: per voxel, the maximum over rotation variants of
/// the absolute mean feature, `F_k = max_j |sum_i f_kji / n|`.
///
/// Implemented as the published procedure: per rotation, slice the variant
/// into a working buffer (n moves), sum it (n adds), normalize (1 multiply),
/// take the absolute value and compare against the running maximum (2
/// compares), then write the per-voxel result (1 move).
pub fn legacy_pool(v: &VoxelFeatureSet) -> Result<(Tensor, OpCounter)> {
    let mut profiler = Profiler::new();
    let out = legacy_pool_profiled(v, &mut profiler)?;
    Ok((out, profiler.ops))
}

pub fn legacy_pool_profiled(v: &VoxelFeatureSet, profiler: &mut Profiler) -> Result<Tensor> {
    let k = v.voxels();
    let n_rot = v.num_rotations();
    let n = v.points_per_voxel();
    let data = v.features.data();

    let mut out = vec![0.0; k];
    profiler.alloc.alloc(k);
    let mut scratch = vec![0.0; n];
    profiler.alloc.alloc(n);

    for voxel in 0..k {
        let mut best = f64::NEG_INFINITY;
        for j in 0..n_rot {
            let base = (voxel * n_rot + j) * n;
            scratch.copy_from_slice(&data[base..base + n]);
            profiler.ops.moves += n as u64;
            let mut sum = 0.0;
            for &f in scratch.iter() {
                sum += f;
            }
            profiler.ops.adds += n as u64;
            let mean = sum / n as f64;
            profiler.ops.multiplies += 1;
            let cand = fmath::abs(mean);
            profiler.ops.compares += 1;
            if cand > best {
                best = cand;
            }
            profiler.ops.compares += 1;
        }
        out[voxel] = best;
        profiler.ops.moves += 1;
    }
    profiler.alloc.free(n);
    drop(scratch);

    Tensor::new(&[k], out)
}

/// 2D pooling as a differentiable layer over `[C, H, W]`, backed by the
/// replaceable pipeline. The backward pass routes the upstream gradient
/// through the pool function's `grad_mask`.
#[derive(Debug, Clone)]
pub struct Pool2dLayer {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub pool: PoolFn,
}

impl Pool2dLayer {
    pub fn new(window: (usize, usize), stride: (usize, usize), pool: PoolFn) -> Self {
        Pool2dLayer {
            window,
            stride,
            pool,
        }
    }
}

impl DiffLayer for Pool2dLayer {
    fn name(&self) -> &str {
        "pool2d"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (out, _) = replaceable_pool_2d(input.clone(), self.window, self.stride, &self.pool)?;
        Ok(out)
    }

    fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (wh, ww) = self.window;
        let (sh, sw) = self.stride;
        let out_h = (h - wh) / sh + 1;
        let out_w = (w - ww) / sw + 1;
        if upstream.shape() != [c, out_h, out_w] {
            return Err(Error::ShapeMismatch(format!(
                "pool2d upstream has shape {:?}, expected [{c}, {out_h}, {out_w}]",
                upstream.shape()
            )));
        }
        let mut d_input = Tensor::zeros(input.shape());
        let mut region = vec![0.0; wh * ww];
        for ch in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    // Same row-major scan order the pooling engine uses, so
                    // max tie-breaking matches the forward pass.
                    for ky in 0..wh {
                        for kx in 0..ww {
                            region[ky * ww + kx] =
                                input.get(&[ch, oy * sh + ky, ox * sw + kx]);
                        }
                    }
                    let mask = self.pool.grad_mask(&region);
                    let g = upstream.get(&[ch, oy, ox]);
                    for ky in 0..wh {
                        for kx in 0..ww {
                            let idx = [ch, oy * sh + ky, ox * sw + kx];
                            let cur = d_input.get(&idx);
                            d_input.set(&idx, cur + g * mask[ky * ww + kx]);
                        }
                    }
                }
            }
        }
        Ok(LayerGrad {
            d_input,
            d_params: Vec::new(),
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }
}

/// Profile of one replaceable-vs-legacy pooling comparison.
#[derive(Debug, Clone, Copy)]
pub struct RpWorkloadProfile {
    pub rp_ops: OpCounter,
    pub legacy_ops: OpCounter,
    pub rp_peak_bytes: u64,
    pub legacy_peak_bytes: u64,
}

impl RpWorkloadProfile {
    pub fn op_ratio(&self) -> f64 {
        self.rp_ops.total() as f64 / self.legacy_ops.total() as f64
    }

    pub fn alloc_ratio(&self) -> f64 {
        self.rp_peak_bytes as f64 / self.legacy_peak_bytes as f64
    }
}

/// Run both pooling paths over one randomly generated voxel workload and
/// report op counts and peak transient allocation.
///
/// The workload is `voxels` voxels with `n_points` features each and
/// `n_rotations` variants (map 0 identity, the rest random permutations).
/// Both paths consume the same pre-materialized variant set; the replaceable
/// path pools each voxel's full variant block in one region.
pub fn bench_rp_workload(
    voxels: usize,
    n_points: usize,
    n_rotations: usize,
    pool: &PoolFn,
    seed: u64,
) -> Result<RpWorkloadProfile> {
    if voxels == 0 || n_points == 0 || n_rotations == 0 {
        return Err(Error::InvalidHyperparam(
            "bench workload extents must be >= 1".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Tensor::from_fn(&[voxels, n_points], |_| rng.gen_range(-1.0..1.0));
    let mut rotations = Vec::with_capacity(n_rotations);
    rotations.push((0..n_points).collect::<Vec<_>>());
    for _ in 1..n_rotations {
        let mut map: Vec<usize> = (0..n_points).collect();
        map.shuffle(&mut rng);
        rotations.push(map);
    }
    let vfs = VoxelFeatureSet::from_base(&base, rotations)?;

    let mut legacy = Profiler::new();
    legacy_pool_profiled(&vfs, &mut legacy)?;

    let rp_input = vfs.to_rp_tensor();
    let spec = PoolRegionSpec::new(
        &[n_rotations, n_points],
        &[n_rotations, n_points],
        &[3, 4],
    )?;
    let mut rp = Profiler::new();
    replaceable_pool_3d_profiled(rp_input, &spec, pool, &mut rp)?;

    Ok(RpWorkloadProfile {
        rp_ops: rp.ops,
        legacy_ops: legacy.ops,
        rp_peak_bytes: rp.alloc.peak_bytes,
        legacy_peak_bytes: legacy.alloc.peak_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn registry() -> PoolRegistry {
        PoolRegistry::with_builtins()
    }

    #[test]
    fn registry_round_trip_and_duplicates() {
        let mut r = registry();
        let f = r.get("max").unwrap().clone();
        assert_eq!(f.name(), "max");
        assert!(matches!(
            r.register(PoolFn::new("max", reduce_max, mask_max, cost_max)),
            Err(Error::DuplicateName(_))
        ));
        assert!(matches!(r.get("nope"), Err(Error::UnknownPoolFn(_))));
        r.register(PoolFn::new("first", reduce_max, mask_max, cost_max))
            .unwrap();
        assert_eq!(r.get("first").unwrap().name(), "first");
    }

    #[test]
    fn soft_of_constant_region_is_the_constant() {
        let r = registry();
        let soft = r.get("soft").unwrap();
        assert_eq!(soft.reduce(&[0.0, 0.0, 0.0]), 0.0);
        assert!((soft.reduce(&[2.5, 2.5]) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn lift_is_zero_copy_and_round_trips() {
        let t = Tensor::from_fn(&[2, 3, 4, 4], |i| i as f64);
        let ptr = t.data().as_ptr();
        let flat = t.data().to_vec();
        let lifted = rp_lift(t).unwrap();
        assert_eq!(lifted.shape(), &[2, 3, 1, 4, 4]);
        // Same buffer: nothing moved.
        assert_eq!(lifted.data().as_ptr(), ptr);
        assert_eq!(lifted.data(), &flat[..]);
        let dropped = rp_drop(lifted).unwrap();
        assert_eq!(dropped.shape(), &[2, 3, 4, 4]);
        assert_eq!(dropped.data().as_ptr(), ptr);
    }

    #[test]
    fn drop_rejects_non_unit_lifted_axis() {
        let t = Tensor::zeros(&[2, 3, 2, 4, 4]);
        assert!(matches!(
            rp_drop(t),
            Err(Error::NonUnitLiftedAxis { extent: 2 })
        ));
    }

    #[test]
    fn lift_rejects_wrong_rank() {
        assert!(matches!(
            rp_lift(Tensor::zeros(&[2, 3, 4])),
            Err(Error::RankMismatch { .. })
        ));
    }

    #[test]
    fn pool_max_and_avg_two_by_two() {
        let r = registry();
        let t = Tensor::new(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = PoolRegionSpec::new(&[2, 2], &[2, 2], &[3, 4]).unwrap();
        let (m, _) = rp_pool(&t, &spec, r.get("max").unwrap()).unwrap();
        assert_eq!(m.data(), &[4.0]);
        let (a, _) = rp_pool(&t, &spec, r.get("avg").unwrap()).unwrap();
        assert_eq!(a.data(), &[2.5]);
    }

    #[test]
    fn pool_window_too_large() {
        let t = Tensor::zeros(&[1, 1, 1, 2, 2]);
        let spec = PoolRegionSpec::new(&[3, 2], &[1, 1], &[3, 4]).unwrap();
        let r = registry();
        assert!(matches!(
            rp_pool(&t, &spec, r.get("max").unwrap()),
            Err(Error::WindowTooLarge { axis: 3, .. })
        ));
    }

    #[test]
    fn pool_rejects_axes_outside_dhw() {
        let t = Tensor::zeros(&[1, 2, 1, 2, 2]);
        let spec = PoolRegionSpec::new(&[2], &[2], &[1]).unwrap();
        let r = registry();
        assert!(matches!(
            rp_pool(&t, &spec, r.get("max").unwrap()),
            Err(Error::InvalidHyperparam(_))
        ));
    }

    /// Scalar brute-force region reduction, independent of the engine.
    fn lp_region_oracle(vals: &[f64]) -> f64 {
        let n = vals.len() as f64;
        let sum: f64 = vals.iter().sum();
        let sq: f64 = vals.iter().map(|v| v * v).sum();
        let m2 = (sq / n).sqrt();
        if sum < 0.0 {
            -m2
        } else {
            m2
        }
    }

    #[test]
    fn pool_lp_matches_region_enumeration_oracle() {
        let r = registry();
        let mut state = 31u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let t = Tensor::from_fn(&[1, 1, 2, 6, 6], |_| next());
        let spec = PoolRegionSpec::new(&[2, 2], &[2, 2], &[3, 4]).unwrap();
        let (got, _) = rp_pool(&t, &spec, r.get("lp").unwrap()).unwrap();
        assert_eq!(got.shape(), &[1, 1, 2, 3, 3]);
        for d in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut region = Vec::new();
                    for ky in 0..2 {
                        for kx in 0..2 {
                            region.push(t.get(&[0, 0, d, oy * 2 + ky, ox * 2 + kx]));
                        }
                    }
                    let want = lp_region_oracle(&region);
                    let have = got.get(&[0, 0, d, oy, ox]);
                    assert!((want - have).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pipeline_3d_window_one_is_identity_on_values() {
        let r = registry();
        let t = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64) * 0.25 - 3.0);
        let spec = PoolRegionSpec::new(&[1, 1], &[1, 1], &[3, 4]).unwrap();
        let (out, counter) = replaceable_pool_3d(t.clone(), &spec, r.get("max").unwrap()).unwrap();
        assert_eq!(out.shape(), t.shape());
        assert_eq!(out.data(), t.data());
        assert!(counter.total() > 0);
    }

    #[test]
    fn pipeline_counter_tracks_full_window_formula() {
        // One voxel, h x w full-window pool over N_rot variants: the counter
        // stays within a couple of bookkeeping ops of N * (1 + h*w + 1).
        let r = registry();
        let (n_rot, hw) = (4usize, 100usize);
        let t = Tensor::from_fn(&[1, 1, n_rot, hw], |i| i as f64);
        let spec = PoolRegionSpec::new(&[1, hw], &[1, hw], &[3, 4]).unwrap();
        let (_, counter) = replaceable_pool_3d(t, &spec, r.get("max").unwrap()).unwrap();
        let formula = (n_rot * (1 + hw + 1)) as u64;
        let total = counter.total();
        assert!(
            total >= (n_rot * hw) as u64 && total <= formula + 4,
            "counter {total} vs formula {formula}"
        );
    }

    #[test]
    fn pool_2d_identity_and_full_window_max() {
        let r = registry();
        let img = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.1);
        let (same, _) =
            replaceable_pool_2d(img.clone(), (1, 1), (1, 1), r.get("max").unwrap()).unwrap();
        assert_eq!(same.data(), img.data());

        let mut hot = Tensor::zeros(&[1, 4, 4]);
        hot.set(&[0, 2, 1], 7.5);
        let (m, _) = replaceable_pool_2d(hot, (4, 4), (4, 4), r.get("max").unwrap()).unwrap();
        assert_eq!(m.data(), &[7.5]);
    }

    #[test]
    fn pool_2d_avg_matches_direct_oracle() {
        let r = registry();
        let mut state = 77u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let img = Tensor::from_fn(&[2, 6, 6], |_| next());
        let (got, _) = replaceable_pool_2d(img.clone(), (2, 2), (2, 2), r.get("avg").unwrap())
            .unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            s += img.get(&[c, oy * 2 + ky, ox * 2 + kx]);
                        }
                    }
                    assert!((got.get(&[c, oy, ox]) - s / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn legacy_pool_single_voxel_examples() {
        // One voxel, one rotation, features {1, -3}: |(1 - 3) / 2| = 1.
        let base = Tensor::new(&[1, 2], vec![1.0, -3.0]).unwrap();
        let vfs = VoxelFeatureSet::from_base(&base, vec![vec![0, 1]]).unwrap();
        let (out, counter) = legacy_pool(&vfs).unwrap();
        assert_eq!(out.data(), &[1.0]);
        assert!(counter.total() > 0);

        // Constant features c under any rotations: |c|.
        let c = -2.75;
        let base = Tensor::filled(&[1, 4], c);
        let vfs = VoxelFeatureSet::from_base(
            &base,
            vec![vec![0, 1, 2, 3], vec![3, 2, 1, 0], vec![1, 0, 3, 2]],
        )
        .unwrap();
        let (out, _) = legacy_pool(&vfs).unwrap();
        assert!((out.data()[0] - c.abs()).abs() < 1e-15);
    }

    #[test]
    fn legacy_pool_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (k, n, n_rot) = (5usize, 16usize, 4usize);
        let base = Tensor::from_fn(&[k, n], |_| rng.gen_range(-2.0..2.0));
        let mut rotations = vec![(0..n).collect::<Vec<_>>()];
        for _ in 1..n_rot {
            let mut m: Vec<usize> = (0..n).collect();
            m.shuffle(&mut rng);
            rotations.push(m);
        }
        let vfs = VoxelFeatureSet::from_base(&base, rotations.clone()).unwrap();
        let (out, _) = legacy_pool(&vfs).unwrap();

        // Brute-force evaluation straight from the definition.
        for voxel in 0..k {
            let mut best = f64::NEG_INFINITY;
            for map in &rotations {
                let mut sum = 0.0;
                for i in 0..n {
                    sum += base.get(&[voxel, map[i]]);
                }
                best = best.max((sum / n as f64).abs());
            }
            assert!((out.data()[voxel] - best).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_voxel_is_rejected() {
        let base = Tensor::new(&[2, 0], vec![]).unwrap();
        assert!(matches!(
            VoxelFeatureSet::from_base(&base, vec![vec![]]),
            Err(Error::EmptyVoxel)
        ));
    }

    #[test]
    fn rotation_maps_must_be_bijections_with_identity_first() {
        let base = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            VoxelFeatureSet::from_base(&base, vec![vec![0, 1, 1]]),
            Err(Error::InvalidHyperparam(_))
        ));
        assert!(matches!(
            VoxelFeatureSet::from_base(&base, vec![vec![1, 0, 2]]),
            Err(Error::InvalidHyperparam(_))
        ));
    }

    #[test]
    fn degenerate_single_point_voxels_match_replaceable_max() {
        // n = 1 makes the mean equal the raw feature, so for non-negative
        // features the legacy output equals a full-region max pool.
        let features = Tensor::new(&[3, 4, 1], vec![
            0.3, 0.9, 0.1, 0.5, // voxel 0 variants
            2.0, 1.0, 0.0, 1.5, // voxel 1
            0.0, 0.0, 0.0, 0.0, // voxel 2
        ])
        .unwrap();
        let rotations = vec![vec![0]; 4];
        let vfs = VoxelFeatureSet::from_variants(features, rotations).unwrap();
        let (legacy, _) = legacy_pool(&vfs).unwrap();

        let r = registry();
        let spec = PoolRegionSpec::new(&[4, 1], &[4, 1], &[3, 4]).unwrap();
        let (rp, _) =
            replaceable_pool_3d(vfs.to_rp_tensor(), &spec, r.get("max").unwrap()).unwrap();
        assert_eq!(rp.numel(), legacy.numel());
        for i in 0..legacy.numel() {
            assert_eq!(rp.data()[i], legacy.data()[i]);
        }
    }

    #[test]
    fn workload_profile_hits_complexity_targets() {
        let r = registry();
        let max = r.get("max").unwrap();
        let p = bench_rp_workload(1, 100, 4, max, 5).unwrap();
        // The spec-level formulas: RP ~ N*(1+n+1), legacy ~ N*(n+n+N).
        assert!((p.rp_ops.total() as i64 - 408).abs() <= 8, "{:?}", p.rp_ops);
        assert!(
            (p.legacy_ops.total() as i64 - 816).abs() <= 8,
            "{:?}",
            p.legacy_ops
        );
        assert!(p.op_ratio() <= 0.6);

        // Degenerate sizes stay within a factor of two of each other.
        let tiny = bench_rp_workload(1, 1, 1, max, 5).unwrap();
        let (a, b) = (tiny.rp_ops.total(), tiny.legacy_ops.total());
        assert!(a <= 2 * b && b <= 2 * a, "rp {a} legacy {b}");
    }

    #[test]
    fn workload_alloc_profile_favors_rp() {
        let r = registry();
        let p = bench_rp_workload(8, 64, 4, r.get("max").unwrap(), 1).unwrap();
        assert!(p.alloc_ratio() <= 2.0 / 3.0 + 0.1, "{}", p.alloc_ratio());
    }

    #[test]
    fn grad_masks_have_documented_shapes() {
        let r = registry();
        let region = [0.5, 2.0, 2.0, -1.0];
        let avg = r.get("avg").unwrap().grad_mask(&region);
        let total: f64 = avg.iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!(avg.iter().all(|&w| (w - 0.25).abs() < 1e-15));

        let max = r.get("max").unwrap().grad_mask(&region);
        assert_eq!(max, vec![0.0, 1.0, 0.0, 0.0]); // first maximizer wins
    }

    #[test]
    fn pool2d_layer_grad_checks_pass_for_all_builtins() {
        use crate::layer::grad_check;
        let r = registry();
        for name in ["max", "avg", "lp", "soft"] {
            let pool = r.get(name).unwrap().clone();
            for seed in [3u64, 4, 5] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                // Positive-leaning values keep lp away from its sign kink.
                let input = Tensor::from_fn(&[2, 4, 4], |_| rng.gen_range(0.05..1.0));
                let mut layer = Pool2dLayer::new((2, 2), (2, 2), pool.clone());
                let report = grad_check(&mut layer, &input, 1e-6, 1e-4).unwrap();
                assert!(
                    report.pass(),
                    "pool {name} seed {seed}: max rel err {}",
                    report.max_rel_err()
                );
            }
        }
    }

    proptest! {
        #[test]
        fn singleton_reduction_is_identity(v in -10.0f64..10.0) {
            let r = registry();
            for name in ["max", "avg", "lp", "soft"] {
                let f = r.get(name).unwrap();
                let got = f.reduce(&[v]);
                prop_assert!((got - v).abs() < 1e-12, "{name}: {got} vs {v}");
            }
        }

        #[test]
        fn reduction_is_permutation_invariant(
            mut vals in proptest::collection::vec(-5.0f64..5.0, 2..9),
            rot in 0usize..8,
        ) {
            let r = registry();
            let before: alloc::vec::Vec<f64> = vals.clone();
            vals.rotate_left(rot % vals.len());
            for name in ["max", "avg", "lp", "soft"] {
                let f = r.get(name).unwrap();
                let a = f.reduce(&before);
                let b = f.reduce(&vals);
                prop_assert!((a - b).abs() < 1e-9, "{name}: {a} vs {b}");
            }
        }
    }
}
