//! Per-slice patch features and the triplanar driver.
//!
//! A slice of `rows x cols` voxels is resized by the scale `s` to
//! `round(s*rows) x round(s*cols)` pixels and tiled into `p x p` patches,
//! giving a `floor(R/p) x floor(C/p)` token grid. Pixels in a trailing partial
//! strip belong to the last patch of their row/column. Voxel `r` maps to patch
//! row `min(floor(r * R / (rows * p)), grid_rows - 1)`, likewise for columns.
//!
//! Only every `stride`-th slice is encoded (plus the last one); tokens of the
//! slices in between are linearly interpolated from the two nearest encoded
//! slices.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{coords, voxel_count, Axis, Dims, FeatureVolume, Mask, Volume};
use crate::io;

/// Number of per-patch statistics fed to the synthetic projection.
pub const SYNTHETIC_STATS: usize = 6;
pub const SYNTHETIC_GAIN: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderKind {
    Synthetic {
        seed: u64,
    },
    /// Tokens are read from `<dir>/<volume stem>_<axis>.vxfeat`.
    Precomputed {
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEncoderSpec {
    #[serde(flatten)]
    pub kind: EncoderKind,
    pub feature_dim: usize,
    pub patch_size: usize,
    pub scale: f64,
}

impl SliceEncoderSpec {
    pub fn synthetic(seed: u64, feature_dim: usize, patch_size: usize, scale: f64) -> Self {
        SliceEncoderSpec { kind: EncoderKind::Synthetic { seed }, feature_dim, patch_size, scale }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.patch_size == 0 {
            return Err(Error::param("feature_dim and patch_size must be >= 1"));
        }
        if !(self.scale >= 1.0) || !self.scale.is_finite() {
            return Err(Error::param(format!("scale must be >= 1, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Token-grid geometry of one axis of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub axis: Axis,
    pub slices: usize,
    /// Slice extent in voxels `(rows, cols)`.
    pub plane: [usize; 2],
    /// Resized slice extent in pixels.
    pub resized: [usize; 2],
    pub grid: [usize; 2],
    pub patch_size: usize,
}

impl PatchGeometry {
    pub fn new(dims: Dims, axis: Axis, scale: f64, patch_size: usize) -> Result<Self> {
        let [r, c] = axis.in_plane();
        let plane = [dims[r], dims[c]];
        let resized = plane.map(|n| ((scale * n as f64).round() as usize).max(1));
        let grid = resized.map(|n| n / patch_size);
        if grid.contains(&0) {
            return Err(Error::param(format!(
                "axis {}: resized slice {resized:?} is smaller than one {patch_size}x{patch_size} patch",
                axis.name()
            )));
        }
        Ok(PatchGeometry { axis, slices: dims[axis.index()], plane, resized, grid, patch_size })
    }

    pub fn patches(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// Patch index covering in-plane voxel `(r, c)`.
    #[inline]
    pub fn patch_of_voxel(&self, r: usize, c: usize) -> usize {
        let pr = (r * self.resized[0] / (self.plane[0] * self.patch_size)).min(self.grid[0] - 1);
        let pc = (c * self.resized[1] / (self.plane[1] * self.patch_size)).min(self.grid[1] - 1);
        pr * self.grid[1] + pc
    }

    /// Patch index covering resized pixel `(u, v)`.
    #[inline]
    pub fn patch_of_pixel(&self, u: usize, v: usize) -> usize {
        let pr = (u / self.patch_size).min(self.grid[0] - 1);
        let pc = (v / self.patch_size).min(self.grid[1] - 1);
        pr * self.grid[1] + pc
    }
}

/// Encoded slices of one axis: tokens in `(slice, patch, channel)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureStack {
    pub axis: Axis,
    pub slice_indices: Vec<usize>,
    /// Token grid `(rows, cols)`; `[0, 0]` until attached to a geometry.
    pub grid: [usize; 2],
    pub patches: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub scale: f32,
    pub tokens: Vec<f32>,
}

impl PatchFeatureStack {
    pub fn slice_tokens(&self, n: usize) -> &[f32] {
        let len = self.patches * self.channels;
        &self.tokens[n * len..(n + 1) * len]
    }

    /// Applies `f` to each encoded slice's `P x C` token block, producing
    /// `P x out_channels` blocks.
    pub fn map_tokens(
        &self,
        out_channels: usize,
        f: impl Fn(&[f32]) -> Result<Vec<f32>> + Sync,
    ) -> Result<PatchFeatureStack> {
        let blocks = (0..self.slice_indices.len())
            .into_par_iter()
            .map(|n| {
                let out = f(self.slice_tokens(n))?;
                if out.len() != self.patches * out_channels {
                    return Err(Error::shape("token map returned wrong length"));
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchFeatureStack { channels: out_channels, tokens: blocks.concat(), ..self.clone() })
    }
}

/// Tokens for every slice along an axis, `(slice, patch, channel)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTokens {
    pub slices: usize,
    pub patches: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl DenseTokens {
    pub fn token(&self, slice: usize, patch: usize) -> &[f32] {
        let off = (slice * self.patches + patch) * self.channels;
        &self.data[off..off + self.channels]
    }
}

/// Seeded stand-in for a frozen 2D encoder: six patch statistics mapped
/// through a fixed random matrix with unit-norm rows, then
/// `tanh(SYNTHETIC_GAIN * z + b)` with a seeded bias per channel in `[-1, 1]`.
/// The nonlinearity lifts the token rank above six and bends the intensity
/// response so that cosine similarity separates intensity levels.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    weights: Vec<[f64; SYNTHETIC_STATS]>,
    biases: Vec<f64>,
    patch_size: usize,
    scale: f64,
}

impl SyntheticEncoder {
    pub fn new(seed: u64, feature_dim: usize, patch_size: usize, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..feature_dim)
            .map(|_| {
                let mut row = [0.0; SYNTHETIC_STATS];
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.map(|v| v / norm)
            })
            .collect();
        let biases = (0..feature_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        SyntheticEncoder { weights, biases, patch_size, scale }
    }

    pub fn from_spec(spec: &SliceEncoderSpec) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            EncoderKind::Synthetic { seed } => {
                Ok(SyntheticEncoder::new(seed, spec.feature_dim, spec.patch_size, spec.scale))
            }
            EncoderKind::Precomputed { .. } => Err(Error::param("not a synthetic encoder spec")),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[[f64; SYNTHETIC_STATS]] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// Per-patch statistics of a slice after resizing:
    /// `[mean, sd, mean |d/dcol|, mean |d/drow|, row centroid, col centroid]`.
    pub fn patch_statistics(&self, slice: &[f32], rows: usize, cols: usize) -> Result<Vec<[f64; SYNTHETIC_STATS]>> {
        let resized = [rows, cols].map(|n| ((self.scale * n as f64).round() as usize).max(1));
        let p = self.patch_size;
        let grid = resized.map(|n| n / p);
        if grid.contains(&0) {
            return Err(Error::param(format!("resized slice {resized:?} is smaller than one {p}x{p} patch")));
        }
        let img = resize_bilinear(slice, rows, cols, resized[0], resized[1]);
        let at = |u: usize, v: usize| img[u * resized[1] + v];
        let mut out = Vec::with_capacity(grid[0] * grid[1]);
        for gr in 0..grid[0] {
            let r0 = gr * p;
            let r1 = if gr + 1 == grid[0] { resized[0] } else { r0 + p };
            for gc in 0..grid[1] {
                let c0 = gc * p;
                let c1 = if gc + 1 == grid[1] { resized[1] } else { c0 + p };
                let (h, w) = ((r1 - r0) as f64, (c1 - c0) as f64);
                let n = h * w;
                let (mut s, mut s2, mut wr, mut wc) = (0.0, 0.0, 0.0, 0.0);
                let (mut gx, mut nx, mut gy, mut ny) = (0.0, 0usize, 0.0, 0usize);
                for u in r0..r1 {
                    for v in c0..c1 {
                        let x = at(u, v);
                        s += x;
                        s2 += x * x;
                        wr += x * ((u - r0) as f64 + 0.5) / h;
                        wc += x * ((v - c0) as f64 + 0.5) / w;
                        if v + 1 < c1 {
                            gx += (at(u, v + 1) - x).abs();
                            nx += 1;
                        }
                        if u + 1 < r1 {
                            gy += (at(u + 1, v) - x).abs();
                            ny += 1;
                        }
                    }
                }
                let mean = s / n;
                let sd = (s2 / n - mean * mean).max(0.0).sqrt();
                let (cr, cc) = if s.abs() > 1e-12 { (wr / s - 0.5, wc / s - 0.5) } else { (0.0, 0.0) };
                out.push([
                    mean,
                    sd,
                    if nx > 0 { gx / nx as f64 } else { 0.0 },
                    if ny > 0 { gy / ny as f64 } else { 0.0 },
                    cr,
                    cc,
                ]);
            }
        }
        Ok(out)
    }

    /// `P x C` tokens for one slice.
    pub fn encode_slice(&self, slice: &[f32], rows: usize, cols: usize) -> Result<Vec<f32>> {
        let stats = self.patch_statistics(slice, rows, cols)?;
        let mut out = Vec::with_capacity(stats.len() * self.weights.len());
        for st in &stats {
            for (w, b) in self.weights.iter().zip(&self.biases) {
                let z: f64 = w.iter().zip(st).map(|(a, b)| a * b).sum();
                out.push((SYNTHETIC_GAIN * z + b).tanh() as f32);
            }
        }
        Ok(out)
    }
}

/// One-shot form of [`SyntheticEncoder::encode_slice`].
pub fn synthetic_encode_slice(slice: &[f32], rows: usize, cols: usize, spec: &SliceEncoderSpec) -> Result<Vec<f32>> {
    if slice.len() != rows * cols {
        return Err(Error::shape(format!("slice has {} values, expected {rows}x{cols}", slice.len())));
    }
    SyntheticEncoder::from_spec(spec)?.encode_slice(slice, rows, cols)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|u| {
                let x = ((u as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let tr = taps(rows, out_rows);
    let tc = taps(cols, out_cols);
    let at = |r: usize, c: usize| f64::from(src[r * cols + c]);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for &(r0, r1, fr) in &tr {
        for &(c0, c1, fc) in &tc {
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bot = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

/// Slice positions encoded along an axis of length `len`.
pub fn encoded_slices(len: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut idx: Vec<usize> = (0..len).step_by(stride).collect();
    if let Some(&last) = idx.last() {
        if last != len - 1 {
            idx.push(len - 1);
        }
    }
    idx
}

/// Encodes the stride-selected slices of `vol` along `axis`.
pub fn extract_axis_features(
    vol: &Volume,
    encoder: &SyntheticEncoder,
    axis: Axis,
    stride: usize,
) -> Result<PatchFeatureStack> {
    let geom = PatchGeometry::new(vol.dims(), axis, encoder.scale, encoder.patch_size)?;
    let indices = encoded_slices(geom.slices, stride);
    let blocks = indices
        .par_iter()
        .map(|&i| {
            let (s, r, c) = vol.slice(axis, i);
            encoder.encode_slice(&s, r, c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchFeatureStack {
        axis,
        slice_indices: indices,
        grid: geom.grid,
        patches: geom.patches(),
        channels: encoder.feature_dim(),
        patch_size: encoder.patch_size,
        scale: encoder.scale as f32,
        tokens: blocks.concat(),
    })
}

/// Reads a precomputed `.vxfeat` stack and validates it against the volume
/// geometry implied by `spec`.
pub fn load_precomputed_axis(
    path: &Path,
    spec: &SliceEncoderSpec,
    axis: Axis,
    dims: Dims,
) -> Result<PatchFeatureStack> {
    let bytes = std::fs::read(path)?;
    let mut stack = io::decode_stack(&bytes)?;
    if stack.axis != axis {
        return Err(Error::format(format!(
            "{}: stack is for axis {}, expected {}",
            path.display(),
            stack.axis.name(),
            axis.name()
        )));
    }
    if stack.channels != spec.feature_dim || stack.patch_size != spec.patch_size {
        return Err(Error::format(format!(
            "{}: header C={} p={} does not match encoder C={} p={}",
            path.display(),
            stack.channels,
            stack.patch_size,
            spec.feature_dim,
            spec.patch_size
        )));
    }
    let geom = PatchGeometry::new(dims, axis, f64::from(stack.scale), stack.patch_size)
        .map_err(|e| Error::format(e.to_string()))?;
    if geom.patches() != stack.patches {
        return Err(Error::format(format!(
            "{}: header declares {} patches, geometry of {dims:?} gives {}",
            path.display(),
            stack.patches,
            geom.patches()
        )));
    }
    if stack.slice_indices.is_empty() || stack.slice_indices.iter().any(|&i| i >= geom.slices) {
        return Err(Error::format(format!("{}: slice indices outside 0..{}", path.display(), geom.slices)));
    }
    stack.grid = geom.grid;
    Ok(stack)
}

/// Fills every slice by linear interpolation between the nearest encoded
/// slices; slices outside the encoded range copy the nearest encoded one.
pub fn interpolate_slices(stack: &PatchFeatureStack, slices: usize) -> Result<DenseTokens> {
    if stack.slice_indices.is_empty() {
        return Err(Error::param("no encoded slices"));
    }
    let len = stack.patches * stack.channels;
    let idx = &stack.slice_indices;
    let mut data = vec![0.0f32; slices * len];
    data.par_chunks_mut(len).enumerate().for_each(|(i, out)| {
        let hi = idx.partition_point(|&e| e < i);
        if hi < idx.len() && idx[hi] == i {
            out.copy_from_slice(stack.slice_tokens(hi));
        } else if hi == 0 {
            out.copy_from_slice(stack.slice_tokens(0));
        } else if hi == idx.len() {
            out.copy_from_slice(stack.slice_tokens(idx.len() - 1));
        } else {
            let (a, b) = (idx[hi - 1], idx[hi]);
            let t = (i - a) as f64 / (b - a) as f64;
            let (fa, fb) = (stack.slice_tokens(hi - 1), stack.slice_tokens(hi));
            for ((o, &x), &y) in out.iter_mut().zip(fa).zip(fb) {
                *o = ((1.0 - t) * f64::from(x) + t * f64::from(y)) as f32;
            }
        }
    });
    Ok(DenseTokens { slices, patches: stack.patches, channels: stack.channels, data })
}

/// Per-slice foreground flag of every patch: the mask is sampled onto the
/// resized pixel grid (nearest voxel) and a patch is foreground when at least
/// half of its pixels are.
pub fn patch_foreground(mask: &Mask, geom: &PatchGeometry) -> Vec<bool> {
    let [ra, ca] = geom.axis.in_plane();
    let p = geom.patches();
    let mut out = vec![false; geom.slices * p];
    for s in 0..geom.slices {
        let mut hits = vec![0usize; p];
        let mut total = vec![0usize; p];
        for u in 0..geom.resized[0] {
            let r = u * geom.plane[0] / geom.resized[0];
            for v in 0..geom.resized[1] {
                let c = v * geom.plane[1] / geom.resized[1];
                let mut q = [0; 3];
                q[geom.axis.index()] = s;
                q[ra] = r;
                q[ca] = c;
                let k = geom.patch_of_pixel(u, v);
                total[k] += 1;
                hits[k] += usize::from(mask.get(q));
            }
        }
        for k in 0..p {
            out[s * p + k] = total[k] > 0 && 2 * hits[k] >= total[k];
        }
    }
    out
}

/// Broadcasts per-slice tokens back onto the voxel grid. With `background`
/// set (fit mode), patches flagged `false` contribute zero features.
pub fn unpatchify(
    tokens: &DenseTokens,
    geom: &PatchGeometry,
    dims: Dims,
    foreground: Option<&[bool]>,
) -> Result<FeatureVolume> {
    if tokens.slices != geom.slices || tokens.patches != geom.patches() {
        return Err(Error::shape(format!(
            "tokens {}x{} do not match geometry {}x{}",
            tokens.slices,
            tokens.patches,
            geom.slices,
            geom.patches()
        )));
    }
    if let Some(fg) = foreground {
        if fg.len() != geom.slices * geom.patches() {
            return Err(Error::shape("patch foreground flags have wrong length"));
        }
    }
    let [ra, ca] = geom.axis.in_plane();
    let k = tokens.channels;
    let mut data = vec![0.0f32; voxel_count(dims) * k];
    data.par_chunks_mut(k).enumerate().for_each(|(idx, out)| {
        let q = coords(dims, idx);
        let s = q[geom.axis.index()];
        let patch = geom.patch_of_voxel(q[ra], q[ca]);
        if foreground.is_none_or(|fg| fg[s * geom.patches() + patch]) {
            out.copy_from_slice(tokens.token(s, patch));
        }
    });
    FeatureVolume::new(dims, k, [1.0; 3], data)
}

/// Channel-wise concatenation `[S | C | A]`.
pub fn triplanar_concat(s: &FeatureVolume, c: &FeatureVolume, a: &FeatureVolume) -> Result<FeatureVolume> {
    concat_channels(&[s, c, a])
}

pub fn concat_channels(parts: &[&FeatureVolume]) -> Result<FeatureVolume> {
    let first = parts.first().ok_or_else(|| Error::param("nothing to concatenate"))?;
    let dims = first.dims();
    if let Some(bad) = parts.iter().find(|p| p.dims() != dims) {
        return Err(Error::shape(format!("dims {:?} vs {dims:?}", bad.dims())));
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(first.voxels() * total);
    for i in 0..first.voxels() {
        for p in parts {
            data.extend_from_slice(p.voxel(i));
        }
    }
    FeatureVolume::new(dims, total, first.spacing(), data)
}
