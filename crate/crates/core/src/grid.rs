//! Volumetric containers, intensity normalization and resampling.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// `(axis0, axis1, axis2)` extents.
pub type Dims = [usize; 3];

/// Anatomical axis. `S` is axis 0, `C` axis 1, `A` axis 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    S,
    C,
    A,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::S, Axis::C, Axis::A];

    pub fn index(self) -> usize {
        match self {
            Axis::S => 0,
            Axis::C => 1,
            Axis::A => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        Axis::ALL.get(i).copied()
    }

    /// The two in-plane axes of a slice orthogonal to `self`, in storage order.
    pub fn in_plane(self) -> [usize; 2] {
        match self {
            Axis::S => [1, 2],
            Axis::C => [0, 2],
            Axis::A => [0, 1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::S => "S",
            Axis::C => "C",
            Axis::A => "A",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" | "0" => Ok(Axis::S),
            "C" | "c" | "1" => Ok(Axis::C),
            "A" | "a" | "2" => Ok(Axis::A),
            other => Err(Error::param(format!("unknown axis `{other}`"))),
        }
    }
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, p: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

#[inline]
pub fn coords(dims: Dims, idx: usize) -> [usize; 3] {
    let x = idx % dims[2];
    let rest = idx / dims[2];
    [rest / dims[1], rest % dims[1], x]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::param(format!("dims must be positive, got {dims:?}")));
    }
    Ok(())
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::param(format!("spacing must be strictly positive, got {spacing:?}")));
    }
    Ok(())
}

/// Dense scalar field with physical voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    dims: Dims,
    spacing: [f32; 3],
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "volume data has {} values, dims {dims:?} need {}",
                data.len(),
                voxel_count(dims)
            )));
        }
        Ok(Volume { data, dims, spacing })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Volume::new(dims, [1.0; 3], vec![value; voxel_count(dims)]).expect("positive dims")
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> f32) -> Self {
        let data = (0..voxel_count(dims)).map(|i| f(coords(dims, i))).collect();
        Volume::new(dims, [1.0; 3], data).expect("positive dims")
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, p: [usize; 3]) -> f32 {
        self.data[linear_index(self.dims, p)]
    }

    /// Reinterprets the volume as a one-channel feature volume.
    pub fn into_features(self) -> FeatureVolume {
        FeatureVolume { data: self.data, dims: self.dims, channels: 1, spacing: self.spacing }
    }

    /// Extracts the 2D slice at `index` along `axis`; rows/cols follow
    /// [`Axis::in_plane`].
    pub fn slice(&self, axis: Axis, index: usize) -> (Vec<f32>, usize, usize) {
        let [r, c] = axis.in_plane();
        let (rows, cols) = (self.dims[r], self.dims[c]);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let mut p = [0; 3];
                p[axis.index()] = index;
                p[r] = i;
                p[c] = j;
                out.push(self.get(p));
            }
        }
        (out, rows, cols)
    }
}

/// Dense `D x H x W x C` field, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    data: Vec<f32>,
    dims: Dims,
    channels: usize,
    spacing: [f32; 3],
}

impl FeatureVolume {
    pub fn new(dims: Dims, channels: usize, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if channels == 0 {
            return Err(Error::param("feature volume needs at least one channel"));
        }
        if data.len() != voxel_count(dims) * channels {
            return Err(Error::shape(format!(
                "feature data has {} values, dims {dims:?} x {channels} channels need {}",
                data.len(),
                voxel_count(dims) * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("feature volume contains non-finite values"));
        }
        Ok(FeatureVolume { data, dims, channels, spacing })
    }

    pub fn zeros(dims: Dims, channels: usize, spacing: [f32; 3]) -> Self {
        FeatureVolume::new(dims, channels, spacing, vec![0.0; voxel_count(dims) * channels]).expect("valid shape")
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn voxel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, idx: usize) -> &mut [f32] {
        let c = self.channels;
        &mut self.data[idx * c..(idx + 1) * c]
    }

    pub fn at(&self, p: [usize; 3]) -> &[f32] {
        self.voxel(linear_index(self.dims, p))
    }

    /// Copies channels `range` into a new volume.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Result<FeatureVolume> {
        if range.start >= range.end || range.end > self.channels {
            return Err(Error::shape(format!("channel range {range:?} outside 0..{}", self.channels)));
        }
        let data = self.data.chunks_exact(self.channels).flat_map(|v| v[range.clone()].iter().copied()).collect();
        Ok(FeatureVolume { data, dims: self.dims, channels: range.len(), spacing: self.spacing })
    }

    /// Returns a copy with every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> FeatureVolume {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }
}

/// Binary voxel field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    data: Vec<bool>,
    dims: Dims,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "mask has {} voxels, dims {dims:?} need {}",
                data.len(),
                voxel_count(dims)
            )));
        }
        Ok(Mask { data, dims })
    }

    pub fn filled(dims: Dims, value: bool) -> Self {
        Mask::new(dims, vec![value; voxel_count(dims)]).expect("positive dims")
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let data = (0..voxel_count(dims)).map(|i| f(coords(dims, i))).collect();
        Mask::new(dims, data).expect("positive dims")
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, p: [usize; 3]) -> bool {
        self.data[linear_index(self.dims, p)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn not(&self) -> Mask {
        Mask { data: self.data.iter().map(|b| !b).collect(), dims: self.dims }
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// 0/1 valued one-channel feature volume.
    pub fn to_volume(&self) -> Volume {
        Volume::new(self.dims, [1.0; 3], self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("valid shape")
    }
}

/// Per-voxel displacement in millimeters, components ordered by axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    data: Vec<f32>,
    dims: Dims,
    spacing: [f32; 3],
}

impl DisplacementField {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != 3 * voxel_count(dims) {
            return Err(Error::shape(format!(
                "displacement field has {} values, dims {dims:?} need {}",
                data.len(),
                3 * voxel_count(dims)
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("displacement field contains non-finite values"));
        }
        Ok(DisplacementField { data, dims, spacing })
    }

    pub fn zeros(dims: Dims, spacing: [f32; 3]) -> Self {
        DisplacementField::new(dims, spacing, vec![0.0; 3 * voxel_count(dims)]).expect("valid shape")
    }

    pub fn from_fn(dims: Dims, spacing: [f32; 3], mut f: impl FnMut([usize; 3]) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * voxel_count(dims));
        for i in 0..voxel_count(dims) {
            data.extend_from_slice(&f(coords(dims, i)));
        }
        DisplacementField::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, p: [usize; 3]) -> [f32; 3] {
        let i = 3 * linear_index(self.dims, p);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn into_features(self) -> FeatureVolume {
        FeatureVolume { data: self.data, dims: self.dims, channels: 3, spacing: self.spacing }
    }

    pub fn from_features(feat: FeatureVolume) -> Result<Self> {
        if feat.channels != 3 {
            return Err(Error::shape(format!("displacement field needs 3 channels, got {}", feat.channels)));
        }
        DisplacementField::new(feat.dims, feat.spacing, feat.data)
    }
}

/// Intensity normalization applied to a whole volume before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Clip at the 97th percentile, rescale to `[0, 1]`.
    Mr,
    /// Window level 50, width 400, rescale to `[0, 1]`.
    Ct,
    /// Clip at the 99th percentile, rescale to `[0, 1]`.
    P99,
    #[default]
    None,
}

impl Normalization {
    pub fn apply(self, vol: &Volume) -> Volume {
        match self {
            Normalization::Mr => normalize_mr(vol),
            Normalization::Ct => normalize_ct(vol),
            Normalization::P99 => normalize_p99(vol),
            Normalization::None => vol.clone(),
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mr" => Ok(Normalization::Mr),
            "ct" => Ok(Normalization::Ct),
            "p99" => Ok(Normalization::P99),
            "none" => Ok(Normalization::None),
            other => Err(Error::param(format!("unknown normalization `{other}`"))),
        }
    }
}

pub fn normalize_mr(vol: &Volume) -> Volume {
    clip_percentile_rescale(vol, 97.0)
}

pub fn normalize_p99(vol: &Volume) -> Volume {
    clip_percentile_rescale(vol, 99.0)
}

pub fn normalize_ct(vol: &Volume) -> Volume {
    const LEVEL: f64 = 50.0;
    const WIDTH: f64 = 400.0;
    let lo = LEVEL - WIDTH / 2.0;
    let hi = LEVEL + WIDTH / 2.0;
    let data = vol.data.iter().map(|&v| ((f64::from(v).clamp(lo, hi) - lo) / (hi - lo)) as f32).collect();
    Volume { data, ..*vol }
}

/// Clips at percentile `q` of all voxels, then maps `[min, p_q]` onto `[0, 1]`.
/// A degenerate range yields an all-zero volume and a logged warning.
pub fn clip_percentile_rescale(vol: &Volume, q: f64) -> Volume {
    let values: Vec<f64> = vol.data.iter().map(|&v| f64::from(v)).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = stats::percentile(&values, q).expect("volume is nonempty");
    if !(hi > lo) {
        warn!("degenerate intensity range [{lo}, {hi}] at p{q}; returning zeros");
        return Volume { data: vec![0.0; vol.data.len()], ..*vol };
    }
    let span = hi - lo;
    let data = values.iter().map(|&v| ((v.min(hi) - lo) / span) as f32).collect();
    Volume { data, ..*vol }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Trilinear,
}

/// Per-axis map `j = scale * i + shift` from output to input index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAffine {
    pub scale: f64,
    pub shift: f64,
}

impl AxisAffine {
    pub const IDENTITY: AxisAffine = AxisAffine { scale: 1.0, shift: 0.0 };

    pub fn new(scale: f64, shift: f64) -> Self {
        AxisAffine { scale, shift }
    }
}

/// Sample taps along one axis: up to two indices with weights.
#[derive(Clone, Copy)]
struct Taps {
    idx: [usize; 2],
    w: [f64; 2],
    n: usize,
}

fn axis_taps(len_in: usize, len_out: usize, map: AxisAffine, interp: Interp) -> Vec<Option<Taps>> {
    (0..len_out)
        .map(|i| {
            let x = map.scale * i as f64 + map.shift;
            match interp {
                Interp::Nearest => {
                    let j = (x + 0.5).floor();
                    if j < 0.0 || j >= len_in as f64 {
                        None
                    } else {
                        Some(Taps { idx: [j as usize, 0], w: [1.0, 0.0], n: 1 })
                    }
                }
                Interp::Trilinear => linear_taps(len_in, x),
            }
        })
        .collect()
}

fn linear_taps(len_in: usize, x: f64) -> Option<Taps> {
    let last = (len_in - 1) as f64;
    if !(x >= 0.0 && x <= last) {
        return None;
    }
    let i0 = x.floor();
    let frac = x - i0;
    let i0 = i0 as usize;
    if frac == 0.0 || i0 + 1 >= len_in {
        Some(Taps { idx: [i0, 0], w: [1.0, 0.0], n: 1 })
    } else {
        Some(Taps { idx: [i0, i0 + 1], w: [1.0 - frac, frac], n: 2 })
    }
}

fn check_affine(params: &[AxisAffine; 3]) -> Result<()> {
    for (a, p) in params.iter().enumerate() {
        if !(p.scale > 0.0) || !p.scale.is_finite() || !p.shift.is_finite() {
            return Err(Error::param(format!(
                "axis {a}: scale must be positive and finite, got ({}, {})",
                p.scale, p.shift
            )));
        }
    }
    Ok(())
}

/// Resamples `vol` so that output index `i` along axis `a` reads input
/// position `scale_a * i + shift_a`. Samples outside the input are 0.
pub fn resample_affine(vol: &Volume, params: &[AxisAffine; 3], interp: Interp) -> Result<Volume> {
    let spacing = vol.spacing;
    let out = resample_affine_features(&vol.clone().into_features(), params, interp, vol.dims)?;
    Volume::new(out.dims, spacing, out.data)
}

/// Feature-volume form of [`resample_affine`] with an explicit output grid.
pub fn resample_affine_features(
    feat: &FeatureVolume,
    params: &[AxisAffine; 3],
    interp: Interp,
    out_dims: Dims,
) -> Result<FeatureVolume> {
    check_affine(params)?;
    check_dims(out_dims)?;
    let taps: Vec<Vec<Option<Taps>>> =
        (0..3).map(|a| axis_taps(feat.dims[a], out_dims[a], params[a], interp)).collect();
    let c = feat.channels;
    let plane = out_dims[1] * out_dims[2];
    let mut data = vec![0.0f32; voxel_count(out_dims) * c];
    data.par_chunks_mut(plane * c).enumerate().for_each(|(i0, chunk)| {
        let Some(t0) = taps[0][i0] else { return };
        let mut acc = vec![0.0f64; c];
        for i1 in 0..out_dims[1] {
            let Some(t1) = taps[1][i1] else { continue };
            for i2 in 0..out_dims[2] {
                let Some(t2) = taps[2][i2] else { continue };
                acc.iter_mut().for_each(|v| *v = 0.0);
                for a in 0..t0.n {
                    for b in 0..t1.n {
                        for d in 0..t2.n {
                            let w = t0.w[a] * t1.w[b] * t2.w[d];
                            let src = feat.at([t0.idx[a], t1.idx[b], t2.idx[d]]);
                            for (o, &s) in acc.iter_mut().zip(src) {
                                *o += w * f64::from(s);
                            }
                        }
                    }
                }
                let off = (i1 * out_dims[2] + i2) * c;
                for (o, &v) in chunk[off..off + c].iter_mut().zip(&acc) {
                    *o = v as f32;
                }
            }
        }
    });
    Ok(FeatureVolume { data, dims: out_dims, channels: c, spacing: feat.spacing })
}

/// Trilinear sample at a continuous voxel position; `false` when outside.
pub fn sample_trilinear(feat: &FeatureVolume, pos: [f64; 3], out: &mut [f64]) -> bool {
    let mut t = [Taps { idx: [0; 2], w: [0.0; 2], n: 0 }; 3];
    for a in 0..3 {
        match linear_taps(feat.dims[a], pos[a]) {
            Some(tap) => t[a] = tap,
            None => return false,
        }
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    for a in 0..t[0].n {
        for b in 0..t[1].n {
            for d in 0..t[2].n {
                let w = t[0].w[a] * t[1].w[b] * t[2].w[d];
                for (o, &s) in out.iter_mut().zip(feat.at([t[0].idx[a], t[1].idx[b], t[2].idx[d]])) {
                    *o += w * f64::from(s);
                }
            }
        }
    }
    true
}

/// Warps `moving` onto the grid of `field`: output voxel `x` samples
/// `moving` at `x + field(x) / spacing` (trilinear, zero outside).
pub fn warp_features(moving: &FeatureVolume, field: &DisplacementField) -> FeatureVolume {
    let c = moving.channels;
    let dims = field.dims;
    let sp = moving.spacing;
    let mut data = vec![0.0f32; voxel_count(dims) * c];
    data.par_chunks_mut(c).enumerate().for_each(|(idx, out)| {
        let p = coords(dims, idx);
        let u = field.at(p);
        let pos = [
            p[0] as f64 + f64::from(u[0]) / f64::from(sp[0]),
            p[1] as f64 + f64::from(u[1]) / f64::from(sp[1]),
            p[2] as f64 + f64::from(u[2]) / f64::from(sp[2]),
        ];
        let mut acc = vec![0.0; c];
        if sample_trilinear(moving, pos, &mut acc) {
            for (o, v) in out.iter_mut().zip(acc) {
                *o = v as f32;
            }
        }
    });
    FeatureVolume { data, dims, channels: c, spacing: field.spacing }
}

/// Block mean over `factor^3` blocks; partial edge blocks average the voxels
/// they contain. Output dims are `ceil(dim / factor)`.
pub fn avg_pool(feat: &FeatureVolume, factor: usize) -> Result<FeatureVolume> {
    if factor == 0 {
        return Err(Error::param("pooling factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(feat.clone());
    }
    let dims = feat.dims;
    let out_dims = dims.map(|d| d.div_ceil(factor));
    let c = feat.channels;
    let mut data = vec![0.0f32; voxel_count(out_dims) * c];
    data.par_chunks_mut(c).enumerate().for_each(|(idx, out)| {
        let q = coords(out_dims, idx);
        let lo = q.map(|v| v * factor);
        let hi = [0, 1, 2].map(|a| ((q[a] + 1) * factor).min(dims[a]));
        let mut acc = vec![0.0f64; c];
        let mut n = 0usize;
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    for (a, &v) in acc.iter_mut().zip(feat.at([z, y, x])) {
                        *a += f64::from(v);
                    }
                    n += 1;
                }
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = (a / n as f64) as f32;
        }
    });
    Ok(FeatureVolume { data, dims: out_dims, channels: c, spacing: feat.spacing.map(|s| s * factor as f32) })
}

/// Nearest-block upsampling back to `dims` (inverse layout of [`avg_pool`]).
pub fn broadcast_upsample(coarse: &FeatureVolume, factor: usize, dims: Dims) -> Result<FeatureVolume> {
    if factor == 0 {
        return Err(Error::param("upsampling factor must be >= 1"));
    }
    let expect = dims.map(|d| d.div_ceil(factor));
    if expect != coarse.dims {
        return Err(Error::shape(format!("coarse dims {:?} do not match {dims:?} / {factor}", coarse.dims)));
    }
    let c = coarse.channels;
    let mut data = Vec::with_capacity(voxel_count(dims) * c);
    for i in 0..voxel_count(dims) {
        let p = coords(dims, i);
        data.extend_from_slice(coarse.at(p.map(|v| v / factor)));
    }
    Ok(FeatureVolume { data, dims, channels: c, spacing: coarse.spacing.map(|s| s / factor as f32) })
}

/// Pools a mask to the coarse grid: a coarse voxel is set when at least half
/// of its block is set.
pub fn pool_mask(mask: &Mask, factor: usize) -> Result<Mask> {
    let pooled = avg_pool(&mask.to_volume().into_features(), factor)?;
    Ok(Mask { dims: pooled.dims, data: pooled.data.iter().map(|&v| v >= 0.5).collect() })
}

/// Warps a mask like [`warp_features`] and thresholds the interpolated
/// occupancy at 0.5.
pub fn warp_mask(mask: &Mask, spacing: [f32; 3], field: &DisplacementField) -> Result<Mask> {
    let vol = mask.to_volume().with_spacing(spacing)?.into_features();
    let warped = warp_features(&vol, field);
    Ok(Mask { dims: warped.dims, data: warped.data.iter().map(|&v| v >= 0.5).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values_vol(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new([n, 1, 1], [1.0; 3], values).unwrap()
    }

    #[test]
    fn index_roundtrip() {
        let dims = [3, 4, 5];
        for i in 0..voxel_count(dims) {
            assert_eq!(linear_index(dims, coords(dims, i)), i);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [0.0, 1.0, 1.0], vec![0.0; 8]).is_err());
        assert!(FeatureVolume::new([1, 1, 1], 2, [1.0; 3], vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn mr_constant_volume_is_zero() {
        let out = normalize_mr(&Volume::filled([3, 3, 3], 7.0));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mr_percentile_clip_on_ramp() {
        let vol = values_vol((0..100).map(|v| v as f32).collect());
        let out = normalize_mr(&vol);
        // p97 of 0..=99 with linear interpolation is 96.03.
        let p = 96.03f64;
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(*out.data().last().unwrap(), 1.0);
        assert_eq!(out.data()[97], 1.0);
        assert!((f64::from(out.data()[50]) - 50.0 / p).abs() < 1e-6);
        assert!(out.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn mr_unit_data_endpoints() {
        let mut v: Vec<f32> = (0..50).map(|i| i as f32 / 50.0).collect();
        v.extend(std::iter::repeat_n(1.0, 10));
        let out = normalize_mr(&values_vol(v));
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(*out.data().last().unwrap(), 1.0);
        assert!(out.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ct_window() {
        let out = normalize_ct(&values_vol(vec![-150.0, 250.0, 50.0, -1000.0, 3000.0]));
        assert_eq!(out.data(), &[0.0, 1.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn p99_on_thousand_values() {
        let vol = values_vol((0..1000).map(|v| v as f32).collect());
        let out = normalize_p99(&vol);
        let p = 989.01f64;
        assert!((f64::from(out.data()[500]) - 500.0 / p).abs() < 1e-6);
        assert_eq!(out.data()[990], 1.0);
        assert!(normalize_p99(&Volume::filled([2, 2, 2], 3.0)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn p99_binary_unchanged() {
        let v: Vec<f32> = (0..64).map(|i| (i % 3 == 0) as u8 as f32).collect();
        let out = normalize_p99(&values_vol(v.clone()));
        assert_eq!(out.data(), &v[..]);
    }

    fn ramp(dims: Dims) -> Volume {
        Volume::from_fn(dims, |p| (p[0] * 100 + p[1] * 10 + p[2]) as f32 * 0.37)
    }

    #[test]
    fn identity_resample_is_bit_exact() {
        let vol = ramp([5, 6, 7]);
        let id = [AxisAffine::IDENTITY; 3];
        for interp in [Interp::Nearest, Interp::Trilinear] {
            assert_eq!(resample_affine(&vol, &id, interp).unwrap(), vol);
        }
    }

    #[test]
    fn shift_nearest_zero_fills() {
        let vol = ramp([10, 3, 3]);
        let params = [AxisAffine::new(1.0, 5.0), AxisAffine::IDENTITY, AxisAffine::IDENTITY];
        let out = resample_affine(&vol, &params, Interp::Nearest).unwrap();
        for z in 0..10 {
            for y in 0..3 {
                for x in 0..3 {
                    let expect = if z + 5 < 10 { vol.get([z + 5, y, x]) } else { 0.0 };
                    assert_eq!(out.get([z, y, x]), expect);
                }
            }
        }
    }

    #[test]
    fn scaled_trilinear_ramp_doubles_slope() {
        let vol = Volume::from_fn([9, 2, 2], |p| p[0] as f32 * 1.5 + 2.0);
        let params = [AxisAffine::new(2.0, 0.0), AxisAffine::IDENTITY, AxisAffine::IDENTITY];
        let out = resample_affine(&vol, &params, Interp::Trilinear).unwrap();
        for z in 0..9 {
            let expect = if 2 * z <= 8 { (2 * z) as f32 * 1.5 + 2.0 } else { 0.0 };
            assert!((out.get([z, 1, 0]) - expect).abs() < 1e-6);
        }
        // Half-voxel positions interpolate linearly.
        let params = [AxisAffine::new(1.0, 0.5), AxisAffine::IDENTITY, AxisAffine::IDENTITY];
        let out = resample_affine(&vol, &params, Interp::Trilinear).unwrap();
        assert!((out.get([2, 0, 0]) - (2.5 * 1.5 + 2.0)).abs() < 1e-6);
        assert_eq!(out.get([8, 0, 0]), 0.0);
    }

    #[test]
    fn resample_rejects_nonpositive_scale() {
        let vol = ramp([3, 3, 3]);
        let params = [AxisAffine::new(0.0, 0.0), AxisAffine::IDENTITY, AxisAffine::IDENTITY];
        assert!(matches!(resample_affine(&vol, &params, Interp::Nearest), Err(Error::Param(_))));
    }

    #[test]
    fn avg_pool_examples() {
        let f = ramp([3, 4, 5]).into_features();
        assert_eq!(avg_pool(&f, 1).unwrap(), f);

        let c = Volume::filled([4, 4, 4], 5.0).into_features();
        let p = avg_pool(&c, 4).unwrap();
        assert_eq!(p.dims(), [1, 1, 1]);
        assert_eq!(p.data(), &[5.0]);

        let v = Volume::new([2, 2, 2], [1.0; 3], (1..=8).map(|v| v as f32).collect()).unwrap();
        let p = avg_pool(&v.into_features(), 2).unwrap();
        assert_eq!(p.data(), &[4.5]);
    }

    #[test]
    fn avg_pool_partial_blocks() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![1.0, 3.0, 10.0]).unwrap();
        let p = avg_pool(&v.into_features(), 2).unwrap();
        assert_eq!(p.dims(), [2, 1, 1]);
        assert_eq!(p.data(), &[2.0, 10.0]);
    }

    #[test]
    fn pool_then_broadcast_preserves_mean() {
        let f = ramp([8, 4, 6]).into_features();
        let coarse = avg_pool(&f, 2).unwrap();
        let up = broadcast_upsample(&coarse, 2, f.dims()).unwrap();
        let m0: f64 = f.data().iter().map(|&v| f64::from(v)).sum::<f64>();
        let m1: f64 = up.data().iter().map(|&v| f64::from(v)).sum::<f64>();
        assert!((m0 - m1).abs() / m0 < 1e-6);
    }

    #[test]
    fn warp_with_zero_field_is_identity() {
        let f = ramp([4, 5, 6]).into_features();
        let out = warp_features(&f, &DisplacementField::zeros([4, 5, 6], [1.0; 3]));
        assert_eq!(out, f);
    }

    #[test]
    fn warp_mask_thresholds_half() {
        let mask = Mask::from_fn([6, 1, 1], |p| p[0] >= 3);
        // Shift by +0.5 voxel (1 mm at 2 mm spacing): voxel 2 reads 2.5 -> 0.5 -> kept.
        let field = DisplacementField::from_fn([6, 1, 1], [2.0; 3], |_| [1.0, 0.0, 0.0]).unwrap();
        let w = warp_mask(&mask, [2.0; 3], &field).unwrap();
        assert_eq!(w.data(), &[false, false, true, true, true, false]);
    }
}
