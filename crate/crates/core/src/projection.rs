//! Linear projection stages and their persistence.
//!
//! Three fitted models live here: the per-axis joint PCA that reduces encoder
//! tokens from `C` to `k` channels, the weighted PLS pair `(W_I, W_J)` fitted
//! on corresponding fixed/moving voxels, and the shared PCA3D comparator.
//! Fitting is done in f64; projected features are stored as f32.
//!
//! Sign conventions make bundles reproducible: every PCA direction has its
//! largest-magnitude entry positive, and each PLS pair has the largest entry of
//! the left vector positive with the right vector flipped alongside.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::SliceEncoderSpec;
use crate::error::{Error, Result};
use crate::grid::{coords, linear_index, Axis, Dims, FeatureVolume, Mask, Normalization};
use crate::io::Reader;
use crate::mask::MaskConfig;

/// Eigen/singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-12;

/// Which side of a fitted pair a volume plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    I,
    J,
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" | "fixed" => Ok(Role::I),
            "J" | "j" | "moving" => Ok(Role::J),
            _ => Err(Error::param(format!("unknown role '{s}', expected I or J"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::I => "I",
            Role::J => "J",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisPcaModel {
    pub axis: Axis,
    pub mean: Vec<f64>,
    /// `C x k`, orthonormal columns.
    pub w: DMatrix<f64>,
    /// Sample variance along each retained direction.
    pub explained: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WplsModel {
    pub mean_i: Vec<f64>,
    pub mean_j: Vec<f64>,
    pub sigma_i: Vec<f64>,
    pub sigma_j: Vec<f64>,
    /// `3k x k_proj` each.
    pub w_i: DMatrix<f64>,
    pub w_j: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub epsilon: f64,
}

impl WplsModel {
    pub fn for_role(&self, role: Role) -> (&[f64], &DMatrix<f64>) {
        match role {
            Role::I => (&self.mean_i, &self.w_i),
            Role::J => (&self.mean_j, &self.w_j),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca3dModel {
    pub mean: Vec<f64>,
    pub w: DMatrix<f64>,
    pub explained: Vec<f64>,
}

/// Mean, leading directions and their variances of a row set.
#[derive(Debug, Clone)]
struct PcaFit {
    mean: Vec<f64>,
    w: DMatrix<f64>,
    explained: Vec<f64>,
}

fn fix_sign(col: &mut [f64]) -> bool {
    let mut best = 0;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        col.iter_mut().for_each(|v| *v = -*v);
        true
    } else {
        false
    }
}

/// PCA of `n` rows with `c` columns (row-major). Covariance divisor `n - 1`.
fn pca_rows(rows: &[f64], n: usize, c: usize, k: usize) -> Result<PcaFit> {
    if n < 2 {
        return Err(Error::param(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > c {
        return Err(Error::param(format!("k={k} must lie in 1..={c}")));
    }
    let mut mean = vec![0.0; c];
    for row in rows.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, c, |r, j| rows[r * c + j] - mean[j]);
    let denom = (n - 1) as f64;

    // (eigenvalue, direction) pairs, unsorted.
    let mut pairs: Vec<(f64, DVector<f64>)> = if n >= 4 * c {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        (0..c).map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned())).collect()
    } else {
        let svd = centered.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::numerical("SVD did not return right vectors"))?;
        (0..svd.singular_values.len())
            .map(|i| (svd.singular_values[i].powi(2) / denom, vt.row(i).transpose()))
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = pairs.first().map_or(0.0, |p| p.0).max(0.0);
    let rank = pairs.iter().filter(|p| top > 0.0 && p.0 > RANK_TOL * top).count();
    if k > rank {
        return Err(Error::numerical(format!("requested {k} components but the data has achievable rank {rank}")));
    }
    let mut w = DMatrix::zeros(c, k);
    let mut explained = Vec::with_capacity(k);
    for (j, (val, vec)) in pairs.into_iter().take(k).enumerate() {
        let mut col: Vec<f64> = vec.iter().copied().collect();
        fix_sign(&mut col);
        w.set_column(j, &DVector::from_vec(col));
        explained.push(val);
    }
    Ok(PcaFit { mean, w, explained })
}

/// Fits the joint per-axis PCA on pooled foreground tokens (`rows` is
/// `n x channels`, row-major).
pub fn fit_axis_pca(axis: Axis, rows: &[f32], channels: usize, k: usize) -> Result<AxisPcaModel> {
    if channels == 0 || !rows.len().is_multiple_of(channels) {
        return Err(Error::shape(format!("{} values do not form rows of {channels}", rows.len())));
    }
    let data: Vec<f64> = rows.iter().map(|&v| f64::from(v)).collect();
    let fit = pca_rows(&data, rows.len() / channels, channels, k)?;
    Ok(AxisPcaModel { axis, mean: fit.mean, w: fit.w, explained: fit.explained })
}

/// Projects `n x C` rows to `n x k`: `(f - mean) W`.
pub fn project_rows(rows: &[f32], mean: &[f64], w: &DMatrix<f64>) -> Result<Vec<f32>> {
    let (c, k) = w.shape();
    if mean.len() != c || !rows.len().is_multiple_of(c) {
        return Err(Error::shape(format!(
            "rows of {} values cannot be projected by a {c}x{k} matrix",
            if c == 0 { 0 } else { rows.len() % c }
        )));
    }
    let mut out = vec![0.0f32; rows.len() / c * k];
    out.par_chunks_mut(k.max(1)).zip(rows.par_chunks(c)).for_each(|(o, row)| {
        let centered: Vec<f64> = row.iter().zip(mean).map(|(&v, m)| f64::from(v) - m).collect();
        for (j, oj) in o.iter_mut().enumerate() {
            let col = w.column(j);
            *oj = centered.iter().zip(col.iter()).map(|(a, b)| a * b).sum::<f64>() as f32;
        }
    });
    Ok(out)
}

pub fn apply_axis_pca(tokens: &[f32], model: &AxisPcaModel) -> Result<Vec<f32>> {
    if !tokens.len().is_multiple_of(model.mean.len()) {
        return Err(Error::shape(format!(
            "token block of {} values does not match {} channels",
            tokens.len(),
            model.mean.len()
        )));
    }
    project_rows(tokens, &model.mean, &model.w)
}

/// Dense per-voxel `(z - mean) W`.
pub fn apply_projection(z: &FeatureVolume, mean: &[f64], w: &DMatrix<f64>) -> Result<FeatureVolume> {
    if z.channels() != w.nrows() || mean.len() != w.nrows() {
        return Err(Error::shape(format!(
            "feature volume has {} channels, projection expects {}",
            z.channels(),
            w.nrows()
        )));
    }
    let data = project_rows(z.data(), mean, w)?;
    FeatureVolume::new(z.dims(), w.ncols(), z.spacing(), data)
}

/// Per-voxel gradient-magnitude weights on a (coarse) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    pub dims: Dims,
    pub phi: Vec<f64>,
}

impl WeightField {
    pub fn uniform(valid: &Mask) -> Self {
        WeightField { dims: valid.dims(), phi: valid.data().iter().map(|&b| f64::from(u8::from(b))).collect() }
    }

    pub fn total(&self) -> f64 {
        self.phi.iter().sum()
    }
}

/// `phi = sqrt(sum_c |grad z_c|^2)` with central differences (one-sided at
/// faces), zero outside `valid`. Falls back to uniform weights over `valid`
/// when the total is below `1e-12`.
pub fn gradient_weights(z: &FeatureVolume, valid: &Mask) -> Result<WeightField> {
    let dims = z.dims();
    if valid.dims() != dims {
        return Err(Error::shape(format!("mask {:?} vs features {dims:?}", valid.dims())));
    }
    if valid.is_empty() {
        return Err(Error::param("valid region is empty"));
    }
    let c = z.channels();
    let phi: Vec<f64> = (0..z.voxels())
        .into_par_iter()
        .map(|idx| {
            if !valid.data()[idx] {
                return 0.0;
            }
            let p = coords(dims, idx);
            let mut s = 0.0;
            for a in 0..3 {
                let n = dims[a];
                if n < 2 {
                    continue;
                }
                let (lo, hi, h) = if p[a] == 0 {
                    (0, 1, 1.0)
                } else if p[a] + 1 == n {
                    (n - 2, n - 1, 1.0)
                } else {
                    (p[a] - 1, p[a] + 1, 2.0)
                };
                let mut ql = p;
                ql[a] = lo;
                let mut qh = p;
                qh[a] = hi;
                let (fl, fh) = (z.voxel(linear_index(dims, ql)), z.voxel(linear_index(dims, qh)));
                for ch in 0..c {
                    let d = (f64::from(fh[ch]) - f64::from(fl[ch])) / h;
                    s += d * d;
                }
            }
            s.sqrt()
        })
        .collect();
    let field = WeightField { dims, phi };
    if field.total() < 1e-12 {
        log::debug!("gradient weights vanish; using uniform weights");
        return Ok(WeightField::uniform(valid));
    }
    Ok(field)
}

/// One corresponding fixed/moving pair on the fitting grid. The moving
/// features and mask are already warped onto the fixed grid.
#[derive(Debug, Clone)]
pub struct FitPair {
    pub fixed: FeatureVolume,
    pub moving: FeatureVolume,
    pub fixed_fg: Mask,
    pub moving_fg: Mask,
    pub valid: Mask,
}

impl FitPair {
    pub fn new(fixed: FeatureVolume, moving: FeatureVolume, fixed_fg: Mask, moving_fg: Mask) -> Result<Self> {
        let dims = fixed.dims();
        if moving.dims() != dims || fixed_fg.dims() != dims || moving_fg.dims() != dims {
            return Err(Error::shape("fit pair members must share dims"));
        }
        if moving.channels() != fixed.channels() {
            return Err(Error::shape(format!("fixed has {} channels, moving {}", fixed.channels(), moving.channels())));
        }
        let valid = crate::mask::mask_intersection(&fixed_fg, &moving_fg)?;
        if valid.is_empty() {
            return Err(Error::param("foreground intersection of the pair is empty"));
        }
        Ok(FitPair { fixed, moving, fixed_fg, moving_fg, valid })
    }

    pub fn channels(&self) -> usize {
        self.fixed.channels()
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitDataset {
    pub pairs: Vec<FitPair>,
}

impl FitDataset {
    fn channels(&self) -> Result<usize> {
        let c = self.pairs.first().ok_or_else(|| Error::param("fit dataset has no pairs"))?.channels();
        if self.pairs.iter().any(|p| p.channels() != c) {
            return Err(Error::shape("pairs disagree on channel count"));
        }
        Ok(c)
    }
}

fn role_mean<'a>(pairs: impl Iterator<Item = (&'a FeatureVolume, &'a Mask)>, c: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; c];
    let mut n = 0usize;
    for (f, m) in pairs {
        for idx in m.indices() {
            for (s, &v) in sum.iter_mut().zip(f.voxel(idx)) {
                *s += f64::from(v);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::param("role foreground is empty in every pair"));
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

struct Moments {
    cross: DMatrix<f64>,
    var_i: Vec<f64>,
    var_j: Vec<f64>,
    weight: f64,
    count: usize,
}

fn pair_moments(pair: &FitPair, phi: &WeightField, mu_i: &[f64], mu_j: &[f64]) -> Moments {
    let c = mu_i.len();
    let mut cross = DMatrix::zeros(c, c);
    let (mut var_i, mut var_j) = (vec![0.0; c], vec![0.0; c]);
    let (mut weight, mut count) = (0.0, 0);
    let mut a = vec![0.0; c];
    let mut b = vec![0.0; c];
    for idx in pair.valid.indices() {
        let w = phi.phi[idx];
        count += 1;
        if w == 0.0 {
            continue;
        }
        weight += w;
        for (((x, &v), m), s) in a.iter_mut().zip(pair.fixed.voxel(idx)).zip(mu_i).zip(var_i.iter_mut()) {
            *x = f64::from(v) - m;
            *s += w * *x * *x;
        }
        for (((x, &v), m), s) in b.iter_mut().zip(pair.moving.voxel(idx)).zip(mu_j).zip(var_j.iter_mut()) {
            *x = f64::from(v) - m;
            *s += w * *x * *x;
        }
        for r in 0..c {
            let wa = w * a[r];
            for (col, &bv) in b.iter().enumerate() {
                cross[(r, col)] += wa * bv;
            }
        }
    }
    Moments { cross, var_i, var_j, weight, count }
}

/// Weighted PLS on the pooled valid voxels of all pairs.
pub fn fit_wpls(ds: &FitDataset, weights: &[WeightField], k_proj: usize, epsilon: f64) -> Result<WplsModel> {
    let c = ds.channels()?;
    if weights.len() != ds.pairs.len() {
        return Err(Error::param(format!("{} weight fields for {} pairs", weights.len(), ds.pairs.len())));
    }
    if let Some((i, _)) = weights.iter().zip(&ds.pairs).enumerate().find(|(_, (w, p))| w.dims != p.fixed.dims()) {
        return Err(Error::shape(format!("weight field {i} does not match its pair")));
    }
    if k_proj == 0 || k_proj > c {
        return Err(Error::param(format!("k_proj={k_proj} must lie in 1..={c}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::param(format!("ridge epsilon must be positive, got {epsilon}")));
    }
    let mean_i = role_mean(ds.pairs.iter().map(|p| (&p.fixed, &p.fixed_fg)), c)?;
    let mean_j = role_mean(ds.pairs.iter().map(|p| (&p.moving, &p.moving_fg)), c)?;

    let parts: Vec<Moments> =
        ds.pairs.par_iter().zip(weights.par_iter()).map(|(p, w)| pair_moments(p, w, &mean_i, &mean_j)).collect();
    let mut cross = DMatrix::zeros(c, c);
    let (mut var_i, mut var_j) = (vec![0.0; c], vec![0.0; c]);
    let (mut total, mut count) = (0.0, 0);
    for m in &parts {
        cross += &m.cross;
        var_i.iter_mut().zip(&m.var_i).for_each(|(a, b)| *a += b);
        var_j.iter_mut().zip(&m.var_j).for_each(|(a, b)| *a += b);
        total += m.weight;
        count += m.count;
    }
    if count < 2 {
        return Err(Error::param(format!("need at least 2 pooled valid voxels, got {count}")));
    }
    if total < 1e-12 {
        return Err(Error::numerical("total voxel weight is degenerate"));
    }
    cross /= total;
    let sigma_i: Vec<f64> = var_i.iter().map(|v| (v / total).max(0.0).sqrt()).collect();
    let sigma_j: Vec<f64> = var_j.iter().map(|v| (v / total).max(0.0).sqrt()).collect();
    let scaled = DMatrix::from_fn(c, c, |r, col| cross[(r, col)] / ((sigma_i[r] + epsilon) * (sigma_j[col] + epsilon)));

    let svd = scaled.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::numerical("SVD did not return left vectors"))?;
    let vt = svd.v_t.ok_or_else(|| Error::numerical("SVD did not return right vectors"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let top = svd.singular_values[order[0]];
    let rank = order.iter().filter(|&&i| top > 0.0 && svd.singular_values[i] > RANK_TOL * top).count();
    if k_proj > rank {
        return Err(Error::numerical(format!(
            "requested k_proj={k_proj} but the scaled cross-covariance has achievable rank {rank}"
        )));
    }
    let mut w_i = DMatrix::zeros(c, k_proj);
    let mut w_j = DMatrix::zeros(c, k_proj);
    let mut singular_values = Vec::with_capacity(k_proj);
    for (j, &i) in order.iter().take(k_proj).enumerate() {
        let mut left: Vec<f64> = u.column(i).iter().copied().collect();
        let mut right: Vec<f64> = vt.row(i).iter().copied().collect();
        if fix_sign(&mut left) {
            right.iter_mut().for_each(|v| *v = -*v);
        }
        w_i.set_column(j, &DVector::from_vec(left));
        w_j.set_column(j, &DVector::from_vec(right));
        singular_values.push(svd.singular_values[i]);
    }
    Ok(WplsModel { mean_i, mean_j, sigma_i, sigma_j, w_i, w_j, singular_values, epsilon })
}

/// Shared PCA over the pooled foreground rows of both roles.
pub fn fit_pca3d(ds: &FitDataset, k_proj: usize) -> Result<Pca3dModel> {
    let c = ds.channels()?;
    let mut rows = Vec::new();
    for p in &ds.pairs {
        for (f, m) in [(&p.fixed, &p.fixed_fg), (&p.moving, &p.moving_fg)] {
            for idx in m.indices() {
                rows.extend(f.voxel(idx).iter().map(|&v| f64::from(v)));
            }
        }
    }
    let fit = pca_rows(&rows, rows.len() / c, c, k_proj)?;
    Ok(Pca3dModel { mean: fit.mean, w: fit.w, explained: fit.explained })
}

/// Scales each voxel's channel vector to unit L2 norm; zero vectors stay zero.
pub fn l2_normalize_voxels(z: &FeatureVolume) -> FeatureVolume {
    let c = z.channels();
    let mut data = z.data().to_vec();
    data.par_chunks_mut(c).for_each(|v| {
        let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
        }
    });
    FeatureVolume::new(z.dims(), c, z.spacing(), data).expect("same shape")
}

pub const HYBRID_VIT_CHANNELS: usize = 16;
pub const HYBRID_VIT_SCALE: f32 = 0.1;

/// `[0.1 * z[0..16] | mind]`.
pub fn concat_mind_hybrid(z: &FeatureVolume, mind: &FeatureVolume) -> Result<FeatureVolume> {
    if z.dims() != mind.dims() {
        return Err(Error::shape(format!("dims {:?} vs {:?}", z.dims(), mind.dims())));
    }
    if z.channels() < HYBRID_VIT_CHANNELS {
        return Err(Error::shape(format!("need at least {HYBRID_VIT_CHANNELS} channels, got {}", z.channels())));
    }
    if mind.channels() != crate::mind::CHANNELS {
        return Err(Error::shape(format!("MIND map has {} channels", mind.channels())));
    }
    let vit = z.select_channels(0..HYBRID_VIT_CHANNELS)?.scaled(HYBRID_VIT_SCALE);
    crate::encoder::concat_channels(&[&vit, mind])
}

/// Fit-time settings stored alongside the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub k: usize,
    pub k_proj: usize,
    pub epsilon: f64,
    pub grid_sp: usize,
    pub stride: usize,
    pub mask: MaskConfig,
    pub encoder: SliceEncoderSpec,
    /// Intensity normalization for roles I and J.
    pub normalization: [Normalization; 2],
    pub pairs: usize,
}

impl BundleMetadata {
    pub fn normalization(&self, role: Role) -> Normalization {
        match role {
            Role::I => self.normalization[0],
            Role::J => self.normalization[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBundle {
    /// Axis models in S, C, A order.
    pub axis: Vec<AxisPcaModel>,
    pub wpls: Option<WplsModel>,
    pub pca3d: Option<Pca3dModel>,
    pub metadata: BundleMetadata,
}

pub const BUNDLE_MAGIC: &[u8; 4] = b"VXP1";
pub const BUNDLE_VERSION: u32 = 1;

const SEC_AXIS: u32 = 1;
const SEC_WPLS: u32 = 2;
const SEC_PCA3D: u32 = 3;
const SEC_META: u32 = 4;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    put_u32(out, m.nrows());
    put_u32(out, m.ncols());
    for r in 0..m.nrows() {
        put_f64s(out, m.row(r).iter());
    }
}

fn get_matrix(r: &mut Reader<'_>) -> Result<DMatrix<f64>> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| Error::format("matrix size overflows"))?;
    let vals = r.f64s(n)?;
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

fn get_vec(r: &mut Reader<'_>) -> Result<Vec<f64>> {
    let n = r.u32()? as usize;
    r.f64s(n)
}

fn put_vec(out: &mut Vec<u8>, v: &[f64]) {
    put_u32(out, v.len());
    put_f64s(out, v);
}

fn section(out: &mut Vec<u8>, id: u32, payload: Vec<u8>) {
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
}

impl ProjectionBundle {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        for m in &self.axis {
            let mut p = Vec::new();
            put_u32(&mut p, m.axis.index());
            put_vec(&mut p, &m.mean);
            put_matrix(&mut p, &m.w);
            put_vec(&mut p, &m.explained);
            section(&mut out, SEC_AXIS, p);
        }
        if let Some(m) = &self.wpls {
            let mut p = Vec::new();
            p.extend_from_slice(&m.epsilon.to_le_bytes());
            for v in [&m.mean_i, &m.mean_j, &m.sigma_i, &m.sigma_j] {
                put_vec(&mut p, v);
            }
            put_matrix(&mut p, &m.w_i);
            put_matrix(&mut p, &m.w_j);
            put_vec(&mut p, &m.singular_values);
            section(&mut out, SEC_WPLS, p);
        }
        if let Some(m) = &self.pca3d {
            let mut p = Vec::new();
            put_vec(&mut p, &m.mean);
            put_matrix(&mut p, &m.w);
            put_vec(&mut p, &m.explained);
            section(&mut out, SEC_PCA3D, p);
        }
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::format(e.to_string()))?;
        section(&mut out, SEC_META, meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(Error::format("bad magic, expected VXP1"));
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::format(format!("unsupported bundle version {version}")));
        }
        let (mut axis, mut wpls, mut pca3d, mut metadata) = (Vec::new(), None, None, None);
        while r.remaining() > 0 {
            let id = r.u32()?;
            let len = usize::try_from(r.u64()?).map_err(|_| Error::format("section too large"))?;
            let mut s = Reader::new(r.take(len)?);
            match id {
                SEC_AXIS => {
                    let a = Axis::from_index(s.u32()? as usize).ok_or_else(|| Error::format("bad axis id"))?;
                    axis.push(AxisPcaModel {
                        axis: a,
                        mean: get_vec(&mut s)?,
                        w: get_matrix(&mut s)?,
                        explained: get_vec(&mut s)?,
                    });
                }
                SEC_WPLS => {
                    let epsilon = s.f64()?;
                    let (mean_i, mean_j) = (get_vec(&mut s)?, get_vec(&mut s)?);
                    let (sigma_i, sigma_j) = (get_vec(&mut s)?, get_vec(&mut s)?);
                    let (w_i, w_j) = (get_matrix(&mut s)?, get_matrix(&mut s)?);
                    let singular_values = get_vec(&mut s)?;
                    wpls = Some(WplsModel { mean_i, mean_j, sigma_i, sigma_j, w_i, w_j, singular_values, epsilon });
                }
                SEC_PCA3D => {
                    pca3d = Some(Pca3dModel {
                        mean: get_vec(&mut s)?,
                        w: get_matrix(&mut s)?,
                        explained: get_vec(&mut s)?,
                    });
                }
                SEC_META => {
                    metadata = Some(
                        serde_json::from_slice(s.take(len)?)
                            .map_err(|e| Error::format(format!("bad metadata: {e}")))?,
                    );
                }
                other => log::warn!("skipping unknown bundle section {other}"),
            }
            if id <= SEC_META {
                s.expect_end()?;
            }
        }
        let metadata = metadata.ok_or_else(|| Error::format("bundle has no metadata section"))?;
        let bundle = ProjectionBundle { axis, wpls, pca3d, metadata };
        bundle.check().map_err(|e| Error::format(e.to_string()))?;
        Ok(bundle)
    }

    /// Structural consistency of the stored models.
    pub fn check(&self) -> Result<()> {
        let order: Vec<Axis> = self.axis.iter().map(|m| m.axis).collect();
        if order != Axis::ALL {
            return Err(Error::shape("bundle must hold axis models for S, C, A in order"));
        }
        let mut dim = 0;
        for m in &self.axis {
            if m.w.nrows() != m.mean.len() {
                return Err(Error::shape("axis model mean/projection mismatch"));
            }
            dim += m.w.ncols();
        }
        if self.wpls.is_none() && self.pca3d.is_none() {
            return Err(Error::shape("bundle holds neither a WPLS nor a PCA3D model"));
        }
        if let Some(m) = &self.wpls {
            let ok = [&m.mean_i, &m.mean_j, &m.sigma_i, &m.sigma_j].iter().all(|v| v.len() == dim)
                && m.w_i.nrows() == dim
                && m.w_j.shape() == m.w_i.shape();
            if !ok {
                return Err(Error::shape("WPLS model does not match the triplanar width"));
            }
        }
        if let Some(m) = &self.pca3d {
            if m.mean.len() != dim || m.w.nrows() != dim {
                return Err(Error::shape("PCA3D model does not match the triplanar width"));
            }
        }
        Ok(())
    }

    /// Width of the concatenated triplanar features.
    pub fn triplanar_channels(&self) -> usize {
        self.axis.iter().map(|m| m.w.ncols()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
