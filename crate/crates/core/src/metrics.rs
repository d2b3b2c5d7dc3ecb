//! Overlap, surface-distance and deformation-regularity metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::LabelVolume;
use crate::error::{Error, Result};
use crate::grid::{coords, linear_index, Dims, DisplacementField, Mask};
use crate::stats;

/// One row of a CSV report. `label` is 0 for whole-volume values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub query_id: String,
    pub key_id: String,
    pub category: String,
    pub method: String,
    pub metric: String,
    pub label: u32,
    pub value: f64,
}

/// `2|a & b| / (|a| + |b|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("mask dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a.data().iter().zip(b.data()).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Per-label Dice over the truth's nonzero labels, scored only where the
/// truth is nonzero, averaged without weighting. Returns `(label, dice)` pairs
/// and their mean.
pub fn foreground_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<(Vec<(u32, f64)>, f64)> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!("label dims differ: {:?} vs {:?}", pred.dims(), truth.dims())));
    }
    let labels = truth.present();
    if labels.is_empty() {
        return Err(Error::param("truth has no foreground labels"));
    }
    let per: Vec<(u32, f64)> = labels
        .par_iter()
        .map(|&l| {
            let p =
                Mask::new(pred.dims(), pred.data().iter().zip(truth.data()).map(|(&x, &t)| t != 0 && x == l).collect())
                    .expect("same dims");
            (l, dice(&p, &truth.mask_of(l)).expect("same dims"))
        })
        .collect();
    let mean = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Foreground voxels with at least one 6-neighbor in the background; voxels
/// outside the volume count as background.
pub fn boundary(mask: &Mask) -> Mask {
    let dims = mask.dims();
    let data = (0..mask.data().len())
        .map(|i| {
            if !mask.data()[i] {
                return false;
            }
            let p = coords(dims, i);
            (0..3).any(|a| {
                if p[a] == 0 || p[a] + 1 == dims[a] {
                    return true;
                }
                let (mut lo, mut hi) = (p, p);
                lo[a] -= 1;
                hi[a] += 1;
                !mask.get(lo) || !mask.get(hi)
            })
        })
        .collect();
    Mask::new(dims, data).expect("same dims")
}

/// Squared distance of 1D lower envelope of parabolas centred at `pos[q]`
/// with offsets `f[q]`, evaluated at every `pos`.
fn envelope_1d(f: &[f64], pos: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let s = ((f[q] + pos[q] * pos[q]) - (f[r] + pos[r] * pos[r])) / (2.0 * (pos[q] - pos[r]));
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos[i] {
            k += 1;
        }
        let d = pos[i] - pos[v[k]];
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// voxel of `sites`.
pub fn squared_distance_transform(sites: &Mask, spacing: [f32; 3]) -> Vec<f64> {
    let dims = sites.dims();
    let mut d: Vec<f64> = sites.data().iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for a in 0..3 {
        let n = dims[a];
        let pos: Vec<f64> = (0..n).map(|i| i as f64 * f64::from(spacing[a])).collect();
        let [b, c] = match a {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        let lines: Vec<(usize, usize)> = (0..dims[b]).flat_map(|x| (0..dims[c]).map(move |y| (x, y))).collect();
        let results: Vec<Vec<f64>> = lines
            .par_iter()
            .map(|&(x, y)| {
                let idx = |i: usize| {
                    let mut p = [0; 3];
                    p[a] = i;
                    p[b] = x;
                    p[c] = y;
                    linear_index(dims, p)
                };
                let f: Vec<f64> = (0..n).map(|i| d[idx(i)]).collect();
                let mut out = vec![0.0; n];
                envelope_1d(&f, &pos, &mut out);
                out
            })
            .collect();
        for (&(x, y), line) in lines.iter().zip(results) {
            for (i, v) in line.into_iter().enumerate() {
                let mut p = [0; 3];
                p[a] = i;
                p[b] = x;
                p[c] = y;
                d[linear_index(dims, p)] = v;
            }
        }
    }
    d
}

/// Pooled directed boundary distances between two masks, in mm.
pub fn surface_distances(a: &Mask, b: &Mask, spacing: [f32; 3]) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("mask dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::param("surface distance needs two nonempty masks"));
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let (da, db) = (squared_distance_transform(&ba, spacing), squared_distance_transform(&bb, spacing));
    let mut out: Vec<f64> = ba.indices().map(|i| db[i].sqrt()).collect();
    out.extend(bb.indices().map(|i| da[i].sqrt()));
    Ok(out)
}

/// 95th percentile (linear interpolation) of the pooled boundary distances.
pub fn hd95(a: &Mask, b: &Mask, spacing: [f32; 3]) -> Result<f64> {
    let d = surface_distances(a, b, spacing)?;
    Ok(stats::percentile(&d, 95.0).expect("nonempty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JacobianStats {
    /// Population standard deviation of `ln det J` over positive determinants.
    pub sd_log_j: f64,
    pub folds: usize,
    pub interior: usize,
}

impl JacobianStats {
    pub fn fold_fraction(&self) -> f64 {
        if self.interior == 0 {
            0.0
        } else {
            self.folds as f64 / self.interior as f64
        }
    }
}

/// Log-Jacobian spread of `x -> x + psi(x)` with central differences on the
/// interior voxels. Non-positive determinants are counted as folds and left
/// out of the spread.
pub fn sd_log_j(field: &DisplacementField) -> JacobianStats {
    let dims: Dims = field.dims();
    let sp = field.spacing();
    let interior: Vec<[usize; 3]> = (1..dims[0].saturating_sub(1))
        .flat_map(|x| {
            (1..dims[1].saturating_sub(1)).flat_map(move |y| (1..dims[2].saturating_sub(1)).map(move |z| [x, y, z]))
        })
        .collect();
    let dets: Vec<f64> = interior
        .par_iter()
        .map(|&p| {
            let mut j = [[0.0f64; 3]; 3];
            for a in 0..3 {
                let (mut lo, mut hi) = (p, p);
                lo[a] -= 1;
                hi[a] += 1;
                let (u, v) = (field.at(hi), field.at(lo));
                for c in 0..3 {
                    j[c][a] = (f64::from(u[c]) - f64::from(v[c])) / (2.0 * f64::from(sp[a]));
                }
                j[a][a] += 1.0;
            }
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        })
        .collect();
    let logs: Vec<f64> = dets.iter().filter(|&&d| d > 0.0).map(|d| d.ln()).collect();
    JacobianStats {
        sd_log_j: stats::population_sd(&logs).unwrap_or(0.0),
        folds: dets.len() - logs.len(),
        interior: dets.len(),
    }
}

/// `max - min` of Dice over the evaluated neighbor counts.
pub fn dice_range_over_k(dice_by_k: &BTreeMap<usize, f64>) -> Result<f64> {
    let mut it = dice_by_k.values();
    let first = *it.next().ok_or_else(|| Error::param("no Dice values"))?;
    let (lo, hi) = it.fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(hi - lo)
}
