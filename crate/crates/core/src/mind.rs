//! 12-channel self-similarity context descriptor.
//!
//! Each channel compares two points of the dilated 6-neighborhood that lie on
//! different axes (unit squared distance 2 between the offsets). The squared
//! intensity difference between the two shifted images is box filtered over a
//! `(2r+1)^3` patch, divided by the per-voxel mean of all 12 patch distances
//! (floored at `variance_floor`) and mapped through `exp(-x)`. Homogeneous
//! regions therefore read exactly 1.0 in every channel.
//!
//! Shifts and the box filter both use replication padding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{coords, linear_index, voxel_count, Dims, FeatureVolume, Volume};

pub const CHANNELS: usize = 12;

/// Unit offsets of the 6-neighborhood, `(axis0, axis1, axis2)`.
const NEIGHBORS: [[i64; 3]; 6] = [[-1, 0, 0], [0, 0, -1], [0, -1, 0], [0, 0, 1], [1, 0, 0], [0, 1, 0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MindConfig {
    pub radius: usize,
    pub dilation: usize,
    pub variance_floor: f64,
}

impl Default for MindConfig {
    fn default() -> Self {
        MindConfig { radius: 2, dilation: 2, variance_floor: 1e-6 }
    }
}

impl MindConfig {
    pub fn new(radius: usize, dilation: usize) -> Self {
        MindConfig { radius, dilation, ..Default::default() }
    }

    /// Radius 1, dilation 2: the variant concatenated into hybrid features.
    pub fn hybrid() -> Self {
        MindConfig::new(1, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::param("MIND dilation must be >= 1"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::param("MIND variance floor must be positive"));
        }
        Ok(())
    }
}

/// The 12 neighbor pairs in channel order.
pub fn channel_pairs() -> [(usize, usize); CHANNELS] {
    let mut out = [(0, 0); CHANNELS];
    let mut n = 0;
    for i in 0..6 {
        for j in i + 1..6 {
            let d2: i64 = (0..3).map(|a| (NEIGHBORS[i][a] - NEIGHBORS[j][a]).pow(2)).sum();
            if d2 == 2 {
                out[n] = (i, j);
                n += 1;
            }
        }
    }
    debug_assert_eq!(n, CHANNELS);
    out
}

/// Offset of neighbor `n` scaled by the dilation.
pub fn neighbor_offset(n: usize, dilation: usize) -> [i64; 3] {
    NEIGHBORS[n].map(|v| v * dilation as i64)
}

#[inline]
pub(crate) fn clamp_shift(dims: Dims, p: [usize; 3], off: [i64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| (p[a] as i64 + off[a]).clamp(0, dims[a] as i64 - 1) as usize)
}

pub fn mind_descriptor(vol: &Volume, cfg: &MindConfig) -> Result<FeatureVolume> {
    cfg.validate()?;
    let dims = vol.dims();
    let n = voxel_count(dims);
    let data = vol.data();
    let pairs = channel_pairs();

    let distances: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let oi = neighbor_offset(i, cfg.dilation);
            let oj = neighbor_offset(j, cfg.dilation);
            let diff: Vec<f64> = (0..n)
                .map(|idx| {
                    let p = coords(dims, idx);
                    let a = f64::from(data[linear_index(dims, clamp_shift(dims, p, oi))]);
                    let b = f64::from(data[linear_index(dims, clamp_shift(dims, p, oj))]);
                    (a - b) * (a - b)
                })
                .collect();
            box_mean(&diff, dims, cfg.radius)
        })
        .collect();

    let mut out = vec![0.0f32; n * CHANNELS];
    out.par_chunks_mut(CHANNELS).enumerate().for_each(|(idx, voxel)| {
        let mean = distances.iter().map(|d| d[idx]).sum::<f64>() / CHANNELS as f64;
        let var = mean.max(cfg.variance_floor);
        for (o, d) in voxel.iter_mut().zip(&distances) {
            *o = (-d[idx] / var).exp() as f32;
        }
    });
    FeatureVolume::new(dims, CHANNELS, vol.spacing(), out)
}

/// Separable `(2r+1)^3` box mean with replication padding.
fn box_mean(input: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return input.to_vec();
    }
    let mut cur = input.to_vec();
    let mut next = vec![0.0; cur.len()];
    let r = radius as i64;
    let width = (2 * radius + 1) as f64;
    for axis in 0..3 {
        let len = dims[axis] as i64;
        for (idx, o) in next.iter_mut().enumerate() {
            let p = coords(dims, idx);
            let mut s = 0.0;
            for t in -r..=r {
                let mut q = p;
                q[axis] = (p[axis] as i64 + t).clamp(0, len - 1) as usize;
                s += cur[linear_index(dims, q)];
            }
            *o = s / width;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct per-voxel patch SSD, independent of the separable filter.
    fn oracle(vol: &Volume, cfg: &MindConfig) -> Vec<f64> {
        let dims = vol.dims();
        let r = cfg.radius as i64;
        let pairs = channel_pairs();
        let mut out = Vec::new();
        for idx in 0..voxel_count(dims) {
            let p = coords(dims, idx);
            let mut d = [0.0f64; CHANNELS];
            for (c, &(i, j)) in pairs.iter().enumerate() {
                let mut s = 0.0;
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let q = clamp_shift(dims, p, [dz, dy, dx]);
                            let a = vol.get(clamp_shift(dims, q, neighbor_offset(i, cfg.dilation)));
                            let b = vol.get(clamp_shift(dims, q, neighbor_offset(j, cfg.dilation)));
                            s += f64::from(a - b).powi(2);
                        }
                    }
                }
                d[c] = s / ((2 * r + 1).pow(3)) as f64;
            }
            let var = (d.iter().sum::<f64>() / 12.0).max(cfg.variance_floor);
            out.extend(d.iter().map(|v| (-v / var).exp()));
        }
        out
    }

    #[test]
    fn twelve_distinct_pairs_on_different_axes() {
        let pairs = channel_pairs();
        for &(i, j) in &pairs {
            let dot: i64 = (0..3).map(|a| NEIGHBORS[i][a] * NEIGHBORS[j][a]).sum();
            assert_eq!(dot, 0);
        }
        let mut sorted = pairs.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
    }

    #[test]
    fn constant_volume_is_exactly_one() {
        let m = mind_descriptor(&Volume::filled([6, 5, 4], 3.25), &MindConfig::default()).unwrap();
        assert_eq!(m.channels(), 12);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_bright_voxel_matches_oracle() {
        let vol = Volume::from_fn([5, 5, 5], |p| if p == [2, 2, 2] { 10.0 } else { 0.0 });
        let cfg = MindConfig::new(1, 1);
        let m = mind_descriptor(&vol, &cfg).unwrap();
        let expect = oracle(&vol, &cfg);
        for (a, b) in m.data().iter().zip(&expect) {
            assert!((f64::from(*a) - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn random_volume_matches_oracle_with_dilation() {
        let vol = Volume::from_fn([6, 7, 5], |p| ((p[0] * 31 + p[1] * 17 + p[2] * 7) % 11) as f32);
        let cfg = MindConfig::new(2, 2);
        let m = mind_descriptor(&vol, &cfg).unwrap();
        for (a, b) in m.data().iter().zip(&oracle(&vol, &cfg)) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_equivariant_on_interior() {
        let cfg = MindConfig::new(1, 1);
        let dims = [12, 9, 9];
        let f = |z: i64, y: usize, x: usize| ((z * 13 + y as i64 * 5 + x as i64 * 3) % 7) as f32;
        let a = Volume::from_fn(dims, |p| f(p[0] as i64, p[1], p[2]));
        let b = Volume::from_fn(dims, |p| f(p[0] as i64 + 1, p[1], p[2]));
        let ma = mind_descriptor(&a, &cfg).unwrap();
        let mb = mind_descriptor(&b, &cfg).unwrap();
        let margin = cfg.radius + cfg.dilation;
        for z in margin..dims[0] - margin - 1 {
            for y in margin..dims[1] - margin {
                for x in margin..dims[2] - margin {
                    assert_eq!(mb.at([z, y, x]), ma.at([z + 1, y, x]));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn values_in_unit_interval_and_shift_invariant(
            vals in proptest::collection::vec(-50i32..50, 4 * 5 * 6),
            shift in -1000i32..1000,
        ) {
            let dims = [4, 5, 6];
            let vol = Volume::new(dims, [1.0; 3], vals.iter().map(|&v| v as f32).collect()).unwrap();
            let shifted = Volume::new(dims, [1.0; 3], vals.iter().map(|&v| (v + shift) as f32).collect()).unwrap();
            let cfg = MindConfig::new(1, 2);
            let a = mind_descriptor(&vol, &cfg).unwrap();
            let b = mind_descriptor(&shifted, &cfg).unwrap();
            prop_assert!(a.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert_eq!(a, b);
        }
    }
}
