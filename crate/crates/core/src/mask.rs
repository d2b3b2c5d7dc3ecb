//! Foreground masks from MIND maps with boundary-flood hole filling.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{coords, linear_index, voxel_count, FeatureVolume, Mask, Volume};
use crate::mind::{self, MindConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub tau: f64,
    pub mind: MindConfig,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { tau: 0.99, mind: MindConfig::new(2, 2) }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::param(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        self.mind.validate()
    }
}

/// Background where every descriptor channel exceeds `tau`.
pub fn raw_background(mind_map: &FeatureVolume, tau: f64) -> Result<Mask> {
    if mind_map.channels() != mind::CHANNELS {
        return Err(Error::shape(format!(
            "expected a {}-channel MIND map, got {} channels",
            mind::CHANNELS,
            mind_map.channels()
        )));
    }
    let data = (0..mind_map.voxels()).map(|i| mind_map.voxel(i).iter().all(|&v| f64::from(v) > tau)).collect();
    Mask::new(mind_map.dims(), data)
}

/// Turns a background mask into the final foreground: background voxels not
/// 6-connected to the volume boundary through background are filled in.
pub fn hole_fill(bg: &Mask) -> Mask {
    let dims = bg.dims();
    let n = voxel_count(dims);
    let mut reached = vec![false; n];
    let mut queue = VecDeque::new();
    for idx in 0..n {
        let p = coords(dims, idx);
        let on_boundary = (0..3).any(|a| p[a] == 0 || p[a] + 1 == dims[a]);
        if on_boundary && bg.data()[idx] {
            reached[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        let p = coords(dims, idx);
        for a in 0..3 {
            for step in [-1i64, 1] {
                let v = p[a] as i64 + step;
                if v < 0 || v >= dims[a] as i64 {
                    continue;
                }
                let mut q = p;
                q[a] = v as usize;
                let j = linear_index(dims, q);
                if bg.data()[j] && !reached[j] {
                    reached[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    Mask::new(dims, reached.into_iter().map(|r| !r).collect()).expect("same dims")
}

pub fn foreground_mask(vol: &Volume, cfg: &MaskConfig) -> Result<Mask> {
    cfg.validate()?;
    let m = mind::mind_descriptor(vol, &cfg.mind)?;
    let bg = raw_background(&m, cfg.tau)?;
    Ok(hole_fill(&bg))
}

pub fn mask_intersection(fixed: &Mask, moving_warped: &Mask) -> Result<Mask> {
    if fixed.dims() != moving_warped.dims() {
        return Err(Error::param(format!("mask dims differ: {:?} vs {:?}", fixed.dims(), moving_warped.dims())));
    }
    let data = fixed.data().iter().zip(moving_warped.data()).map(|(&a, &b)| a && b).collect();
    Mask::new(fixed.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Connected-component labelling of the background; components touching
    /// the boundary stay background.
    fn cc_oracle(bg: &Mask) -> Mask {
        let dims = bg.dims();
        let n = voxel_count(dims);
        let mut label = vec![usize::MAX; n];
        let mut touches = Vec::new();
        for start in 0..n {
            if !bg.data()[start] || label[start] != usize::MAX {
                continue;
            }
            let id = touches.len();
            let mut hit = false;
            let mut stack = vec![start];
            label[start] = id;
            while let Some(i) = stack.pop() {
                let p = coords(dims, i);
                if (0..3).any(|a| p[a] == 0 || p[a] + 1 == dims[a]) {
                    hit = true;
                }
                for j in 0..n {
                    let q = coords(dims, j);
                    let d: usize = (0..3).map(|a| p[a].abs_diff(q[a])).sum();
                    if d == 1 && bg.data()[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
            touches.push(hit);
        }
        Mask::new(dims, (0..n).map(|i| !bg.data()[i] || !touches[label[i]]).collect()).unwrap()
    }

    fn shell(dims: [usize; 3]) -> Mask {
        // Foreground shell from 2..=6, cavity 3..=5, exterior elsewhere.
        Mask::from_fn(dims, |p| {
            let inside = |lo: usize, hi: usize| p.iter().all(|&v| v >= lo && v <= hi);
            !(inside(2, 6) && !inside(3, 5))
        })
    }

    #[test]
    fn hollow_shell_cavity_filled() {
        let bg = shell([9, 9, 9]);
        let fg = hole_fill(&bg);
        assert!(fg.get([4, 4, 4]));
        assert!(fg.get([2, 2, 2]));
        assert!(!fg.get([0, 0, 0]));
        assert!(!fg.get([8, 4, 4]));
        assert_eq!(fg, cc_oracle(&bg));
        assert_eq!(fg.count(), 5 * 5 * 5);
    }

    #[test]
    fn trivial_masks() {
        let all_bg = Mask::filled([4, 3, 5], true);
        assert!(hole_fill(&all_bg).is_empty());
        let all_fg = Mask::filled([4, 3, 5], false);
        assert_eq!(hole_fill(&all_fg).count(), 60);
    }

    #[test]
    fn raw_background_quantifier() {
        let mut m = FeatureVolume::new([2, 1, 1], 12, [1.0; 3], vec![1.0; 24]).unwrap();
        assert!(raw_background(&m, 0.99).unwrap().data().iter().all(|&b| b));
        m.voxel_mut(1)[5] = 0.5;
        assert_eq!(raw_background(&m, 0.99).unwrap().data(), &[true, false]);
        let three = FeatureVolume::zeros([1, 1, 1], 3, [1.0; 3]);
        assert!(raw_background(&three, 0.5).is_err());
    }

    #[test]
    fn constant_volume_has_empty_foreground() {
        let fg = foreground_mask(&Volume::filled([8, 8, 8], 0.3), &MaskConfig::default()).unwrap();
        assert!(fg.is_empty());
    }

    #[test]
    fn intersection_and_errors() {
        let a = Mask::from_fn([3, 3, 3], |p| p[0] < 2);
        let b = Mask::from_fn([3, 3, 3], |p| p[0] >= 2);
        assert_eq!(mask_intersection(&a, &a).unwrap(), a);
        assert!(mask_intersection(&a, &b).unwrap().is_empty());
        let c = Mask::from_fn([3, 3, 3], |p| p[1] == 1);
        let ab = mask_intersection(&a, &c).unwrap();
        for i in 0..27 {
            assert_eq!(ab.data()[i], a.data()[i] && c.data()[i]);
        }
        assert!(matches!(mask_intersection(&a, &Mask::filled([3, 3, 2], true)), Err(Error::Param(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = MaskConfig::default();
        assert_eq!(cfg.tau, 0.99);
        assert_eq!((cfg.mind.radius, cfg.mind.dilation), (2, 2));
        cfg.tau = 1.0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn hole_fill_matches_oracle_and_is_idempotent(bits in proptest::collection::vec(prop::bool::weighted(0.6), 6 * 5 * 4)) {
            let bg = Mask::new([6, 5, 4], bits).unwrap();
            let fg = hole_fill(&bg);
            prop_assert_eq!(&fg, &cc_oracle(&bg));
            prop_assert_eq!(&hole_fill(&fg.not()), &fg);
            for i in 0..bg.data().len() {
                prop_assert!(!bg.data()[i] <= fg.data()[i]);
            }
        }
    }
}
