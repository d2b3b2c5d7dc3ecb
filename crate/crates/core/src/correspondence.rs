//! Registration-free correspondence tasks: kNN label transfer and
//! nearest-feature landmark localization.
//!
//! Both searches are exhaustive. Exact similarity ties prefer the key voxel at
//! the query's own position (when query and key share a grid), then the lower
//! linear index, so that a volume queried against itself is a fixed point even
//! inside constant regions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{coords, linear_index, voxel_count, Dims, FeatureVolume, Mask, Volume};
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: [f32; 3],
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: [f32; 3], labels: Vec<u32>) -> Result<Self> {
        if labels.len() != voxel_count(dims) {
            return Err(Error::shape(format!("{} labels for dims {dims:?}", labels.len())));
        }
        Ok(LabelVolume { dims, spacing, labels })
    }

    pub fn from_fn(dims: Dims, spacing: [f32; 3], mut f: impl FnMut([usize; 3]) -> u32) -> Self {
        let labels = (0..voxel_count(dims)).map(|i| f(coords(dims, i))).collect();
        LabelVolume { dims, spacing, labels }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, p: [usize; 3]) -> u32 {
        self.labels[linear_index(self.dims, p)]
    }

    /// Sorted distinct nonzero labels.
    pub fn present(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn mask_of(&self, label: u32) -> Mask {
        Mask::new(self.dims, self.labels.iter().map(|&l| l == label).collect()).expect("same dims")
    }

    pub fn foreground(&self) -> Mask {
        Mask::new(self.dims, self.labels.iter().map(|&l| l != 0).collect()).expect("same dims")
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.dims, self.spacing, self.labels.iter().map(|&l| l as f32).collect()).expect("same dims")
    }

    /// Accepts only exact nonnegative integers below 2^24.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let labels = vol
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as u32)
                } else {
                    Err(Error::param(format!("label value {v} is not a nonnegative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelVolume::new(vol.dims(), vol.spacing(), labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub label: u32,
    pub voxel: [usize; 3],
    pub mm: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransferCategory {
    SC,
    DS,
    DM,
    G,
}

impl TransferCategory {
    pub const ALL: [TransferCategory; 4] =
        [TransferCategory::SC, TransferCategory::DS, TransferCategory::DM, TransferCategory::G];

    pub fn name(self) -> &'static str {
        match self {
            TransferCategory::SC => "SC",
            TransferCategory::DS => "DS",
            TransferCategory::DM => "DM",
            TransferCategory::G => "G",
        }
    }
}

impl FromStr for TransferCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TransferCategory::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::param(format!("unknown category '{s}', expected SC, DS, DM or G")))
    }
}

impl fmt::Display for TransferCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn categorize(
    query_subject: &str,
    query_modality: &str,
    key_subject: &str,
    key_modality: &str,
) -> TransferCategory {
    match (query_subject == key_subject, query_modality == key_modality) {
        (true, true) => TransferCategory::SC,
        (false, true) => TransferCategory::DS,
        (true, false) => TransferCategory::DM,
        (false, false) => TransferCategory::G,
    }
}

/// Neighbor ordering: higher score first, then the co-located voxel, then the
/// lower linear index.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    score: f64,
    colocated: bool,
    index: usize,
}

impl Ranked {
    fn before(&self, other: &Ranked) -> bool {
        if self.score != other.score {
            return self.score > other.score;
        }
        if self.colocated != other.colocated {
            return self.colocated;
        }
        self.index < other.index
    }
}

/// Keeps the best `k` items in rank order.
fn push_top(top: &mut Vec<Ranked>, k: usize, item: Ranked) {
    if top.len() == k && !item.before(top.last().expect("k >= 1")) {
        return;
    }
    let pos = top.iter().position(|t| item.before(t)).unwrap_or(top.len());
    top.insert(pos, item);
    top.truncate(k);
}

fn unit_rows(f: &FeatureVolume, indices: &[usize]) -> Vec<f64> {
    let c = f.channels();
    let mut out = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        let v = f.voxel(i);
        let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        out.extend(v.iter().map(|&x| if n > 0.0 { f64::from(x) / n } else { 0.0 }));
    }
    out
}

/// Majority vote over the `k` most cosine-similar key-ROI voxels for every
/// query-ROI voxel. Voxels outside `roi_q` get label 0.
pub fn knn_segment(
    query: &FeatureVolume,
    key: &FeatureVolume,
    key_labels: &LabelVolume,
    roi_q: &Mask,
    roi_k: &Mask,
    k: usize,
    exclude_self: bool,
) -> Result<LabelVolume> {
    if query.channels() != key.channels() {
        return Err(Error::shape(format!("channels differ: {} vs {}", query.channels(), key.channels())));
    }
    if roi_q.dims() != query.dims() || roi_k.dims() != key.dims() || key_labels.dims() != key.dims() {
        return Err(Error::shape("ROI/label dims must match their feature volumes"));
    }
    if k == 0 {
        return Err(Error::param("k must be >= 1"));
    }
    let same_grid = query.dims() == key.dims();
    if exclude_self && !same_grid {
        return Err(Error::param("self exclusion requires query and key on the same grid"));
    }
    let cand: Vec<usize> = roi_k.indices().collect();
    let available = cand.len().saturating_sub(usize::from(exclude_self));
    if k > available {
        return Err(Error::param(format!("k={k} exceeds the {available} available key voxels")));
    }
    let c = key.channels();
    let key_unit = unit_rows(key, &cand);
    let queries: Vec<usize> = roi_q.indices().collect();
    let q_unit = unit_rows(query, &queries);

    let votes: Vec<u32> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, &q)| {
            let qv = &q_unit[qi * c..(qi + 1) * c];
            let mut top: Vec<Ranked> = Vec::with_capacity(k + 1);
            for (ci, &idx) in cand.iter().enumerate() {
                if exclude_self && idx == q {
                    continue;
                }
                let kv = &key_unit[ci * c..(ci + 1) * c];
                let score: f64 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
                push_top(&mut top, k, Ranked { score, colocated: same_grid && idx == q, index: idx });
            }
            vote(&top, key_labels)
        })
        .collect();

    let mut out = vec![0u32; voxel_count(query.dims())];
    for (&q, &l) in queries.iter().zip(&votes) {
        out[q] = l;
    }
    LabelVolume::new(query.dims(), query.spacing(), out)
}

/// Most frequent label; ties go to the label whose best neighbor ranks
/// highest, then to the smaller label.
fn vote(ranked: &[Ranked], labels: &LabelVolume) -> u32 {
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (rank, r) in ranked.iter().enumerate() {
        let e = tally.entry(labels.labels[r.index]).or_insert((0, rank));
        e.0 += 1;
    }
    tally
        .into_iter()
        .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)).then(a.0.cmp(&b.0)))
        .map_or(0, |(l, _)| l)
}

/// Unweighted centroid of a label, rounded half-up per axis.
pub fn center_of_mass(labels: &LabelVolume, label: u32) -> Result<Landmark> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == label {
            let p = coords(labels.dims, i);
            for a in 0..3 {
                sum[a] += p[a] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::param(format!("label {label} is absent")));
    }
    let voxel = [0, 1, 2].map(|a| ((sum[a] / n as f64 + 0.5).floor() as usize).min(labels.dims[a] - 1));
    let mm = [0, 1, 2].map(|a| voxel[a] as f64 * f64::from(labels.spacing[a]));
    Ok(Landmark { label, voxel, mm })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizeMatch {
    pub voxel: [usize; 3],
    pub feature_distance: f64,
}

/// Nearest key-ROI voxel to the query point's feature vector (L2).
pub fn localize(
    query: &FeatureVolume,
    point: [usize; 3],
    key: &FeatureVolume,
    key_roi: &Mask,
    exclude: Option<[usize; 3]>,
) -> Result<LocalizeMatch> {
    if query.channels() != key.channels() {
        return Err(Error::shape(format!("channels differ: {} vs {}", query.channels(), key.channels())));
    }
    if key_roi.dims() != key.dims() {
        return Err(Error::shape("key ROI dims must match the key features"));
    }
    let qd = query.dims();
    if (0..3).any(|a| point[a] >= qd[a]) {
        return Err(Error::param(format!("query point {point:?} outside {qd:?}")));
    }
    let q: Vec<f64> = query.at(point).iter().map(|&v| f64::from(v)).collect();
    let same_grid = qd == key.dims();
    let own = same_grid.then(|| linear_index(qd, point));
    let skip = exclude.map(|p| linear_index(key.dims(), p));
    let mut best: Option<Ranked> = None;
    for idx in key_roi.indices() {
        if Some(idx) == skip {
            continue;
        }
        let d2: f64 = key.voxel(idx).iter().zip(&q).map(|(&a, b)| (f64::from(a) - b).powi(2)).sum();
        let r = Ranked { score: -d2, colocated: Some(idx) == own, index: idx };
        if best.as_ref().is_none_or(|b| r.before(b)) {
            best = Some(r);
        }
    }
    let best = best.ok_or_else(|| Error::param("no candidate key voxels"))?;
    Ok(LocalizeMatch { voxel: coords(key.dims(), best.index), feature_distance: (-best.score).sqrt() })
}

/// Euclidean distance in mm between two voxel positions.
pub fn landmark_error(a: [usize; 3], b: [usize; 3], spacing: [f32; 3]) -> f64 {
    (0..3).map(|i| ((a[i] as f64 - b[i] as f64) * f64::from(spacing[i])).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    MedianPair,
    PooledMean,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median-pair" => Ok(Aggregation::MedianPair),
            "pooled-mean" => Ok(Aggregation::PooledMean),
            _ => Err(Error::param(format!("unknown aggregation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Summarizes landmark errors keyed by landmark id, one value per pair.
/// Median-pair takes each landmark's median over pairs and then mean/sd over
/// landmarks; pooled-mean takes mean/sd over every value. `sd` is the sample
/// standard deviation (0 for a single value).
pub fn aggregate_landmark_errors(errors: &BTreeMap<u32, Vec<f64>>, mode: Aggregation) -> Result<Summary> {
    let values: Vec<f64> = match mode {
        Aggregation::MedianPair => errors.values().filter_map(|v| stats::median(v)).collect(),
        Aggregation::PooledMean => errors.values().flatten().copied().collect(),
    };
    let mean = stats::mean(&values).ok_or_else(|| Error::param("no landmark errors to aggregate"))?;
    let sd = stats::sample_sd(&values).unwrap_or(0.0);
    Ok(Summary { mean, sd, count: values.len() })
}
