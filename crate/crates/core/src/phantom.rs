//! Deterministic two-modality phantoms.
//!
//! Every subject shares a template of ellipsoidal structures inside an
//! ellipsoidal body; subjects differ by jittered structure geometry and smooth
//! low-amplitude blobs. Modality A is the noise-free intensity image.
//! Modality B applies a monotone power remap to A and adds independent
//! Gaussian noise inside the body. Background outside the body is exactly 0 in
//! both modalities, so automatic masks recover the body.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correspondence::LabelVolume;
use crate::error::{Error, Result};
use crate::grid::{Dims, Mask, Volume};
use crate::io;
use crate::projection::Role;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub seed: u64,
    pub subjects: usize,
    pub structures: usize,
    /// Standard deviation of the modality-B noise.
    pub noise: f32,
    /// Exponent of the modality-B remap `x -> x^gamma`.
    pub gamma: f32,
    /// Marks modality-B volumes for token negation at encode time.
    pub sign_flip: bool,
    /// Maximum per-subject shift of structure centers, in voxels.
    pub jitter: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            seed: 0,
            subjects: 2,
            structures: 4,
            noise: 0.02,
            gamma: 0.5,
            sign_flip: true,
            jitter: 2.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::param(format!("phantom dims must be >= 8 per axis, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::param(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.subjects == 0 || self.structures == 0 {
            return Err(Error::param("subjects and structures must be >= 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::param("noise must be >= 0 and gamma > 0"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::param("jitter must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub id: String,
    pub a: Volume,
    pub b: Volume,
    pub labels: LabelVolume,
    /// Body region, the evaluation ROI.
    pub roi: Mask,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

const BODY_LEVEL: f64 = 0.2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Structures and their intensities in template space.
fn template(spec: &PhantomSpec) -> (Ellipsoid, Vec<(Ellipsoid, f64)>) {
    let mut rng = stream(spec.seed, 0);
    let dims = spec.dims.map(|d| d as f64);
    let center = dims.map(|d| (d - 1.0) / 2.0);
    let body = Ellipsoid { center, radii: dims.map(|d| 0.42 * d) };
    let n = spec.structures;
    // Evenly spaced levels, shuffled, keep structures separable by intensity.
    let mut levels: Vec<f64> = (0..n).map(|k| 0.35 + 0.6 * (k as f64 + 0.5) / n as f64).collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.random_range(0..=i));
    }
    let structures = levels
        .into_iter()
        .map(|level| {
            let radii = dims.map(|d| d * rng.random_range(0.19..0.31));
            let c = [0, 1, 2].map(|a| center[a] + body.radii[a] * rng.random_range(-0.45..0.45));
            (Ellipsoid { center: c, radii }, level)
        })
        .collect();
    (body, structures)
}

fn subject(spec: &PhantomSpec, index: usize) -> Result<PhantomSubject> {
    let (body_t, structs_t) = template(spec);
    let mut rng = stream(spec.seed, 1 + 2 * index as u64);
    let body_scale = rng.random_range(0.95..1.05);
    let body = Ellipsoid { center: body_t.center, radii: body_t.radii.map(|r| r * body_scale) };
    let j = f64::from(spec.jitter);
    let structures: Vec<(Ellipsoid, f64)> = structs_t
        .iter()
        .map(|(e, level)| {
            let center = e.center.map(|c| c + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 });
            let s = rng.random_range(0.85..1.15);
            (Ellipsoid { center, radii: e.radii.map(|r| r * s) }, *level)
        })
        .collect();
    let blobs: Vec<Blob> = (0..4)
        .map(|_| Blob {
            center: [0, 1, 2].map(|a| body.center[a] + body.radii[a] * rng.random_range(-0.8..0.8)),
            sigma: rng.random_range(4.0..8.0) * spec.dims.iter().min().copied().unwrap_or(32) as f64 / 32.0,
            amplitude: rng.random_range(-0.05..0.05),
        })
        .collect();

    let dims = spec.dims;
    let pos = |p: [usize; 3]| p.map(|v| v as f64);
    let label_at = |p: [usize; 3]| -> u32 {
        let x = pos(p);
        if !body.contains(x) {
            return 0;
        }
        structures.iter().enumerate().rev().find(|(_, (e, _))| e.contains(x)).map_or(0, |(k, _)| k as u32 + 1)
    };
    let labels = LabelVolume::from_fn(dims, spec.spacing, label_at);
    let roi = Mask::from_fn(dims, |p| body.contains(pos(p)));
    let a = Volume::from_fn(dims, |p| {
        let x = pos(p);
        if !body.contains(x) {
            return 0.0;
        }
        let l = labels.get(p);
        let base = if l == 0 { BODY_LEVEL } else { structures[l as usize - 1].1 };
        let smooth: f64 = blobs
            .iter()
            .map(|b| {
                let d2: f64 = (0..3).map(|k| (x[k] - b.center[k]).powi(2)).sum();
                b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum();
        (base + smooth).clamp(0.05, 1.0) as f32
    })
    .with_spacing(spec.spacing)?;

    let mut noise_rng = stream(spec.seed, 2 + 2 * index as u64);
    let normal = Normal::new(0.0f64, f64::from(spec.noise)).map_err(|e| Error::param(e.to_string()))?;
    let gamma = f64::from(spec.gamma);
    let b_data: Vec<f32> = a
        .data()
        .iter()
        .zip(roi.data())
        .map(|(&v, &inside)| {
            if !inside {
                return 0.0;
            }
            let n = normal.sample(&mut noise_rng);
            (f64::from(v).powf(gamma) + n) as f32
        })
        .collect();
    let b = Volume::new(dims, spec.spacing, b_data)?;
    Ok(PhantomSubject { id: format!("s{index}"), a, b, labels, roi })
}

pub fn generate(spec: &PhantomSpec) -> Result<Vec<PhantomSubject>> {
    spec.validate()?;
    (0..spec.subjects).map(|i| subject(spec, i)).collect()
}

/// One volume of a written phantom; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub subject: String,
    pub modality: String,
    pub role: Role,
    pub volume: String,
    pub labels: String,
    pub roi: String,
    pub negate_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub spec: PhantomSpec,
    pub entries: Vec<ManifestEntry>,
}

impl PhantomManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.as_ref().display())))
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes `<id>.vxvol`, `<subject>_labels.vxvol`, `<subject>_roi.vxvol` and
/// `manifest.json` into `dir`.
pub fn write_phantom(dir: impl AsRef<Path>, spec: &PhantomSpec) -> Result<PhantomManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for s in generate(spec)? {
        let labels = format!("{}_labels.vxvol", s.id);
        let roi = format!("{}_roi.vxvol", s.id);
        io::write_labels(dir.join(&labels), &s.labels)?;
        io::write_mask(dir.join(&roi), &s.roi, spec.spacing)?;
        for (modality, role, vol, negate) in [("A", Role::I, &s.a, false), ("B", Role::J, &s.b, spec.sign_flip)] {
            let id = format!("{}_{}", s.id, modality.to_lowercase());
            let volume = format!("{id}.vxvol");
            io::write_volume(dir.join(&volume), vol)?;
            entries.push(ManifestEntry {
                id,
                subject: s.id.clone(),
                modality: modality.to_string(),
                role,
                volume,
                labels: labels.clone(),
                roi: roi.clone(),
                negate_features: negate,
            });
        }
    }
    let manifest = PhantomManifest { spec: spec.clone(), entries };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{foreground_mask, MaskConfig};

    fn small() -> PhantomSpec {
        PhantomSpec { dims: [20, 18, 16], subjects: 2, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.a, y.a);
            assert_eq!(x.b, y.b);
            assert_eq!(x.labels, y.labels);
        }
        let c = generate(&PhantomSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a[0].a, c[0].a);
    }

    #[test]
    fn subjects_differ_and_labels_inside_body() {
        let s = generate(&small()).unwrap();
        assert_ne!(s[0].labels, s[1].labels);
        for subj in &s {
            assert!(subj.labels.present().len() >= 2);
            for (i, &l) in subj.labels.data().iter().enumerate() {
                if l != 0 {
                    assert!(subj.roi.data()[i]);
                }
            }
        }
    }

    #[test]
    fn modality_b_is_monotone_remap_without_noise() {
        let spec = PhantomSpec { noise: 0.0, ..small() };
        let s = &generate(&spec).unwrap()[0];
        let mut pairs: Vec<(f32, f32)> = s.a.data().iter().copied().zip(s.b.data().iter().copied()).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(s.a.data().iter().zip(s.b.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn background_zero_and_mask_recovers_body() {
        let s = &generate(&small()).unwrap()[0];
        for (i, &inside) in s.roi.data().iter().enumerate() {
            if !inside {
                assert_eq!((s.a.data()[i], s.b.data()[i]), (0.0, 0.0));
            }
        }
        let fg = foreground_mask(&s.b, &MaskConfig::default()).unwrap();
        let inter = fg.data().iter().zip(s.roi.data()).filter(|(a, b)| **a && **b).count();
        assert!(inter as f64 >= 0.9 * s.roi.count() as f64);
    }

    #[test]
    fn written_files_are_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = write_phantom(d1.path(), &small()).unwrap();
        let m2 = write_phantom(d2.path(), &small()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.entries.len(), 4);
        assert!(m1.entries[1].negate_features && !m1.entries[0].negate_features);
        for e in &m1.entries {
            for f in [&e.volume, &e.labels, &e.roi] {
                assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
            }
        }
        assert_eq!(PhantomManifest::load(d1.path().join(MANIFEST_NAME)).unwrap(), m1);
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(generate(&PhantomSpec { dims: [4, 32, 32], ..Default::default() }).is_err());
        assert!(generate(&PhantomSpec { gamma: 0.0, ..Default::default() }).is_err());
        assert!(generate(&PhantomSpec { subjects: 0, ..Default::default() }).is_err());
    }
}
