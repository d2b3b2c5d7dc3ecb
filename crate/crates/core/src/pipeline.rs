//! Fit and transform orchestration.
//!
//! Fit: normalize, mask, encode each axis, fit the per-axis PCA on foreground
//! patch tokens of both roles, build masked triplanar volumes, pool them to
//! the coarse grid and fit WPLS and/or PCA3D. Transform repeats the encoding
//! path without masks and applies a stored projection.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::encoder::{
    extract_axis_features, interpolate_slices, load_precomputed_axis, patch_foreground, triplanar_concat, unpatchify,
    EncoderKind, PatchFeatureStack, PatchGeometry, SliceEncoderSpec, SyntheticEncoder,
};
use crate::error::{Error, Result};
use crate::grid::{
    avg_pool, pool_mask, warp_features, warp_mask, Axis, DisplacementField, FeatureVolume, Mask, Normalization, Volume,
};
use crate::mask::foreground_mask;
use crate::mind::{mind_descriptor, MindConfig};
use crate::projection::{
    apply_axis_pca, apply_projection, concat_mind_hybrid, fit_axis_pca, fit_pca3d, fit_wpls, gradient_weights,
    l2_normalize_voxels, AxisPcaModel, BundleMetadata, FitDataset, FitPair, ProjectionBundle, Role,
};

/// A volume entering the pipeline. `id` names precomputed token files
/// `<dir>/<id>_<axis>.vxfeat`; `negate` flips the sign of every encoder token.
#[derive(Debug, Clone)]
pub struct VolumeInput {
    pub id: String,
    pub volume: Volume,
    pub negate: bool,
}

impl VolumeInput {
    pub fn new(id: impl Into<String>, volume: Volume) -> Self {
        VolumeInput { id: id.into(), volume, negate: false }
    }

    pub fn negated(mut self, negate: bool) -> Self {
        self.negate = negate;
        self
    }
}

/// A fitting pair: `fixed` plays role I, `moving` role J. Without a field the
/// correspondence is the identity.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub fixed: VolumeInput,
    pub moving: VolumeInput,
    pub field: Option<DisplacementField>,
}

enum SliceEncoder {
    Synthetic(SyntheticEncoder),
    Precomputed(PathBuf),
}

impl SliceEncoder {
    fn new(spec: &SliceEncoderSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match &spec.kind {
            EncoderKind::Synthetic { .. } => SliceEncoder::Synthetic(SyntheticEncoder::from_spec(spec)?),
            EncoderKind::Precomputed { dir } => SliceEncoder::Precomputed(dir.clone()),
        })
    }

    fn encode(
        &self,
        spec: &SliceEncoderSpec,
        input: &VolumeInput,
        vol: &Volume,
        axis: Axis,
        stride: usize,
    ) -> Result<PatchFeatureStack> {
        let mut stack = match self {
            SliceEncoder::Synthetic(enc) => extract_axis_features(vol, enc, axis, stride)?,
            SliceEncoder::Precomputed(dir) => {
                let path = dir.join(format!("{}_{}.vxfeat", input.id, axis.name()));
                load_precomputed_axis(&path, spec, axis, vol.dims())?
            }
        };
        if input.negate {
            stack.tokens.iter_mut().for_each(|t| *t = -*t);
        }
        Ok(stack)
    }
}

/// Per-axis tokens of one normalized volume.
struct Encoded {
    volume: Volume,
    stacks: Vec<PatchFeatureStack>,
    geoms: Vec<PatchGeometry>,
}

fn encode_volume(
    encoder: &SliceEncoder,
    spec: &SliceEncoderSpec,
    input: &VolumeInput,
    norm: Normalization,
    stride: usize,
) -> Result<Encoded> {
    let volume = norm.apply(&input.volume);
    let mut stacks = Vec::with_capacity(3);
    let mut geoms = Vec::with_capacity(3);
    for axis in Axis::ALL {
        let stack = encoder.encode(spec, input, &volume, axis, stride)?;
        geoms.push(PatchGeometry::new(volume.dims(), axis, f64::from(stack.scale), stack.patch_size)?);
        stacks.push(stack);
    }
    Ok(Encoded { volume, stacks, geoms })
}

/// Per-axis PCA, slice interpolation, unpatchify and concatenation. With
/// `fg`, tokens of background patches are zeroed.
fn triplanar(enc: &Encoded, models: &[AxisPcaModel], fg: Option<&[Vec<bool>]>) -> Result<FeatureVolume> {
    let dims = enc.volume.dims();
    let parts = (0..3)
        .map(|a| {
            let model = &models[a];
            let projected = enc.stacks[a].map_tokens(model.w.ncols(), |t| apply_axis_pca(t, model))?;
            let dense = interpolate_slices(&projected, enc.geoms[a].slices)?;
            unpatchify(&dense, &enc.geoms[a], dims, fg.map(|f| f[a].as_slice()))
        })
        .collect::<Result<Vec<_>>>()?;
    triplanar_concat(&parts[0], &parts[1], &parts[2])?.with_spacing(enc.volume.spacing())
}

/// Voxels whose patch is foreground on all three axes.
fn patch_cover(dims: [usize; 3], geoms: &[PatchGeometry], fg: &[Vec<bool>]) -> Mask {
    Mask::from_fn(dims, |q| {
        (0..3).all(|a| {
            let g = &geoms[a];
            let [ra, ca] = g.axis.in_plane();
            fg[a][q[a] * g.patches() + g.patch_of_voxel(q[ra], q[ca])]
        })
    })
}

/// Coarse voxels whose whole pooling block lies inside `mask`.
fn pool_all(mask: &Mask, factor: usize) -> Result<Mask> {
    let pooled = avg_pool(&mask.to_volume().into_features(), factor)?;
    Mask::new(pooled.dims(), pooled.data().iter().map(|&v| v == 1.0).collect())
}

/// Coarse fitting inputs of one pair, kept for inspection and checks.
#[derive(Debug, Clone)]
pub struct CoarsePair {
    pub fixed: FeatureVolume,
    pub moving: FeatureVolume,
    pub fixed_fg: Mask,
    pub moving_fg: Mask,
    pub valid: Mask,
    /// Coarse voxels untouched by fit-time patch masking.
    pub fixed_cover: Mask,
    pub moving_cover: Mask,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub bundle: ProjectionBundle,
    pub coarse: Vec<CoarsePair>,
}

struct Prepared {
    enc: Encoded,
    fg: Mask,
    patch_fg: Vec<Vec<bool>>,
}

fn prepare(encoder: &SliceEncoder, cfg: &PipelineConfig, input: &VolumeInput, role: Role) -> Result<Prepared> {
    let enc = encode_volume(encoder, &cfg.encoder, input, cfg.normalization(role), cfg.stride)
        .map_err(|e| e.context(format!("encode {}", input.id)))?;
    let fg = foreground_mask(&enc.volume, &cfg.mask).map_err(|e| e.context(format!("mask {}", input.id)))?;
    if fg.is_empty() {
        return Err(Error::numerical(format!("mask {}: foreground is empty", input.id)));
    }
    let patch_fg = enc.geoms.iter().map(|g| patch_foreground(&fg, g)).collect();
    Ok(Prepared { enc, fg, patch_fg })
}

/// Foreground-patch token rows of every encoded slice along axis `a`.
fn foreground_rows(p: &Prepared, a: usize, out: &mut Vec<f32>) {
    let stack = &p.enc.stacks[a];
    let patches = stack.patches;
    for (n, &s) in stack.slice_indices.iter().enumerate() {
        let block = stack.slice_tokens(n);
        for k in 0..patches {
            if p.patch_fg[a][s * patches + k] {
                out.extend_from_slice(&block[k * stack.channels..(k + 1) * stack.channels]);
            }
        }
    }
}

pub fn fit(pairs: &[PairInput], cfg: &PipelineConfig) -> Result<FitOutput> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::param("fit needs at least one pair"));
    }
    if !cfg.methods.wpls() && !cfg.methods.pca3d() {
        return Err(Error::param("no projection method selected"));
    }
    let encoder = SliceEncoder::new(&cfg.encoder)?;
    let prepared = pairs
        .par_iter()
        .map(|p| {
            if p.fixed.volume.dims() != p.moving.volume.dims() && p.field.is_none() {
                return Err(Error::shape(format!(
                    "pair {}/{}: dims {:?} vs {:?} need a displacement field",
                    p.fixed.id,
                    p.moving.id,
                    p.fixed.volume.dims(),
                    p.moving.volume.dims()
                )));
            }
            Ok((prepare(&encoder, cfg, &p.fixed, Role::I)?, prepare(&encoder, cfg, &p.moving, Role::J)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let channels = prepared[0].0.enc.stacks[0].channels;
    let axis_models = (0..3)
        .map(|a| {
            let mut rows = Vec::new();
            for (f, m) in &prepared {
                foreground_rows(f, a, &mut rows);
                foreground_rows(m, a, &mut rows);
            }
            log::info!("axis {}: {} foreground tokens", Axis::ALL[a].name(), rows.len() / channels);
            fit_axis_pca(Axis::ALL[a], &rows, channels, cfg.k)
                .map_err(|e| e.context(format!("axis PCA {}", Axis::ALL[a].name())))
        })
        .collect::<Result<Vec<_>>>()?;

    let coarse = pairs
        .par_iter()
        .zip(&prepared)
        .map(|(input, (f, m))| -> Result<CoarsePair> {
            let tag = |e: Error| e.context(format!("pair {}/{}", input.fixed.id, input.moving.id));
            let zf = triplanar(&f.enc, &axis_models, Some(&f.patch_fg)).map_err(tag)?;
            let mut zm = triplanar(&m.enc, &axis_models, Some(&m.patch_fg)).map_err(tag)?;
            let mut mfg = m.fg.clone();
            let mut mcover = patch_cover(m.enc.volume.dims(), &m.enc.geoms, &m.patch_fg);
            if let Some(field) = &input.field {
                if field.dims() != zf.dims() {
                    return Err(tag(Error::shape(format!("field dims {:?} vs fixed {:?}", field.dims(), zf.dims()))));
                }
                zm = warp_features(&zm, field);
                mfg = warp_mask(&mfg, m.enc.volume.spacing(), field).map_err(tag)?;
                mcover = warp_mask(&mcover, m.enc.volume.spacing(), field).map_err(tag)?;
            }
            let fcover = patch_cover(f.enc.volume.dims(), &f.enc.geoms, &f.patch_fg);
            let pool = |z: &FeatureVolume| avg_pool(z, cfg.grid_sp).map_err(tag);
            let pair = FitPair::new(
                pool(&zf)?,
                pool(&zm)?,
                pool_mask(&f.fg, cfg.grid_sp).map_err(tag)?,
                pool_mask(&mfg, cfg.grid_sp).map_err(tag)?,
            )
            .map_err(tag)?;
            Ok(CoarsePair {
                fixed_cover: pool_all(&fcover, cfg.grid_sp)?,
                moving_cover: pool_all(&mcover, cfg.grid_sp)?,
                fixed: pair.fixed,
                moving: pair.moving,
                fixed_fg: pair.fixed_fg,
                moving_fg: pair.moving_fg,
                valid: pair.valid,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ds = FitDataset {
        pairs: coarse
            .iter()
            .map(|c| FitPair::new(c.fixed.clone(), c.moving.clone(), c.fixed_fg.clone(), c.moving_fg.clone()))
            .collect::<Result<Vec<_>>>()?,
    };
    let wpls = if cfg.methods.wpls() {
        let weights = ds
            .pairs
            .par_iter()
            .map(|p| gradient_weights(&p.fixed, &p.valid))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.context("weights"))?;
        Some(fit_wpls(&ds, &weights, cfg.k_proj, cfg.epsilon).map_err(|e| e.context("WPLS"))?)
    } else {
        None
    };
    let pca3d =
        if cfg.methods.pca3d() { Some(fit_pca3d(&ds, cfg.k_proj).map_err(|e| e.context("PCA3D"))?) } else { None };
    let bundle = ProjectionBundle {
        axis: axis_models,
        wpls,
        pca3d,
        metadata: BundleMetadata {
            k: cfg.k,
            k_proj: cfg.k_proj,
            epsilon: cfg.epsilon,
            grid_sp: cfg.grid_sp,
            stride: cfg.stride,
            mask: cfg.mask,
            encoder: cfg.encoder.clone(),
            normalization: cfg.normalization,
            pairs: pairs.len(),
        },
    };
    bundle.check()?;
    Ok(FitOutput { bundle, coarse })
}

/// Which stored projection a transform applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Wpls,
    Pca3d,
    /// The `3k`-channel triplanar features before the second stage.
    Triplanar,
    /// One axis' `k`-channel PCA features.
    Axis(Axis),
}

impl std::str::FromStr for Projection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wpls" => Ok(Projection::Wpls),
            "pca3d" => Ok(Projection::Pca3d),
            "triplanar" => Ok(Projection::Triplanar),
            _ => match s.strip_prefix("axis-") {
                Some(a) => Ok(Projection::Axis(a.to_uppercase().parse()?)),
                None => Err(Error::param(format!(
                    "unknown projection '{s}', expected wpls, pca3d, triplanar or axis-{{s,c,a}}"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TransformOptions {
    /// Required for WPLS; also selects the stored normalization.
    pub role: Option<Role>,
    /// Overrides the normalization stored for the role.
    pub normalization: Option<Normalization>,
    pub l2: bool,
    /// Concatenate `[0.1 * z[0..16] | MIND]` after any L2 step.
    pub hybrid_mind: Option<MindConfig>,
}

/// Dense features for a single volume. Needs neither a mask nor a partner.
pub fn transform(
    bundle: &ProjectionBundle,
    input: &VolumeInput,
    projection: Projection,
    opts: &TransformOptions,
) -> Result<FeatureVolume> {
    bundle.check()?;
    let meta = &bundle.metadata;
    let norm = opts.normalization.unwrap_or_else(|| meta.normalization(opts.role.unwrap_or(Role::I)));
    let encoder = SliceEncoder::new(&meta.encoder)?;
    let enc = encode_volume(&encoder, &meta.encoder, input, norm, meta.stride)
        .map_err(|e| e.context(format!("encode {}", input.id)))?;
    let z = match projection {
        Projection::Axis(axis) => {
            let a = axis.index();
            let model = &bundle.axis[a];
            let projected = enc.stacks[a].map_tokens(model.w.ncols(), |t| apply_axis_pca(t, model))?;
            let dense = interpolate_slices(&projected, enc.geoms[a].slices)?;
            unpatchify(&dense, &enc.geoms[a], enc.volume.dims(), None)?.with_spacing(enc.volume.spacing())?
        }
        _ => {
            let z = triplanar(&enc, &bundle.axis, None)?;
            match projection {
                Projection::Wpls => {
                    let w = bundle.wpls.as_ref().ok_or_else(|| Error::param("bundle has no WPLS projection"))?;
                    let role = opts.role.ok_or_else(|| Error::param("role (I or J) is required for WPLS"))?;
                    let (mean, m) = w.for_role(role);
                    apply_projection(&z, mean, m)?
                }
                Projection::Pca3d => {
                    let p = bundle.pca3d.as_ref().ok_or_else(|| Error::param("bundle has no PCA3D projection"))?;
                    apply_projection(&z, &p.mean, &p.w)?
                }
                _ => z,
            }
        }
    };
    let z = if opts.l2 { l2_normalize_voxels(&z) } else { z };
    match &opts.hybrid_mind {
        Some(mc) => concat_mind_hybrid(&z, &mind_descriptor(&enc.volume, mc)?),
        None => Ok(z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Methods;
    use crate::phantom::{generate, PhantomSpec};

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            k: 6,
            k_proj: 4,
            grid_sp: 2,
            encoder: SliceEncoderSpec::synthetic(7, 12, 4, 1.0),
            normalization: [Normalization::P99, Normalization::P99],
            ..Default::default()
        }
    }

    fn phantom_pairs(spec: &PhantomSpec) -> Vec<PairInput> {
        generate(spec)
            .unwrap()
            .into_iter()
            .map(|s| PairInput {
                fixed: VolumeInput::new(format!("{}_a", s.id), s.a),
                moving: VolumeInput::new(format!("{}_b", s.id), s.b).negated(spec.sign_flip),
                field: None,
            })
            .collect()
    }

    fn spec() -> PhantomSpec {
        PhantomSpec { dims: [16, 16, 16], subjects: 1, ..Default::default() }
    }

    #[test]
    fn fit_produces_consistent_bundle() {
        let out = fit(&phantom_pairs(&spec()), &small_cfg()).unwrap();
        let b = &out.bundle;
        assert_eq!(b.axis.len(), 3);
        assert_eq!(b.triplanar_channels(), 18);
        assert_eq!(b.wpls.as_ref().unwrap().w_i.shape(), (18, 4));
        assert_eq!(b.pca3d.as_ref().unwrap().w.shape(), (18, 4));
        assert_eq!(out.coarse[0].fixed.dims(), [8, 8, 8]);
        let w = &b.pca3d.as_ref().unwrap().w;
        let g = w.transpose() * w;
        assert!((g - nalgebra::DMatrix::identity(4, 4)).abs().max() < 1e-10);
    }

    #[test]
    fn transform_is_deterministic_and_role_checked() {
        let pairs = phantom_pairs(&spec());
        let out = fit(&pairs, &small_cfg()).unwrap();
        let opts = TransformOptions { role: Some(Role::J), ..Default::default() };
        let a = transform(&out.bundle, &pairs[0].moving, Projection::Wpls, &opts).unwrap();
        let b = transform(&out.bundle, &pairs[0].moving, Projection::Wpls, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.dims(), a.channels()), ([16, 16, 16], 4));
        let err = transform(&out.bundle, &pairs[0].moving, Projection::Wpls, &TransformOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Param(_)));
        // PCA3D ignores the role once the normalization is the same.
        let p_i = transform(&out.bundle, &pairs[0].fixed, Projection::Pca3d, &TransformOptions::default()).unwrap();
        let p_j = transform(
            &out.bundle,
            &pairs[0].fixed,
            Projection::Pca3d,
            &TransformOptions { role: Some(Role::J), ..Default::default() },
        )
        .unwrap();
        assert_eq!(p_i, p_j);
        for (proj, c) in [(Projection::Triplanar, 18), (Projection::Axis(Axis::C), 6)] {
            assert_eq!(
                transform(&out.bundle, &pairs[0].fixed, proj, &TransformOptions::default()).unwrap().channels(),
                c
            );
        }
    }

    #[test]
    fn transform_matches_fit_time_coarse_features() {
        let pairs = phantom_pairs(&spec());
        let cfg = small_cfg();
        let out = fit(&pairs, &cfg).unwrap();
        let c = &out.coarse[0];
        assert!(c.fixed_cover.count() > 0);
        let z = transform(&out.bundle, &pairs[0].fixed, Projection::Triplanar, &TransformOptions::default()).unwrap();
        let pooled = avg_pool(&z, cfg.grid_sp).unwrap();
        for idx in c.fixed_cover.indices() {
            for (x, y) in pooled.voxel(idx).iter().zip(c.fixed.voxel(idx)) {
                assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn negated_partner_aligns_under_wpls_only() {
        let s = generate(&spec()).unwrap().remove(0);
        let pairs = vec![PairInput {
            fixed: VolumeInput::new("a", s.a.clone()),
            moving: VolumeInput::new("a_neg", s.a.clone()).negated(true),
            field: None,
        }];
        let out = fit(&pairs, &small_cfg()).unwrap();
        let hi = transform(
            &out.bundle,
            &pairs[0].fixed,
            Projection::Wpls,
            &TransformOptions { role: Some(Role::I), ..Default::default() },
        )
        .unwrap();
        let hj = transform(
            &out.bundle,
            &pairs[0].moving,
            Projection::Wpls,
            &TransformOptions { role: Some(Role::J), ..Default::default() },
        )
        .unwrap();
        let scale = hi.data().iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        for (x, y) in hi.data().iter().zip(hj.data()) {
            assert!((x - y).abs() <= 1e-5 * scale, "{x} vs {y}");
        }
        let pi = transform(&out.bundle, &pairs[0].fixed, Projection::Pca3d, &TransformOptions::default()).unwrap();
        let pj = transform(&out.bundle, &pairs[0].moving, Projection::Pca3d, &TransformOptions::default()).unwrap();
        let lead = |f: &FeatureVolume| f.data().iter().step_by(f.channels()).map(|&v| f64::from(v)).collect::<Vec<_>>();
        let (u, v) = (lead(&pi), lead(&pj));
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let cos = dot / (u.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|b| b * b).sum::<f64>().sqrt());
        assert!(cos <= -0.99, "{cos}");
    }

    #[test]
    fn single_method_and_errors() {
        let pairs = phantom_pairs(&spec());
        let cfg = PipelineConfig { methods: Methods::Pca3d, ..small_cfg() };
        let out = fit(&pairs, &cfg).unwrap();
        assert!(out.bundle.wpls.is_none());
        let err = transform(
            &out.bundle,
            &pairs[0].fixed,
            Projection::Wpls,
            &TransformOptions { role: Some(Role::I), ..Default::default() },
        )
        .unwrap_err();
        assert!(err.to_string().contains("no WPLS"));
        assert!(fit(&[], &cfg).is_err());
        let flat = PairInput {
            fixed: VolumeInput::new("c", Volume::filled([16, 16, 16], 1.0)),
            moving: pairs[0].moving.clone(),
            field: None,
        };
        let err = fit(&[flat], &small_cfg()).unwrap_err();
        assert!(err.to_string().contains("mask c"), "{err}");
    }

    #[test]
    fn projection_names() {
        assert_eq!("wpls".parse::<Projection>().unwrap(), Projection::Wpls);
        assert_eq!("axis-a".parse::<Projection>().unwrap(), Projection::Axis(Axis::A));
        assert!("axis-x".parse::<Projection>().is_err());
        assert!("pls".parse::<Projection>().is_err());
    }
}
