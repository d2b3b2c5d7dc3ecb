//! Subcommand bodies.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;
use vxc_core::bandslice::{bandslice_align, BandSliceConfig};
use vxc_core::config::{Methods, PipelineConfig};
use vxc_core::correspondence::{
    aggregate_landmark_errors, categorize, center_of_mass, knn_segment, landmark_error, localize, Aggregation,
    TransferCategory,
};
use vxc_core::grid::{resample_affine_features, AxisAffine, Normalization};
use vxc_core::io;
use vxc_core::mask::{foreground_mask, MaskConfig};
use vxc_core::metrics::{foreground_dice, hd95, sd_log_j, MetricReport};
use vxc_core::mind::{mind_descriptor, MindConfig};
use vxc_core::phantom::{write_phantom, ManifestEntry, PhantomManifest, PhantomSpec, MANIFEST_NAME};
use vxc_core::pipeline::{
    fit as fit_pipeline, transform as transform_volume, PairInput, Projection, TransformOptions, VolumeInput,
};
use vxc_core::projection::Role;
use vxc_core::{Error, FeatureVolume, Interp, LabelVolume, Mask, ProjectionBundle};

use crate::{
    BandsliceArgs, EvalArgs, FitArgs, InspectArgs, KnnArgs, LandmarkArgs, MaskArgs, MetricsArgs, MindArgs, PhantomArgs,
    TransformArgs,
};

fn param(msg: impl Into<String>) -> anyhow::Error {
    Error::Param(msg.into()).into()
}

fn format_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Format(msg.into()).into()
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    toml::from_str(&text).map_err(|e| param(format!("{}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn output_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("create {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_reports(path: Option<&Path>, rows: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(output_writer(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| format_err(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn load_config(args: &FitArgs) -> Result<PipelineConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => read_toml(path)?,
        (None, Some(name)) => PipelineConfig::preset(name)?,
        (None, None) => PipelineConfig::default(),
    };
    if let Some(m) = &args.methods {
        cfg.methods = m.parse::<Methods>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Deserialize)]
struct PairRow {
    fixed: PathBuf,
    moving: PathBuf,
    #[serde(default)]
    field: Option<PathBuf>,
    #[serde(default)]
    fixed_negate: Option<bool>,
    #[serde(default)]
    moving_negate: Option<bool>,
    #[serde(default)]
    fixed_id: Option<String>,
    #[serde(default)]
    moving_id: Option<String>,
}

fn load_input(dir: &Path, file: &Path, id: Option<String>, negate: bool) -> Result<VolumeInput> {
    let path = dir.join(file);
    let vol = io::read_volume(&path).with_context(|| format!("read {}", path.display()))?;
    Ok(VolumeInput::new(id.unwrap_or_else(|| stem(file)), vol).negated(negate))
}

fn pairs_from_csv(path: &Path) -> Result<Vec<PairInput>> {
    let dir = base_dir(path);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("read {}", path.display()))?;
    let mut pairs = Vec::new();
    for (n, row) in rdr.deserialize::<PairRow>().enumerate() {
        let row = row.map_err(|e| format_err(format!("{} row {}: {e}", path.display(), n + 1)))?;
        let field = match &row.field {
            Some(f) => Some(io::read_displacement(dir.join(f)).with_context(|| format!("read {}", f.display()))?),
            None => None,
        };
        pairs.push(PairInput {
            fixed: load_input(&dir, &row.fixed, row.fixed_id, row.fixed_negate.unwrap_or(false))?,
            moving: load_input(&dir, &row.moving, row.moving_id, row.moving_negate.unwrap_or(false))?,
            field,
        });
    }
    Ok(pairs)
}

fn pairs_from_manifest(path: &Path) -> Result<Vec<PairInput>> {
    let dir = base_dir(path);
    let manifest = PhantomManifest::load(path)?;
    let mut by_subject: BTreeMap<&str, [Option<&ManifestEntry>; 2]> = BTreeMap::new();
    for e in &manifest.entries {
        let slot = match e.role {
            Role::I => 0,
            Role::J => 1,
        };
        by_subject.entry(&e.subject).or_default()[slot] = Some(e);
    }
    let mut pairs = Vec::new();
    for (subject, slots) in by_subject {
        let [Some(f), Some(m)] = slots else {
            return Err(param(format!("subject {subject} needs one role-I and one role-J volume")));
        };
        pairs.push(PairInput {
            fixed: load_input(&dir, Path::new(&f.volume), Some(f.id.clone()), f.negate_features)?,
            moving: load_input(&dir, Path::new(&m.volume), Some(m.id.clone()), m.negate_features)?,
            field: None,
        });
    }
    Ok(pairs)
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let pairs = match (&args.pairs, &args.manifest) {
        (Some(p), _) => pairs_from_csv(p)?,
        (None, Some(m)) => pairs_from_manifest(m)?,
        (None, None) => return Err(param("one of --pairs or --manifest is required")),
    };
    if pairs.is_empty() {
        return Err(param("no training pairs"));
    }
    log::info!("fitting on {} pairs", pairs.len());
    let out = fit_pipeline(&pairs, &cfg)?;
    out.bundle.save(&args.output).with_context(|| format!("write {}", args.output.display()))?;
    let summary = json!({
        "bundle": args.output,
        "pairs": pairs.len(),
        "k": cfg.k,
        "k_proj": cfg.k_proj,
        "wpls": out.bundle.wpls.is_some(),
        "pca3d": out.bundle.pca3d.is_some(),
    });
    println!("{summary}");
    Ok(())
}

fn transform_options(args: &TransformArgs, role: Option<Role>) -> Result<TransformOptions> {
    Ok(TransformOptions {
        role,
        normalization: args.normalization.as_deref().map(str::parse::<Normalization>).transpose()?,
        l2: args.l2,
        hybrid_mind: args.hybrid_mind.then(MindConfig::hybrid),
    })
}

pub fn transform(args: &TransformArgs) -> Result<()> {
    let bundle = ProjectionBundle::load(&args.bundle).with_context(|| format!("read {}", args.bundle.display()))?;
    let projection: Projection = args.projection.parse()?;
    let role_override = args.role.as_deref().map(str::parse::<Role>).transpose()?;

    if let Some(input) = &args.input {
        let output = args.output.as_ref().ok_or_else(|| param("--output is required with --input"))?;
        let vol = io::read_volume(input).with_context(|| format!("read {}", input.display()))?;
        let id = args.id.clone().unwrap_or_else(|| stem(input));
        let z = transform_volume(
            &bundle,
            &VolumeInput::new(id.clone(), vol).negated(args.negate),
            projection,
            &transform_options(args, role_override)?,
        )?;
        io::write_features(output, &z).with_context(|| format!("write {}", output.display()))?;
        println!("{}", json!({ "id": id, "output": output, "dims": z.dims(), "channels": z.channels() }));
        return Ok(());
    }

    let manifest_path = args.manifest.as_ref().ok_or_else(|| param("one of --input or --manifest is required"))?;
    let out_dir = args.output_dir.as_ref().ok_or_else(|| param("--output-dir is required with --manifest"))?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("create {}", out_dir.display()))?;
    let dir = base_dir(manifest_path);
    let manifest = PhantomManifest::load(manifest_path)?;
    let written: Vec<String> = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<String> {
            let input = load_input(&dir, Path::new(&e.volume), Some(e.id.clone()), e.negate_features || args.negate)?;
            let opts = transform_options(args, Some(role_override.unwrap_or(e.role)))?;
            let z = transform_volume(&bundle, &input, projection, &opts)?;
            let path = out_dir.join(format!("{}.vxfeat", e.id));
            io::write_features(&path, &z).with_context(|| format!("write {}", path.display()))?;
            Ok(e.id.clone())
        })
        .collect::<Result<_>>()?;
    println!("{}", json!({ "output_dir": out_dir, "volumes": written }));
    Ok(())
}

fn is_volume_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "vxvol")
}

/// MIND features for a volume file, the stored features otherwise.
fn alignment_features(path: &Path, mind: &MindConfig) -> Result<FeatureVolume> {
    if is_volume_file(path) {
        let vol = io::read_volume(path).with_context(|| format!("read {}", path.display()))?;
        Ok(mind_descriptor(&vol, mind)?)
    } else {
        io::read_features(path).with_context(|| format!("read {}", path.display()))
    }
}

pub fn bandslice(args: &BandsliceArgs) -> Result<()> {
    let cfg = BandSliceConfig {
        eta: args.eta,
        rho: args.rho,
        sigma_min: args.sigma_min,
        sigma_max: args.sigma_max,
        rounds: args.rounds,
        ..BandSliceConfig::default()
    };
    let mind = MindConfig::new(args.mind_radius, args.mind_dilation);
    mind.validate()?;
    let fi = alignment_features(&args.fixed, &mind)?;
    let fj = alignment_features(&args.moving, &mind)?;
    let fits = bandslice_align(&fi, &fj, &cfg)?;
    let text = serde_json::to_string_pretty(&json!({ "fits": fits }))?;
    match &args.output {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("write {}", p.display()))?,
        None => println!("{text}"),
    }
    if let Some(out) = &args.resampled {
        let params: [AxisAffine; 3] = fits.map(|f| f.affine());
        if is_volume_file(&args.moving) {
            let vol = io::read_volume(&args.moving)?;
            let res = resample_affine_features(&vol.clone().into_features(), &params, Interp::Trilinear, fi.dims())?;
            let res = vxc_core::Volume::new(res.dims(), vol.spacing(), res.into_data())?;
            io::write_volume(out, &res)?;
        } else {
            io::write_features(out, &resample_affine_features(&fj, &params, Interp::Trilinear, fi.dims())?)?;
        }
    }
    Ok(())
}

struct EvalData {
    entries: Vec<ManifestEntry>,
    features: Vec<FeatureVolume>,
    labels: HashMap<String, LabelVolume>,
    rois: HashMap<String, Mask>,
}

impl EvalData {
    fn load(args: &EvalArgs) -> Result<Self> {
        let dir = base_dir(&args.manifest);
        let manifest = PhantomManifest::load(&args.manifest)?;
        let mut labels = HashMap::new();
        let mut rois = HashMap::new();
        let mut features = Vec::new();
        for e in &manifest.entries {
            let path = args.features_dir.join(format!("{}.vxfeat", e.id));
            features.push(io::read_features(&path).with_context(|| format!("read {}", path.display()))?);
            if !labels.contains_key(&e.labels) {
                let l = io::read_labels(dir.join(&e.labels)).with_context(|| format!("read {}", e.labels))?;
                labels.insert(e.labels.clone(), l);
            }
            if !rois.contains_key(&e.roi) {
                let m = io::read_mask(dir.join(&e.roi)).with_context(|| format!("read {}", e.roi))?;
                rois.insert(e.roi.clone(), m);
            }
        }
        Ok(EvalData { entries: manifest.entries, features, labels, rois })
    }

    /// Ordered (query, key, category) index triples within the category set.
    fn pairs(&self, categories: &[TransferCategory]) -> Vec<(usize, usize, TransferCategory)> {
        let n = self.entries.len();
        let mut out = Vec::new();
        for q in 0..n {
            for k in 0..n {
                let (eq, ek) = (&self.entries[q], &self.entries[k]);
                let cat = categorize(&eq.subject, &eq.modality, &ek.subject, &ek.modality);
                if categories.contains(&cat) {
                    out.push((q, k, cat));
                }
            }
        }
        out
    }
}

fn parse_categories(arg: Option<&str>, default: &[TransferCategory]) -> Result<Vec<TransferCategory>> {
    match arg {
        None => Ok(default.to_vec()),
        Some(s) => Ok(s.split(',').map(|c| c.trim().parse()).collect::<vxc_core::Result<_>>()?),
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn knn(args: &KnnArgs) -> Result<()> {
    if args.k == 0 {
        return Err(param("k must be >= 1"));
    }
    let cats = parse_categories(args.eval.categories.as_deref(), &TransferCategory::ALL)?;
    let data = EvalData::load(&args.eval)?;
    if let Some(d) = &args.predictions_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut rows = Vec::new();
    let mut fg: BTreeMap<TransferCategory, Vec<f64>> = BTreeMap::new();
    for (q, k, cat) in data.pairs(&cats) {
        let (eq, ek) = (&data.entries[q], &data.entries[k]);
        let truth = &data.labels[&eq.labels];
        let pred = knn_segment(
            &data.features[q],
            &data.features[k],
            &data.labels[&ek.labels],
            &data.rois[&eq.roi],
            &data.rois[&ek.roi],
            args.k,
            args.exclude_self && q == k,
        )
        .with_context(|| format!("knn {} <- {}", eq.id, ek.id))?;
        if let Some(d) = &args.predictions_dir {
            io::write_labels(d.join(format!("{}_from_{}.vxvol", eq.id, ek.id)), &pred)?;
        }
        let (per_label, mean) = foreground_dice(&pred, truth)?;
        let row = |metric: &str, label: u32, value: f64| MetricReport {
            query_id: eq.id.clone(),
            key_id: ek.id.clone(),
            category: cat.name().to_string(),
            method: args.eval.method.clone(),
            metric: metric.to_string(),
            label,
            value,
        };
        rows.extend(per_label.iter().map(|&(l, d)| row("dice", l, d)));
        rows.push(row("foreground_dice", 0, mean));
        fg.entry(cat).or_default().push(mean);
    }
    write_reports(args.eval.output.as_deref(), &rows)?;
    for (cat, values) in &fg {
        let (mean, sd) = mean_sd(values);
        eprintln!("{} {cat} foreground_dice mean={mean:.4} sd={sd:.4} n={}", args.eval.method, values.len());
    }
    Ok(())
}

pub fn landmark(args: &LandmarkArgs) -> Result<()> {
    let aggregation: Aggregation = args.aggregation.parse()?;
    let cats = parse_categories(
        args.eval.categories.as_deref(),
        &[TransferCategory::DS, TransferCategory::DM, TransferCategory::G],
    )?;
    let wanted: Option<Vec<u32>> = args
        .labels
        .as_deref()
        .map(|s| {
            s.split(',')
                .map(|t| t.trim().parse::<u32>().map_err(|e| param(format!("label '{t}': {e}"))))
                .collect::<Result<_>>()
        })
        .transpose()?;
    let data = EvalData::load(&args.eval)?;
    let mut rows = Vec::new();
    let mut errors: BTreeMap<TransferCategory, BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    for (q, k, cat) in data.pairs(&cats) {
        let (eq, ek) = (&data.entries[q], &data.entries[k]);
        let (lq, lk) = (&data.labels[&eq.labels], &data.labels[&ek.labels]);
        let present_k = lk.present();
        let labels: Vec<u32> = lq
            .present()
            .into_iter()
            .filter(|l| *l != 0 && present_k.contains(l))
            .filter(|l| wanted.as_ref().is_none_or(|w| w.contains(l)))
            .collect();
        for label in labels {
            let src = center_of_mass(lq, label)?;
            let dst = center_of_mass(lk, label)?;
            let exclude = (q == k).then_some(src.voxel);
            let m = localize(&data.features[q], src.voxel, &data.features[k], &data.rois[&ek.roi], exclude)
                .with_context(|| format!("localize label {label} {} -> {}", eq.id, ek.id))?;
            let err = landmark_error(m.voxel, dst.voxel, lk.spacing());
            rows.push(MetricReport {
                query_id: eq.id.clone(),
                key_id: ek.id.clone(),
                category: cat.name().to_string(),
                method: args.eval.method.clone(),
                metric: "landmark_error".to_string(),
                label,
                value: err,
            });
            errors.entry(cat).or_default().entry(label).or_default().push(err);
        }
    }
    write_reports(args.eval.output.as_deref(), &rows)?;
    for (cat, per_label) in &errors {
        let s = aggregate_landmark_errors(per_label, aggregation)?;
        eprintln!(
            "{} {cat} landmark_error mean={:.3} sd={:.3} n={} ({})",
            args.eval.method, s.mean, s.sd, s.count, args.aggregation
        );
    }
    Ok(())
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let truth = io::read_labels(&args.truth).with_context(|| format!("read {}", args.truth.display()))?;
    let pred = io::read_labels(&args.pred).with_context(|| format!("read {}", args.pred.display()))?;
    let row = |metric: &str, label: u32, value: f64| MetricReport {
        query_id: stem(&args.pred),
        key_id: stem(&args.truth),
        category: String::new(),
        method: args.method.clone(),
        metric: metric.to_string(),
        label,
        value,
    };
    let mut rows = Vec::new();
    let (per_label, mean) = foreground_dice(&pred, &truth)?;
    for &(l, d) in &per_label {
        rows.push(row("dice", l, d));
        let (a, b) = (pred.mask_of(l), truth.mask_of(l));
        if !a.is_empty() && !b.is_empty() {
            rows.push(row("hd95", l, hd95(&a, &b, truth.spacing())?));
        }
    }
    rows.push(row("foreground_dice", 0, mean));
    if let Some(f) = &args.field {
        let field = io::read_displacement(f).with_context(|| format!("read {}", f.display()))?;
        let stats = sd_log_j(&field);
        rows.push(row("sd_log_j", 0, stats.sd_log_j));
        rows.push(row("fold_fraction", 0, stats.fold_fraction()));
    }
    write_reports(args.output.as_deref(), &rows)
}

pub fn mind(args: &MindArgs) -> Result<()> {
    let norm: Normalization = args.normalization.parse()?;
    let cfg = MindConfig::new(args.radius, args.dilation);
    cfg.validate()?;
    let vol = io::read_volume(&args.input).with_context(|| format!("read {}", args.input.display()))?;
    let feat = mind_descriptor(&norm.apply(&vol), &cfg)?;
    io::write_features(&args.output, &feat).with_context(|| format!("write {}", args.output.display()))
}

pub fn mask(args: &MaskArgs) -> Result<()> {
    let norm: Normalization = args.normalization.parse()?;
    let cfg = MaskConfig { tau: args.tau, mind: MindConfig::new(args.radius, args.dilation) };
    cfg.validate()?;
    let vol = io::read_volume(&args.input).with_context(|| format!("read {}", args.input.display()))?;
    let m = foreground_mask(&norm.apply(&vol), &cfg)?;
    io::write_mask(&args.output, &m, vol.spacing()).with_context(|| format!("write {}", args.output.display()))?;
    println!("{}", json!({ "foreground": m.count(), "voxels": m.data().len() }));
    Ok(())
}

pub fn phantom(args: &PhantomArgs) -> Result<()> {
    let mut spec: PhantomSpec = match &args.config {
        Some(p) => read_toml(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.subjects {
        spec.subjects = v;
    }
    if let Some(v) = args.structures {
        spec.structures = v;
    }
    if let Some(d) = &args.dims {
        spec.dims = <[usize; 3]>::try_from(d.as_slice())
            .map_err(|_| param(format!("--dims needs 3 values, got {}", d.len())))?;
    }
    if let Some(v) = args.noise {
        spec.noise = v;
    }
    if let Some(v) = args.gamma {
        spec.gamma = v;
    }
    if args.no_sign_flip {
        spec.sign_flip = false;
    }
    let manifest = write_phantom(&args.output, &spec)?;
    println!("{}", json!({ "manifest": args.output.join(MANIFEST_NAME), "volumes": manifest.entries.len() }));
    Ok(())
}

pub fn bundle_inspect(args: &InspectArgs) -> Result<()> {
    let b = ProjectionBundle::load(&args.bundle).with_context(|| format!("read {}", args.bundle.display()))?;
    let axes: Vec<_> = b
        .axis
        .iter()
        .map(|m| json!({ "axis": m.axis.name(), "channels": m.w.nrows(), "k": m.w.ncols(), "explained": m.explained }))
        .collect();
    let summary = json!({
        "metadata": b.metadata,
        "triplanar_channels": b.triplanar_channels(),
        "axis": axes,
        "wpls": b.wpls.as_ref().map(|w| json!({ "k_proj": w.w_i.ncols(), "singular_values": w.singular_values })),
        "pca3d": b.pca3d.as_ref().map(|p| json!({ "k_proj": p.w.ncols(), "explained": p.explained })),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
