//! Command-line front end for `vxc-core`.
//!
//! The `vxc` binary wraps the fit/transform pipeline, BandSlice, the
//! correspondence evaluations and the phantom generator. Each subcommand is a
//! thin layer over the matching library call; argument types live here and
//! the command bodies in [`commands`].
//!
//! Exit codes: 0 success, 2 invalid arguments or configuration, 3 numerical
//! failure, 4 unreadable or malformed files.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;

#[derive(Debug, Parser)]
#[command(name = "vxc", version, about = "Modality-stable voxelwise features: fit, transform and evaluate")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "VXC_JOBS", default_value_t = 0)]
    pub jobs: usize,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit per-axis PCA plus WPLS and/or PCA3D on paired volumes.
    Fit(FitArgs),
    /// Apply a fitted bundle to one volume or every volume of a manifest.
    Transform(TransformArgs),
    /// Six-parameter slice-band alignment of a moving volume to a fixed one.
    Bandslice(BandsliceArgs),
    /// Voxelwise kNN label transfer over all manifest pairs.
    Knn(KnnArgs),
    /// Registration-free landmark localization over all manifest pairs.
    Landmark(LandmarkArgs),
    /// Dice, HD95 and deformation statistics for a prediction.
    Metrics(MetricsArgs),
    /// 12-channel MIND descriptor of a volume.
    Mind(MindArgs),
    /// Automatic foreground mask of a volume.
    Mask(MaskArgs),
    /// Write a deterministic two-modality phantom and its manifest.
    Phantom(PhantomArgs),
    /// Print a bundle summary as JSON.
    BundleInspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Pair list CSV with columns fixed,moving and optional field,
    /// fixed_negate, moving_negate, fixed_id, moving_id.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub pairs: Option<PathBuf>,
    /// Phantom manifest; pairs each subject's role-I and role-J volumes.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// TOML pipeline configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named configuration: abdomen-like or hcp-like.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the fitted methods: wpls, pca3d or both.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Single input volume (.vxvol).
    #[arg(long, requires = "output", conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    /// Output features (.vxfeat) for --input.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Transform every manifest volume, using its role and sign flag.
    #[arg(long, requires = "output_dir", required_unless_present = "input")]
    pub manifest: Option<PathBuf>,
    /// Directory receiving `<id>.vxfeat` in manifest mode.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// wpls, pca3d, triplanar or axis-{s,c,a}.
    #[arg(long, default_value = "wpls")]
    pub projection: String,
    /// Modality role I or J; required for WPLS in single mode.
    #[arg(long)]
    pub role: Option<String>,
    /// Identifier used to find precomputed tokens; defaults to the file stem.
    #[arg(long)]
    pub id: Option<String>,
    /// Negate encoder tokens of the input.
    #[arg(long)]
    pub negate: bool,
    /// Override the stored normalization: mr, ct, p99 or none.
    #[arg(long)]
    pub normalization: Option<String>,
    /// Per-voxel L2 normalization of the output.
    #[arg(long)]
    pub l2: bool,
    /// Append the MIND hybrid (first 16 channels scaled by 0.1, then MIND r=1 d=2).
    #[arg(long)]
    pub hybrid_mind: bool,
}

#[derive(Debug, Args)]
pub struct BandsliceArgs {
    /// Fixed input: .vxvol (MIND features are computed) or .vxfeat.
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.8)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 1.25)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    /// MIND radius for volume inputs.
    #[arg(long, default_value_t = 2)]
    pub mind_radius: usize,
    #[arg(long, default_value_t = 2)]
    pub mind_dilation: usize,
    /// Write the fits as JSON here instead of stdout.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Write the moving input resampled onto the fixed grid.
    #[arg(long)]
    pub resampled: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `<id>.vxfeat` for every manifest entry.
    #[arg(long)]
    pub features_dir: PathBuf,
    /// Comma-separated subset of SC, DS, DM, G.
    #[arg(long)]
    pub categories: Option<String>,
    /// Method name written to the report.
    #[arg(long, default_value = "features")]
    pub method: String,
    /// CSV report path; stdout when omitted.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(short, long, default_value_t = 7)]
    pub k: usize,
    /// Skip each query voxel itself when query and key are the same volume.
    #[arg(long)]
    pub exclude_self: bool,
    /// Directory receiving predicted label volumes.
    #[arg(long)]
    pub predictions_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LandmarkArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated labels; all labels present in both volumes by default.
    #[arg(long)]
    pub labels: Option<String>,
    /// median-pair or pooled-mean.
    #[arg(long, default_value = "median-pair")]
    pub aggregation: String,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reference label volume.
    #[arg(long)]
    pub truth: PathBuf,
    /// Predicted label volume.
    #[arg(long)]
    pub pred: PathBuf,
    /// Optional displacement field (.vxfeat, 3 channels) for sdLogJ.
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long, default_value = "prediction")]
    pub method: String,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MindArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    #[arg(long, default_value_t = 2)]
    pub dilation: usize,
    /// Intensity normalization applied first: mr, ct, p99 or none.
    #[arg(long, default_value = "none")]
    pub normalization: String,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    pub tau: f64,
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    #[arg(long, default_value_t = 2)]
    pub dilation: usize,
    #[arg(long, default_value = "none")]
    pub normalization: String,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(short, long)]
    pub output: PathBuf,
    /// TOML phantom specification; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub structures: Option<usize>,
    /// Grid size as D,H,W.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long)]
    pub gamma: Option<f32>,
    /// Do not mark modality B for token negation.
    #[arg(long)]
    pub no_sign_flip: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub bundle: PathBuf,
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vxc_core::Error>() {
            return match e {
                vxc_core::Error::Param(_) | vxc_core::Error::Shape(_) => 2,
                vxc_core::Error::Numerical(_) => 3,
                vxc_core::Error::Format(_) | vxc_core::Error::Io(_) => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Transform(a) => commands::transform(&a),
        Command::Bandslice(a) => commands::bandslice(&a),
        Command::Knn(a) => commands::knn(&a),
        Command::Landmark(a) => commands::landmark(&a),
        Command::Metrics(a) => commands::metrics(&a),
        Command::Mind(a) => commands::mind(&a),
        Command::Mask(a) => commands::mask(&a),
        Command::Phantom(a) => commands::phantom(&a),
        Command::BundleInspect(a) => commands::bundle_inspect(&a),
    }
}
