//! Modality-stable voxelwise feature representations.
//!
//! The crate covers the whole fit/transform pipeline: intensity normalization
//! and resampling ([`grid`]), the 12-channel self-similarity descriptor
//! ([`mind`]), automatic foreground masks ([`mask`]), triplanar slice
//! encoding ([`encoder`]), the per-axis PCA, weighted PLS and pooled PCA
//! projections ([`projection`]), slice-band global initialization
//! ([`bandslice`]), registration-free correspondence tasks
//! ([`correspondence`]) and evaluation metrics ([`metrics`]).
//!
//! Voxels are indexed `(axis0, axis1, axis2)` in row-major order, with the
//! sagittal axis first, coronal second and axial last. Feature volumes store
//! channels innermost.

pub mod bandslice;
pub mod config;
pub mod correspondence;
pub mod encoder;
mod error;
pub mod grid;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod mind;
pub mod phantom;
pub mod pipeline;
pub mod projection;
pub mod stats;

pub use correspondence::{LabelVolume, Landmark, TransferCategory};
pub use error::{Error, Result};
pub use grid::{Axis, DisplacementField, FeatureVolume, Interp, Mask, Volume};
pub use projection::{AxisPcaModel, Pca3dModel, ProjectionBundle, WplsModel};
