//! Pipeline tunables and named presets.
//!
//! A configuration is plain serde data; the CLI reads it from TOML. Missing
//! fields take the values of [`PipelineConfig::default`], which matches the
//! `abdomen-like` preset apart from the BandSlice regularization.

use serde::{Deserialize, Serialize};

use crate::bandslice::BandSliceConfig;
use crate::encoder::SliceEncoderSpec;
use crate::error::{Error, Result};
use crate::grid::Normalization;
use crate::mask::MaskConfig;
use crate::mind::MindConfig;
use crate::projection::Role;

/// Which second-stage projections a fit produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Methods {
    Wpls,
    Pca3d,
    Both,
}

impl Methods {
    pub fn wpls(self) -> bool {
        matches!(self, Methods::Wpls | Methods::Both)
    }

    pub fn pca3d(self) -> bool {
        matches!(self, Methods::Pca3d | Methods::Both)
    }
}

impl std::str::FromStr for Methods {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wpls" => Ok(Methods::Wpls),
            "pca3d" => Ok(Methods::Pca3d),
            "both" => Ok(Methods::Both),
            _ => Err(Error::param(format!("unknown method set '{s}', expected wpls, pca3d or both"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Per-axis PCA width.
    pub k: usize,
    pub k_proj: usize,
    /// Average-pooling factor of the fitting grid.
    pub grid_sp: usize,
    pub epsilon: f64,
    pub stride: usize,
    pub methods: Methods,
    pub encoder: SliceEncoderSpec,
    pub mask: MaskConfig,
    /// MIND variant concatenated into hybrid features.
    pub mind_hybrid: MindConfig,
    pub bandslice: BandSliceConfig,
    pub knn_k: usize,
    /// Normalization of role I and role J volumes.
    pub normalization: [Normalization; 2],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 24,
            k_proj: 24,
            grid_sp: 4,
            epsilon: 1e-6,
            stride: 3,
            methods: Methods::Both,
            encoder: SliceEncoderSpec::synthetic(0, 64, 16, 6.0),
            mask: MaskConfig::default(),
            mind_hybrid: MindConfig::hybrid(),
            bandslice: BandSliceConfig::default(),
            knn_k: 7,
            normalization: [Normalization::Mr, Normalization::Ct],
        }
    }
}

pub const PRESETS: [&str; 2] = ["abdomen-like", "hcp-like"];

impl PipelineConfig {
    /// Intra-subject MR/CT setting: strong scale regularization, MR
    /// percentile clipping for role I and CT windowing for role J.
    pub fn abdomen_like() -> Self {
        PipelineConfig {
            encoder: SliceEncoderSpec::synthetic(0, 64, 16, 6.0),
            bandslice: BandSliceConfig::with_eta(0.99),
            normalization: [Normalization::Mr, Normalization::Ct],
            ..Default::default()
        }
    }

    /// Inter-subject T2w/T1w setting: weak scale regularization, 99th
    /// percentile clipping for both roles.
    pub fn hcp_like() -> Self {
        PipelineConfig {
            encoder: SliceEncoderSpec::synthetic(0, 64, 16, 4.0),
            bandslice: BandSliceConfig::with_eta(0.1),
            normalization: [Normalization::P99, Normalization::P99],
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "abdomen-like" => Ok(Self::abdomen_like()),
            "hcp-like" => Ok(Self::hcp_like()),
            _ => Err(Error::param(format!("unknown preset '{name}', expected one of {PRESETS:?}"))),
        }
    }

    pub fn normalization(&self, role: Role) -> Normalization {
        match role {
            Role::I => self.normalization[0],
            Role::J => self.normalization[1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.encoder.feature_dim {
            return Err(Error::param(format!(
                "k={} must lie in 1..={} (encoder feature_dim)",
                self.k, self.encoder.feature_dim
            )));
        }
        if self.k_proj == 0 || self.k_proj > 3 * self.k {
            return Err(Error::param(format!("k_proj={} must lie in 1..={}", self.k_proj, 3 * self.k)));
        }
        if self.grid_sp == 0 || self.stride == 0 || self.knn_k == 0 {
            return Err(Error::param("grid_sp, stride and knn_k must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        self.encoder.validate()?;
        self.mask.validate()?;
        self.mind_hybrid.validate()?;
        self.bandslice.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_presets_validate() {
        let d = PipelineConfig::default();
        assert_eq!((d.k, d.k_proj, d.grid_sp, d.stride, d.knn_k), (24, 24, 4, 3, 7));
        assert_eq!(d.epsilon, 1e-6);
        assert_eq!(d.mask.tau, 0.99);
        assert_eq!(d.bandslice.rho, 0.5);
        assert_eq!(d.bandslice.rounds, 3);
        for name in PRESETS {
            PipelineConfig::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(PipelineConfig::hcp_like().bandslice.eta, 0.1);
        assert_eq!(PipelineConfig::abdomen_like().bandslice.eta, 0.99);
        assert!(PipelineConfig::preset("brain").is_err());
    }

    #[test]
    fn json_roundtrip_and_partial_input() {
        let c = PipelineConfig::hcp_like();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&s).unwrap(), c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"k": 8, "k_proj": 6}"#).unwrap();
        assert_eq!((partial.k, partial.k_proj, partial.grid_sp), (8, 6, 4));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"kk": 1}"#).is_err());
    }

    #[test]
    fn invalid_fields_rejected() {
        let mut c = PipelineConfig { k_proj: 80, ..Default::default() };
        assert!(c.validate().is_err());
        c.k_proj = 24;
        c.k = 65;
        assert!(c.validate().is_err());
        c.k = 24;
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
    }
}
