//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! scan_fraction = 0.5
//! keyframe_stride = 1
//! export_points = 4096
//!
//! [image]
//! width = 1024
//! height = 64
//! # Omit to estimate the field of view from every scan.
//! fov_deg = [-180.0, 180.0, -22.5, 22.5]
//!
//! [mapping]
//! iterations = 10
//!
//! [registration]
//! mode = "sequential"
//!
//! [output]
//! dir = "out"
//! trajectory_format = "tum"
//! ```
//!
//! Every table is optional and every key falls back to its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::SphericalCamera;
use crate::mapping::MappingConfig;
use crate::registration::RegistrationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub width: usize,
    pub height: usize,
    /// Azimuth and elevation bounds in degrees: min, max, min, max.
    pub fov_deg: Option<[f64; 4]>,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 64,
            fov_deg: None,
        }
    }
}

impl ImageConfig {
    /// The fixed camera, if one is configured.
    pub fn fixed_camera(&self) -> Result<Option<SphericalCamera>, String> {
        let Some([a0, a1, e0, e1]) = self.fov_deg else {
            return Ok(None);
        };
        SphericalCamera::from_fov(
            self.width,
            self.height,
            a0.to_radians(),
            a1.to_radians(),
            e0.to_radians(),
            e1.to_radians(),
        )
        .map(Some)
        .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryFileFormat {
    Tum,
    Kitti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub trajectory_format: TrajectoryFileFormat,
    /// Also save the final active model.
    pub save_model: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            trajectory_format: TrajectoryFileFormat::Tum,
            save_model: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Fraction of each incoming scan used for registration.
    pub scan_fraction: f64,
    /// Every `keyframe_stride`-th scan becomes a keyframe.
    pub keyframe_stride: usize,
    /// Oriented points sampled per keyframe on export.
    pub export_points: usize,
    pub image: ImageConfig,
    pub mapping: MappingConfig,
    pub registration: RegistrationConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scan_fraction: 0.5,
            keyframe_stride: 1,
            export_points: 4096,
            image: ImageConfig::default(),
            mapping: MappingConfig::default(),
            registration: RegistrationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.scan_fraction > 0.0 && self.scan_fraction <= 1.0) {
            return Err("scan_fraction must lie in (0, 1]".into());
        }
        if self.keyframe_stride == 0 {
            return Err("keyframe_stride must be at least 1".into());
        }
        if self.image.width < 2 || self.image.height < 2 {
            return Err("image must be at least 2 x 2".into());
        }
        self.image.fixed_camera()?;
        self.mapping.validate()
    }
}
