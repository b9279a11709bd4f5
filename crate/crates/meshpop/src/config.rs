//! The single JSON pipeline configuration consumed by every CLI stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mesh::GeoBox;
use crate::tile::Resampling;
use crate::train::{AdamHyper, Norm};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config {path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinePaths {
    /// Scene inputs: {rasters}/{year}/{band}/{scene}.tif plus
    /// {rasters}/{year}/cloud/{scene}.tif masks and {rasters}/{year}/ntl.tif.
    pub rasters: PathBuf,
    /// Label CSV (mesh_code,year,pop_0_14,pop_15_64,pop_65plus).
    pub labels: PathBuf,
    /// Annual composites: {composites}/{year}/{band}.tif.
    pub composites: PathBuf,
    /// Tile files plus manifest.csv.
    pub tiles: PathBuf,
    /// Pretrained named-tensor archive.
    pub weights: PathBuf,
    /// Split manifest, checkpoints, metrics, predictions, maps.
    pub outputs: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplingConfig {
    pub continuous: Resampling,
    pub ntl: Resampling,
}

impl Default for ResamplingConfig {
    fn default() -> Self {
        ResamplingConfig {
            continuous: Resampling::Bilinear,
            ntl: Resampling::Nearest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Fill residual NaN pixels with the channel mean; reject all-NaN bands.
    BandMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectanceScaling {
    pub scale: f32,
    pub offset: f32,
}

impl Default for ReflectanceScaling {
    fn default() -> Self {
        // Landsat Collection 2 Level-2 surface reflectance constants.
        ReflectanceScaling {
            scale: 0.0000275,
            offset: -0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConfig {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        EnvelopeConfig {
            lat_min: crate::mesh::JAPAN_ENVELOPE.lat_min,
            lat_max: crate::mesh::JAPAN_ENVELOPE.lat_max,
            lon_min: crate::mesh::JAPAN_ENVELOPE.lon_min,
            lon_max: crate::mesh::JAPAN_ENVELOPE.lon_max,
        }
    }
}

impl EnvelopeConfig {
    pub fn geobox(&self) -> Option<GeoBox> {
        GeoBox::new(self.lat_min, self.lat_max, self.lon_min, self.lon_max)
    }
}

fn default_census_years() -> Vec<i32> {
    vec![2015, 2020]
}

fn default_prediction_years() -> Vec<i32> {
    vec![2022]
}

fn default_seed() -> u64 {
    42
}

fn default_batch_size() -> usize {
    32
}

fn default_epochs() -> usize {
    250
}

fn default_tile_size() -> usize {
    334
}

fn default_fill_policy() -> FillPolicy {
    FillPolicy::BandMean
}

fn default_norm() -> Norm {
    Norm::L2
}

fn default_dropout() -> f64 {
    0.25
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    #[serde(default = "default_census_years")]
    pub census_years: Vec<i32>,
    #[serde(default = "default_prediction_years")]
    pub prediction_years: Vec<i32>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_tile_size")]
    pub tile_size: usize,
    #[serde(default)]
    pub resampling: ResamplingConfig,
    #[serde(default = "default_fill_policy")]
    pub fill_policy: FillPolicy,
    #[serde(default)]
    pub adam: AdamHyper,
    #[serde(default = "default_norm")]
    pub loss_norm: Norm,
    #[serde(default)]
    pub reflectance: ReflectanceScaling,
    #[serde(default)]
    pub envelope: EnvelopeConfig,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

impl PipelineConfig {
    pub fn all_years(&self) -> Vec<i32> {
        let mut years = self.census_years.clone();
        years.extend(&self.prediction_years);
        years.sort_unstable();
        years.dedup();
        years
    }

    pub fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        let err = |msg: String| ConfigError::Invalid {
            path: path.display().to_string(),
            msg,
        };
        if self.census_years.is_empty() {
            return Err(err("census_years must be non-empty".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(err("batch_size and epochs must be >= 1".into()));
        }
        if self.tile_size < 64 {
            return Err(err(format!("tile_size {} must be >= 64", self.tile_size)));
        }
        if self.envelope.geobox().is_none() {
            return Err(err("envelope bounds are not a valid box".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(err(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.adam.alpha <= 0.0 || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2) || self.adam.epsilon <= 0.0
        {
            return Err(err("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let content = std::fs::read_to_string(path).map_err(|e| ConfigError::Invalid {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let config: PipelineConfig =
        serde_json::from_str(&content).map_err(|e| ConfigError::Invalid {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    config.validate(path)?;
    Ok(config)
}
