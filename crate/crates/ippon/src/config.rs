//! Run configuration: one structured file with per-module sections. Every
//! default is spelled out in the shipped `data/default_config.toml` so an
//! experiment is reproducible from the file alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraIntrinsics;
use crate::guidance::GuidanceConfig;
use crate::sim::{EpisodeConfig, SegNoiseModel};

pub const CONFIG_SCHEMA: &str = "ippon-config/1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema {0:?}, expected {CONFIG_SCHEMA:?}")]
    Schema(String),
    #[error("unknown ablation label {0:?}")]
    UnknownAblation(String),
    #[error("scene file not found: {0}")]
    MissingScene(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSection {
    /// Scene files, resolved relative to the config file.
    pub scenes: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub ablations: Vec<String>,
    /// Optional proximity-table file for guidance.
    pub table: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for BatchSection {
    fn default() -> Self {
        BatchSection {
            scenes: Vec::new(),
            seeds: vec![0, 1, 2],
            ablations: vec!["full".into()],
            table: None,
            report: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSection {
    pub dt: f64,
    pub max_steps: usize,
    pub max_sim_time: f64,
    pub voxel_size: f64,
    pub replan_interval: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub horizontal_fov_deg: f64,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection {
            dt: 0.25,
            max_steps: 500,
            max_sim_time: 120.0,
            voxel_size: 0.1,
            replan_interval: 4,
            image_width: 160,
            image_height: 120,
            horizontal_fov_deg: 74.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema: String,
    pub batch: BatchSection,
    pub episode: EpisodeSection,
    pub noise: SegNoiseModel,
    pub guidance: GuidanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: CONFIG_SCHEMA.into(),
            batch: BatchSection::default(),
            episode: EpisodeSection::default(),
            noise: SegNoiseModel::default(),
            guidance: GuidanceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        if cfg.schema != CONFIG_SCHEMA {
            return Err(ConfigError::Schema(cfg.schema));
        }
        for label in &cfg.batch.ablations {
            if crate::sim::AblationSet::from_label(label).is_none() {
                return Err(ConfigError::UnknownAblation(label.clone()));
            }
        }
        Ok(cfg)
    }

    /// Resolve a path from the batch section against the config file's
    /// directory.
    pub fn resolve(&self, config_path: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            config_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn episode_config(&self, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            seed,
            dt: self.episode.dt,
            max_steps: self.episode.max_steps,
            max_sim_time: self.episode.max_sim_time,
            intrinsics: CameraIntrinsics::new(
                self.episode.image_width,
                self.episode.image_height,
                self.episode.horizontal_fov_deg,
            ),
            voxel_size: self.episode.voxel_size,
            replan_interval: self.episode.replan_interval,
            noise: self.noise.clone(),
            guidance: self.guidance.clone(),
        }
    }

    pub fn bundled_default_text() -> &'static str {
        include_str!("../data/default_config.toml")
    }
}
