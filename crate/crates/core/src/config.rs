//! Declarative run configuration (TOML), merged with command-line overrides
//! and re-emitted verbatim next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{build_schedule, NoiseSchedule, ScheduleKind, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
use crate::error::{Error, Result};
use crate::imaging::DegradationSpec;
use crate::restorer::RestorerConfig;
use crate::sagiri::{ControlUnetConfig, RefineOptions, VaeConfig};
use crate::training::{SynthConfig, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CACHE_ENV: &str = "SAGIRI_LAB_CACHE";
const DEFAULT_CACHE: &str = "sagiri-cache";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_T,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, ScheduleKind::Linear, self.beta_start, self.beta_end)
    }
}

/// Optional file locations; unset entries resolve against the cache directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restorer: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vae: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sagiri_pretrained: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sagiri: Option<PathBuf>,
}

/// Which model file a path refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Restorer,
    Vae,
    Base,
    SagiriPretrained,
    Sagiri,
}

impl Artifact {
    pub fn file_name(self) -> &'static str {
        match self {
            Artifact::Restorer => "restorer.safetensors",
            Artifact::Vae => "vae.safetensors",
            Artifact::Base => "base.safetensors",
            Artifact::SagiriPretrained => "sagiri_pretrained.safetensors",
            Artifact::Sagiri => "sagiri.safetensors",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub restorer: RestorerConfig,
    pub vae: VaeConfig,
    pub unet: ControlUnetConfig,
    pub schedule: ScheduleConfig,
    /// Degradation for pretraining; unset scales the default to the image size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationSpec>,
    pub train_restorer: TrainConfig,
    pub train_vae: TrainConfig,
    pub train_base: TrainConfig,
    pub pretrain_sagiri: TrainConfig,
    pub finetune_sagiri: TrainConfig,
    pub refine: RefineOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Desk-scale models and schedules for the 64 px synthetic corpus.
    pub fn toy() -> Self {
        let phase = |steps: usize| TrainConfig {
            batch_size: 4,
            steps,
            checkpoint_every: 500,
            ..TrainConfig::toy()
        };
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            restorer: RestorerConfig {
                embed_dim: 32,
                n_blocks: 2,
                ..RestorerConfig::default()
            },
            vae: VaeConfig {
                base_width: 16,
                ..VaeConfig::default()
            },
            unet: ControlUnetConfig::default(),
            schedule: ScheduleConfig::default(),
            degradation: None,
            train_restorer: phase(2000),
            train_vae: phase(1000),
            train_base: TrainConfig {
                content_loss: false,
                ..phase(2000)
            },
            pretrain_sagiri: phase(2000),
            finetune_sagiri: TrainConfig {
                mask_enabled: true,
                ..phase(1000)
            },
            refine: RefineOptions::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("config does not serialize: {e}")))
    }

    /// Writes `resolved_config.toml` into `dir`, headed by the invoking command line.
    pub fn write_resolved(&self, dir: &Path, argv: &[String]) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        let quoted: Vec<String> = argv.iter().map(|a| format!("{a:?}")).collect();
        let text = format!("# command: [{}]\n{}", quoted.join(", "), self.to_toml()?);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Cache root: `paths.cache`, else `$SAGIRI_LAB_CACHE`, else `./sagiri-cache`.
    pub fn cache_dir(&self) -> PathBuf {
        self.paths
            .cache
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE))
    }

    pub fn artifact(&self, which: Artifact) -> PathBuf {
        let set = match which {
            Artifact::Restorer => &self.paths.restorer,
            Artifact::Vae => &self.paths.vae,
            Artifact::Base => &self.paths.base,
            Artifact::SagiriPretrained => &self.paths.sagiri_pretrained,
            Artifact::Sagiri => &self.paths.sagiri,
        };
        set.clone().unwrap_or_else(|| self.cache_dir().join(which.file_name()))
    }

    pub fn degradation_for(&self, height: usize, width: usize) -> DegradationSpec {
        self.degradation
            .unwrap_or_else(|| DegradationSpec::scaled_for(height, width, self.seed))
    }

    /// Propagates the run seed into every phase.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for c in [
            &mut self.train_restorer,
            &mut self.train_vae,
            &mut self.train_base,
            &mut self.pretrain_sagiri,
            &mut self.finetune_sagiri,
        ] {
            c.seed = seed;
        }
        self.refine.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.restorer.validate()?;
        self.vae.validate()?;
        self.unet.validate()?;
        for c in [
            &self.train_restorer,
            &self.train_vae,
            &self.train_base,
            &self.pretrain_sagiri,
            &self.finetune_sagiri,
        ] {
            c.validate()?;
        }
        let m = self.restorer.spatial_multiple();
        if self.train_restorer.crop_size % m != 0 {
            return Err(Error::InvalidConfig(format!(
                "train_restorer.crop_size {} must be a multiple of {m}",
                self.train_restorer.crop_size
            )));
        }
        if let Some(d) = &self.degradation {
            d.validate()?;
        }
        self.schedule.build().map(|_| ())
    }
}
