//! Self-describing model container shared by every network.
//!
//! A checkpoint is a safetensors file. Its string metadata carries the model
//! kind, the JSON config, the init seed and the training step; tensors are the
//! named parameters plus optional optimizer state under [`OPTIM_PREFIX`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_TAG: &str = "sagiri-lab/checkpoint-v1";
pub const OPTIM_PREFIX: &str = "__optim__.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Restorer,
    Vae,
    Unet,
    Sagiri,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Restorer => "restorer",
            ModelKind::Vae => "vae",
            ModelKind::Unet => "unet",
            ModelKind::Sagiri => "sagiri",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "restorer" => ModelKind::Restorer,
            "vae" => ModelKind::Vae,
            "unet" => ModelKind::Unet,
            "sagiri" => ModelKind::Sagiri,
            other => return Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
        })
    }
}

/// Parameters plus the metadata needed to rebuild and resume a model.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub params: ParamStore,
    /// Optimizer state tensors (without the prefix), if saved.
    pub optim: BTreeMap<String, Tensor>,
    /// Free-form extra metadata (e.g. latent scaling of a VAE).
    pub extra: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn new(kind: ModelKind, config: &impl Serialize, seed: u64, params: ParamStore) -> Result<Self> {
        Ok(Self {
            kind,
            config: serde_json::to_value(config)
                .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?,
            seed,
            step: 0,
            params,
            optim: BTreeMap::new(),
            extra: BTreeMap::new(),
        })
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config does not match {}: {e}", self.kind.as_str())))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a {} checkpoint, found {}",
                kind.as_str(),
                self.kind.as_str()
            )))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors: Vec<(String, Tensor)> = self.params.tensors().into_iter().collect();
        for (k, v) in &self.optim {
            tensors.push((format!("{OPTIM_PREFIX}{k}"), v.clone()));
        }
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT_TAG.to_string());
        meta.insert("kind".to_string(), self.kind.as_str().to_string());
        meta.insert("config".to_string(), self.config.to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("dtype".to_string(), format!("{:?}", self.params.dtype()));
        for (k, v) in &self.extra {
            meta.insert(format!("extra.{k}"), v.clone());
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata", path.display())))?;
        let get = |k: &str| -> Result<&String> {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{} lacks metadata key {k:?}", path.display())))
        };
        if get("format")? != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("{} is not a {FORMAT_TAG} file", path.display())));
        }
        let kind = ModelKind::parse(get("kind")?)?;
        let config: serde_json::Value = serde_json::from_str(get("config")?)
            .map_err(|e| Error::Checkpoint(format!("bad config json: {e}")))?;
        let parse_u64 = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad {k} in metadata")))
        };
        let seed = parse_u64("seed")?;
        let step = parse_u64("step")?;
        let dtype = match get("dtype").map(|s| s.as_str()) {
            Ok("F64") => DType::F64,
            _ => DType::F32,
        };
        let extra = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut params = BTreeMap::new();
        let mut optim = BTreeMap::new();
        for (k, v) in all {
            match k.strip_prefix(OPTIM_PREFIX) {
                Some(rest) => {
                    optim.insert(rest.to_string(), v);
                }
                None => {
                    params.insert(k, v);
                }
            }
        }
        Ok(Self {
            kind,
            config,
            seed,
            step,
            params: ParamStore::from_tensors(params, seed, dtype)?,
            optim,
            extra,
        })
    }

    /// Deep copy with independent parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (k, v) in self.params.tensors() {
            tensors.insert(k, v.copy()?);
        }
        Ok(Self {
            params: ParamStore::from_tensors(tensors, self.seed, self.params.dtype())?,
            ..self.clone()
        })
    }
}
