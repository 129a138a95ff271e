//! Checkpoint files: safetensors weights with the model config and a format
//! version embedded in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use super::ModelConfig;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "glomseg-checkpoint";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    /// Free-form provenance (run id, epoch, validation score).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Self {
        Self {
            config,
            tensors,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn tensor_map(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut metadata: HashMap<String, String> = self
            .meta
            .iter()
            .map(|(k, v)| (format!("meta.{k}"), v.clone()))
            .collect();
        metadata.insert("format".into(), FORMAT_TAG.into());
        metadata.insert("format_version".into(), FORMAT_VERSION.into());
        metadata.insert("model_config".into(), serde_json::to_string(&self.config)?);
        let data: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        safetensors::serialize_to_file(data, Some(metadata), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT_TAG) {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint written by this tool",
                path.display()
            )));
        }
        match meta.get("format_version").map(String::as_str) {
            Some(FORMAT_VERSION) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported format version {other:?}",
                    path.display()
                )))
            }
        }
        let config: ModelConfig = serde_json::from_str(
            meta.get("model_config")
                .ok_or_else(|| Error::Checkpoint("model_config missing".into()))?,
        )?;
        let mut tensors: Vec<(String, Tensor)> = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let meta = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self {
            config,
            tensors,
            meta,
        })
    }

    /// Plain safetensors weights without embedded config (e.g. exported encoders).
    pub fn load_raw_safetensors(path: &Path) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self::new(ModelConfig::default(), tensors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, SegModel, Variant};
    use candle_core::DType;

    #[test]
    fn round_trip_restores_outputs() {
        let cfg = ModelConfig::preset(Arch::AttUnet, Variant::Toy).unwrap();
        let model = SegModel::build(&cfg, DType::F32).unwrap();
        // move running statistics away from their initial values
        let x = Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        model.forward_t(&x, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.to_checkpoint().unwrap().with_meta("epoch", 3).save(&path).unwrap();

        let ckpt = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.config, cfg);
        assert_eq!(ckpt.meta["epoch"], "3");
        let restored = SegModel::from_checkpoint(&ckpt).unwrap();
        let a = model.forward(&x).unwrap();
        let b = restored.forward(&x).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let unet = SegModel::build(&ModelConfig::preset(Arch::AttUnet, Variant::Toy).unwrap(), DType::F32).unwrap();
        let mut ckpt = unet.to_checkpoint().unwrap();
        ckpt.config = ModelConfig::preset(Arch::Segformer, Variant::Toy).unwrap();
        assert!(SegModel::from_checkpoint(&ckpt).is_err());
    }

    #[test]
    fn foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
