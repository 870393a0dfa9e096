//! Versioned JSON container for model parameters.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{IdrModel, ModelConfig};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Reads a JSON file whose top-level object carries `schema_version` and
/// `kind`; anything else is a schema error.
pub fn read_versioned<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::Schema(format!(
            "{}: unsupported schema_version {:?}, expected {SCHEMA_VERSION}",
            path.display(),
            version
        )));
    }
    let found = value.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::Schema(format!("{}: kind `{found}`, expected `{kind}`", path.display())));
    }
    Ok(serde_json::from_value(value)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub schema_version: u32,
    pub kind: String,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub epoch: Option<usize>,
    pub val_kl: Option<f64>,
}

impl ModelCheckpoint {
    pub const KIND: &'static str = "idr-model";

    pub fn new(model: &IdrModel, epoch: Option<usize>, val_kl: Option<f64>) -> Self {
        ModelCheckpoint {
            schema_version: SCHEMA_VERSION,
            kind: Self::KIND.into(),
            config: model.config.clone(),
            params: model.params.clone(),
            epoch,
            val_kl,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_versioned(path, Self::KIND)
    }

    pub fn into_model(self) -> Result<IdrModel> {
        IdrModel::from_parts(self.config, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = IdrModel::init(ModelConfig::tiny(4, 3), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ModelCheckpoint::new(&model, Some(3), Some(0.25)).save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back.epoch, Some(3));
        assert_eq!(back.into_model().unwrap(), model);
    }

    #[test]
    fn unknown_version_rejected() {
        let model = IdrModel::init(ModelConfig::tiny(4, 3), 5).unwrap();
        let mut ck = ModelCheckpoint::new(&model, None, None);
        ck.schema_version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_json(&path, &ck).unwrap();
        assert!(matches!(ModelCheckpoint::load(&path), Err(Error::Schema(_))));
    }
}
