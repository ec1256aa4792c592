//! Structured report and checkpoint persistence (JSON documents).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::DataError;

/// One dense tensor in a checkpoint, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Serialized model parameters plus enough structure to validate a reload.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Model family this checkpoint belongs to ("manifold" or "network").
    pub model: String,
    pub tensors: BTreeMap<String, TensorData>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_report(self, path)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        read_report(path)
    }
}

/// Writes any serializable report as pretty-printed JSON.
pub fn write_report<T: Serialize>(value: &T, path: &Path) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    fs::write(path, json).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ck = Checkpoint {
            model: "manifold".into(),
            ..Default::default()
        };
        ck.tensors.insert(
            "net.w0".into(),
            TensorData {
                rows: 2,
                cols: 3,
                data: vec![0.1, -0.25, 3.5e-7, 1.0, 2.0, -4.75],
            },
        );
        ck.scalars.insert("alpha1".into(), 0.2);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
    }
}
