//! Checkpoint directories: one `P3DT` file per parameter, a JSON index and the
//! model config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Param};
use crate::tensor_file::{write_atomic, TensorFile};
use crate::{Error, Result};

pub const CHECKPOINT_INDEX: &str = "index.json";
pub const CHECKPOINT_CONFIG: &str = "config.json";

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    shape: Vec<usize>,
    dtype: String,
}

/// Writes `model` under `dir`, replacing any earlier checkpoint there.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("params")).map_err(|e| Error::io(dir, e))?;
    let mut index = BTreeMap::new();
    for p in &model.params {
        let file = format!("params/{}.p3dt", p.name);
        TensorFile::f64(&p.value).write(&dir.join(&file))?;
        index.insert(
            p.name.clone(),
            IndexEntry {
                file,
                shape: p.value.shape().to_vec(),
                dtype: "f64".into(),
            },
        );
    }
    write_atomic(
        &dir.join(CHECKPOINT_CONFIG),
        &serde_json::to_vec_pretty(&model.config)?,
    )?;
    write_atomic(&dir.join(CHECKPOINT_INDEX), &serde_json::to_vec_pretty(&index)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let config: ModelConfig = serde_json::from_slice(&read(CHECKPOINT_CONFIG)?)?;
    config.validate()?;
    let index: BTreeMap<String, IndexEntry> = serde_json::from_slice(&read(CHECKPOINT_INDEX)?)?;
    let layout = Model::layout(&config);
    if index.len() != layout.len() {
        return Err(Error::Format {
            path: dir.join(CHECKPOINT_INDEX),
            msg: format!("{} parameters listed, config needs {}", index.len(), layout.len()),
        });
    }
    let mut params = Vec::with_capacity(layout.len());
    for (name, group, shape) in layout {
        let entry = index.get(&name).ok_or_else(|| Error::Format {
            path: dir.join(CHECKPOINT_INDEX),
            msg: format!("missing parameter {name}"),
        })?;
        let path = dir.join(&entry.file);
        let value = TensorFile::read(&path)?.to_tensor()?;
        if value.shape() != shape.as_slice() {
            return Err(Error::Format {
                path,
                msg: format!("{name} has shape {:?}, expected {shape:?}", value.shape()),
            });
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!("checkpoint parameter {name}")));
        }
        params.push(Param { name, group, value });
    }
    Ok(Model::from_params(config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::init(ModelConfig::tiny(32, 1), 3).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn missing_parameter_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::init(ModelConfig::tiny(32, 1), 3).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        fs::remove_file(dir.path().join("params/cls.p3dt")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io { .. })));
    }
}
