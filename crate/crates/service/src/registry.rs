//! Checkpoints stored as `<model_id>.ckpt` under one directory, with the
//! active id in a file named `active`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use drgrade::model::{load, load_bytes, Model};
use serde::Serialize;

use crate::ServiceError;

const MARKER: &str = "active";
const EXTENSION: &str = "ckpt";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub active: bool,
    pub input_size: usize,
    pub parameters: usize,
}

#[derive(Default)]
struct State {
    models: BTreeMap<String, Arc<Model>>,
    active: Option<String>,
}

pub struct Registry {
    dir: PathBuf,
    state: RwLock<State>,
    /// Serializes mutations; reads only take the short `state` lock.
    writer: Mutex<()>,
}

/// Model ids become file names, so they are restricted to a safe alphabet.
pub fn validate_model_id(id: &str) -> Result<(), ServiceError> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id != MARKER
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ServiceError::InvalidModelId(id.to_string()))
    }
}

/// Writes via a temporary file and a rename so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)
}

impl Registry {
    /// Loads every checkpoint in `dir`. The marker picks the active model;
    /// without a usable marker the first id in sorted order is active.
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        let mut state = State::default();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.sort();
        for path in files {
            if path.extension().is_none_or(|e| e != EXTENSION) || !path.is_file() {
                continue;
            }
            let (model, _) = load(&path).map_err(|source| ServiceError::Checkpoint {
                path: path.display().to_string(),
                source,
            })?;
            state.models.insert(model.id().to_string(), Arc::new(model));
        }
        let marker = std::fs::read_to_string(dir.join(MARKER)).ok().map(|s| s.trim().to_string());
        state.active = match marker {
            Some(id) if state.models.contains_key(&id) => Some(id),
            other => {
                if let Some(id) = other {
                    tracing::warn!(marker = %id, "active marker names an unknown model");
                }
                state.models.keys().next().cloned()
            }
        };
        Ok(Registry {
            dir: dir.to_path_buf(),
            state: RwLock::new(state),
            writer: Mutex::new(()),
        })
    }

    /// The model every new request should use.
    pub fn active(&self) -> Option<Arc<Model>> {
        let state = self.state.read().expect("registry lock");
        state.active.as_ref().and_then(|id| state.models.get(id).cloned())
    }

    pub fn active_id(&self) -> Option<String> {
        self.state.read().expect("registry lock").active.clone()
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        let state = self.state.read().expect("registry lock");
        state
            .models
            .iter()
            .map(|(id, m)| ModelInfo {
                model_id: id.clone(),
                active: state.active.as_deref() == Some(id.as_str()),
                input_size: m.config().input_size,
                parameters: m.param_count(),
            })
            .collect()
    }

    /// Validates and stores a checkpoint without activating it.
    pub fn register(&self, id: &str, bytes: &[u8]) -> Result<ModelInfo, ServiceError> {
        validate_model_id(id)?;
        let _guard = self.writer.lock().expect("registry writer");
        if self.state.read().expect("registry lock").models.contains_key(id) {
            return Err(ServiceError::DuplicateModel(id.to_string()));
        }
        let (model, _) = load_bytes(bytes).map_err(|source| ServiceError::Checkpoint {
            path: format!("upload {id}"),
            source,
        })?;
        let model = model.with_id(id);
        write_atomic(&self.dir.join(format!("{id}.{EXTENSION}")), bytes)?;
        let info = ModelInfo {
            model_id: id.to_string(),
            active: false,
            input_size: model.config().input_size,
            parameters: model.param_count(),
        };
        let mut state = self.state.write().expect("registry lock");
        state.models.insert(id.to_string(), Arc::new(model));
        if state.active.is_none() {
            tracing::info!(model = id, "first model registered; still inactive until activated");
        }
        Ok(info)
    }

    /// Persists the marker, then swaps the in-memory pointer in one step.
    pub fn activate(&self, id: &str) -> Result<(), ServiceError> {
        let _guard = self.writer.lock().expect("registry writer");
        if !self.state.read().expect("registry lock").models.contains_key(id) {
            return Err(ServiceError::UnknownModel(id.to_string()));
        }
        write_atomic(&self.dir.join(MARKER), id.as_bytes())?;
        self.state.write().expect("registry lock").active = Some(id.to_string());
        Ok(())
    }
}
