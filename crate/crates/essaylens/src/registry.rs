//! Models loaded from a directory of `*.eslm` containers. The id of a model
//! is its file stem, so ids are unique within a directory. A registry cannot
//! be changed after it is loaded.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use essaylens_core::scorers::{ModelKind, Provenance, ScoreModel};
use serde::{Deserialize, Serialize};

use crate::container::{load_model, ModelMeta};
use crate::error::{Error, Result};

pub const MODEL_EXT: &str = "eslm";

#[derive(Debug)]
pub struct LoadedModel {
    pub id: String,
    pub model: ScoreModel,
    pub meta: ModelMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecSummary {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub d_model: usize,
    pub n_classes: usize,
    pub score_min: i64,
    pub score_max: i64,
    pub p: f64,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub id: String,
    pub spec: SpecSummary,
    pub provenance: Provenance,
    pub provider: Option<String>,
    pub set_id: Option<u32>,
    pub qwk: BTreeMap<u32, f64>,
}

impl LoadedModel {
    pub fn manifest(&self) -> ModelManifest {
        let s = &self.model.spec;
        ModelManifest {
            id: self.id.clone(),
            spec: SpecSummary {
                kind: s.kind,
                input_dim: s.input_dim,
                d_model: s.hp.d_model,
                n_classes: s.n_classes,
                score_min: s.score_min,
                score_max: s.score_max,
                p: s.hp.p,
                param_count: self.model.param_count(),
            },
            provenance: self.model.provenance.clone(),
            provider: self.meta.provider.clone(),
            set_id: self.meta.set_id,
            qwk: self.meta.qwk.clone(),
        }
    }
}

#[derive(Debug, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<LoadedModel>>,
}

impl Registry {
    /// A missing directory gives an empty registry. Any unreadable container
    /// is an error.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut models = BTreeMap::new();
        let entries = match std::fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(e) => return Err(Error::io(dir, e)),
        };
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(MODEL_EXT) {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
                continue;
            };
            let loaded = load_file(&path, &id)?;
            models.insert(id, Arc::new(loaded));
        }
        Ok(Self { models })
    }

    pub fn from_models(models: impl IntoIterator<Item = LoadedModel>) -> Self {
        Self {
            models: models.into_iter().map(|m| (m.id.clone(), Arc::new(m))).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<Arc<LoadedModel>> {
        self.models
            .get(id)
            .cloned()
            .ok_or_else(|| Error::ModelNotFound(id.to_string()))
    }

    pub fn manifests(&self) -> Vec<ModelManifest> {
        self.models.values().map(|m| m.manifest()).collect()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

pub fn load_file(path: &Path, id: &str) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (model, meta) = load_model(&bytes).map_err(|e| match e {
        Error::CorruptContainer(m) => Error::CorruptContainer(format!("{}: {}", path.display(), m)),
        other => other,
    })?;
    Ok(LoadedModel {
        id: id.to_string(),
        model,
        meta,
    })
}

/// `spec` is a path to a container or the id of a model in `dir`.
pub fn resolve_model(spec: &str, dir: &Path) -> Result<LoadedModel> {
    let p = Path::new(spec);
    if p.extension().and_then(|e| e.to_str()) == Some(MODEL_EXT) || p.components().count() > 1 {
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or(spec);
        return load_file(p, id);
    }
    let path = dir.join(format!("{}.{}", spec, MODEL_EXT));
    if !path.exists() {
        return Err(Error::ModelNotFound(format!("{} (looked for {})", spec, path.display())));
    }
    load_file(&path, spec)
}
