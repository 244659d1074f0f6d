//! Servable online models, loaded from a checkpoint directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chordjam::checkpoint::{Checkpoint, Persist};
use chordjam::OnlineModel;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelInfo {
    pub id: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub parameters: usize,
    pub dim: usize,
    pub layers: usize,
    pub max_frames: usize,
    pub meta: serde_json::Value,
}

#[derive(Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, (ModelInfo, Arc<OnlineModel>)>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, model: OnlineModel, path: Option<PathBuf>, meta: serde_json::Value) {
        let id = id.into();
        let info = ModelInfo {
            id: id.clone(),
            kind: "online".into(),
            path,
            parameters: model.store().num_scalars(),
            dim: model.config.dim,
            layers: model.config.layers,
            max_frames: model.config.max_frames(),
            meta,
        };
        self.models.insert(id, (info, Arc::new(model)));
    }

    /// Loads every `*.ckpt` holding an online model; the id is the file
    /// stem. Other checkpoint kinds are skipped.
    pub fn load_dir(dir: &Path) -> chordjam::Result<Self> {
        let mut reg = Self::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
            .collect();
        paths.sort();
        for path in paths {
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.header.kind != "online" {
                tracing::debug!(path = %path.display(), kind = %ckpt.header.kind, "skipping non-servable checkpoint");
                continue;
            }
            let model = OnlineModel::from_checkpoint(&ckpt)?;
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            reg.insert(id, model, Some(path.clone()), ckpt.header.meta.clone());
        }
        Ok(reg)
    }

    pub fn get(&self, id: &str) -> Option<Arc<OnlineModel>> {
        self.models.get(id).map(|(_, m)| m.clone())
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        self.models.values().map(|(i, _)| i.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}
