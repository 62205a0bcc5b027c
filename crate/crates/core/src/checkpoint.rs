use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MsFlowModel};
use crate::params::{self, Params};
use crate::tensor_io::{read_tensor, write_tensor};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub checksum: String,
    pub parameters: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &MsFlowModel, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = Vec::new();
    for (name, t) in params::named(model) {
        let file = format!("{name}.msft");
        write_tensor(dir.join(&file), t)?;
        parameters.push(ParamEntry { name, file, dims: t.dims().to_vec() });
    }
    let manifest = CheckpointManifest {
        format: "msflow-checkpoint-1".into(),
        model: model.config().clone(),
        checksum: params::checksum(model),
        parameters,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}

pub fn load_checkpoint(dir: &Path) -> Result<MsFlowModel> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut model = MsFlowModel::new(manifest.model.clone())?;
    let mut files: BTreeMap<&str, &ParamEntry> = BTreeMap::new();
    for p in &manifest.parameters {
        if files.insert(&p.name, p).is_some() {
            return Err(Error::Data(format!("checkpoint lists parameter {} twice", p.name)));
        }
    }
    let mut missing = Vec::new();
    let mut loaded = Vec::new();
    model.visit_mut("", &mut |name, t| match files.remove(name.as_str()) {
        Some(entry) => loaded.push((name, entry, t)),
        None => missing.push(name),
    });
    if !missing.is_empty() || !files.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint parameters do not match the architecture: missing {missing:?}, unexpected {:?}",
            files.keys().collect::<Vec<_>>()
        )));
    }
    for (name, entry, slot) in loaded {
        let t = read_tensor(dir.join(&entry.file))?;
        if t.dims() != slot.dims() || t.dims() != entry.dims.as_slice() {
            return Err(Error::Data(format!("parameter {name}: dims {:?}, expected {:?}", t.dims(), slot.dims())));
        }
        *slot = t;
    }
    if params::checksum(&model) != manifest.checksum {
        return Err(Error::Data(format!("{}: parameter checksum mismatch", dir.display())));
    }
    Ok(model)
}
