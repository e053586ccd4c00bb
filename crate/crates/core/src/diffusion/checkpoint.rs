//! Checkpoint directories: `manifest.json` plus one `f32` blob per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{self, DType};
use crate::diffusion::denoiser::{ArchConfig, DenoiserModel};
use crate::diffusion::schedule::{NoiseSchedule, ScheduleConfig};
use crate::diffusion::text::Vocabulary;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    tag: String,
    version: usize,
    arch: ArchConfig,
    schedule: ScheduleConfig,
    vocabulary: Vocabulary,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

fn file_name(param: &str) -> String {
    format!("{}.bin", param.replace('.', "_"))
}

pub fn save(model: &DenoiserModel, dir: &Path, tag: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut entries = Vec::new();
    for (name, value) in model.params().names().iter().zip(model.params().values()) {
        let file = file_name(name);
        blob::write(&dir.join(&file), value, DType::F32)?;
        entries.push(ParamEntry {
            name: name.clone(),
            file,
            shape: value.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tag: tag.to_string(),
        version: model.version(),
        arch: *model.arch(),
        schedule: model.schedule_config(),
        vocabulary: model.vocab().clone(),
        params: entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(Error::io(&path))
}

/// Loads a checkpoint, returning the model and its tag.
pub fn load(dir: &Path) -> Result<(DenoiserModel, String)> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::integrity(path.display().to_string(), e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::integrity(
            path.display().to_string(),
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    manifest.arch.validate()?;
    let mut params = ParamStore::new();
    for entry in &manifest.params {
        let t = blob::read(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::integrity(
                entry.file.clone(),
                format!("shape {:?} != manifest {:?}", t.shape(), entry.shape),
            ));
        }
        params.insert(&entry.name, t);
    }
    let model = DenoiserModel::from_parts(
        manifest.arch,
        NoiseSchedule::new(manifest.schedule)?,
        manifest.vocabulary,
        params,
        manifest.version,
    );
    Ok((model, manifest.tag))
}
