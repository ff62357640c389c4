//! Model checkpoints: `checkpoint.json` manifest plus `checkpoint.bin` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Model, ModelParams, TuningMode};
use crate::error::{Error, Result};
use crate::fpt::SpectralMode;
use crate::modality::ModalitySpec;
use crate::store::{read_json, write_json, BlobIndex, BlobReader, BlobWriter};

pub const CHECKPOINT_FORMAT: &str = "mmfpt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub tuning: TuningMode,
    pub backbone: BackboneConfig,
    pub spec: ModalitySpec,
    pub spectral: SpectralMode,
    pub blob: BlobIndex,
}

/// A model plus the regime it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub tuning: TuningMode,
    pub config_hash: String,
}

pub fn write_checkpoint(dir: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = BlobWriter::new();
    checkpoint.model.params.visit(&mut |name, t| {
        let (r, c) = t.dim();
        blob.push_f64(name, &[r, c], t.iter().copied());
    });
    let index = blob.write(dir, BLOB_FILE)?;
    let model = &checkpoint.model;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        config_hash: checkpoint.config_hash.clone(),
        tuning: checkpoint.tuning,
        backbone: model.config.clone(),
        spec: model.spec.clone(),
        spectral: model.mode,
        blob: index,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Manifest(format!("not a checkpoint: format {}", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: manifest.version,
        });
    }
    manifest.backbone.validate()?;
    let reader = BlobReader::open(dir, manifest.blob)?;
    let mut params = ModelParams::zeros(&manifest.backbone, &manifest.spec);
    let mut expected = 0;
    let mut failure = None;
    params.visit_mut(&mut |name, mut t| {
        expected += 1;
        if failure.is_some() {
            return;
        }
        match reader.f64(name) {
            Ok((shape, data)) if shape == [t.nrows(), t.ncols()] => {
                t.iter_mut().zip(data).for_each(|(dst, v)| *dst = v);
            }
            Ok((shape, _)) => {
                failure = Some(Error::Manifest(format!(
                    "tensor {name} has shape {shape:?}, model expects {:?}",
                    t.dim()
                )))
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if reader.entries().len() != expected {
        return Err(Error::Manifest(format!(
            "blob holds {} tensors, model has {expected}",
            reader.entries().len()
        )));
    }
    Ok(Checkpoint {
        model: Model {
            config: manifest.backbone,
            spec: manifest.spec,
            mode: manifest.spectral,
            params,
        },
        tuning: manifest.tuning,
        config_hash: manifest.config_hash,
    })
}
