//! Checkpoints: a JSON manifest describing the architecture and parameter
//! layout, next to a flat blob of little-endian f64 values. Storage keeps
//! every bit of every weight, so a load/save cycle and the evaluation of a
//! reloaded model are exact, not merely close.

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

const FORMAT: &str = "fusevae-checkpoint";
const VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";

/// Training progress carried alongside the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<ParamRecord>,
}

impl Model {
    /// Writes `manifest.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path, meta: CheckpointMeta) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::with_capacity(self.store().len());
        let mut blob = Vec::with_capacity(self.store().total_elems() * 8);
        let mut offset = 0usize;
        for (_, param) in self.store().iter() {
            let len = param.value.numel();
            records.push(ParamRecord {
                name: param.name.clone(),
                shape: param.value.shape().to_vec(),
                offset,
                len,
            });
            for &v in param.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += len;
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            config: self.config().clone(),
            meta,
            params: records,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::parse(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        std::fs::write(dir.join(BLOB_FILE), blob)?;
        Ok(())
    }

    /// Restores a model and its training progress from [`Model::save`]
    /// output. Every parameter the architecture defines must be present
    /// with its exact shape.
    pub fn load(dir: &Path) -> Result<(Model, CheckpointMeta)> {
        let json = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest =
            serde_json::from_str(&json).map_err(|e| Error::parse(format!("manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(Error::parse(format!(
                "unexpected checkpoint format {:?}",
                manifest.format
            )));
        }
        if manifest.version != VERSION {
            return Err(Error::parse(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let blob = std::fs::read(dir.join(BLOB_FILE))?;
        let mut model = Model::new(manifest.config)?;
        if manifest.params.len() != model.store().len() {
            return Err(Error::parse(format!(
                "checkpoint stores {} parameters, architecture defines {}",
                manifest.params.len(),
                model.store().len()
            )));
        }
        for rec in &manifest.params {
            let id = model
                .store()
                .id_of(&rec.name)
                .ok_or_else(|| Error::parse(format!("unknown parameter {}", rec.name)))?;
            let end = (rec.offset + rec.len) * 8;
            if blob.len() < end {
                return Err(Error::parse(format!(
                    "blob truncated: parameter {} needs {end} bytes",
                    rec.name
                )));
            }
            let data: Vec<f64> = blob[rec.offset * 8..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
                .collect();
            let value = crate::tensor::Tensor::new(rec.shape.clone(), data)?;
            model.store_mut().set(id, value).map_err(|_| {
                Error::parse(format!("parameter {} has wrong shape in checkpoint", rec.name))
            })?;
        }
        Ok((model, manifest.meta))
    }
}
