//! Named-array checkpoints: a JSON manifest (`manifest.json`) plus one
//! binary blob (`tensors.bin`) of little-endian `f64` values.
//!
//! Both files are written to temporaries and renamed into place, so an
//! interrupted write never clobbers the previous checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Result, TensorError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data file.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Array)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, array: Array) {
        self.tensors.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| TensorError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, array) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: array.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in array.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            tensors: entries,
            meta: self.meta.clone(),
        };
        let data_tmp = dir.join(format!("{DATA_FILE}.tmp"));
        let manifest_tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&data_tmp, &blob)?;
        fs::write(&manifest_tmp, serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(&data_tmp, dir.join(DATA_FILE))?;
        fs::rename(&manifest_tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(TensorError::CheckpointVersion {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let blob = fs::read(dir.join(DATA_FILE))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + n * 8;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| TensorError::Malformed(format!("tensor `{}` overruns data file", entry.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((entry.name, Array::new(entry.shape, data)?));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }
}
