//! JSON manifest plus a raw little-endian `f32` sidecar.
//!
//! `stem.json` holds the schema version, artifact kind, seed, array names and
//! shapes, the SHA-256 of `stem.bin`, and free-form metadata. `stem.bin` is the
//! concatenation of every array in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArrayEntry {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub arrays: Vec<ArrayEntry>,
    /// Hex SHA-256 of the sidecar bytes.
    pub sha256: String,
    pub meta: serde_json::Value,
}

/// An artifact held in memory: manifest plus arrays in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    data: Vec<Vec<f32>>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn new<M: Serialize>(kind: &str, seed: u64, meta: &M) -> Result<Self> {
        Ok(Checkpoint {
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                kind: kind.to_string(),
                seed,
                arrays: Vec::new(),
                sha256: String::new(),
                meta: serde_json::to_value(meta)?,
            },
            data: Vec::new(),
        })
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let entry = ArrayEntry { name: name.into(), shape };
        if entry.numel() != data.len() {
            return Err(Error::shape("Checkpoint::push", format!("{} for {:?}", data.len(), entry.shape)));
        }
        self.manifest.arrays.push(entry);
        self.data.push(data);
        Ok(())
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        Ok(serde_json::from_value(self.manifest.meta.clone())?)
    }

    /// Array `name` with its shape.
    pub fn array(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.manifest
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| (self.manifest.arrays[i].shape.as_slice(), self.data[i].as_slice()))
            .ok_or_else(|| Error::CorruptCheckpoint {
                path: PathBuf::from(&self.manifest.kind),
                reason: format!("missing array {name}"),
            })
    }

    fn payload(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(4 * self.data.iter().map(Vec::len).sum::<usize>());
        for v in self.data.iter().flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    /// Writes `dir/stem.bin` then `dir/stem.json`, each atomically.
    pub fn save(&mut self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (json, bin) = paths(dir, stem);
        let bytes = self.payload();
        self.manifest.sha256 = hex::encode(Sha256::digest(&bytes));
        write_atomic(&bin, &bytes)?;
        write_atomic(&json, serde_json::to_string_pretty(&self.manifest)?.as_bytes())?;
        Ok(())
    }

    pub fn exists(dir: &Path, stem: &str) -> bool {
        let (json, bin) = paths(dir, stem);
        json.is_file() && bin.is_file()
    }

    /// Loads and verifies `dir/stem`; `kind` must match the manifest.
    pub fn load(dir: &Path, stem: &str, kind: &str) -> Result<Self> {
        let (json, bin) = paths(dir, stem);
        for p in [&json, &bin] {
            if !p.is_file() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let corrupt = |path: &Path, reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(&json)?).map_err(|e| corrupt(&json, format!("manifest: {e}")))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(corrupt(&json, format!("schema version {}", manifest.schema_version)));
        }
        if manifest.kind != kind {
            return Err(corrupt(&json, format!("expected kind {kind}, found {}", manifest.kind)));
        }
        let bytes = fs::read(&bin)?;
        let expected: usize = manifest.arrays.iter().map(ArrayEntry::numel).sum();
        if bytes.len() != 4 * expected {
            return Err(corrupt(&bin, format!("{} bytes, expected {}", bytes.len(), 4 * expected)));
        }
        if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
            return Err(corrupt(&bin, "content hash mismatch".into()));
        }
        let mut data = Vec::with_capacity(manifest.arrays.len());
        let mut words = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for a in &manifest.arrays {
            data.push(words.by_ref().take(a.numel()).collect());
        }
        Ok(Checkpoint { manifest, data })
    }
}
