//! Latent store: embedding matrices persisted with painting-id alignment
//! and integrity checks.
//!
//! Layout: a directory holding `manifest.json`, `vectors.f32` (little-endian
//! 32-bit floats, row-major, no compression) and `ids.txt` (one id per
//! line, UTF-8). The manifest is written last via temp-file-plus-rename, so
//! an interrupted save leaves no manifest and the store reads as absent.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CONTEXT_DIM, FORMAL_DIM};
use crate::util::{atomic_write, fnv1a64};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store not found at {0}")]
    Absent(String),
    #[error("storage failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("store contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Which latent space a matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    A,
    C,
}

impl Space {
    pub fn dim(self) -> usize {
        match self {
            Space::A => FORMAL_DIM,
            Space::C => CONTEXT_DIM,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Space::A => "a",
            Space::C => "c",
        }
    }
}

impl std::str::FromStr for Space {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Space::A),
            "c" => Ok(Space::C),
            other => Err(format!("unknown space '{other}', expected 'a' or 'c'")),
        }
    }
}

/// An n x d matrix of 32-bit floats with row-aligned painting ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub space: Space,
    pub d: usize,
    pub values: Vec<f32>,
    pub ids: Vec<String>,
    pub checkpoint_id: String,
}

impl EmbeddingMatrix {
    pub fn new(space: Space, ids: Vec<String>, values: Vec<f32>, checkpoint_id: String) -> Result<Self> {
        let d = space.dim();
        let m = Self { space, d, values, ids, checkpoint_id };
        m.validate()?;
        Ok(m)
    }

    /// Empty matrix with the space's canonical dimension.
    pub fn empty(space: Space, checkpoint_id: String) -> Self {
        Self { space, d: space.dim(), values: Vec::new(), ids: Vec::new(), checkpoint_id }
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn row_of(&self, id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|x| x == id).map(|i| self.row(i))
    }

    fn validate(&self) -> Result<()> {
        if self.d != self.space.dim() {
            return Err(StoreError::Contract(format!(
                "dimension {} does not match space {:?}",
                self.d, self.space
            )));
        }
        if self.values.len() != self.ids.len() * self.d {
            return Err(StoreError::Contract(format!(
                "values length {} does not match {} rows x {} dims",
                self.values.len(),
                self.ids.len(),
                self.d
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.ids {
            if !seen.insert(id) {
                return Err(StoreError::Contract(format!("duplicate id '{id}'")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    space: Space,
    n: usize,
    d: usize,
    checksum: String,
    checkpoint_id: String,
    vectors_file: String,
    ids_file: String,
}

fn values_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Persist a matrix. The payload files land first, the manifest last, so a
/// partially written store is invisible to loaders.
pub fn save_embeddings(m: &EmbeddingMatrix, dir: &Path) -> Result<(std::path::PathBuf, String)> {
    m.validate()?;
    fs::create_dir_all(dir)?;
    let payload = values_bytes(&m.values);
    let checksum = format!("{:016x}", fnv1a64(&payload));

    let cleanup = |e: std::io::Error| {
        let _ = fs::remove_file(dir.join("vectors.f32"));
        let _ = fs::remove_file(dir.join("ids.txt"));
        StoreError::Io(e)
    };
    atomic_write(&dir.join("vectors.f32"), &payload).map_err(cleanup)?;
    let mut ids_text = m.ids.join("\n");
    if !m.ids.is_empty() {
        ids_text.push('\n');
    }
    atomic_write(&dir.join("ids.txt"), ids_text.as_bytes()).map_err(cleanup)?;

    let manifest = Manifest {
        space: m.space,
        n: m.n(),
        d: m.d,
        checksum: checksum.clone(),
        checkpoint_id: m.checkpoint_id.clone(),
        vectors_file: "vectors.f32".into(),
        ids_file: "ids.txt".into(),
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| StoreError::Contract(format!("manifest serialization: {e}")))?;
    atomic_write(&dir.join("manifest.json"), &manifest_bytes).map_err(cleanup)?;
    Ok((dir.to_path_buf(), checksum))
}

/// Load a matrix, verifying the checksum and the manifest-vs-payload shape.
pub fn load_embeddings(dir: &Path) -> Result<EmbeddingMatrix> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(StoreError::Absent(dir.display().to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| StoreError::Corrupt(format!("manifest: {e}")))?;

    if manifest.d != manifest.space.dim() {
        return Err(StoreError::Contract(format!(
            "manifest d {} does not match space {:?}",
            manifest.d, manifest.space
        )));
    }

    let payload = fs::read(dir.join(&manifest.vectors_file))?;
    let checksum = format!("{:016x}", fnv1a64(&payload));
    if checksum != manifest.checksum {
        return Err(StoreError::Corrupt(format!(
            "checksum mismatch: manifest {} vs payload {checksum}",
            manifest.checksum
        )));
    }
    if payload.len() != manifest.n * manifest.d * 4 {
        return Err(StoreError::Corrupt(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            manifest.n * manifest.d * 4
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let ids_text = fs::read_to_string(dir.join(&manifest.ids_file))?;
    let ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
    if ids.len() != manifest.n {
        return Err(StoreError::Corrupt(format!(
            "ids file holds {} ids, manifest says {}",
            ids.len(),
            manifest.n
        )));
    }

    let m = EmbeddingMatrix {
        space: manifest.space,
        d: manifest.d,
        values,
        ids,
        checkpoint_id: manifest.checkpoint_id,
    };
    m.validate()
        .map_err(|e| StoreError::Corrupt(e.to_string()))?;
    Ok(m)
}
