//! Content-addressed gateway cache.
//!
//! Results are keyed by (operation, input digest, params digest) and stored
//! as flat files. Gateway operations are deterministic, so concurrent
//! writers racing on the same key are benign (last write wins with equal
//! bytes). Writes are atomic (temp file + rename), so readers never observe
//! partial entries.

use std::path::PathBuf;

use super::{
    ContextLatent, FormalLatent, Gateway, GatewayError, GenerationParams, ImageTensor, Result,
};
use crate::util::{atomic_write, fnv1a64_parts};

pub struct CachedGateway<G> {
    inner: G,
    dir: PathBuf,
}

impl<G: Gateway> CachedGateway<G> {
    pub fn new(inner: G, dir: impl Into<PathBuf>) -> Self {
        Self { inner, dir: dir.into() }
    }

    fn key(&self, op: &str, parts: &[&[u8]]) -> PathBuf {
        let mut all: Vec<&[u8]> = vec![op.as_bytes(), self.inner.checkpoint_id().as_bytes()];
        all.extend_from_slice(parts);
        self.dir.join(format!("{op}-{:016x}", fnv1a64_parts(&all)))
    }

    fn read(&self, path: &PathBuf) -> Option<Vec<u8>> {
        std::fs::read(path).ok()
    }

    fn write(&self, path: &PathBuf, bytes: &[u8]) {
        // Cache failures are non-fatal; the result is already in hand.
        if let Err(e) = atomic_write(path, bytes) {
            log::warn!("cache write failed for {}: {e}", path.display());
        }
    }
}

fn floats_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_floats(bytes: &[u8]) -> Option<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

impl<G: Gateway> Gateway for CachedGateway<G> {
    fn encode_formal(&self, image: &ImageTensor) -> Result<FormalLatent> {
        let path = self.key("encode_formal", &[&image.digest().to_le_bytes()]);
        if let Some(bytes) = self.read(&path) {
            if let Some(values) = bytes_to_floats(&bytes) {
                if let Ok(latent) = FormalLatent::new(values) {
                    return Ok(latent);
                }
            }
        }
        let latent = self.inner.encode_formal(image)?;
        self.write(&path, &floats_to_bytes(&latent.0));
        Ok(latent)
    }

    fn decode_formal(&self, latent: &FormalLatent) -> Result<ImageTensor> {
        let path = self.key("decode_formal", &[&floats_to_bytes(&latent.0)]);
        if let Some(bytes) = self.read(&path) {
            if let Ok(img) = ImageTensor::from_raw(bytes) {
                return Ok(img);
            }
        }
        let img = self.inner.decode_formal(latent)?;
        self.write(&path, img.as_bytes());
        Ok(img)
    }

    fn encode_context(&self, image: &ImageTensor) -> Result<ContextLatent> {
        let path = self.key("encode_context", &[&image.digest().to_le_bytes()]);
        if let Some(bytes) = self.read(&path) {
            if let Some(values) = bytes_to_floats(&bytes) {
                if let Ok(latent) = ContextLatent::new(values) {
                    return Ok(latent);
                }
            }
        }
        let latent = self.inner.encode_context(image)?;
        self.write(&path, &floats_to_bytes(&latent.0));
        Ok(latent)
    }

    fn count_tokens(&self, prompt: &str) -> Result<usize> {
        self.inner.count_tokens(prompt)
    }

    fn generate(&self, image: &ImageTensor, params: &GenerationParams) -> Result<ImageTensor> {
        params.validate()?;
        let params_bytes = serde_json::to_vec(params)
            .map_err(|e| GatewayError::Contract(format!("params serialization: {e}")))?;
        let path = self.key("generate", &[&image.digest().to_le_bytes(), &params_bytes]);
        if let Some(bytes) = self.read(&path) {
            if let Ok(img) = ImageTensor::from_raw(bytes) {
                return Ok(img);
            }
        }
        let img = self.inner.generate(image, params)?;
        self.write(&path, img.as_bytes());
        Ok(img)
    }

    fn interrogate(&self, image: &ImageTensor) -> Result<String> {
        let path = self.key("interrogate", &[&image.digest().to_le_bytes()]);
        if let Some(bytes) = self.read(&path) {
            if let Ok(prompt) = String::from_utf8(bytes) {
                return Ok(prompt);
            }
        }
        let prompt = self.inner.interrogate(image)?;
        self.write(&path, prompt.as_bytes());
        Ok(prompt)
    }

    fn checkpoint_id(&self) -> &str {
        self.inner.checkpoint_id()
    }
}
