//! Uniform contract over the pretrained models: formal autoencoder
//! encode/decode, contextual image encoding, prompt interrogation, token
//! counting and guided image-to-image generation. Two interchangeable
//! backends implement it: a remote JSON-over-HTTP client and a fully
//! deterministic mock.

mod cache;
mod mock;
mod remote;

pub use cache::CachedGateway;
pub use mock::{MockBackend, MockFixture, MockProfile};
pub use remote::RemoteBackend;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::fnv1a64;

/// Canonical image side length.
pub const IMAGE_SIZE: usize = 512;
/// Formal latent dimension: flattening of a channel-major 4x64x64 grid.
pub const FORMAL_DIM: usize = 16_384;
/// Contextual latent dimension.
pub const CONTEXT_DIM: usize = 1_024;
/// Text-encoder token budget; tokens past it are ignored with a warning.
pub const TOKEN_BUDGET: usize = 77;
/// Default DDIM schedule length.
pub const DEFAULT_DDIM_STEPS: u32 = 50;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after retries: {0}")]
    Transport(String),
    #[error("backend contract violation: {0}")]
    Contract(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GatewayError>;

/// A 512x512x3 8-bit RGB image, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    pixels: Vec<u8>,
}

impl ImageTensor {
    pub const BYTE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * 3;

    pub fn from_raw(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != Self::BYTE_LEN {
            return Err(GatewayError::Precondition(format!(
                "image tensor must hold {} bytes, got {}",
                Self::BYTE_LEN,
                pixels.len()
            )));
        }
        Ok(Self { pixels })
    }

    /// Uniform color image.
    pub fn flat(r: u8, g: u8, b: u8) -> Self {
        let mut pixels = Vec::with_capacity(Self::BYTE_LEN);
        for _ in 0..IMAGE_SIZE * IMAGE_SIZE {
            pixels.extend_from_slice(&[r, g, b]);
        }
        Self { pixels }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.pixels
    }

    /// 64-bit content digest of the pixel bytes.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.pixels)
    }

    /// Per-channel means and a contrast proxy (mean absolute deviation of
    /// luma from its mean), computed from pixels.
    pub fn pixel_stats(&self) -> [f32; 4] {
        let n = (IMAGE_SIZE * IMAGE_SIZE) as f64;
        let mut sums = [0f64; 3];
        for px in self.pixels.chunks_exact(3) {
            sums[0] += px[0] as f64;
            sums[1] += px[1] as f64;
            sums[2] += px[2] as f64;
        }
        let means = [sums[0] / n, sums[1] / n, sums[2] / n];
        let mean_luma = (means[0] + means[1] + means[2]) / 3.0;
        let mut dev = 0f64;
        for px in self.pixels.chunks_exact(3) {
            let luma = (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0;
            dev += (luma - mean_luma).abs();
        }
        [
            means[0] as f32,
            means[1] as f32,
            means[2] as f32,
            (dev / n) as f32,
        ]
    }
}

/// 16,384-d formal latent (A-vector).
#[derive(Debug, Clone, PartialEq)]
pub struct FormalLatent(pub Vec<f32>);

/// 1,024-d contextual latent (C-vector).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextLatent(pub Vec<f32>);

impl FormalLatent {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_latent(&values, FORMAL_DIM)?;
        Ok(Self(values))
    }
}

impl ContextLatent {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_latent(&values, CONTEXT_DIM)?;
        Ok(Self(values))
    }
}

fn check_latent(values: &[f32], dim: usize) -> Result<()> {
    if values.len() != dim {
        return Err(GatewayError::Contract(format!(
            "latent must have {dim} values, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(GatewayError::Contract(format!(
            "latent has non-finite value at coordinate {i}"
        )));
    }
    Ok(())
}

/// Parameters for guided image-to-image generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    /// Empty prompt denotes the null (random-diffusion) condition.
    pub prompt: String,
    pub ddim_steps: u32,
    pub diffusion_steps: u32,
    pub seed: u64,
}

impl GenerationParams {
    pub fn new(prompt: impl Into<String>, diffusion_steps: u32, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            ddim_steps: DEFAULT_DDIM_STEPS,
            diffusion_steps,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ddim_steps == 0 {
            return Err(GatewayError::Precondition("ddim_steps must be positive".into()));
        }
        if self.diffusion_steps > self.ddim_steps {
            return Err(GatewayError::Precondition(format!(
                "diffusion_steps {} exceeds ddim_steps {}",
                self.diffusion_steps, self.ddim_steps
            )));
        }
        Ok(())
    }
}

/// Which backend a pipeline run talks to.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDescriptor {
    Remote {
        endpoint: String,
        checkpoint_id: String,
        #[serde(default)]
        artist_flavors: Vec<String>,
    },
    Mock {
        mock_profile: std::path::PathBuf,
        #[serde(default = "default_mock_checkpoint")]
        checkpoint_id: String,
    },
}

fn default_mock_checkpoint() -> String {
    "mock-512-v1".to_string()
}

/// The model gateway contract. All operations are deterministic functions
/// of (inputs, backend descriptor).
pub trait Gateway: Send + Sync {
    fn encode_formal(&self, image: &ImageTensor) -> Result<FormalLatent>;
    fn decode_formal(&self, latent: &FormalLatent) -> Result<ImageTensor>;
    fn encode_context(&self, image: &ImageTensor) -> Result<ContextLatent>;
    fn count_tokens(&self, prompt: &str) -> Result<usize>;
    fn generate(&self, image: &ImageTensor, params: &GenerationParams) -> Result<ImageTensor>;
    fn interrogate(&self, image: &ImageTensor) -> Result<String>;
    fn checkpoint_id(&self) -> &str;
}

/// Tokenize the way the text encoder counts: whitespace-delimited units,
/// with each comma its own token.
pub fn tokenize_for_budget(prompt: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in prompt.chars() {
        if ch == ',' {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(",".to_string());
        } else if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Token count plus whether the prompt overflows the 77-token budget.
pub fn token_budget_report(prompt: &str) -> (usize, bool) {
    let count = tokenize_for_budget(prompt).len();
    (count, count > TOKEN_BUDGET)
}

/// Drop comma-separated prompt segments matching a configured artist-name
/// flavor. Applied to every interrogation result before return.
pub fn strip_artist_flavors(prompt: &str, artist_flavors: &[String]) -> String {
    if artist_flavors.is_empty() {
        return prompt.to_string();
    }
    prompt
        .split(',')
        .map(str::trim)
        .filter(|segment| {
            !artist_flavors
                .iter()
                .any(|a| segment.eq_ignore_ascii_case(a.trim()))
        })
        .collect::<Vec<_>>()
        .join(", ")
}
