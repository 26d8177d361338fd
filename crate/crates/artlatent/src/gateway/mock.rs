//! Deterministic mock backend.
//!
//! Behavior is fully specified so tests can rely on it:
//! - `h` is the 64-bit FNV-1a digest of the image bytes and `r(h, i)` a
//!   counter-based uniform generator in [-1, 1).
//! - `encode_formal` returns r-generated values except coordinates 0-3,
//!   which hold (mean R, mean G, mean B, contrast proxy).
//! - `decode_formal` reconstructs a flat image from coordinates 0-2.
//! - `encode_context` returns r-generated values except coordinate 0
//!   (year signal) and coordinate 1 (style signal), looked up from the
//!   fixture table by image digest; unknown images fall back to the noise
//!   attractor signals.
//! - `generate` interpolates the context signals toward the prompt's
//!   century signal (or toward the noise attractor, year 1950, for the
//!   empty prompt) by fraction diffusion_steps/ddim_steps, leaving the
//!   formal statistics of the source unchanged.
//!
//! Generated images are self-describing: they carry a small header with the
//! preserved formal statistics and the drifted context signals, so that
//! re-encoding a generated image in a fresh process reproduces the same
//! latents without shared state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    strip_artist_flavors, tokenize_for_budget, ContextLatent, FormalLatent, Gateway,
    GatewayError, GenerationParams, ImageTensor, Result, CONTEXT_DIM, FORMAL_DIM, TOKEN_BUDGET,
};
use crate::util::{counter_uniform, fnv1a64_parts};

const HEADER_MAGIC: &[u8; 8] = b"ALMOCK1\0";
const HEADER_LEN: usize = 8 + 6 * 4 + 8;

fn default_noise_year() -> f32 {
    1950.0
}

/// Per-image fixture entry, keyed by content digest.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MockFixture {
    pub year_signal: f32,
    #[serde(default)]
    pub style_signal: f32,
    #[serde(default)]
    pub prompt: Option<String>,
}

/// Fixture table plus the constants the mock drift model needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockProfile {
    /// Image digest (16 lowercase hex chars) -> fixture entry.
    #[serde(default)]
    pub fixtures: HashMap<String, MockFixture>,
    /// Prompt word -> century it tags (e.g. "wig" -> 1700).
    #[serde(default)]
    pub century_vocab: HashMap<String, i32>,
    /// Century -> style signal its prompt drifts toward.
    #[serde(default)]
    pub century_style: BTreeMap<i32, f32>,
    /// Noise attractor year signal; white noise reads as mid-20th century.
    #[serde(default = "default_noise_year")]
    pub noise_year: f32,
    #[serde(default)]
    pub noise_style: f32,
    /// Interrogation result for images absent from the fixture table.
    #[serde(default)]
    pub default_prompt: Option<String>,
    /// Artist-name flavors stripped from interrogation results.
    #[serde(default)]
    pub artist_flavors: Vec<String>,
}

impl Default for MockProfile {
    fn default() -> Self {
        Self {
            fixtures: HashMap::new(),
            century_vocab: HashMap::new(),
            century_style: BTreeMap::new(),
            noise_year: default_noise_year(),
            noise_style: 0.0,
            default_prompt: None,
            artist_flavors: Vec::new(),
        }
    }
}

impl MockProfile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::Config(format!("bad mock profile {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| GatewayError::Config(format!("cannot serialize mock profile: {e}")))?;
        crate::util::atomic_write(path, &bytes)?;
        Ok(())
    }
}

pub struct MockBackend {
    profile: MockProfile,
    checkpoint_id: String,
}

impl MockBackend {
    pub fn new(profile: MockProfile, checkpoint_id: impl Into<String>) -> Self {
        Self {
            profile,
            checkpoint_id: checkpoint_id.into(),
        }
    }

    pub fn profile(&self) -> &MockProfile {
        &self.profile
    }

    /// Formal statistics: header values for generated images, pixel
    /// statistics otherwise.
    fn stats_of(&self, image: &ImageTensor) -> [f32; 4] {
        match read_header(image) {
            Some(h) => h.stats,
            None => image.pixel_stats(),
        }
    }

    /// Context signals: header values for generated images, fixture lookup
    /// otherwise, noise attractor for unknown images.
    fn signals_of(&self, image: &ImageTensor) -> (f32, f32) {
        if let Some(h) = read_header(image) {
            return (h.year_signal, h.style_signal);
        }
        let key = format!("{:016x}", image.digest());
        match self.profile.fixtures.get(&key) {
            Some(f) => (f.year_signal, f.style_signal),
            None => (self.profile.noise_year, self.profile.noise_style),
        }
    }

    /// Majority-vote century over the (budget-truncated) prompt tokens.
    fn prompt_century(&self, tokens: &[String]) -> Result<i32> {
        let mut votes: BTreeMap<i32, usize> = BTreeMap::new();
        for t in tokens {
            if t == "," {
                continue;
            }
            if let Some(&c) = self.profile.century_vocab.get(t.as_str()) {
                *votes.entry(c).or_insert(0) += 1;
            }
        }
        votes
            .into_iter()
            // max_by_key keeps the later element on ties; iterate in reverse
            // century order so ties resolve to the smallest century.
            .rev()
            .max_by_key(|&(_, n)| n)
            .map(|(c, _)| c)
            .ok_or_else(|| {
                GatewayError::Config("prompt has no century-tagged tokens".to_string())
            })
    }
}

struct Header {
    stats: [f32; 4],
    year_signal: f32,
    style_signal: f32,
}

fn read_header(image: &ImageTensor) -> Option<Header> {
    let bytes = image.as_bytes();
    if &bytes[..8] != HEADER_MAGIC {
        return None;
    }
    let f = |i: usize| {
        let off = 8 + i * 4;
        f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
    };
    Some(Header {
        stats: [f(0), f(1), f(2), f(3)],
        year_signal: f(4),
        style_signal: f(5),
    })
}

fn write_header_image(stats: [f32; 4], year: f32, style: f32, uniq: u64) -> ImageTensor {
    let clamp = |v: f32| v.round().clamp(0.0, 255.0) as u8;
    let mut img = ImageTensor::flat(clamp(stats[0]), clamp(stats[1]), clamp(stats[2])).into_bytes();
    img[..8].copy_from_slice(HEADER_MAGIC);
    let fields = [stats[0], stats[1], stats[2], stats[3], year, style];
    for (i, v) in fields.iter().enumerate() {
        let off = 8 + i * 4;
        img[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }
    let off = 8 + 6 * 4;
    img[off..off + 8].copy_from_slice(&uniq.to_le_bytes());
    debug_assert!(HEADER_LEN <= ImageTensor::BYTE_LEN);
    ImageTensor::from_raw(img).expect("header image has canonical size")
}

impl Gateway for MockBackend {
    fn encode_formal(&self, image: &ImageTensor) -> Result<FormalLatent> {
        let h = image.digest();
        let stats = self.stats_of(image);
        let mut values = Vec::with_capacity(FORMAL_DIM);
        values.extend_from_slice(&stats);
        for i in 4..FORMAL_DIM {
            values.push(counter_uniform(h, i as u64));
        }
        FormalLatent::new(values)
    }

    fn decode_formal(&self, latent: &FormalLatent) -> Result<ImageTensor> {
        if latent.0.len() != FORMAL_DIM {
            return Err(GatewayError::Contract(format!(
                "formal latent must have {FORMAL_DIM} values, got {}",
                latent.0.len()
            )));
        }
        let clamp = |v: f32| v.round().clamp(0.0, 255.0) as u8;
        Ok(ImageTensor::flat(
            clamp(latent.0[0]),
            clamp(latent.0[1]),
            clamp(latent.0[2]),
        ))
    }

    fn encode_context(&self, image: &ImageTensor) -> Result<ContextLatent> {
        let h = image.digest();
        let (year, style) = self.signals_of(image);
        let mut values = Vec::with_capacity(CONTEXT_DIM);
        values.push(year);
        values.push(style);
        for i in 2..CONTEXT_DIM {
            values.push(counter_uniform(h, i as u64));
        }
        ContextLatent::new(values)
    }

    fn count_tokens(&self, prompt: &str) -> Result<usize> {
        Ok(tokenize_for_budget(prompt).len())
    }

    fn generate(&self, image: &ImageTensor, params: &GenerationParams) -> Result<ImageTensor> {
        params.validate()?;
        if params.diffusion_steps == 0 {
            return Ok(image.clone());
        }
        let mut tokens = tokenize_for_budget(&params.prompt);
        if tokens.len() > TOKEN_BUDGET {
            log::warn!(
                "prompt has {} tokens; tokens beyond {TOKEN_BUDGET} are ignored",
                tokens.len()
            );
            tokens.truncate(TOKEN_BUDGET);
        }
        let (target_year, target_style) = if params.prompt.trim().is_empty() {
            (self.profile.noise_year, self.profile.noise_style)
        } else {
            let century = self.prompt_century(&tokens)?;
            let style = self.profile.century_style.get(&century).copied().unwrap_or(0.0);
            (century as f32, style)
        };
        let frac = params.diffusion_steps as f32 / params.ddim_steps as f32;
        let stats = self.stats_of(image);
        let (year, style) = self.signals_of(image);
        let new_year = year + frac * (target_year - year);
        let new_style = style + frac * (target_style - style);
        let uniq = fnv1a64_parts(&[
            &image.digest().to_le_bytes(),
            params.prompt.as_bytes(),
            &params.ddim_steps.to_le_bytes(),
            &params.diffusion_steps.to_le_bytes(),
            &params.seed.to_le_bytes(),
        ]);
        Ok(write_header_image(stats, new_year, new_style, uniq))
    }

    fn interrogate(&self, image: &ImageTensor) -> Result<String> {
        let key = format!("{:016x}", image.digest());
        let prompt = match self.profile.fixtures.get(&key).and_then(|f| f.prompt.clone()) {
            Some(p) => p,
            None => self.profile.default_prompt.clone().ok_or_else(|| {
                GatewayError::Config(format!("no fixture prompt for image digest {key}"))
            })?,
        };
        Ok(strip_artist_flavors(&prompt, &self.profile.artist_flavors))
    }

    fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }
}
