//! JSON-over-HTTP inference client.
//!
//! Protocol: POST {endpoint}/encode_formal, /decode_formal, /encode_context,
//! /interrogate, /generate, /count_tokens. Images travel as base64 PNG,
//! latents as arrays of 32-bit floats; every response echoes checkpoint_id.

use std::io::Cursor;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    strip_artist_flavors, ContextLatent, FormalLatent, Gateway, GatewayError, GenerationParams,
    ImageTensor, Result, CONTEXT_DIM, FORMAL_DIM, IMAGE_SIZE,
};

const RETRY_ATTEMPTS: u32 = 3;
const BACKOFF_BASE_MS: u64 = 100;

pub struct RemoteBackend {
    endpoint: String,
    checkpoint_id: String,
    artist_flavors: Vec<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(
        endpoint: impl Into<String>,
        checkpoint_id: impl Into<String>,
        artist_flavors: Vec<String>,
    ) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(120))
            .build();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            checkpoint_id: checkpoint_id.into(),
            artist_flavors,
            agent,
        }
    }

    /// POST with retry: 3 attempts, exponential backoff, idempotent
    /// requests only (all gateway operations are deterministic).
    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, op: &str, req: &Req) -> Result<Resp> {
        let url = format!("{}/{op}", self.endpoint);
        let mut last_err = String::new();
        for attempt in 0..RETRY_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(BACKOFF_BASE_MS << (attempt - 1)));
            }
            match self.agent.post(&url).send_json(serde_json::to_value(req).map_err(
                |e| GatewayError::Contract(format!("request serialization: {e}")),
            )?) {
                Ok(resp) => {
                    return resp.into_json::<Resp>().map_err(|e| {
                        GatewayError::Contract(format!("bad response from {op}: {e}"))
                    });
                }
                Err(ureq::Error::Status(code, resp)) if code >= 400 && code < 500 => {
                    let body = resp.into_string().unwrap_or_default();
                    return Err(GatewayError::Contract(format!("{op} returned {code}: {body}")));
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(GatewayError::Transport(format!("{op}: {last_err}")))
    }
}

fn encode_png(image: &ImageTensor) -> Result<String> {
    let img = image::RgbImage::from_raw(
        IMAGE_SIZE as u32,
        IMAGE_SIZE as u32,
        image.as_bytes().to_vec(),
    )
    .expect("canonical tensor size");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| GatewayError::Contract(format!("png encode: {e}")))?;
    Ok(BASE64.encode(buf.into_inner()))
}

fn decode_png(b64: &str) -> Result<ImageTensor> {
    let bytes = BASE64
        .decode(b64)
        .map_err(|e| GatewayError::Contract(format!("image is not valid base64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| GatewayError::Contract(format!("image is not valid png: {e}")))?
        .to_rgb8();
    if img.width() as usize != IMAGE_SIZE || img.height() as usize != IMAGE_SIZE {
        return Err(GatewayError::Contract(format!(
            "backend returned a {}x{} image, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
            img.width(),
            img.height()
        )));
    }
    ImageTensor::from_raw(img.into_raw())
}

#[derive(Serialize)]
struct ImageRequest {
    image: String,
}

#[derive(Serialize)]
struct LatentRequest {
    latent: Vec<f32>,
}

#[derive(Serialize)]
struct PromptRequest {
    prompt: String,
}

#[derive(Serialize)]
struct GenerateRequest {
    image: String,
    prompt: String,
    ddim_steps: u32,
    diffusion_steps: u32,
    seed: u64,
}

#[derive(Deserialize)]
struct LatentResponse {
    latent: Vec<f32>,
    #[allow(dead_code)]
    checkpoint_id: String,
}

#[derive(Deserialize)]
struct ImageResponse {
    image: String,
    #[allow(dead_code)]
    checkpoint_id: String,
}

#[derive(Deserialize)]
struct PromptResponse {
    prompt: String,
    #[allow(dead_code)]
    checkpoint_id: String,
}

#[derive(Deserialize)]
struct CountResponse {
    count: usize,
    #[allow(dead_code)]
    checkpoint_id: String,
}

impl Gateway for RemoteBackend {
    fn encode_formal(&self, image: &ImageTensor) -> Result<FormalLatent> {
        let resp: LatentResponse =
            self.post("encode_formal", &ImageRequest { image: encode_png(image)? })?;
        if resp.latent.len() != FORMAL_DIM {
            return Err(GatewayError::Contract(format!(
                "encode_formal returned {} values, expected {FORMAL_DIM}",
                resp.latent.len()
            )));
        }
        FormalLatent::new(resp.latent)
    }

    fn decode_formal(&self, latent: &FormalLatent) -> Result<ImageTensor> {
        let resp: ImageResponse =
            self.post("decode_formal", &LatentRequest { latent: latent.0.clone() })?;
        decode_png(&resp.image)
    }

    fn encode_context(&self, image: &ImageTensor) -> Result<ContextLatent> {
        let resp: LatentResponse =
            self.post("encode_context", &ImageRequest { image: encode_png(image)? })?;
        if resp.latent.len() != CONTEXT_DIM {
            return Err(GatewayError::Contract(format!(
                "encode_context returned {} values, expected {CONTEXT_DIM}",
                resp.latent.len()
            )));
        }
        ContextLatent::new(resp.latent)
    }

    fn count_tokens(&self, prompt: &str) -> Result<usize> {
        let resp: CountResponse =
            self.post("count_tokens", &PromptRequest { prompt: prompt.to_string() })?;
        Ok(resp.count)
    }

    fn generate(&self, image: &ImageTensor, params: &GenerationParams) -> Result<ImageTensor> {
        params.validate()?;
        if params.diffusion_steps == 0 {
            // Identity on images, independent of the backend.
            return Ok(image.clone());
        }
        let resp: ImageResponse = self.post(
            "generate",
            &GenerateRequest {
                image: encode_png(image)?,
                prompt: params.prompt.clone(),
                ddim_steps: params.ddim_steps,
                diffusion_steps: params.diffusion_steps,
                seed: params.seed,
            },
        )?;
        decode_png(&resp.image)
    }

    fn interrogate(&self, image: &ImageTensor) -> Result<String> {
        let resp: PromptResponse =
            self.post("interrogate", &ImageRequest { image: encode_png(image)? })?;
        Ok(strip_artist_flavors(&resp.prompt, &self.artist_flavors))
    }

    fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }
}
