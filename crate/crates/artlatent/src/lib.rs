//! Latent-space analytics for a corpus of historical paintings.
//!
//! The pipeline ingests artwork metadata and images, embeds every painting
//! into two latent spaces (a 16,384-d "formal" autoencoder space and a
//! 1,024-d "contextual" multimodal space), and runs the downstream analyses:
//! PCA exploration, year-prediction regression, distance/KS group statistics,
//! keyword culturomics, and a guided image-to-image generation experiment
//! that pushes paintings toward next-century contexts.
//!
//! Model inference is abstracted behind [`gateway::Gateway`], with a remote
//! JSON-over-HTTP client and a fully deterministic mock backend.

pub mod analytics;
pub mod chronometry;
pub mod config;
pub mod corpus;
pub mod culturomics;
pub mod gateway;
pub mod par;
pub mod report;
pub mod store;
pub mod timeshift;
pub mod util;
