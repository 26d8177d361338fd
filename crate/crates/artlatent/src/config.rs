//! Pipeline configuration: one structured file surfacing every module's
//! documented defaults, plus the workspace layout derived from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{ProjectionMethod, DEFAULT_PAIR_BUDGET};
use crate::chronometry::{GbtParams, SplitSpec, LOWESS_FRAC, LOWESS_ITERS};
use crate::corpus::FilterConfig;
use crate::gateway::BackendDescriptor;
use crate::timeshift::ExperimentPlan;
use crate::util::fnv1a64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Read(String, std::io::Error),
    #[error("invalid config {0}: {1}")]
    Parse(String, serde_json::Error),
    #[error("config references missing path: {0}")]
    MissingPath(String),
    #[error("workspace not writable: {0}")]
    Workspace(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub metadata: PathBuf,
    pub images: PathBuf,
    pub workspace: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowessParams {
    #[serde(default = "default_frac")]
    pub frac: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
}

fn default_frac() -> f64 {
    LOWESS_FRAC
}

fn default_iters() -> usize {
    LOWESS_ITERS
}

impl Default for LowessParams {
    fn default() -> Self {
        Self { frac: LOWESS_FRAC, iters: LOWESS_ITERS }
    }
}

/// Optional exclusion-list files (one lowercase token per line). The
/// keywords stage merges these with lists derived from corpus metadata.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExclusionPaths {
    #[serde(default)]
    pub artists: Option<PathBuf>,
    #[serde(default)]
    pub movements: Option<PathBuf>,
}

fn default_image_column() -> String {
    "image_path".to_string()
}

fn default_pca_components() -> usize {
    4
}

fn default_distance_budget() -> usize {
    DEFAULT_PAIR_BUDGET
}

fn default_true() -> bool {
    true
}

fn default_min_support() -> usize {
    1
}

fn default_projection() -> ProjectionMethod {
    ProjectionMethod::Pca
}

fn default_noise_probe_n() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Metadata column holding the image path.
    #[serde(default = "default_image_column")]
    pub image_column: String,
    #[serde(default)]
    pub filter: FilterConfig,
    pub backend: BackendDescriptor,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub gbt: GbtParams,
    #[serde(default)]
    pub lowess: LowessParams,
    #[serde(default = "default_pca_components")]
    pub pca_components: usize,
    #[serde(default = "default_distance_budget")]
    pub distance_budget: usize,
    /// Per-document L2 normalization of TF-IDF scores.
    #[serde(default = "default_true")]
    pub tfidf_l2_normalize: bool,
    /// Minimum total raw count for a word to enter trend rankings.
    #[serde(default = "default_min_support")]
    pub min_support: usize,
    #[serde(default = "default_projection")]
    pub projection: ProjectionMethod,
    pub experiment: ExperimentPlan,
    #[serde(default)]
    pub exclusions: ExclusionPaths,
    #[serde(default = "default_noise_probe_n")]
    pub noise_probe_n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| ConfigError::Read(path.display().to_string(), e))?;
        let cfg: Self = serde_json::from_slice(&bytes)
            .map_err(|e| ConfigError::Parse(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Referenced inputs must exist; the workspace must be writable.
    pub fn validate(&self) -> Result<()> {
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(ConfigError::MissingPath(format!("{what}: {}", p.display())))
            }
        };
        must_exist(&self.paths.metadata, "metadata")?;
        must_exist(&self.paths.images, "images")?;
        if let BackendDescriptor::Mock { mock_profile, .. } = &self.backend {
            must_exist(mock_profile, "mock profile")?;
        }
        if let Some(p) = &self.exclusions.artists {
            must_exist(p, "artist exclusion list")?;
        }
        if let Some(p) = &self.exclusions.movements {
            must_exist(p, "movement exclusion list")?;
        }
        std::fs::create_dir_all(&self.paths.workspace)
            .map_err(|e| ConfigError::Workspace(format!("{}: {e}", self.paths.workspace.display())))?;
        let probe = self.paths.workspace.join(".write-probe");
        std::fs::write(&probe, b"")
            .map_err(|e| ConfigError::Workspace(format!("{}: {e}", probe.display())))?;
        let _ = std::fs::remove_file(&probe);
        Ok(())
    }

    /// Stable digest over the canonical serialization; all randomness flows
    /// from seeds inside the config, so this digest determines every output.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:016x}", fnv1a64(&bytes))
    }

    pub fn workspace(&self) -> Workspace {
        Workspace { root: self.paths.workspace.clone() }
    }
}

/// Canonical artifact layout under the workspace root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn corpus_records(&self) -> PathBuf {
        self.root.join("corpus/records.json")
    }
    pub fn drop_report(&self) -> PathBuf {
        self.root.join("corpus/drop_report.json")
    }
    pub fn corpus_images(&self) -> PathBuf {
        self.root.join("corpus/images")
    }
    pub fn embeddings(&self, space: crate::store::Space) -> PathBuf {
        self.root.join(format!("embeddings/{}", space.tag()))
    }
    pub fn pca(&self, space: crate::store::Space) -> PathBuf {
        self.root.join(format!("pca/{}", space.tag()))
    }
    pub fn year_model(&self, space: crate::store::Space) -> PathBuf {
        self.root.join(format!("models/year-{}", space.tag()))
    }
    pub fn split_file(&self, space: crate::store::Space) -> PathBuf {
        self.year_model(space).join("split.json")
    }
    pub fn eval_report(&self, space: crate::store::Space) -> PathBuf {
        self.root.join(format!("analysis/eval-year-{}.json", space.tag()))
    }
    pub fn prompt_docs(&self) -> PathBuf {
        self.root.join("prompts/docs.json")
    }
    pub fn keyword_sets(&self) -> PathBuf {
        self.root.join("prompts/keywords.json")
    }
    pub fn century_prompts(&self) -> PathBuf {
        self.root.join("prompts/century_prompts.json")
    }
    pub fn distances(&self) -> PathBuf {
        self.root.join("analysis/distances.json")
    }
    pub fn trends(&self) -> PathBuf {
        self.root.join("analysis/trends.json")
    }
    pub fn projection2d(&self, space: crate::store::Space) -> PathBuf {
        self.root.join(format!("analysis/projection2d-{}.tsv", space.tag()))
    }
    pub fn experiment_records(&self) -> PathBuf {
        self.root.join("experiment/records.json")
    }
    pub fn experiment_summary(&self) -> PathBuf {
        self.root.join("experiment/summary.json")
    }
    pub fn noise_probe(&self) -> PathBuf {
        self.root.join("analysis/noise_probe.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn log_dir(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn stamp(&self, stage: &str, digest: &str) -> PathBuf {
        self.root.join(format!(".stamps/{stage}-{digest}"))
    }
}
