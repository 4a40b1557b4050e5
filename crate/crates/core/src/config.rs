//! Run configuration: one TOML file with a section per component. Every
//! field has a default, so a partial file (or none) is valid.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{Embedder, HashedNgramEmbedder, RemoteEmbedder, RemoteEmbedderConfig};
use crate::llm::{ChatBackend, GatewayError, RemoteBackend, RemoteConfig, ScriptedBackend};
use crate::normpool::PoolConfig;
use crate::pipeline::ExtractionConfig;
use crate::rag::NormMode;
use crate::Backoff;

/// Environment variable holding the bearer token for remote endpoints.
pub const API_KEY_ENV: &str = "NORMFORGE_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{field}: {message}")]
    Field {
        field: &'static str,
        message: String,
    },
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "remote" => Ok(Self::Remote),
            _ => Err(format!(
                "unknown backend {s:?} (expected scripted or remote)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingProvider {
    HashedNgram,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: BackendKind,
    pub model_id: String,
    pub max_in_flight: usize,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            backend: BackendKind::Scripted,
            model_id: "scripted".into(),
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSection {
    pub endpoint_url: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for RemoteSection {
    fn default() -> Self {
        let b = Backoff::default();
        Self {
            endpoint_url: String::new(),
            timeout_secs: 60,
            max_retries: 4,
            backoff_base_ms: b.base.as_millis() as u64,
            backoff_max_ms: b.max.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedSection {
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingsSection {
    pub provider: EmbeddingProvider,
    pub dimension: usize,
    pub endpoint_url: String,
    pub model_id: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for EmbeddingsSection {
    fn default() -> Self {
        Self {
            provider: EmbeddingProvider::HashedNgram,
            dimension: 512,
            endpoint_url: String::new(),
            model_id: String::new(),
            timeout_secs: 30,
            max_retries: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub threshold: f64,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self { threshold: 0.97 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSection {
    pub passes: usize,
    pub cap_multiplier: usize,
    pub verify: bool,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        Self {
            passes: 2,
            cap_multiplier: 2,
            verify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RagSection {
    pub k: usize,
    pub norm_mode: NormMode,
}

impl Default for RagSection {
    fn default() -> Self {
        Self {
            k: 5,
            norm_mode: NormMode::All,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub gateway: GatewaySection,
    pub remote: RemoteSection,
    pub scripted: ScriptedSection,
    pub embeddings: EmbeddingsSection,
    pub pool: PoolSection,
    pub extraction: ExtractionSection,
    pub rag: RagSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax {
            path: origin.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Checks every field, naming the first offending one by its dotted path.
    /// Backend-specific requirements are checked by [`Self::build_backend`]
    /// so commands that never call a model do not need them.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.gateway.model_id.trim().is_empty() {
            return Err(field("gateway.model_id", "must not be empty"));
        }
        if self.gateway.max_in_flight < 1 {
            return Err(field("gateway.max_in_flight", "must be at least 1"));
        }
        if self.remote.timeout_secs == 0 {
            return Err(field("remote.timeout_secs", "must be positive"));
        }
        if self.remote.backoff_base_ms > self.remote.backoff_max_ms {
            return Err(field(
                "remote.backoff_base_ms",
                "must not exceed remote.backoff_max_ms",
            ));
        }
        if self.embeddings.dimension < 1 {
            return Err(field("embeddings.dimension", "must be at least 1"));
        }
        if self.embeddings.provider == EmbeddingProvider::Remote {
            if self.embeddings.endpoint_url.trim().is_empty() {
                return Err(field(
                    "embeddings.endpoint_url",
                    "required for the remote provider",
                ));
            }
            if self.embeddings.model_id.trim().is_empty() {
                return Err(field(
                    "embeddings.model_id",
                    "required for the remote provider",
                ));
            }
        }
        let t = self.pool.threshold;
        if !(t.is_finite() && t > 0.0 && t <= 1.0) {
            return Err(field(
                "pool.threshold",
                format!("must be in (0, 1], got {t}"),
            ));
        }
        if self.extraction.passes < 1 {
            return Err(field("extraction.passes", "must be at least 1"));
        }
        if self.extraction.cap_multiplier < 1 {
            return Err(field("extraction.cap_multiplier", "must be at least 1"));
        }
        if self.rag.k < 1 {
            return Err(field("rag.k", "must be at least 1"));
        }
        Ok(())
    }

    pub fn api_key() -> Option<String> {
        std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
    }

    pub fn build_embedder(&self) -> Arc<dyn Embedder> {
        let e = &self.embeddings;
        match e.provider {
            EmbeddingProvider::HashedNgram => Arc::new(HashedNgramEmbedder::new(e.dimension)),
            EmbeddingProvider::Remote => Arc::new(RemoteEmbedder::new(RemoteEmbedderConfig {
                endpoint_url: e.endpoint_url.clone(),
                model_id: e.model_id.clone(),
                dimension: e.dimension,
                timeout: Duration::from_secs(e.timeout_secs),
                max_retries: e.max_retries,
                api_key: Self::api_key(),
            })),
        }
    }

    pub fn build_backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        Ok(match self.gateway.backend {
            BackendKind::Scripted => {
                let path =
                    self.scripted.script.as_deref().ok_or_else(|| {
                        field("scripted.script", "required for the scripted backend")
                    })?;
                Arc::new(ScriptedBackend::from_file(path)?)
            }
            BackendKind::Remote => {
                let r = &self.remote;
                if r.endpoint_url.trim().is_empty() {
                    return Err(field(
                        "remote.endpoint_url",
                        "required for the remote backend",
                    ));
                }
                Arc::new(RemoteBackend::new(RemoteConfig {
                    endpoint_url: r.endpoint_url.clone(),
                    timeout: Duration::from_secs(r.timeout_secs),
                    max_retries: r.max_retries,
                    backoff: Backoff {
                        base: Duration::from_millis(r.backoff_base_ms),
                        max: Duration::from_millis(r.backoff_max_ms),
                    },
                    api_key: Self::api_key(),
                }))
            }
        })
    }

    pub fn extraction_config(&self, provider_id: &str) -> Result<ExtractionConfig, ConfigError> {
        let pool = PoolConfig::new(self.pool.threshold, provider_id)
            .map_err(|e| field("pool.threshold", e.to_string()))?;
        Ok(ExtractionConfig {
            cap_multiplier: self.extraction.cap_multiplier,
            passes: self.extraction.passes,
            verify: self.extraction.verify,
            pool,
        })
    }
}
