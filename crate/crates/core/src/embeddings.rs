//! Text embeddings behind a provider trait, and cosine similarity.
//!
//! Two providers ship: a deterministic hashed character n-gram embedder that
//! needs no network, and a client for an OpenAI-compatible `/embeddings`
//! endpoint.

use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use thiserror::Error;

use crate::corpus::l2_norm;
use crate::http::{self, Backoff, PostError, RetryPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text has no usable features")]
    Degenerate,
    #[error("provider mismatch: {left} vs {right}")]
    ProviderMismatch { left: String, right: String },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding transport failure: {0}")]
    Transport(String),
}

/// Unit-length embedding tagged with the provider that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    provider_id: Arc<str>,
}

impl EmbeddingVector {
    /// Wraps raw values, L2-normalizing them.
    pub fn normalized(
        values: &[f64],
        provider_id: impl Into<Arc<str>>,
    ) -> Result<Self, EmbedError> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(EmbedError::Degenerate);
        }
        Ok(Self {
            values: values.iter().map(|x| (x / norm) as f32).collect(),
            provider_id: provider_id.into(),
        })
    }

    /// Wraps values that are already unit length (e.g. loaded from disk).
    pub fn from_unit(
        values: Vec<f32>,
        provider_id: impl Into<Arc<str>>,
    ) -> Result<Self, EmbedError> {
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > crate::corpus::UNIT_NORM_TOLERANCE {
            return Err(EmbedError::Degenerate);
        }
        Ok(Self {
            values,
            provider_id: provider_id.into(),
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// Cosine similarity of two embeddings from the same provider.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.provider_id != b.provider_id {
        return Err(EmbedError::ProviderMismatch {
            left: a.provider_id.to_string(),
            right: b.provider_id.to_string(),
        });
    }
    if a.values.len() != b.values.len() {
        return Err(EmbedError::DimensionMismatch {
            left: a.values.len(),
            right: b.values.len(),
        });
    }
    Ok(cosine_slices(&a.values, &b.values))
}

/// Cosine of two equal-length slices, accumulated in f64 and clamped to
/// [-1, 1]. Symmetric bit-for-bit: every term and the norm product commute.
pub fn cosine_slices(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if dot == na && na == nb && na > 0.0 {
        return 1.0;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (dot / denom).clamp(-1.0, 1.0)
}

pub trait Embedder: Send + Sync {
    fn provider_id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

pub const DEFAULT_HASHED_DIMENSION: usize = 512;

/// N-grams containing punctuation or whitespace carry this weight.
const NON_WORD_WEIGHT: f64 = 0.25;

/// Signed feature hashing of character 1-, 2- and 3-grams.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    dimension: usize,
    provider_id: Arc<str>,
}

impl HashedNgramEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self {
            dimension,
            provider_id: format!("hashed_ngram-{dimension}").into(),
        }
    }

    /// Un-normalized feature vector.
    pub fn features(&self, text: &str) -> Vec<f64> {
        let chars: Vec<char> = text.chars().collect();
        let mut v = vec![0.0f64; self.dimension];
        let mut buf = [0u8; 4];
        for n in 1..=3usize {
            for gram in chars.windows(n) {
                let mut h = FNV_OFFSET ^ n as u64;
                h = h.wrapping_mul(FNV_PRIME);
                for c in gram {
                    for &b in c.encode_utf8(&mut buf).as_bytes() {
                        h ^= u64::from(b);
                        h = h.wrapping_mul(FNV_PRIME);
                    }
                }
                let idx = (h % self.dimension as u64) as usize;
                let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                let weight = if gram.iter().all(|c| c.is_alphanumeric()) {
                    1.0
                } else {
                    NON_WORD_WEIGHT
                };
                v[idx] += sign * weight;
            }
        }
        v
    }
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASHED_DIMENSION)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Embedder for HashedNgramEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        EmbeddingVector::normalized(&self.features(text), self.provider_id.clone())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub dimension: usize,
    pub timeout: Duration,
    pub max_retries: u32,
    pub api_key: Option<String>,
}

/// Client for an OpenAI-compatible embeddings endpoint: request
/// `{model, input: [text]}`, response `{data: [{embedding: [..]}]}`.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    agent: ureq::Agent,
    provider_id: Arc<str>,
    policy: RetryPolicy,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Self {
        let provider_id = format!("remote:{}-{}", config.model_id, config.dimension).into();
        let policy = RetryPolicy {
            max_retries: config.max_retries,
            backoff: Backoff::default(),
        };
        Self {
            agent: http::build_agent(config.timeout),
            config,
            provider_id,
            policy,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let body = json!({ "model": self.config.model_id, "input": [text] });
        let (value, _) = http::post_json(
            &self.agent,
            &self.config.endpoint_url,
            self.config.api_key.as_deref(),
            &body,
            &self.policy,
        )
        .map_err(|e| match e {
            PostError::Transport { attempts, message } => {
                EmbedError::Transport(format!("after {attempts} attempts: {message}"))
            }
            PostError::Rejected { status, body } => {
                EmbedError::Transport(format!("HTTP {status}: {body}"))
            }
            PostError::Decode(m) => EmbedError::Transport(m),
        })?;
        let values: Vec<f64> = value["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| EmbedError::Transport("response lacks data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(f64::NAN))
            .collect();
        if values.len() != self.config.dimension {
            return Err(EmbedError::DimensionMismatch {
                left: values.len(),
                right: self.config.dimension,
            });
        }
        EmbeddingVector::normalized(&values, self.provider_id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(values, "test").unwrap()
    }

    #[test]
    fn cosine_identity_orthogonal_and_45_degrees() {
        let e = HashedNgramEmbedder::default();
        let v = e.embed("长辈说话时不应随意打断。").unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&raw(&[1.0, 0.0]), &raw(&[0.0, 1.0])).unwrap(), 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = cosine(&raw(&[1.0, 0.0]), &raw(&[h, h])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    }

    #[test]
    fn cosine_rejects_mismatched_vectors() {
        let a = raw(&[1.0, 0.0]);
        let b = EmbeddingVector::normalized(&[1.0, 0.0], "other").unwrap();
        assert!(matches!(
            cosine(&a, &b),
            Err(EmbedError::ProviderMismatch { .. })
        ));
        let c = raw(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            cosine(&a, &c),
            Err(EmbedError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_text_is_an_error() {
        let e = HashedNgramEmbedder::default();
        assert_eq!(e.embed("   "), Err(EmbedError::EmptyText));
    }

    #[test]
    fn embedding_is_deterministic() {
        let e = HashedNgramEmbedder::default();
        assert_eq!(
            e.embed("见面先问好").unwrap(),
            e.embed("见面先问好").unwrap()
        );
        assert_eq!(e.embed("x").unwrap().dimension(), 512);
    }

    #[test]
    fn trailing_exclamation_stays_close() {
        // 3 shared alphanumeric grams; the 3 extra grams all contain "！" and
        // weigh 0.25 each, so cos = 3 / sqrt(3 * (3 + 3 * 0.0625)) barring
        // hash collisions.
        let e = HashedNgramEmbedder::default();
        let c = cosine(&e.embed("你好").unwrap(), &e.embed("你好！").unwrap()).unwrap();
        let expected = 3.0 / (3.0f64 * 3.1875).sqrt();
        assert!((c - expected).abs() < 1e-6, "{c} vs {expected}");
        assert!(c >= 0.8);
    }

    proptest! {
        #[test]
        fn hashed_vectors_are_unit_norm(s in "\\PC{1,60}") {
            prop_assume!(!s.trim().is_empty());
            let e = HashedNgramEmbedder::default();
            if let Ok(v) = e.embed(&s) {
                prop_assert!((l2_norm(v.values()) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(a in "\\PC{1,30}", b in "\\PC{1,30}") {
            prop_assume!(!a.trim().is_empty() && !b.trim().is_empty());
            let e = HashedNgramEmbedder::default();
            if let (Ok(x), Ok(y)) = (e.embed(&a), e.embed(&b)) {
                let ab = cosine(&x, &y).unwrap();
                let ba = cosine(&y, &x).unwrap();
                prop_assert_eq!(ab.to_bits(), ba.to_bits());
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
            }
        }

        #[test]
        fn one_character_edit_drops_below_one(s in "[a-z\u{4e00}-\u{4e50}]{2,20}", pos in 0usize..20, c in "[A-Z]") {
            let chars: Vec<char> = s.chars().collect();
            let pos = pos % chars.len();
            let mut edited = chars.clone();
            edited[pos] = c.chars().next().unwrap();
            let edited: String = edited.into_iter().collect();
            let e = HashedNgramEmbedder::default();
            let sim = cosine(&e.embed(&s).unwrap(), &e.embed(&edited).unwrap()).unwrap();
            prop_assert!(sim < 1.0);
        }
    }
}
