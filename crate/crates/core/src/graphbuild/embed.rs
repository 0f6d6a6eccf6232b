use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Endpoint of an external sentence-embedding service.
pub const EMBED_ENDPOINT_ENV: &str = "MUDI_EMBED_ENDPOINT";

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding service error: {0}")]
    Service(String),
    #[error("embedding has dimension {found}, expected {expected}")]
    Dimension { found: usize, expected: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
}

/// Maps a sentence to a fixed-size real vector. Implementations must be
/// deterministic and return finite values.
pub trait EmbeddingProvider: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded random projection of bag-of-words counts, L2-normalized.
///
/// Every token gets a fixed pseudo-random direction derived from its hash
/// and the seed; a sentence embeds to the normalized count-weighted sum.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

pub(crate) fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl EmbeddingProvider for HashingEmbedder {
    fn name(&self) -> &str {
        "hashing"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut v = vec![0.0; self.dim];
        for tok in tokens(text) {
            for (acc, x) in v.iter_mut().zip(self.token_vector(&tok)) {
                *acc += x;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Client for an external embedding service. The service receives
/// `{"text": ...}` and answers `{"embedding": [...]}`.
pub struct HttpEmbedder {
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            dim,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }

    pub fn from_env(dim: usize) -> Option<Self> {
        std::env::var(EMBED_ENDPOINT_ENV)
            .ok()
            .filter(|e| !e.trim().is_empty())
            .map(|e| Self::new(e, dim))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn name(&self) -> &str {
        "adapter"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let resp: EmbedResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(serde_json::json!({ "text": text }))
            .map_err(|e| EmbedError::Service(e.to_string()))?
            .into_json()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        if resp.embedding.len() != self.dim {
            return Err(EmbedError::Dimension {
                found: resp.embedding.len(),
                expected: self.dim,
            });
        }
        if resp.embedding.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(resp.embedding)
    }
}
