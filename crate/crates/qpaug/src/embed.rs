//! Text embedding providers behind one trait.
//!
//! Three implementations:
//! - [`MockEmbedder`]: a seeded hash-based embedder for offline tests.
//!   Fully deterministic across runs and platforms.
//! - [`HttpEmbedder`]: an OpenAI-compatible `/v1/embeddings` client.
//! - [`PrecomputedEmbedder`]: vectors looked up from a `.qpve` file
//!   keyed by the exact input text.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::vindex::{read_qpve, VindexError};

pub type Vector = Vec<f32>;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Http(String),
    #[error("embedding endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
    #[error("embedding has dim {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no precomputed vector for text `{0}`")]
    MissingPrecomputed(String),
    #[error(transparent)]
    Vectors(#[from] VindexError),
}

/// Maps texts to fixed-dimension vectors. Implementations must be
/// deterministic for a given configuration: equal text in, equal
/// vector out.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds a batch, one output vector per input text, same order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vector>, EmbedError>;

    fn embed_one(&self, text: &str) -> Result<Vector, EmbedError> {
        let mut out = self.embed_batch(std::slice::from_ref(&text.to_string()))?;
        out.pop().ok_or_else(|| BadResponse("empty batch result".into()))
    }
}

use EmbedError::BadResponse;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 step: advances the state and returns the next value.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Top 24 bits of the word, mapped onto [-1, 1).
fn unit_interval(x: u64) -> f32 {
    ((x >> 40) as f32 / (1u32 << 24) as f32) * 2.0 - 1.0
}

/// Hash-based embedder: a text's vector is the sum of per-token vectors,
/// where each token seeds a SplitMix64 stream with the FNV-1a hash of
/// its lowercased bytes XOR the provider seed. Tokens that co-occur in
/// two texts pull their vectors together, which is enough structure for
/// retrieval tests while staying fully offline.
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    unit_norm: bool,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64, unit_norm: bool) -> Self {
        assert!(dim > 0, "dim must be >= 1");
        MockEmbedder { dim, seed, unit_norm }
    }

    fn token_into(&self, token: &str, acc: &mut [f32]) {
        let mut state = fnv1a(token.to_lowercase().as_bytes()) ^ self.seed;
        for slot in acc.iter_mut() {
            *slot += unit_interval(splitmix64(&mut state));
        }
    }

    fn embed_text(&self, text: &str) -> Vector {
        let mut acc = vec![0.0f32; self.dim];
        for token in text.split_whitespace() {
            self.token_into(token, &mut acc);
        }
        if self.unit_norm {
            // f64 accumulation keeps the norm stable across dim sizes
            let norm = acc.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut acc {
                    *v = (f64::from(*v) / norm) as f32;
                }
            }
        }
        acc
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vector>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

/// Client for an OpenAI-compatible embeddings endpoint. Requests are
/// chunked to `batch_size` inputs; 429 and 5xx responses are retried
/// with exponential backoff before giving up.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    batch_size: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: &str,
        model: &str,
        dim: usize,
        batch_size: usize,
        api_key: Option<String>,
    ) -> Self {
        assert!(dim > 0 && batch_size > 0);
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("reqwest client");
        HttpEmbedder {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            dim,
            batch_size,
            api_key,
            client,
        }
    }

    fn request_chunk(&self, chunk: &[String]) -> Result<Vec<Vector>, EmbedError> {
        let url = format!("{}/v1/embeddings", self.endpoint);
        let body = serde_json::json!({ "model": self.model, "input": chunk });
        let mut attempt = 0;
        let response = loop {
            attempt += 1;
            let mut req = self.client.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        break resp;
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable || attempt >= 3 {
                        return Err(EmbedError::Status {
                            status: status.as_u16(),
                            body: resp.text().unwrap_or_default(),
                        });
                    }
                }
                Err(e) => {
                    if attempt >= 3 {
                        return Err(EmbedError::Http(e.to_string()));
                    }
                }
            }
            std::thread::sleep(Duration::from_millis(200 * (1 << (attempt - 1))));
        };
        let parsed: EmbeddingResponse = response
            .json()
            .map_err(|e| BadResponse(e.to_string()))?;
        if parsed.data.len() != chunk.len() {
            return Err(BadResponse(format!(
                "expected {} embeddings, got {}",
                chunk.len(),
                parsed.data.len()
            )));
        }
        let mut out: Vec<Option<Vector>> = vec![None; chunk.len()];
        for datum in parsed.data {
            if datum.embedding.len() != self.dim {
                return Err(EmbedError::DimMismatch {
                    expected: self.dim,
                    found: datum.embedding.len(),
                });
            }
            let slot = out
                .get_mut(datum.index)
                .ok_or_else(|| BadResponse(format!("index {} out of range", datum.index)))?;
            *slot = Some(datum.embedding);
        }
        out.into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| BadResponse("duplicate or missing index in response".into()))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            out.extend(self.request_chunk(chunk)?);
        }
        Ok(out)
    }
}

/// Vectors read from a `.qpve` file whose keys are the exact texts to
/// be embedded. Lookups for any other text fail.
pub struct PrecomputedEmbedder {
    dim: usize,
    by_text: HashMap<String, Vector>,
}

impl PrecomputedEmbedder {
    pub fn from_qpve(path: &Path) -> Result<Self, EmbedError> {
        let (dim, entries) = read_qpve(path)?;
        let mut by_text = HashMap::with_capacity(entries.len());
        for (text, vector) in entries {
            by_text.insert(text, vector);
        }
        Ok(PrecomputedEmbedder { dim, by_text })
    }

    pub fn len(&self) -> usize {
        self.by_text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_text.is_empty()
    }
}

impl EmbeddingProvider for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vector>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                self.by_text
                    .get(t)
                    .cloned()
                    .ok_or_else(|| EmbedError::MissingPrecomputed(t.clone()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_is_deterministic() {
        let e = MockEmbedder::new(16, 7, true);
        let a = e.embed_one("who wrote hamlet").unwrap();
        let b = e.embed_one("who wrote hamlet").unwrap();
        assert_eq!(a, b);
        let again = MockEmbedder::new(16, 7, true);
        assert_eq!(a, again.embed_one("who wrote hamlet").unwrap());
    }

    #[test]
    fn mock_dim_and_batch_shape() {
        let e = MockEmbedder::new(5, 0, false);
        let out = e
            .embed_batch(&["one".to_string(), "two words".to_string()])
            .unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.len() == 5));
    }

    #[test]
    fn mock_seed_changes_vectors() {
        let a = MockEmbedder::new(8, 1, false).embed_one("text").unwrap();
        let b = MockEmbedder::new(8, 2, false).embed_one("text").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mock_lowercases_and_splits_on_whitespace() {
        let e = MockEmbedder::new(8, 3, false);
        assert_eq!(
            e.embed_one("Hello  World").unwrap(),
            e.embed_one("hello world").unwrap()
        );
    }

    #[test]
    fn mock_empty_text_is_zero_vector() {
        let e = MockEmbedder::new(4, 3, true);
        assert_eq!(e.embed_one("").unwrap(), vec![0.0; 4]);
        assert_eq!(e.embed_one("   ").unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn mock_unit_norm_holds() {
        let e = MockEmbedder::new(32, 11, true);
        for text in ["q", "a longer question about oxygen", "x y z"] {
            let v = e.embed_one(text).unwrap();
            let norm: f64 = v.iter().map(|c| f64::from(*c).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-3, "norm {norm} for {text:?}");
        }
    }

    #[test]
    fn mock_components_bounded_per_token() {
        let e = MockEmbedder::new(64, 5, false);
        let v = e.embed_one("single").unwrap();
        assert!(v.iter().all(|c| (-1.0..1.0).contains(c)));
    }

    #[test]
    fn mock_algorithm_pinned() {
        // independent re-derivation of component 0 for one token
        let seed = 42u64;
        let mut h = 0xcbf29ce484222325u64;
        for b in "rome".bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut state = h ^ seed;
        state = state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        let expected = ((z >> 40) as f32 / 16777216.0) * 2.0 - 1.0;

        let e = MockEmbedder::new(3, seed, false);
        let v = e.embed_one("Rome").unwrap();
        assert_eq!(v[0], expected);
    }

    #[test]
    fn precomputed_lookup_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.qpve");
        let entries: Vec<(&str, &[f32])> =
            vec![("what is water", &[1.0, 0.0]), ("q41", &[0.0, 1.0])];
        crate::vindex::write_qpve(&path, 2, entries.into_iter()).unwrap();
        let p = PrecomputedEmbedder::from_qpve(&path).unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(p.len(), 2);
        assert_eq!(p.embed_one("what is water").unwrap(), vec![1.0, 0.0]);
        let err = p.embed_one("q42").unwrap_err();
        assert!(matches!(err, EmbedError::MissingPrecomputed(t) if t == "q42"));
    }
}
