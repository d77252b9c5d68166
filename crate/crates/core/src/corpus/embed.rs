//! Text-to-vector backends.
//!
//! The `stub` backend feature-hashes character trigrams:
//!
//! 1. lowercase the text and trim surrounding whitespace,
//! 2. pad with one space on each side,
//! 3. for every window of three consecutive `char`s, hash the UTF-8 bytes of
//!    the window with 64-bit FNV-1a and add 1.0 to bucket `hash % dim`,
//! 4. L2-normalize.
//!
//! The padded text always has at least three chars, so the result is never
//! the zero vector.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::{HttpSettings, JsonClient};
use crate::vector::normalize_in_place;

pub trait Embedder: Send + Sync {
    fn kind(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

/// Embeds one non-empty text and checks the backend's output dimension.
pub fn embed_text(backend: &dyn Embedder, text: &str) -> Result<Vec<f32>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let mut out = backend.embed_batch(&[text.to_owned()])?;
    let v = out.pop().ok_or_else(|| Error::Backend {
        backend: backend.kind(),
        attempts: 1,
        message: "backend returned no vectors".into(),
    })?;
    if v.len() != backend.dim() {
        return Err(Error::DimensionMismatch {
            expected: backend.dim(),
            actual: v.len(),
        });
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Stub,
            dim: 768,
            url: "http://127.0.0.1:8081/embed".into(),
            timeout_ms: 30_000,
            retries: 3,
            max_in_flight: 4,
            auth_env: "HIERMEM_EMBEDDER_TOKEN".into(),
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        if self.dim == 0 {
            return Err(Error::Config("embedder.dim must be positive".into()));
        }
        Ok(match self.kind {
            EmbedderKind::Stub => Box::new(StubEmbedder::new(self.dim)),
            EmbedderKind::Http => Box::new(HttpEmbedder::new(
                self.dim,
                HttpSettings {
                    url: self.url.clone(),
                    timeout: Duration::from_millis(self.timeout_ms),
                    retries: self.retries,
                    backoff_base: Duration::from_millis(200),
                    max_in_flight: self.max_in_flight,
                    bearer_token: std::env::var(&self.auth_env).ok(),
                },
            )),
        })
    }
}

#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let padded: Vec<char> = std::iter::once(' ')
            .chain(text.trim().to_lowercase().chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut v = vec![0.0f32; self.dim];
        let mut buf = [0u8; 12];
        for w in padded.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a64(&buf[..len]);
            v[(h % self.dim as u64) as usize] += 1.0;
        }
        normalize_in_place(&mut v);
        v
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Embedder for StubEmbedder {
    fn kind(&self) -> &'static str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    Err(Error::EmptyText)
                } else {
                    Ok(self.embed_one(t))
                }
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// POSTs `{"texts": [...]}` and expects `{"vectors": [[...]]}`.
pub struct HttpEmbedder {
    dim: usize,
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(dim: usize, settings: HttpSettings) -> Self {
        Self {
            dim,
            client: JsonClient::new("embedding", settings),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn kind(&self) -> &'static str {
        "http"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::EmptyText);
        }
        let resp: EmbedResponse = self.client.post(&EmbedRequest { texts })?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Backend {
                backend: "embedding",
                attempts: 1,
                message: format!(
                    "asked for {} vectors, received {}",
                    texts.len(),
                    resp.vectors.len()
                ),
            });
        }
        for v in &resp.vectors {
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: v.len(),
                });
            }
        }
        Ok(resp.vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic() {
        let e = StubEmbedder::new(64);
        let a = embed_text(&e, "Slice the onions").unwrap();
        let b = embed_text(&e, "Slice the onions").unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn stub_ignores_case_and_outer_whitespace() {
        let e = StubEmbedder::new(32);
        assert_eq!(e.embed_one("  Add Salt "), e.embed_one("add salt"));
    }

    #[test]
    fn stub_abc_dim8_matches_hand_derivation() {
        // " abc " -> trigrams " ab", "abc", "bc ".
        // FNV-1a 64 of each, mod 8, derived separately: buckets 0, 3, 6.
        let v = StubEmbedder::new(8).embed_one("abc");
        let s = 1.0 / 3f32.sqrt();
        let expected = [s, 0.0, 0.0, s, 0.0, 0.0, s, 0.0];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-7, "{v:?}");
        }
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = StubEmbedder::new(8);
        assert!(matches!(embed_text(&e, "   "), Err(Error::EmptyText)));
    }

    #[test]
    fn http_backend_down_fails_after_retry_budget() {
        let cfg = EmbedderConfig {
            kind: EmbedderKind::Http,
            dim: 4,
            url: "http://127.0.0.1:9/embed".into(),
            timeout_ms: 200,
            retries: 1,
            ..Default::default()
        };
        let e = cfg.build().unwrap();
        match embed_text(e.as_ref(), "hello") {
            Err(Error::Backend { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
