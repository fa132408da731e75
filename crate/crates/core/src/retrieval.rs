//! Embedding providers and an exact top-k dot-product index over calculator
//! documents: the first stage of tool selection.

use crate::model::{self, Registry, Status};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding provider failed for `{context}`: {detail}")]
    Provider { context: String, detail: String },
    #[error("query dimension {query} does not match index dimension {index}")]
    DimMismatch { query: usize, index: usize },
    #[error("index file {path} is invalid at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Text embedder with distinct document and query roles. Both directions
/// must be deterministic unless the implementation opts out of caching by
/// returning false from `deterministic`.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed_doc(&self, text: &str) -> Result<Vec<f32>, RetrievalError>;
    fn embed_query(&self, text: &str) -> Result<Vec<f32>, RetrievalError>;

    fn deterministic(&self) -> bool {
        true
    }

    /// Whether calls may be issued from several threads at once; the engine
    /// serializes calls when this is false.
    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Deterministic offline embedder: tokens are hashed into `dim` buckets with
/// a signed count, then L2-normalized. Document and query roles share one
/// vector space.
pub struct HashingProvider {
    dim: usize,
    seed: u64,
}

impl HashingProvider {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingProvider { dim, seed }
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0f64; self.dim];
        for token in text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(self.seed, token.as_bytes());
            let bucket = ((h >> 1) % self.dim as u64) as usize;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut acc {
                *v /= norm;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

impl Default for HashingProvider {
    fn default() -> Self {
        HashingProvider::new(Self::DEFAULT_DIM, 0)
    }
}

impl EmbeddingProvider for HashingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_doc(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        Ok(self.embed(text))
    }

    fn embed_query(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        Ok(self.embed(text))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed.wrapping_mul(0x100000001b3);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Remote embedding endpoint speaking `{texts, role} -> {vectors}`. The API
/// key arrives through configuration sourced from the environment; it is
/// never read from files here.
pub struct RemoteProvider {
    endpoint: String,
    dim: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: Vec<&'a str>,
    role: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

impl RemoteProvider {
    pub fn new(endpoint: String, dim: usize, api_key: Option<String>) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .expect("client construction cannot fail with static options");
        RemoteProvider {
            endpoint,
            dim,
            api_key,
            client,
        }
    }

    fn call(&self, text: &str, role: &str) -> Result<Vec<f32>, RetrievalError> {
        let err = |detail: String| RetrievalError::Provider {
            context: format!("{role} embedding"),
            detail,
        };
        let mut req = self.client.post(&self.endpoint).json(&EmbedRequest {
            texts: vec![text],
            role,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| err(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(err(format!("endpoint returned {}", resp.status())));
        }
        let body: EmbedResponse = resp.json().map_err(|e| err(e.to_string()))?;
        let vec = body
            .vectors
            .into_iter()
            .next()
            .ok_or_else(|| err("endpoint returned no vectors".into()))?;
        if vec.len() != self.dim {
            return Err(err(format!(
                "endpoint returned dimension {}, expected {}",
                vec.len(),
                self.dim
            )));
        }
        Ok(vec)
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_doc(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        self.call(text, "doc")
    }

    fn embed_query(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        self.call(text, "query")
    }
}

/// What text of each calculator gets embedded into the index.
pub enum TextSource<'a> {
    /// The source-article abstract, looked up by pmid.
    RawAbstract(&'a BTreeMap<String, String>),
    /// The calculator's digest card.
    Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub id: String,
    pub score: f64,
}

/// Flat in-memory index: one vector per verified calculator, searched
/// exactly by dot product. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<Vec<f32>>,
}

pub const DEFAULT_K: usize = 10;

const MAGIC: &[u8; 4] = b"RCIX";
const VERSION: u16 = 1;

impl VectorIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Embed one row per verified calculator, in id order.
    pub fn build(
        provider: &dyn EmbeddingProvider,
        registry: &Registry,
        source: TextSource<'_>,
    ) -> Result<VectorIndex, RetrievalError> {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for calc in registry.iter().filter(|c| c.status == Status::Verified) {
            let text = match &source {
                TextSource::Digest => model::digest(calc),
                TextSource::RawAbstract(abstracts) => abstracts
                    .get(&calc.pmid)
                    .cloned()
                    .ok_or_else(|| RetrievalError::Provider {
                        context: calc.id.clone(),
                        detail: format!("no abstract on file for pmid {}", calc.pmid),
                    })?,
            };
            let vec = provider
                .embed_doc(&text)
                .map_err(|e| RetrievalError::Provider {
                    context: calc.id.clone(),
                    detail: e.to_string(),
                })?;
            if vec.len() != provider.dim() {
                return Err(RetrievalError::Provider {
                    context: calc.id.clone(),
                    detail: format!(
                        "provider returned dimension {}, declared {}",
                        vec.len(),
                        provider.dim()
                    ),
                });
            }
            ids.push(calc.id.clone());
            rows.push(vec);
        }
        Ok(VectorIndex {
            dim: provider.dim(),
            ids,
            rows,
        })
    }

    /// The k highest dot products, sorted by score descending with ties
    /// broken by ascending id. Exact: every row is scored.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                query: query.len(),
                index: self.dim,
            });
        }
        let mut hits: Vec<RetrievalHit> = self
            .rows
            .iter()
            .zip(&self.ids)
            .map(|(row, id)| RetrievalHit {
                id: id.clone(),
                score: dot(row, query),
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.id.cmp(&b.id))
        });
        hits.truncate(k);
        Ok(hits)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut buf = Vec::with_capacity(16 + self.rows.len() * self.dim * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for row in &self.rows {
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for id in &self.ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        fs::write(path, buf).map_err(|e| RetrievalError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<VectorIndex, RetrievalError> {
        let bytes = fs::read(path).map_err(|e| RetrievalError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut r = ByteReader {
            bytes: &bytes,
            at: 0,
            path,
        };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail_at(0, "bad magic bytes (not an index file)"));
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(r.fail_at(4, &format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(r.take(4, "dim")?.try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(r.take(4, "count")?.try_into().unwrap()) as usize;
        let mut rows = Vec::with_capacity(count.min(65536));
        for _ in 0..count {
            let row: Vec<f32> = r
                .take(dim * 4, "vector row")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rows.push(row);
        }
        let mut ids = Vec::with_capacity(count.min(65536));
        for _ in 0..count {
            let len = u32::from_le_bytes(r.take(4, "id length")?.try_into().unwrap()) as usize;
            let start = r.at;
            let id = std::str::from_utf8(r.take(len, "id bytes")?)
                .map_err(|_| RetrievalError::Format {
                    path: path.to_path_buf(),
                    offset: start as u64,
                    detail: "id is not valid UTF-8".into(),
                })?
                .to_string();
            ids.push(id);
        }
        if r.at != bytes.len() {
            return Err(r.fail_at(r.at, "trailing bytes after id table"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(r.fail_at(bytes.len(), "duplicate id in id table"));
            }
        }
        Ok(VectorIndex { dim, ids, rows })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], RetrievalError> {
        if self.at + n > self.bytes.len() {
            return Err(self.fail_at(self.at, &format!("truncated while reading {what}")));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn fail_at(&self, offset: usize, detail: &str) -> RetrievalError {
        RetrievalError::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.to_string(),
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}
