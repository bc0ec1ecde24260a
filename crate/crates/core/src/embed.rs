//! 768-wide text embeddings from a precomputed file, a deterministic stub
//! or an HTTP service.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegaError};

pub const EMBED_DIM: usize = 768;
/// Words kept from each text before hashing or lookup.
pub const MAX_WORDS: usize = 50;
pub const EMB_ENDPOINT_VAR: &str = "SEGA_EMB_ENDPOINT";
pub const HTTP_ATTEMPTS: u32 = 3;

const FILE_MAGIC: &[u8; 8] = b"SEGAEMB1";

pub type Embedding = Vec<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Text,
    Prompt,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Text => "text",
            Role::Prompt => "prompt",
        }
    }
}

/// First `MAX_WORDS` whitespace-separated tokens, single-space joined.
pub fn truncate_words(text: &str) -> String {
    text.split_whitespace().take(MAX_WORDS).collect::<Vec<_>>().join(" ")
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lookup key of a text: FNV-1a of its truncated form.
pub fn text_key(text: &str) -> u64 {
    fnv1a64(truncate_words(text).as_bytes())
}

/// Unit-norm Gaussian direction seeded by the text; zero for empty text.
pub fn stub_embedding(text: &str, seed: u64) -> Embedding {
    let truncated = truncate_words(text);
    if truncated.is_empty() {
        return vec![0.0; EMBED_DIM];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(truncated.as_bytes()) ^ seed);
    let v: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

pub fn write_embedding_file(path: &Path, entries: &BTreeMap<u64, Embedding>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + entries.len() * (8 + 4 * EMBED_DIM));
    out.extend_from_slice(FILE_MAGIC);
    let count = u32::try_from(entries.len()).map_err(|_| SegaError::Embedding("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(EMBED_DIM as u32).to_le_bytes());
    for (key, v) in entries {
        if v.len() != EMBED_DIM {
            return Err(SegaError::Embedding(format!("entry {key:016x} has width {}", v.len())));
        }
        out.extend_from_slice(&key.to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| SegaError::io(path, e))?;
    f.write_all(&out).map_err(|e| SegaError::io(path, e))
}

pub fn read_embedding_file(path: &Path) -> Result<BTreeMap<u64, Embedding>> {
    let bytes = fs::read(path).map_err(|e| SegaError::io(path, e))?;
    let bad = |msg: &str| SegaError::Embedding(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != FILE_MAGIC {
        return Err(bad("not an embedding file"));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim != EMBED_DIM {
        return Err(bad(&format!("dimension {dim}, expected {EMBED_DIM}")));
    }
    let stride = 8 + 4 * dim;
    if bytes.len() != 16 + count * stride {
        return Err(bad("length does not match header"));
    }
    let mut out = BTreeMap::new();
    for chunk in bytes[16..].chunks_exact(stride) {
        let key = u64::from_le_bytes(chunk[..8].try_into().unwrap());
        let v = chunk[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(key, v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum BackendConfig {
    Stub {
        #[serde(default)]
        seed: u64,
    },
    File {
        path: PathBuf,
    },
    /// Endpoint falls back to `SEGA_EMB_ENDPOINT` when absent.
    Http {
        #[serde(default)]
        endpoint: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    #[serde(flatten)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

impl ProviderConfig {
    pub fn stub(seed: u64) -> Self {
        Self {
            backend: BackendConfig::Stub { seed },
            cache: None,
        }
    }
}

enum Backend {
    Stub(u64),
    File(BTreeMap<u64, Embedding>),
    Http { url: String, agent: ureq::Agent },
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
    role: &'a str,
}

#[derive(Deserialize)]
struct EmbedReply {
    vectors: Vec<Vec<f32>>,
}

pub struct EmbeddingProvider {
    role: Role,
    backend: Backend,
    cache: Option<Mutex<HashMap<u64, Embedding>>>,
    cache_path: Option<PathBuf>,
}

impl EmbeddingProvider {
    pub fn new(role: Role, config: &ProviderConfig) -> Result<Self> {
        let backend = match &config.backend {
            BackendConfig::Stub { seed } => Backend::Stub(*seed),
            BackendConfig::File { path } => Backend::File(read_embedding_file(path)?),
            BackendConfig::Http { endpoint } => {
                let base = match endpoint {
                    Some(e) => e.clone(),
                    None => std::env::var(EMB_ENDPOINT_VAR)
                        .map_err(|_| SegaError::Config(format!("http embedding backend needs {EMB_ENDPOINT_VAR}")))?,
                };
                let agent = ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs(60)))
                    .build()
                    .into();
                Backend::Http {
                    url: format!("{}/embed", base.trim_end_matches('/')),
                    agent,
                }
            }
        };
        let cache = match &config.cache {
            Some(p) if p.exists() => Some(read_embedding_file(p)?.into_iter().collect()),
            Some(_) => Some(HashMap::new()),
            None => None,
        };
        Ok(Self {
            role,
            backend,
            cache: cache.map(Mutex::new),
            cache_path: config.cache.clone(),
        })
    }

    /// Stub provider without a cache.
    pub fn stub(role: Role, seed: u64) -> Self {
        Self {
            role,
            backend: Backend::Stub(seed),
            cache: None,
            cache_path: None,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    /// Embeds every text; the first failure is reported with its index.
    pub fn embed_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Embedding>> {
        let truncated: Vec<String> = texts.iter().map(|t| truncate_words(t.as_ref())).collect();
        let keys: Vec<u64> = truncated.iter().map(|t| fnv1a64(t.as_bytes())).collect();
        let mut out: Vec<Option<Embedding>> = vec![None; texts.len()];
        if let Some(cache) = &self.cache {
            let cache = cache.lock().unwrap();
            for (slot, key) in out.iter_mut().zip(&keys) {
                *slot = cache.get(key).cloned();
            }
        }
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let fresh = self.compute(&missing.iter().map(|&i| truncated[i].clone()).collect::<Vec<_>>(), &keys, &missing)?;
            for (&i, v) in missing.iter().zip(fresh) {
                out[i] = Some(v);
            }
            if let Some(cache) = &self.cache {
                let mut cache = cache.lock().unwrap();
                for &i in &missing {
                    cache.insert(keys[i], out[i].clone().unwrap());
                }
            }
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    fn compute(&self, texts: &[String], keys: &[u64], positions: &[usize]) -> Result<Vec<Embedding>> {
        match &self.backend {
            Backend::Stub(seed) => Ok(texts.iter().map(|t| stub_embedding(t, *seed)).collect()),
            Backend::File(table) => positions
                .iter()
                .map(|&i| {
                    table.get(&keys[i]).cloned().ok_or_else(|| {
                        SegaError::Embedding(format!("text #{i}: no entry for key {:016x}", keys[i]))
                    })
                })
                .collect(),
            Backend::Http { url, agent } => self.http(url, agent, texts),
        }
    }

    fn http(&self, url: &str, agent: &ureq::Agent, texts: &[String]) -> Result<Vec<Embedding>> {
        let mut last = String::new();
        for attempt in 1..=HTTP_ATTEMPTS {
            let reply = agent
                .post(url)
                .send_json(EmbedRequest {
                    texts,
                    role: self.role.as_str(),
                })
                .and_then(|mut r| r.body_mut().read_json::<EmbedReply>());
            match reply {
                Ok(r) => {
                    if r.vectors.len() != texts.len() {
                        return Err(SegaError::Embedding(format!(
                            "service returned {} vectors for {} texts",
                            r.vectors.len(),
                            texts.len()
                        )));
                    }
                    if let Some(i) = r.vectors.iter().position(|v| v.len() != EMBED_DIM || v.iter().any(|x| !x.is_finite())) {
                        return Err(SegaError::Embedding(format!("text #{i}: malformed vector from service")));
                    }
                    return Ok(r.vectors);
                }
                Err(e) => {
                    last = e.to_string();
                    log::warn!("embedding request attempt {attempt} failed: {last}");
                    if attempt < HTTP_ATTEMPTS {
                        std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                    }
                }
            }
        }
        Err(SegaError::EmbeddingRetryable {
            attempts: HTTP_ATTEMPTS,
            msg: last,
        })
    }

    /// Writes the in-memory cache to its configured path, if any.
    pub fn flush_cache(&self) -> Result<()> {
        if let (Some(cache), Some(path)) = (&self.cache, &self.cache_path) {
            let entries: BTreeMap<u64, Embedding> = cache.lock().unwrap().iter().map(|(k, v)| (*k, v.clone())).collect();
            write_embedding_file(path, &entries)?;
        }
        Ok(())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}
