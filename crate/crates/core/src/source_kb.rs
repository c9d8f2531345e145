//! Retrieval-based source knowledge base.
//!
//! An image is captioned, the caption is embedded, and the nearest stored
//! embedding (exact squared-L2 argmin over a linear scan) conditions the
//! codec at both ends of the link. The transmitter sends only the retrieved
//! index as charged, error-free side information; the receiver looks the
//! vector up in its synchronized copy of the KB file.
//!
//! Captioning and embedding go through a pluggable provider: either the
//! deterministic offline stub (used by every acceptance test) or an external
//! HTTP service with timeout, retry-with-backoff and optional stub fallback.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::Image;
use crate::rng::sample_standard_normal;

pub const DEFAULT_KB_DIM: usize = 512;

const MAGIC: &[u8; 4] = b"AKB1";

#[derive(Debug, Error)]
pub enum KbError {
    #[error("knowledge base is empty; retrieval needs at least one entry")]
    EmptyStore,
    #[error("dimension mismatch: query {query} vs store {store}")]
    DimMismatch { query: usize, store: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("embedding has dimension {got}, expected {expected}")]
    BadEmbeddingDim { got: usize, expected: usize },
    #[error("caption text is empty")]
    EmptyText,
    #[error("corrupt KB file at byte offset {offset}: {reason}")]
    CorruptFile { offset: u64, reason: String },
    #[error("kb io: {0}")]
    Io(#[from] std::io::Error),
    #[error("provider failed after {attempts} attempts: {reason}")]
    Provider { attempts: u32, reason: String },
}

/// Caption-embedding vector of dimension `kb_dim`; stored as f32, distances
/// computed in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| {
                let x = v as f64;
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Immutable candidate matrix with entry ids and provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct KbStore {
    matrix: Vec<f32>,
    n: usize,
    dim: usize,
    pub entry_ids: Vec<String>,
    pub provenance: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct KbMetadata {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    entry_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    provenance: String,
}

impl KbStore {
    pub fn from_rows(
        rows: Vec<EmbeddingVector>,
        entry_ids: Vec<String>,
        provenance: String,
    ) -> Result<Self, KbError> {
        if rows.is_empty() {
            return Err(KbError::EmptyStore);
        }
        let dim = rows[0].dim();
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.dim() != dim {
                return Err(KbError::DimMismatch {
                    query: row.dim(),
                    store: dim,
                });
            }
            matrix.extend_from_slice(&row.0);
        }
        Ok(Self {
            matrix,
            n: rows.len(),
            dim,
            entry_ids,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn vector(&self, index: usize) -> EmbeddingVector {
        EmbeddingVector(self.row(index).to_vec())
    }
}

/// Exact nearest-neighbour result.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub index: usize,
    pub vector: EmbeddingVector,
    pub sq_distance: f64,
}

/// Linear-scan argmin of squared L2 distance; ties break to the smallest
/// index.
pub fn kb_search(query: &EmbeddingVector, store: &KbStore) -> Result<RetrievalResult, KbError> {
    if store.is_empty() {
        return Err(KbError::EmptyStore);
    }
    if query.dim() != store.dim() {
        return Err(KbError::DimMismatch {
            query: query.dim(),
            store: store.dim(),
        });
    }
    let mut best_index = 0usize;
    let mut best_dist = f64::INFINITY;
    for i in 0..store.len() {
        let dist = sq_distance(&query.0, store.row(i));
        if dist < best_dist {
            best_dist = dist;
            best_index = i;
        }
    }
    Ok(RetrievalResult {
        index: best_index,
        vector: store.vector(best_index),
        sq_distance: best_dist,
    })
}

fn sq_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index bits for the genie side channel: `ceil(log2 N)` bits, MSB first,
/// charged at 2 bits per complex symbol.
pub fn side_info(index: usize, store_len: usize) -> (Vec<bool>, usize) {
    let bits_needed = if store_len <= 1 {
        0
    } else {
        (usize::BITS - (store_len - 1).leading_zeros()) as usize
    };
    let bits: Vec<bool> = (0..bits_needed)
        .map(|k| (index >> (bits_needed - 1 - k)) & 1 == 1)
        .collect();
    let symbols = bits_needed.div_ceil(2);
    (bits, symbols)
}

/// Inverse of [`side_info`]: recover the index at the receiver.
pub fn index_from_side_bits(bits: &[bool]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionOutcome {
    pub text: String,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedOutcome {
    pub vector: EmbeddingVector,
    pub used_fallback: bool,
}

pub trait Captioner {
    fn caption(&self, img: &Image, prompt: &str) -> Result<CaptionOutcome, KbError>;
}

pub trait Embedder {
    fn embed(&self, text: &str) -> Result<EmbedOutcome, KbError>;
    fn dim(&self) -> usize;
}

/// Deterministic offline provider.
///
/// Captions come from coarse image statistics through a fixed template;
/// embeddings hash the text into a seeded generator and draw a unit-norm
/// Gaussian vector. Same inputs give the same outputs on any machine.
#[derive(Debug, Clone)]
pub struct StubProvider {
    pub dim: usize,
}

impl StubProvider {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn brightness_word(mean: f64) -> &'static str {
        if mean < 64.0 {
            "dark"
        } else if mean < 128.0 {
            "dim"
        } else if mean < 192.0 {
            "bright"
        } else {
            "radiant"
        }
    }

    fn detail_word(gradient: f64) -> &'static str {
        if gradient < 2.0 {
            "low"
        } else if gradient < 12.0 {
            "medium"
        } else {
            "high"
        }
    }

    fn dominant_word(means: [f64; 3]) -> &'static str {
        let max = means.iter().cloned().fold(f64::MIN, f64::max);
        let min = means.iter().cloned().fold(f64::MAX, f64::min);
        if max - min < 5.0 {
            return "gray";
        }
        if means[0] >= means[1] && means[0] >= means[2] {
            "red"
        } else if means[1] >= means[2] {
            "green"
        } else {
            "blue"
        }
    }
}

impl Captioner for StubProvider {
    fn caption(&self, img: &Image, _prompt: &str) -> Result<CaptionOutcome, KbError> {
        let (h, w) = (img.height(), img.width());
        let mut channel_sums = [0.0f64; 3];
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    channel_sums[c] += img.get(i, j, c) as f64;
                }
            }
        }
        let pixels = (h * w) as f64;
        let means = [
            channel_sums[0] / pixels,
            channel_sums[1] / pixels,
            channel_sums[2] / pixels,
        ];
        let mean = (means[0] + means[1] + means[2]) / 3.0;

        // Mean absolute luminance gradient over horizontal+vertical neighbours.
        let luma = |i: usize, j: usize| {
            (img.get(i, j, 0) as f64 + img.get(i, j, 1) as f64 + img.get(i, j, 2) as f64) / 3.0
        };
        let mut grad_sum = 0.0;
        let mut grad_count = 0usize;
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    grad_sum += (luma(i, j + 1) - luma(i, j)).abs();
                    grad_count += 1;
                }
                if i + 1 < h {
                    grad_sum += (luma(i + 1, j) - luma(i, j)).abs();
                    grad_count += 1;
                }
            }
        }
        let gradient = if grad_count > 0 {
            grad_sum / grad_count as f64
        } else {
            0.0
        };

        let text = format!(
            "a {} scene, {} detail, {} dominant",
            Self::brightness_word(mean),
            Self::detail_word(gradient),
            Self::dominant_word(means)
        );
        Ok(CaptionOutcome {
            text,
            used_fallback: false,
        })
    }
}

impl Embedder for StubProvider {
    fn embed(&self, text: &str) -> Result<EmbedOutcome, KbError> {
        if text.is_empty() {
            return Err(KbError::EmptyText);
        }
        let mut hasher = Sha256::new();
        hasher.update(b"akb-embed-v1");
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::from_seed(seed);
        let mut values: Vec<f64> = (0..self.dim)
            .map(|_| sample_standard_normal(&mut rng))
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in values.iter_mut() {
                *v /= norm;
            }
        }
        Ok(EmbedOutcome {
            vector: EmbeddingVector(values.into_iter().map(|v| v as f32).collect()),
            used_fallback: false,
        })
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// External caption/embedding service over HTTP with retry and backoff.
///
/// Contract: `POST {base}/caption {"image": <base64 PNG>, "prompt": "..."}`
/// returns `{"text": "..."}`; `POST {base}/embed {"text": "..."}` returns
/// `{"vector": [f32...]}`. Any non-200 status or transport error is
/// retryable; after the retries are exhausted the provider falls back to the
/// stub when one is configured, otherwise errors.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    base_url: String,
    dim: usize,
    timeout: Duration,
    retries: u32,
    backoff: Duration,
    fallback: Option<StubProvider>,
}

impl HttpProvider {
    pub fn new(base_url: &str, dim: usize) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            dim,
            timeout: Duration::from_secs(5),
            retries: 2,
            backoff: Duration::from_millis(100),
            fallback: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    pub fn with_stub_fallback(mut self) -> Self {
        self.fallback = Some(StubProvider::new(self.dim));
        self
    }

    fn agent(&self) -> ureq::Agent {
        ureq::AgentBuilder::new()
            .timeout(self.timeout)
            .build()
    }

    fn post_with_retries(
        &self,
        path: &str,
        body: serde_json::Value,
    ) -> Result<serde_json::Value, KbError> {
        let url = format!("{}{}", self.base_url, path);
        let agent = self.agent();
        let attempts = self.retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * (1 << (attempt - 1)));
            }
            match agent.post(&url).send_json(body.clone()) {
                Ok(resp) => match resp.into_json::<serde_json::Value>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last_error = format!("invalid json response: {e}"),
                },
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(KbError::Provider {
            attempts,
            reason: last_error,
        })
    }

    fn image_to_base64_png(img: &Image) -> String {
        let mut png = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut png);
        image::ImageEncoder::write_image(
            encoder,
            img.data(),
            img.width() as u32,
            img.height() as u32,
            image::ExtendedColorType::Rgb8,
        )
        .expect("in-memory png encode");
        use base64::Engine;
        base64::engine::general_purpose::STANDARD.encode(&png)
    }
}

impl Captioner for HttpProvider {
    fn caption(&self, img: &Image, prompt: &str) -> Result<CaptionOutcome, KbError> {
        let body = serde_json::json!({
            "image": Self::image_to_base64_png(img),
            "prompt": prompt,
        });
        match self.post_with_retries("/caption", body) {
            Ok(value) => {
                let text = value
                    .get("text")
                    .and_then(|t| t.as_str())
                    .unwrap_or_default()
                    .to_string();
                if text.is_empty() {
                    return Err(KbError::EmptyText);
                }
                Ok(CaptionOutcome {
                    text,
                    used_fallback: false,
                })
            }
            Err(err) => match &self.fallback {
                Some(stub) => {
                    let mut out = stub.caption(img, prompt)?;
                    out.used_fallback = true;
                    Ok(out)
                }
                None => Err(err),
            },
        }
    }
}

impl Embedder for HttpProvider {
    fn embed(&self, text: &str) -> Result<EmbedOutcome, KbError> {
        if text.is_empty() {
            return Err(KbError::EmptyText);
        }
        let body = serde_json::json!({ "text": text });
        match self.post_with_retries("/embed", body) {
            Ok(value) => {
                let vector: Vec<f32> = value
                    .get("vector")
                    .and_then(|v| v.as_array())
                    .map(|arr| {
                        arr.iter()
                            .map(|x| x.as_f64().unwrap_or(f64::NAN) as f32)
                            .collect()
                    })
                    .unwrap_or_default();
                if vector.len() != self.dim || vector.iter().any(|v| !v.is_finite()) {
                    return Err(KbError::BadEmbeddingDim {
                        got: vector.len(),
                        expected: self.dim,
                    });
                }
                Ok(EmbedOutcome {
                    vector: EmbeddingVector(vector),
                    used_fallback: false,
                })
            }
            Err(err) => match &self.fallback {
                Some(stub) => {
                    let mut out = stub.embed(text)?;
                    out.used_fallback = true;
                    Ok(out)
                }
                None => Err(err),
            },
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

// ---------------------------------------------------------------------------
// Build / persist
// ---------------------------------------------------------------------------

/// One embedding per corpus image via caption then embed.
pub fn kb_build<C: Captioner, E: Embedder>(
    corpus: &[(String, Image)],
    captioner: &C,
    embedder: &E,
    prompt: &str,
    provenance: &str,
) -> Result<KbStore, KbError> {
    if corpus.is_empty() {
        return Err(KbError::EmptyCorpus);
    }
    let mut rows = Vec::with_capacity(corpus.len());
    let mut ids = Vec::with_capacity(corpus.len());
    for (id, img) in corpus {
        let caption = captioner.caption(img, prompt)?;
        let embed = embedder.embed(&caption.text)?;
        rows.push(embed.vector);
        ids.push(id.clone());
    }
    KbStore::from_rows(rows, ids, provenance.to_string())
}

/// Writes the bit-exact KB file: magic `AKB1`, u32 N, u32 d, N*d f32
/// little-endian row-major, u32 metadata length, UTF-8 JSON metadata.
pub fn kb_save(store: &KbStore, path: &Path) -> Result<(), KbError> {
    let meta = KbMetadata {
        entry_ids: store.entry_ids.clone(),
        provenance: store.provenance.clone(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.n as u32).to_le_bytes())?;
    w.write_all(&(store.dim as u32).to_le_bytes())?;
    for v in &store.matrix {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(&meta_json)?;
    w.flush()?;
    Ok(())
}

pub fn kb_load(path: &Path) -> Result<KbStore, KbError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != MAGIC {
        return Err(KbError::CorruptFile {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected \"AKB1\""),
        });
    }
    let mut word = [0u8; 4];
    read_exact_at(&mut r, &mut word, &mut offset, "entry count")?;
    let n = u32::from_le_bytes(word) as usize;
    read_exact_at(&mut r, &mut word, &mut offset, "dimension")?;
    let dim = u32::from_le_bytes(word) as usize;
    let mut matrix = vec![0f32; n * dim];
    for v in matrix.iter_mut() {
        read_exact_at(&mut r, &mut word, &mut offset, "embedding data")?;
        *v = f32::from_le_bytes(word);
    }
    read_exact_at(&mut r, &mut word, &mut offset, "metadata length")?;
    let meta_len = u32::from_le_bytes(word) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact_at(&mut r, &mut meta_bytes, &mut offset, "metadata")?;
    let meta: KbMetadata = serde_json::from_slice(&meta_bytes).map_err(|e| KbError::CorruptFile {
        offset,
        reason: format!("metadata json: {e}"),
    })?;
    Ok(KbStore {
        matrix,
        n,
        dim,
        entry_ids: meta.entry_ids,
        provenance: meta.provenance,
    })
}

fn read_exact_at<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    offset: &mut u64,
    what: &str,
) -> Result<(), KbError> {
    r.read_exact(buf).map_err(|e| KbError::CorruptFile {
        offset: *offset,
        reason: format!("truncated while reading {what}: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_derive;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_store(n: usize, dim: usize, seed: u64) -> KbStore {
        let mut rng = rng_derive(seed, &[0]).rng();
        let rows: Vec<EmbeddingVector> = (0..n)
            .map(|_| {
                EmbeddingVector((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            })
            .collect();
        KbStore::from_rows(rows, vec![], String::new()).unwrap()
    }

    #[test]
    fn search_arithmetic_example() {
        let store = KbStore::from_rows(
            vec![
                EmbeddingVector(vec![0.0, 0.0]),
                EmbeddingVector(vec![3.0, 4.0]),
            ],
            vec![],
            String::new(),
        )
        .unwrap();
        let r = kb_search(&EmbeddingVector(vec![3.0, 3.0]), &store).unwrap();
        assert_eq!(r.index, 1);
        assert_eq!(r.sq_distance, 1.0);
    }

    #[test]
    fn search_exact_match_and_tie_break() {
        let rows = vec![
            EmbeddingVector(vec![1.0, 0.0]),
            EmbeddingVector(vec![0.5, 0.5]),
            EmbeddingVector(vec![0.5, 0.5]),
        ];
        let store = KbStore::from_rows(rows, vec![], String::new()).unwrap();
        let r = kb_search(&store.vector(1), &store).unwrap();
        assert_eq!(r.index, 1, "equidistant rows break to the smaller index");
        assert_eq!(r.sq_distance, 0.0);
    }

    #[test]
    fn search_validates_inputs() {
        let store = random_store(4, 8, 1);
        let bad = EmbeddingVector(vec![0.0; 7]);
        assert!(matches!(
            kb_search(&bad, &store),
            Err(KbError::DimMismatch { .. })
        ));
        assert!(matches!(
            KbStore::from_rows(vec![], vec![], String::new()),
            Err(KbError::EmptyStore)
        ));
    }

    #[test]
    fn search_matches_independent_oracle() {
        // Separate brute-force oracle over a fresh scan.
        let store = random_store(500, 16, 2);
        let mut rng = rng_derive(3, &[1]).rng();
        for _ in 0..50 {
            let q = EmbeddingVector((0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect());
            let got = kb_search(&q, &store).unwrap();
            let mut oracle_best = usize::MAX;
            let mut oracle_dist = f64::INFINITY;
            for i in 0..store.len() {
                let mut acc = 0.0f64;
                for (a, b) in q.0.iter().zip(store.row(i)) {
                    acc += (*a as f64 - *b as f64).powi(2);
                }
                if acc < oracle_dist {
                    oracle_dist = acc;
                    oracle_best = i;
                }
            }
            assert_eq!(got.index, oracle_best);
            assert_eq!(got.sq_distance, oracle_dist);
        }
    }

    #[test]
    fn stub_caption_template_is_pinned() {
        let stub = StubProvider::new(8);
        let dark = Image::filled(8, 8, 0);
        let out = stub.caption(&dark, "whatever").unwrap();
        assert_eq!(out.text, "a dark scene, low detail, gray dominant");
        assert!(!out.used_fallback);
        let again = stub.caption(&dark, "different prompt").unwrap();
        assert_eq!(out.text, again.text);
    }

    #[test]
    fn stub_caption_varies_with_statistics() {
        let stub = StubProvider::new(8);
        let mut red = Image::filled(8, 8, 0);
        for i in 0..8 {
            for j in 0..8 {
                red.set(i, j, 0, 220);
            }
        }
        let out = stub.caption(&red, "p").unwrap();
        assert!(out.text.contains("red dominant"), "{}", out.text);

        let bright = Image::filled(8, 8, 230);
        assert!(stub
            .caption(&bright, "p")
            .unwrap()
            .text
            .contains("radiant"));
    }

    #[test]
    fn stub_embed_is_deterministic_and_unit_norm() {
        let stub = StubProvider::new(64);
        let a = stub.embed("abc").unwrap();
        let b = stub.embed("abc").unwrap();
        assert_eq!(a.vector, b.vector);
        assert!((a.vector.l2_norm() - 1.0).abs() < 1e-6);
        let c = stub.embed("abd").unwrap();
        assert_ne!(a.vector, c.vector);
        assert!(matches!(stub.embed(""), Err(KbError::EmptyText)));
    }

    #[test]
    fn stub_embed_decorrelates_similar_texts() {
        let stub = StubProvider::new(128);
        let mut high_cosine = 0usize;
        let pairs = 200;
        for i in 0..pairs {
            let a = stub.embed(&format!("text number {i} a")).unwrap().vector;
            let b = stub.embed(&format!("text number {i} b")).unwrap().vector;
            let dot: f64 = a
                .0
                .iter()
                .zip(&b.0)
                .map(|(x, y)| *x as f64 * *y as f64)
                .sum();
            if dot.abs() >= 0.5 {
                high_cosine += 1;
            }
        }
        assert_eq!(high_cosine, 0, "{high_cosine}/{pairs} pairs too similar");
    }

    #[test]
    fn kb_build_cardinality_and_determinism() {
        let stub = StubProvider::new(32);
        let corpus: Vec<(String, Image)> = (0..10)
            .map(|i| (format!("img{i}"), Image::filled(8, 8, (i * 20) as u8)))
            .collect();
        let store = kb_build(&corpus, &stub, &stub, "prompt", "test corpus").unwrap();
        assert_eq!(store.len(), 10);
        assert_eq!(store.entry_ids.len(), 10);

        // Duplicate image -> identical rows.
        let dup = vec![
            ("a".to_string(), Image::filled(4, 4, 7)),
            ("b".to_string(), Image::filled(4, 4, 7)),
        ];
        let store2 = kb_build(&dup, &stub, &stub, "prompt", "").unwrap();
        assert_eq!(store2.row(0), store2.row(1));

        assert!(matches!(
            kb_build(&[], &stub, &stub, "p", ""),
            Err(KbError::EmptyCorpus)
        ));
    }

    #[test]
    fn kb_file_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let stub = StubProvider::new(16);
        let corpus: Vec<(String, Image)> = (0..5)
            .map(|i| (format!("img{i}"), Image::filled(8, 8, (i * 40) as u8)))
            .collect();
        let store = kb_build(&corpus, &stub, &stub, "prompt", "v1").unwrap();
        let p1 = dir.path().join("kb1.akb");
        let p2 = dir.path().join("kb2.akb");
        kb_save(&store, &p1).unwrap();
        let rebuilt = kb_build(&corpus, &stub, &stub, "prompt", "v1").unwrap();
        kb_save(&rebuilt, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = kb_load(&p1).unwrap();
        assert_eq!(loaded, store);
    }

    #[test]
    fn kb_file_format_26_byte_example() {
        let dir = tempfile::tempdir().unwrap();
        let store = KbStore::from_rows(
            vec![EmbeddingVector(vec![1.0, 2.0])],
            vec![],
            String::new(),
        )
        .unwrap();
        let path = dir.path().join("tiny.akb");
        kb_save(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 26, "4+4+4+8+4+2");
        assert_eq!(&bytes[0..4], b"AKB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2.0);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(&bytes[24..26], b"{}");
    }

    #[test]
    fn kb_load_reports_truncation_offset() {
        let dir = tempfile::tempdir().unwrap();
        let store = random_store(3, 4, 9);
        let path = dir.path().join("kb.akb");
        kb_save(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..20]).unwrap();
        match kb_load(&path) {
            Err(KbError::CorruptFile { offset, .. }) => assert!(offset <= 20),
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            kb_load(&path),
            Err(KbError::CorruptFile { offset: 0, .. })
        ));
    }

    #[test]
    fn side_info_examples() {
        assert_eq!(side_info(513, 1024).1, 5);
        assert_eq!(side_info(513, 1024).0.len(), 10);
        assert_eq!(side_info(0, 1), (vec![], 0));
        let (bits, symbols) = side_info(2, 3);
        assert_eq!(bits.len(), 2);
        assert_eq!(symbols, 1);
        assert_eq!(index_from_side_bits(&bits), 2);
        // Roundtrip across the range.
        for n in [2usize, 3, 7, 8, 1000] {
            for idx in [0, 1, n - 1] {
                let (bits, _) = side_info(idx, n);
                assert_eq!(index_from_side_bits(&bits), idx, "n={n} idx={idx}");
            }
        }
    }

    #[test]
    fn transmitter_and_receiver_recover_identical_conditioning() {
        let dir = tempfile::tempdir().unwrap();
        let stub = StubProvider::new(24);
        let corpus: Vec<(String, Image)> = (0..6)
            .map(|i| (format!("img{i}"), Image::filled(8, 8, (i * 37) as u8)))
            .collect();
        let store = kb_build(&corpus, &stub, &stub, "p", "").unwrap();
        let path = dir.path().join("kb.akb");
        kb_save(&store, &path).unwrap();

        // Transmitter side.
        let query_img = Image::filled(8, 8, 70);
        let caption = stub.caption(&query_img, "p").unwrap();
        let query = stub.embed(&caption.text).unwrap().vector;
        let result = kb_search(&query, &store).unwrap();
        let (bits, _) = side_info(result.index, store.len());

        // Receiver side: its own loaded copy plus the index bits.
        let rx_store = kb_load(&path).unwrap();
        let rx_index = index_from_side_bits(&bits);
        assert_eq!(rx_store.vector(rx_index), result.vector);
    }

    // HTTP provider: happy path against a local one-shot server, then the
    // unreachable path with and without fallback.
    #[test]
    fn http_provider_roundtrip_and_fallback() {
        use std::io::{BufRead, BufReader, Write};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for _ in 0..2 {
                let (mut sock, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(sock.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let is_caption = line.contains("/caption");
                let mut content_len = 0usize;
                loop {
                    let mut header = String::new();
                    reader.read_line(&mut header).unwrap();
                    let h = header.trim().to_ascii_lowercase();
                    if let Some(v) = h.strip_prefix("content-length:") {
                        content_len = v.trim().parse().unwrap();
                    }
                    if header.trim().is_empty() {
                        break;
                    }
                }
                let mut body = vec![0u8; content_len];
                std::io::Read::read_exact(&mut reader, &mut body).unwrap();
                let response = if is_caption {
                    r#"{"text":"a server caption"}"#.to_string()
                } else {
                    r#"{"vector":[0.5,0.5,0.5,0.5]}"#.to_string()
                };
                let msg = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                    response.len(),
                    response
                );
                sock.write_all(msg.as_bytes()).unwrap();
            }
        });

        let provider = HttpProvider::new(&format!("http://{addr}"), 4)
            .with_timeout(Duration::from_secs(2))
            .with_retries(0, Duration::from_millis(10));
        let img = Image::filled(4, 4, 128);
        let caption = provider.caption(&img, "test prompt").unwrap();
        assert_eq!(caption.text, "a server caption");
        assert!(!caption.used_fallback);
        let embed = provider.embed("a server caption").unwrap();
        assert_eq!(embed.vector.0, vec![0.5, 0.5, 0.5, 0.5]);
        handle.join().unwrap();

        // Unreachable endpoint without fallback errors after retries.
        let dead = HttpProvider::new("http://127.0.0.1:9", 4)
            .with_timeout(Duration::from_millis(200))
            .with_retries(1, Duration::from_millis(10));
        assert!(matches!(
            dead.caption(&img, "p"),
            Err(KbError::Provider { attempts: 2, .. })
        ));

        // With fallback: stub text plus the warning flag.
        let with_fallback = HttpProvider::new("http://127.0.0.1:9", 4)
            .with_timeout(Duration::from_millis(200))
            .with_retries(0, Duration::from_millis(10))
            .with_stub_fallback();
        let out = with_fallback.caption(&img, "p").unwrap();
        assert!(out.used_fallback);
        assert_eq!(
            out.text,
            StubProvider::new(4).caption(&img, "p").unwrap().text
        );
        let emb = with_fallback.embed("abc").unwrap();
        assert!(emb.used_fallback);
    }

    proptest! {
        // Appending rows with strictly larger distance never changes the result.
        #[test]
        fn search_invariant_under_far_appends(seed in 0u64..1000) {
            let store = random_store(20, 8, seed);
            let mut rng = rng_derive(seed, &[5]).rng();
            let q = EmbeddingVector((0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect());
            let base = kb_search(&q, &store).unwrap();
            //

            let far_row = EmbeddingVector(q.0.iter().map(|v| v + 100.0).collect());
            let mut rows: Vec<EmbeddingVector> = (0..store.len()).map(|i| store.vector(i)).collect();
            rows.push(far_row);
            let bigger = KbStore::from_rows(rows, vec![], String::new()).unwrap();
            let again = kb_search(&q, &bigger).unwrap();
            prop_assert_eq!(base.index, again.index);
            prop_assert_eq!(base.sq_distance, again.sq_distance);
        }

        // Searching for an exact stored row returns that row.
        #[test]
        fn search_exactness(seed in 0u64..1000, k in 0usize..20) {
            let store = random_store(20, 6, seed);
            let r = kb_search(&store.vector(k), &store).unwrap();
            // Distance to row k is exactly zero, so the found row can only be
            // an earlier duplicate or k itself.
            prop_assert_eq!(r.sq_distance, 0.0);
            prop_assert!(r.index <= k);
            prop_assert_eq!(store.row(r.index), store.row(k));
        }
    }
}
