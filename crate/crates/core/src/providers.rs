//! Pluggable backends behind the reward math: sentence embeddings and
//! landmark-derived region boxes.
//!
//! The reference embedder is a deterministic hashed bag of words; a remote
//! embedding service can be used instead, with the bag embedder as fallback.
//! Landmarks are read from precomputed fixture files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::{words, BBox, RegionId};
use crate::io::{read_jsonl, IoError};

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("embedding service unreachable: {0}")]
    Transport(String),
    #[error("embedding service returned a malformed payload: {0}")]
    MalformedPayload(String),
    #[error("embedding service returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("empty embedding batch")]
    EmptyBatch,
    #[error("region `{0}` has no landmarks")]
    MissingRegion(RegionId),
    #[error("pad {0} outside [0, 0.5]")]
    InvalidPad(f64),
    #[error("landmark point ({0}, {1}) outside the unit square")]
    PointOutOfRange(f64, f64),
    #[error("region `{0}` has an empty point list")]
    EmptyRegion(RegionId),
    #[error("{path}:{line}: duplicate image_ref `{image_ref}`")]
    DuplicateImage { path: String, line: usize, image_ref: String },
    #[error("{path}:{line}: {source}")]
    Fixture {
        path: String,
        line: usize,
        #[source]
        source: Box<ProviderError>,
    },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Sentence embedding: either all zeros (nothing to embed) or unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Scales `values` to unit norm; a zero (or empty) input stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            values.iter_mut().for_each(|v| *v /= norm);
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Cosine similarity; 0 when either side is the zero vector or the
    /// dimensions differ.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        if self.dim() != other.dim() || self.is_zero() || other.is_zero() {
            return 0.0;
        }
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// A text → embedding function usable by the reward suite.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> EmbeddingVector;
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn embed(&self, text: &str) -> EmbeddingVector {
        (**self).embed(text)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn embed(&self, text: &str) -> EmbeddingVector {
        (**self).embed(text)
    }
}

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_EMBED_SEED: u64 = 0x6d61_7265_5f62_6167;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Hashed bag-of-words embedder (FNV-1a over lowercase alphanumeric tokens).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashedBagEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM, seed: DEFAULT_EMBED_SEED }
    }
}

impl HashedBagEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(self.seed, token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Embedder for HashedBagEmbedder {
    fn embed(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0; self.dim];
        for w in words(text) {
            counts[self.bucket(&w)] += 1.0;
        }
        EmbeddingVector::normalized(counts)
    }
}

/// Embeds with the default hashed-bag embedder.
pub fn embed_text(text: &str) -> EmbeddingVector {
    HashedBagEmbedder::default().embed(text)
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Client for an HTTP embedding service.
///
/// Wire contract: `POST endpoint` with `{"texts": [...]}`, reply
/// `{"embeddings": [[...], ...]}` in the same order.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: String,
    expected_dim: Option<usize>,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, expected_dim: Option<usize>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { endpoint: endpoint.into(), expected_dim, agent }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// One batched request; either every vector comes back or an error does.
    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyBatch);
        }
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let payload: EmbedResponse =
            serde_json::from_str(&body).map_err(|e| ProviderError::MalformedPayload(e.to_string()))?;
        decode_embeddings(payload.embeddings, texts.len(), self.expected_dim)
    }
}

fn decode_embeddings(
    raw: Vec<Vec<f64>>,
    expected: usize,
    expected_dim: Option<usize>,
) -> Result<Vec<EmbeddingVector>, ProviderError> {
    if raw.len() != expected {
        return Err(ProviderError::CountMismatch { expected, got: raw.len() });
    }
    let dim = expected_dim.unwrap_or_else(|| raw.first().map_or(0, Vec::len));
    for (index, v) in raw.iter().enumerate() {
        if v.len() != dim || dim == 0 {
            return Err(ProviderError::DimensionMismatch { index, expected: dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ProviderError::MalformedPayload(format!("embedding {index} has non-finite entries")));
        }
    }
    Ok(raw.into_iter().map(EmbeddingVector::normalized).collect())
}

/// Wraps a remote embedder; any failure falls back to the local embedder.
pub struct FallbackEmbedder {
    remote: RemoteEmbedder,
    fallback: HashedBagEmbedder,
}

impl FallbackEmbedder {
    pub fn new(remote: RemoteEmbedder, fallback: HashedBagEmbedder) -> Self {
        Self { remote, fallback }
    }
}

impl Embedder for FallbackEmbedder {
    fn embed(&self, text: &str) -> EmbeddingVector {
        match self.remote.embed_batch(&[text]) {
            Ok(mut v) => v.pop().expect("count checked"),
            Err(e) => {
                log::warn!("remote embedding failed ({e}); using local embedder");
                self.fallback.embed(text)
            }
        }
    }
}

/// Memoizes another embedder by exact text.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn embed(&self, text: &str) -> EmbeddingVector {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return v.clone();
        }
        let v = self.inner.embed(text);
        self.cache.lock().unwrap().insert(text.to_string(), v.clone());
        v
    }
}

/// Normalized landmark points per facial region for one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<RegionId, Vec<[f64; 2]>>", into = "BTreeMap<RegionId, Vec<[f64; 2]>>")]
pub struct LandmarkSet {
    region_points: BTreeMap<RegionId, Vec<[f64; 2]>>,
}

impl LandmarkSet {
    pub fn new(region_points: BTreeMap<RegionId, Vec<[f64; 2]>>) -> Result<Self, ProviderError> {
        for (region, pts) in &region_points {
            if pts.is_empty() {
                return Err(ProviderError::EmptyRegion(*region));
            }
            for &[x, y] in pts {
                if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
                    return Err(ProviderError::PointOutOfRange(x, y));
                }
            }
        }
        Ok(Self { region_points })
    }

    pub fn points(&self, region: RegionId) -> Option<&[[f64; 2]]> {
        self.region_points.get(&region).map(Vec::as_slice)
    }

    pub fn contains(&self, region: RegionId) -> bool {
        self.region_points.contains_key(&region)
    }

    pub fn regions(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.region_points.keys().copied()
    }
}

impl TryFrom<BTreeMap<RegionId, Vec<[f64; 2]>>> for LandmarkSet {
    type Error = ProviderError;

    fn try_from(m: BTreeMap<RegionId, Vec<[f64; 2]>>) -> Result<Self, Self::Error> {
        LandmarkSet::new(m)
    }
}

impl From<LandmarkSet> for BTreeMap<RegionId, Vec<[f64; 2]>> {
    fn from(s: LandmarkSet) -> Self {
        s.region_points
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkFixtureLine {
    pub image_ref: String,
    pub regions: BTreeMap<RegionId, Vec<[f64; 2]>>,
}

/// Landmarks for many images, keyed by image reference.
#[derive(Debug, Clone, Default)]
pub struct LandmarkFixture {
    images: BTreeMap<String, LandmarkSet>,
}

impl LandmarkFixture {
    /// Loads a JSONL file with one `{"image_ref", "regions": {region: [[x, y], ...]}}` per line.
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let mut images = BTreeMap::new();
        let shown = path.display().to_string();
        for (line, rec) in read_jsonl::<LandmarkFixtureLine>(path)? {
            let set = LandmarkSet::new(rec.regions).map_err(|e| ProviderError::Fixture {
                path: shown.clone(),
                line,
                source: Box::new(e),
            })?;
            if images.insert(rec.image_ref.clone(), set).is_some() {
                return Err(ProviderError::DuplicateImage { path: shown, line, image_ref: rec.image_ref });
            }
        }
        Ok(Self { images })
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, set: LandmarkSet) {
        self.images.insert(image_ref.into(), set);
    }

    pub fn get(&self, image_ref: &str) -> Option<&LandmarkSet> {
        self.images.get(image_ref)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Default padding around landmark extents when building ground-truth boxes.
pub const DEFAULT_PAD: f64 = 0.05;

// Smallest half-extent applied to a zero-width or zero-height point cloud.
const MIN_HALF_EXTENT: f64 = 5e-4;

/// Min/max box over a region's landmarks, grown by `pad` on every side and
/// clamped to the unit square.
///
/// A degenerate extent (single point, or collinear points on an axis) is
/// grown by `pad`, and by at least 1e-3 in total, so the result is always a
/// valid [`BBox`].
pub fn region_box_from_landmarks(landmarks: &LandmarkSet, region: RegionId, pad: f64) -> Result<BBox, ProviderError> {
    if !(0.0..=0.5).contains(&pad) {
        return Err(ProviderError::InvalidPad(pad));
    }
    let pts = landmarks.points(region).ok_or(ProviderError::MissingRegion(region))?;
    let (mut x_lo, mut y_lo, mut x_hi, mut y_hi) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &[x, y] in pts {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let (x1, x2) = expand(x_lo, x_hi, pad);
    let (y1, y2) = expand(y_lo, y_hi, pad);
    Ok(BBox::new(x1, y1, x2, y2).expect("expanded extent is a valid box"))
}

fn expand(lo: f64, hi: f64, pad: f64) -> (f64, f64) {
    let grow = if lo < hi { pad } else { pad.max(MIN_HALF_EXTENT) };
    ((lo - grow).max(0.0), (hi + grow).min(1.0))
}
