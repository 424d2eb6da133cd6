//! The generator `f(x_T, p)` and similarity `CLIP(x, text)` behind one interface.
//!
//! Three backends: a deterministic surrogate, a replayable score-cache file and an
//! HTTP sidecar. [`RecordingGateway`] wraps any of them and writes the cache file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::criterion::IdealScoreSet;
use crate::embedding::{cosine, Embedder, HashEmbedder};
use crate::error::{Error, Result};
use crate::http::{JsonClient, DEFAULT_TIMEOUT};
use crate::text::fingerprint;

/// Noise scale of the surrogate generator.
pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum ImagePayload {
    /// Surrogate image: a unit vector in embedding space.
    Vector(Vec<f64>),
    /// Identifier issued by a sidecar.
    Remote(String),
    /// Resolved later through the score cache.
    Keyed,
}

/// Handle to a generated image. Equal `(prompt, seed, backend)` give equal handles.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRef {
    pub prompt_fingerprint: String,
    pub seed: u64,
    pub payload: ImagePayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

impl ScoreRange {
    pub const COSINE: ScoreRange = ScoreRange { min: -1.0, max: 1.0 };

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }
}

pub trait Gateway: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef>;

    fn score(&self, image: &ImageRef, text: &str) -> Result<f64>;

    fn score_range(&self) -> ScoreRange {
        ScoreRange::COSINE
    }
}

impl<G: Gateway + ?Sized> Gateway for Arc<G> {
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef> {
        (**self).generate(prompt, seed)
    }

    fn score(&self, image: &ImageRef, text: &str) -> Result<f64> {
        (**self).score(image, text)
    }

    fn score_range(&self) -> ScoreRange {
        (**self).score_range()
    }
}

fn require_text(what: &str, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        Err(Error::InvalidInput(format!("{what} must be non-empty")))
    } else {
        Ok(())
    }
}

/// Image vector = normalize(embed(prompt) + epsilon * u(seed)), where u(seed) is
/// a uniformly random unit direction drawn from a ChaCha8 stream seeded by `seed`.
pub struct SurrogateGateway {
    embedder: Arc<dyn Embedder>,
    epsilon: f64,
}

impl SurrogateGateway {
    pub fn new(embedder: Arc<dyn Embedder>, epsilon: f64) -> Self {
        assert!(
            epsilon >= 0.0 && epsilon.is_finite(),
            "epsilon must be finite and non-negative"
        );
        SurrogateGateway { embedder, epsilon }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Unit-norm noise direction for `seed`.
    pub fn noise(seed: u64, dim: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl Default for SurrogateGateway {
    fn default() -> Self {
        SurrogateGateway::new(Arc::new(HashEmbedder::default()), DEFAULT_EPSILON)
    }
}

impl Gateway for SurrogateGateway {
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef> {
        require_text("prompt", prompt)?;
        let mut v = self.embedder.embed(prompt)?.into_vec();
        if self.epsilon > 0.0 {
            let noise = Self::noise(seed, v.len());
            for (x, n) in v.iter_mut().zip(noise) {
                *x += self.epsilon * n;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(ImageRef {
            prompt_fingerprint: fingerprint(prompt),
            seed,
            payload: ImagePayload::Vector(v),
        })
    }

    fn score(&self, image: &ImageRef, text: &str) -> Result<f64> {
        require_text("score text", text)?;
        let ImagePayload::Vector(v) = &image.payload else {
            return Err(Error::InvalidInput(
                "image was not produced by the surrogate backend".into(),
            ));
        };
        let t = self.embedder.embed(text)?;
        if v.len() != t.dim() {
            return Err(Error::InvalidInput("image and text dims differ".into()));
        }
        let s = cosine(v, t.as_slice());
        // Zero-norm sides carry no similarity.
        Ok(if s == f64::NEG_INFINITY { 0.0 } else { s })
    }
}

type CacheKey = (String, String, u64);

pub const CACHE_HEADER: [&str; 4] = ["prompt_fingerprint", "text_fingerprint", "seed", "score"];

#[derive(Serialize, Deserialize)]
struct CacheRow {
    prompt_fingerprint: String,
    text_fingerprint: String,
    seed: u64,
    score: f64,
}

/// Replays scores from a CSV cache of `(prompt_fingerprint, text_fingerprint, seed, score)`.
#[derive(Debug, Default)]
pub struct CacheGateway {
    scores: HashMap<CacheKey, f64>,
    images: HashSet<(String, u64)>,
    range: Option<ScoreRange>,
}

impl CacheGateway {
    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut cache = CacheGateway::default();
        let mut rdr = csv::Reader::from_reader(reader);
        for row in rdr.deserialize::<CacheRow>() {
            let row = row.map_err(|e| Error::Malformed(format!("score cache: {e}")))?;
            if !row.score.is_finite() {
                return Err(Error::Malformed("score cache: non-finite score".into()));
            }
            cache.images.insert((row.prompt_fingerprint.clone(), row.seed));
            cache
                .scores
                .insert((row.prompt_fingerprint, row.text_fingerprint, row.seed), row.score);
        }
        Ok(cache)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn with_range(mut self, range: ScoreRange) -> Self {
        self.range = Some(range);
        self
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl Gateway for CacheGateway {
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef> {
        require_text("prompt", prompt)?;
        let fp = fingerprint(prompt);
        if !self.images.contains(&(fp.clone(), seed)) {
            return Err(Error::CacheMiss(format!("image {fp}/{seed}")));
        }
        Ok(ImageRef {
            prompt_fingerprint: fp,
            seed,
            payload: ImagePayload::Keyed,
        })
    }

    fn score(&self, image: &ImageRef, text: &str) -> Result<f64> {
        require_text("score text", text)?;
        let key = (image.prompt_fingerprint.clone(), fingerprint(text), image.seed);
        self.scores
            .get(&key)
            .copied()
            .ok_or_else(|| Error::CacheMiss(format!("{}/{}/{}", key.0, key.1, key.2)))
    }

    fn score_range(&self) -> ScoreRange {
        self.range.unwrap_or(ScoreRange::COSINE)
    }
}

/// Client for a scorer sidecar speaking the JSON protocol in [`crate::http`].
pub struct HttpGateway {
    client: JsonClient,
    range: ScoreRange,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    seed: u64,
}

#[derive(Deserialize)]
struct GenerateResponse {
    image_id: String,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    image_id: &'a str,
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

#[derive(Deserialize)]
struct MetaResponse {
    score_range: Option<(f64, f64)>,
}

impl HttpGateway {
    /// Connects to `base_url`, reading the declared score range from `/meta` when the
    /// sidecar offers one.
    pub fn connect(base_url: &str) -> Self {
        let client = JsonClient::new(base_url, DEFAULT_TIMEOUT);
        let range = client
            .get::<MetaResponse>("/meta")
            .ok()
            .and_then(|m| m.score_range)
            .map(|(min, max)| ScoreRange { min, max })
            .unwrap_or(ScoreRange::COSINE);
        HttpGateway { client, range }
    }
}

impl Gateway for HttpGateway {
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef> {
        require_text("prompt", prompt)?;
        let resp: GenerateResponse = self.client.post("/generate", &GenerateRequest { prompt, seed })?;
        Ok(ImageRef {
            prompt_fingerprint: fingerprint(prompt),
            seed,
            payload: ImagePayload::Remote(resp.image_id),
        })
    }

    fn score(&self, image: &ImageRef, text: &str) -> Result<f64> {
        require_text("score text", text)?;
        let ImagePayload::Remote(id) = &image.payload else {
            return Err(Error::InvalidInput("image was not produced by the HTTP backend".into()));
        };
        let resp: ScoreResponse = self.client.post("/score", &ScoreRequest { image_id: id, text })?;
        if !resp.score.is_finite() {
            return Err(Error::Backend("/score: non-finite score".into()));
        }
        Ok(resp.score)
    }

    fn score_range(&self) -> ScoreRange {
        self.range
    }
}

/// Forwards to an inner gateway and keeps every score it returns, for later replay
/// through [`CacheGateway`].
pub struct RecordingGateway<G> {
    inner: G,
    log: Mutex<BTreeMap<CacheKey, f64>>,
}

impl<G: Gateway> RecordingGateway<G> {
    pub fn new(inner: G) -> Self {
        RecordingGateway {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.log.lock().expect("recording lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the recorded scores as a cache CSV, rows sorted by key.
    pub fn write_cache<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let log = self.log.lock().expect("recording lock");
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CACHE_HEADER)
            .map_err(|e| Error::Output(format!("score cache: {e}")))?;
        for ((p, t, seed), score) in log.iter() {
            w.write_record([p.as_str(), t.as_str(), &seed.to_string(), &score.to_string()])
                .map_err(|e| Error::Output(format!("score cache: {e}")))?;
        }
        w.flush().map_err(|e| Error::Output(format!("score cache: {e}")))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_cache(std::io::BufWriter::new(file))
    }
}

impl<G: Gateway> Gateway for RecordingGateway<G> {
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef> {
        self.inner.generate(prompt, seed)
    }

    fn score(&self, image: &ImageRef, text: &str) -> Result<f64> {
        let s = self.inner.score(image, text)?;
        self.log
            .lock()
            .expect("recording lock")
            .insert((image.prompt_fingerprint.clone(), fingerprint(text), image.seed), s);
        Ok(s)
    }

    fn score_range(&self) -> ScoreRange {
        self.inner.score_range()
    }
}

/// Scores of `n` ideal images for `target_text`, seeds `seed_base..seed_base + n`.
pub fn warmup_scores(
    gateway: &dyn Gateway,
    prompt_id: &str,
    target_text: &str,
    n: usize,
    seed_base: u64,
) -> Result<IdealScoreSet> {
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "warm-up needs at least 2 samples, got {n}"
        )));
    }
    let range = gateway.score_range();
    let scores = (0..n as u64)
        .map(|i| {
            let image = gateway.generate(target_text, seed_base.wrapping_add(i))?;
            let s = gateway.score(&image, target_text)?;
            if !range.contains(s) {
                return Err(Error::Backend(format!(
                    "score {s} outside declared range [{}, {}]",
                    range.min, range.max
                )));
            }
            Ok(s)
        })
        .collect::<Result<Vec<f64>>>()?;
    IdealScoreSet::new(prompt_id, scores)
}
