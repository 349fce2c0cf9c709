//! Deterministic offline providers.
//!
//! Responses come from a fixture table mapping `kind:key` to a response or a
//! pool of responses. Keys are tried from most to least specific; within a
//! pool the entry is picked by a hash of the request, so identical requests
//! always get byte-identical answers.
//!
//! | kind | keys tried |
//! |---|---|
//! | `extraction` | image id, each word of the image's prompt, `*` |
//! | `label:<criterion>` | image id, each prompt word, `*`, then a hashed candidate |
//! | `criteria_suggestion` | each prompt word of either image, `*` |
//! | `prompt_suggestion` | normalized base prompt text, `*` |
//!
//! Stub images carry their prompt and seed in PNG text chunks, which is how
//! the vision stub knows which prompt an image came from.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use serde_json::Value;
use vipera_core::provider::{ProviderError, TextRequest, VisionKind, VisionRequest};
use vipera_core::rng::fnv1a;

use super::{check_vision_request, ImageGenerator, ImagePayload, ImageResult, TextBackend, VisionBackend};

const BUILTIN_FIXTURES: &str = include_str!("../../fixtures/stub_responses.json");

pub const STUB_IMAGE_SIZE: u32 = 64;
const PROMPT_KEY: &str = "prompt";
const SEED_KEY: &str = "seed";

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read fixtures: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed fixtures: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fixture {0:?} has an empty pool or a non-text entry")]
    BadEntry(String),
}

#[derive(Deserialize)]
struct FixtureFile {
    responses: BTreeMap<String, Value>,
}

/// Response table for the stub providers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fixtures {
    responses: BTreeMap<String, Vec<String>>,
}

fn entry_text(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Object(_) => Some(value.to_string()),
        _ => None,
    }
}

impl Fixtures {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_FIXTURES).expect("builtin fixtures are valid")
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Values are a string, a JSON object (sent as compact JSON) or an array
    /// of those forming a pool.
    pub fn from_json(text: &str) -> Result<Self, FixtureError> {
        let file: FixtureFile = serde_json::from_str(text)?;
        let mut responses = BTreeMap::new();
        for (key, value) in file.responses {
            let pool: Option<Vec<String>> = match &value {
                Value::Array(items) => items.iter().map(entry_text).collect(),
                other => entry_text(other).map(|t| vec![t]),
            };
            match pool {
                Some(pool) if !pool.is_empty() => {
                    responses.insert(key, pool);
                }
                _ => return Err(FixtureError::BadEntry(key)),
            }
        }
        Ok(Self { responses })
    }

    pub fn insert(&mut self, key: impl Into<String>, pool: Vec<String>) {
        self.responses.insert(key.into(), pool);
    }

    /// First matching key's pool entry at `hash`.
    pub fn lookup(&self, keys: impl IntoIterator<Item = String>, hash: u64) -> Option<&str> {
        keys.into_iter().find_map(|k| {
            self.responses
                .get(&k)
                .map(|pool| pool[(hash % pool.len() as u64) as usize].as_str())
        })
    }
}

fn request_hash(parts: &[&str]) -> u64 {
    fnv1a(parts.join("\u{1f}").as_bytes())
}

/// Lowercase alphanumeric words in order of first appearance.
fn words(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let w = w.to_lowercase();
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Lowercase alphanumeric words joined by single spaces.
fn normalized(text: &str) -> String {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Encodes a stub image: a solid field colored from the prompt and seed, with
/// a bottom band spelling the seed's low 64 bits.
pub fn stub_png(prompt: &str, seed: u64) -> Vec<u8> {
    let size = STUB_IMAGE_SIZE as usize;
    let h = fnv1a(prompt.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let field = [(h >> 16) as u8, (h >> 24) as u8, (h >> 32) as u8];
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let px = if y >= size - 8 {
                if (seed >> x) & 1 == 1 { [255, 255, 255] } else { [0, 0, 0] }
            } else {
                field
            };
            data.extend_from_slice(&px);
        }
    }
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, STUB_IMAGE_SIZE, STUB_IMAGE_SIZE);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    encoder
        .add_itxt_chunk(PROMPT_KEY.into(), prompt.into())
        .expect("valid keyword");
    encoder
        .add_itxt_chunk(SEED_KEY.into(), seed.to_string())
        .expect("valid keyword");
    let mut writer = encoder.write_header().expect("in-memory write");
    writer.write_image_data(&data).expect("in-memory write");
    writer.finish().expect("in-memory write");
    out
}

/// Prompt and seed embedded by [`stub_png`], if the bytes are such an image.
pub fn stub_metadata(bytes: &[u8]) -> Option<(String, u64)> {
    let reader = png::Decoder::new(Cursor::new(bytes)).read_info().ok()?;
    let info = reader.info();
    let text = |key: &str| {
        info.utf8_text
            .iter()
            .find(|c| c.keyword == key)
            .and_then(|c| c.get_text().ok())
    };
    Some((text(PROMPT_KEY)?, text(SEED_KEY)?.parse().ok()?))
}

fn simulate_latency(max: Duration, hash: u64) {
    if !max.is_zero() {
        let nanos = max.as_nanos() as u64;
        std::thread::sleep(Duration::from_nanos(hash % nanos.max(1)));
    }
}

#[derive(Debug, Default)]
pub struct StubImageGenerator {
    latency: Duration,
    calls: AtomicUsize,
}

impl StubImageGenerator {
    /// Sleeps up to `latency` per image.
    pub fn with_latency(latency: Duration) -> Self {
        Self {
            latency,
            ..Self::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ImageGenerator for StubImageGenerator {
    fn generate_images(&self, prompt: &str, n: u32, base_seed: u64) -> Result<Vec<ImageResult>, ProviderError> {
        if n == 0 {
            return Err(ProviderError::InvalidRequest("n must be positive".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok((0..u64::from(n))
            .map(|i| {
                let seed = base_seed.wrapping_add(i);
                simulate_latency(self.latency, seed);
                Ok(stub_png(prompt, seed))
            })
            .collect())
    }
}

pub struct StubVision {
    fixtures: Arc<Fixtures>,
    latency: Duration,
    salt: u64,
    calls: AtomicUsize,
}

impl Default for StubVision {
    fn default() -> Self {
        Self::new(Arc::new(Fixtures::builtin()))
    }
}

impl StubVision {
    pub fn new(fixtures: Arc<Fixtures>) -> Self {
        Self {
            fixtures,
            latency: Duration::ZERO,
            salt: 0,
            calls: AtomicUsize::new(0),
        }
    }

    /// Sleeps up to `max` per call; `salt` reshuffles which calls are slow.
    /// Responses are unaffected.
    pub fn with_latency(mut self, max: Duration, salt: u64) -> Self {
        self.latency = max;
        self.salt = salt;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn answer(&self, images: &[ImagePayload], request: &VisionRequest) -> String {
        let prompt_words: Vec<String> = images
            .iter()
            .filter_map(|i| stub_metadata(&i.bytes))
            .flat_map(|(prompt, _)| words(&prompt))
            .collect();
        let ids: Vec<&str> = images.iter().map(|i| i.id.as_str()).collect();
        let kind = request.kind.tag();
        match &request.kind {
            VisionKind::Extraction | VisionKind::CriteriaSuggestion => {
                let mut parts = vec![kind];
                parts.extend(&ids);
                let hash = request_hash(&parts);
                let keys = ids
                    .iter()
                    .map(|id| id.to_string())
                    .chain(prompt_words.iter().cloned())
                    .chain(["*".to_string()])
                    .map(|k| format!("{kind}:{k}"));
                self.fixtures
                    .lookup(keys, hash)
                    .map_or_else(|| "{\"objects\": [], \"suggestions\": []}".into(), String::from)
            }
            VisionKind::Label { criterion, candidates } => {
                let hash = request_hash(&[kind, ids[0], criterion]);
                let keys = ids
                    .iter()
                    .map(|id| id.to_string())
                    .chain(prompt_words.iter().cloned())
                    .chain(["*".to_string()])
                    .map(|k| format!("{kind}:{criterion}:{k}"));
                match self.fixtures.lookup(keys, hash) {
                    Some(text) => text.into(),
                    None if candidates.is_empty() => vipera_core::model::UNKNOWN.into(),
                    None => candidates[(hash % candidates.len() as u64) as usize].clone(),
                }
            }
        }
    }
}

impl VisionBackend for StubVision {
    fn vision_query(&self, images: &[ImagePayload], request: &VisionRequest) -> Result<String, ProviderError> {
        check_vision_request(images, request)?;
        if images.len() != request.image_ids.len() || images.iter().zip(&request.image_ids).any(|(p, id)| &p.id != id) {
            return Err(ProviderError::InvalidRequest("payloads do not match the requested image ids".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let ids: Vec<&str> = images.iter().map(|i| i.id.as_str()).collect();
        simulate_latency(self.latency, request_hash(&ids) ^ self.salt);
        Ok(self.answer(images, request))
    }
}

pub struct StubText {
    fixtures: Arc<Fixtures>,
    calls: AtomicUsize,
}

impl Default for StubText {
    fn default() -> Self {
        Self::new(Arc::new(Fixtures::builtin()))
    }
}

impl StubText {
    pub fn new(fixtures: Arc<Fixtures>) -> Self {
        Self {
            fixtures,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl TextBackend for StubText {
    fn text_query(&self, request: &TextRequest) -> Result<String, ProviderError> {
        if request.instruction.trim().is_empty() {
            return Err(ProviderError::InvalidInstruction);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let base = normalized(&request.base_text);
        let seed = request.seed.to_string();
        let hash = request_hash(&["prompt_suggestion", &base, &seed]);
        let keys = [format!("prompt_suggestion:{base}"), "prompt_suggestion:*".into()];
        Ok(self
            .fixtures
            .lookup(keys, hash)
            .map_or_else(|| "{\"suggestions\": []}".into(), String::from))
    }
}
