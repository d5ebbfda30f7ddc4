//! Vision-language geolocation: a coordinate-aware prompt goes to a
//! pluggable backend (live HTTP endpoint, canned mock, or a recorded
//! transcript), and the free-text answer is parsed back into coordinates
//! and place names.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{LazyLock, Mutex};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use regex::Regex;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::BenchmarkRecord;
use crate::fsutil::atomic_write;
use crate::geo::GeoPoint;
use crate::net::{Clock, HttpTransport, RetryPolicy, TransportError};
use crate::result::{MatchResult, Pipeline};

pub const ENV_ENDPOINT: &str = "ISSGEO_VLM_ENDPOINT";
pub const ENV_API_KEY: &str = "ISSGEO_VLM_API_KEY";
pub const ENV_MODEL: &str = "ISSGEO_VLM_MODEL";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "gpt-4o";

const SYSTEM_TEXT: &str = "You are an expert in remote sensing and physical geography. \
You analyse photographs of the Earth taken by astronauts aboard the International Space Station.";

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no recorded response for prompt digest {0}")]
    ReplayMiss(String),
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("empty response")]
    EmptyResponse,
    #[error("response contains neither coordinates nor place names")]
    NoHypothesis,
    #[error("transcript line {line}: {reason}")]
    TranscriptFormat { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VlmError {
    pub fn kind(&self) -> &'static str {
        match self {
            VlmError::BackendUnavailable(_) => "BackendUnavailable",
            VlmError::ReplayMiss(_) => "ReplayMiss",
            VlmError::AuthError(_) => "AuthError",
            VlmError::EmptyResponse => "EmptyResponse",
            VlmError::NoHypothesis => "NoHypothesis",
            VlmError::TranscriptFormat { .. } => "TranscriptFormatError",
            VlmError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VlmPrompt {
    pub system_text: String,
    pub user_text: String,
    /// Encoded image sent along with the text.
    pub image: Vec<u8>,
}

impl VlmPrompt {
    /// Hex SHA-256 over system text, user text and image bytes, each
    /// separated by a NUL byte.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_text.as_bytes());
        h.update([0u8]);
        h.update(self.user_text.as_bytes());
        h.update([0u8]);
        h.update(&self.image);
        hex::encode(h.finalize())
    }

    fn image_mime(&self) -> &'static str {
        if self.image.starts_with(&[0x89, b'P', b'N', b'G']) {
            "image/png"
        } else {
            "image/jpeg"
        }
    }
}

/// `33.40787°N latitude and 22.99734°E longitude`.
pub fn format_coordinates(p: GeoPoint) -> String {
    let ns = if p.lat < 0.0 { 'S' } else { 'N' };
    let ew = if p.lon < 0.0 { 'W' } else { 'E' };
    format!(
        "{:.5}°{ns} latitude and {:.5}°{ew} longitude",
        p.lat.abs(),
        p.lon.abs()
    )
}

pub fn build_prompt(iss: GeoPoint, image: &[u8]) -> VlmPrompt {
    let user_text = format!(
        "This photograph was taken from the International Space Station. At the time of capture \
the station was at approximately {}. \
(i) Describe the visible features in the image, such as coastlines, peninsulas, urban layouts, \
river systems and mountain ranges. \
(ii) Infer the most likely geographic location shown, name it, and give its centre as \
decimal-degree coordinates with hemisphere letters.",
        format_coordinates(iss)
    );
    VlmPrompt {
        system_text: SYSTEM_TEXT.to_string(),
        user_text,
        image: image.to_vec(),
    }
}

pub trait VlmBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn query(&self, prompt: &VlmPrompt) -> Result<String, VlmError>;
}

/// Returns the same canned text for every prompt.
#[derive(Debug)]
pub struct MockBackend {
    response: String,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl VlmBackend for MockBackend {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn query(&self, _: &VlmPrompt) -> Result<String, VlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.response.clone())
    }
}

/// Recorded responses keyed by prompt digest. Transcript lines are
/// `digest<TAB>base64(response)`; blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBackend {
    records: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn parse(text: &str) -> Result<Self, VlmError> {
        let mut records = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| VlmError::TranscriptFormat {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (digest, payload) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(bad("digest is not 64 hex characters"));
            }
            let bytes = BASE64
                .decode(payload.trim())
                .map_err(|e| bad(&e.to_string()))?;
            let text = String::from_utf8(bytes).map_err(|_| bad("response is not UTF-8"))?;
            records.insert(digest.to_ascii_lowercase(), text);
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self, VlmError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, prompt: &VlmPrompt, response: impl Into<String>) {
        self.records.insert(prompt.digest(), response.into());
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Transcript text, sorted by digest.
    pub fn to_transcript(&self) -> String {
        let mut keys: Vec<_> = self.records.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let _ = writeln!(out, "{k}\t{}", BASE64.encode(self.records[k].as_bytes()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), VlmError> {
        Ok(atomic_write(path, self.to_transcript().as_bytes())?)
    }
}

impl VlmBackend for ReplayBackend {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn query(&self, prompt: &VlmPrompt) -> Result<String, VlmError> {
        let digest = prompt.digest();
        self.records
            .get(&digest)
            .cloned()
            .ok_or(VlmError::ReplayMiss(digest))
    }
}

/// Wraps another backend and keeps every answer, so a live session can be
/// saved as a replay transcript.
pub struct RecordingBackend<'a> {
    inner: &'a dyn VlmBackend,
    store: Mutex<ReplayBackend>,
}

impl<'a> RecordingBackend<'a> {
    pub fn new(inner: &'a dyn VlmBackend, existing: ReplayBackend) -> Self {
        Self {
            inner,
            store: Mutex::new(existing),
        }
    }

    pub fn transcript(&self) -> ReplayBackend {
        self.store.lock().expect("recording store poisoned").clone()
    }
}

impl VlmBackend for RecordingBackend<'_> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn query(&self, prompt: &VlmPrompt) -> Result<String, VlmError> {
        let text = self.inner.query(prompt)?;
        self.store
            .lock()
            .expect("recording store poisoned")
            .insert(prompt, text.clone());
        Ok(text)
    }
}

/// Connection settings for an OpenAI-style chat-completions endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    pub endpoint: String,
    pub api_key: String,
    pub model: String,
    pub retry: RetryPolicy,
}

impl LiveConfig {
    /// Reads the endpoint, key and model through `get` (normally
    /// `std::env::var`). A missing key is an [`VlmError::AuthError`].
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Result<Self, VlmError> {
        let api_key = get(ENV_API_KEY)
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| VlmError::AuthError(format!("{ENV_API_KEY} is not set")))?;
        Ok(Self {
            endpoint: get(ENV_ENDPOINT)
                .filter(|v| !v.is_empty())
                .unwrap_or_else(|| DEFAULT_ENDPOINT.into()),
            api_key,
            model: get(ENV_MODEL)
                .filter(|v| !v.is_empty())
                .unwrap_or_else(|| DEFAULT_MODEL.into()),
            retry: RetryPolicy::default(),
        })
    }
}

pub struct LiveBackend<'a> {
    cfg: LiveConfig,
    transport: &'a dyn HttpTransport,
    clock: &'a dyn Clock,
}

impl<'a> LiveBackend<'a> {
    pub fn new(cfg: LiveConfig, transport: &'a dyn HttpTransport, clock: &'a dyn Clock) -> Self {
        Self {
            cfg,
            transport,
            clock,
        }
    }

    fn request_body(&self, prompt: &VlmPrompt) -> Vec<u8> {
        let data_url = format!(
            "data:{};base64,{}",
            prompt.image_mime(),
            BASE64.encode(&prompt.image)
        );
        json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": [
                    {"type": "text", "text": prompt.user_text},
                    {"type": "image_url", "image_url": {"url": data_url}}
                ]}
            ]
        })
        .to_string()
        .into_bytes()
    }
}

/// Assistant text from a chat-completions reply.
fn extract_content(body: &[u8]) -> Result<String, VlmError> {
    let v: serde_json::Value = serde_json::from_slice(body)
        .map_err(|e| VlmError::BackendUnavailable(format!("malformed reply: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    match content {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(VlmError::BackendUnavailable(
            "reply has no message content".into(),
        )),
    }
}

impl VlmBackend for LiveBackend<'_> {
    fn name(&self) -> &'static str {
        "live"
    }

    fn query(&self, prompt: &VlmPrompt) -> Result<String, VlmError> {
        let headers = vec![
            (
                "Authorization".to_string(),
                format!("Bearer {}", self.cfg.api_key),
            ),
            ("Content-Type".to_string(), "application/json".to_string()),
        ];
        let body = self.request_body(prompt);
        let attempts = self.cfg.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                self.clock.sleep(self.cfg.retry.delay_after(attempt - 1));
            }
            match self.transport.post(&self.cfg.endpoint, &headers, &body) {
                Ok(r) if r.is_success() => return extract_content(&r.body),
                Ok(r) if r.status == 401 || r.status == 403 => {
                    return Err(VlmError::AuthError(format!("HTTP {}", r.status)))
                }
                Ok(r) if r.is_transient() => last = format!("HTTP {}", r.status),
                Ok(r) => return Err(VlmError::BackendUnavailable(format!("HTTP {}", r.status))),
                Err(TransportError::Forbidden(u)) => {
                    return Err(VlmError::BackendUnavailable(format!(
                        "network forbidden: {u}"
                    )))
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(VlmError::BackendUnavailable(format!(
            "{last} after {attempts} attempts"
        )))
    }
}

/// What the model thinks it is looking at.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationHypothesis {
    pub place_names: Vec<String>,
    pub coords: Option<GeoPoint>,
    pub raw_response: String,
    pub confidence_note: Option<String>,
}

static HEMI_COORD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)(?P<num>\d{1,3}(?:\.\d+)?)\s*(?P<deg>°|º|˚|deg(?:rees?)?\b)?\s*(?P<hemi>north|south|east|west|[NSEW])\b",
    )
    .expect("valid regex")
});

static SIGNED_PAIR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?P<lat>[-+−]?\d{1,2}\.\d+)\s*°?\s*,\s*(?P<lon>[-+−]?\d{1,3}\.\d+)\s*°?")
        .expect("valid regex")
});

const FEATURE_WORDS: &str = "Canal|Peninsula|River|Sea|Desert|City|Gulf|Bay|Lake|Ocean|Delta|Strait|Island|Islands|Mountains|Range|Coast|Valley|Plateau|Basin|Reservoir|Lagoon|Archipelago|Cape|Harbor|Harbour";

/// "Red Sea", "Sinai Peninsula": capitalized words ending in a feature word.
static NAMED_FEATURE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"\b(?P<name>(?:\p{{Lu}}[\p{{L}}'’\-]*[ \t]+){{1,3}}(?:{FEATURE_WORDS}))\b"
    ))
    .expect("valid regex")
});

/// "Gulf of Suez", "City of London".
static FEATURE_OF: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"\b(?P<name>(?:{FEATURE_WORDS})[ \t]+of[ \t]+(?:the[ \t]+)?\p{{Lu}}[\p{{L}}'’\-]*(?:[ \t]+\p{{Lu}}[\p{{L}}'’\-]*){{0,2}})"
    ))
    .expect("valid regex")
});

/// "Lake Tana", "Mount Kilimanjaro": a leading feature word, then a name.
static FEATURE_FIRST: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"\b(?P<name>(?:Lake|Lakes|Mount|Cape|Isle|Port|Fort|Lac|Lago|Mont)[ \t]+\p{Lu}[\p{L}'’\-]*(?:[ \t]+\p{Lu}[\p{L}'’\-]*){0,2})",
    )
    .expect("valid regex")
});

/// Capitalized phrase right after a cue such as "very likely".
static CUED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i:the image shows|very likely|most likely|likely|probably|appears to be|this is)[ \t]+(?:(?i:the)[ \t]+)?(?P<name>\p{Lu}[\p{L}'’\-]*(?:[ \t]+\p{Lu}[\p{L}'’\-]*){0,3})",
    )
    .expect("valid regex")
});

static HEDGE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(very likely|most likely|likely|probably|possibly|appears to be|could be)\b")
        .expect("valid regex")
});

const LEADING_STOPWORDS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "near", "and", "of", "in", "on", "probably",
    "likely", "possibly", "perhaps", "maybe", "it", "here", "there", "across", "over", "along",
    "between",
];

fn clean_name(raw: &str) -> Option<String> {
    let words: Vec<&str> = raw.split_whitespace().collect();
    let start = words
        .iter()
        .take_while(|w| LEADING_STOPWORDS.contains(&w.to_lowercase().as_str()))
        .count();
    let kept = &words[start..];
    if kept.is_empty() {
        return None;
    }
    let name = kept.join(" ");
    // A bare feature word ("Sea") is not a place.
    if kept.len() == 1
        && FEATURE_WORDS
            .split('|')
            .any(|f| f.eq_ignore_ascii_case(&name))
    {
        return None;
    }
    Some(name)
}

fn parse_number(s: &str) -> Option<f64> {
    s.replace('−', "-").parse().ok()
}

fn extract_coords(text: &str) -> Option<GeoPoint> {
    let (mut lat, mut lon): (Option<f64>, Option<f64>) = (None, None);
    for c in HEMI_COORD.captures_iter(text) {
        let num = &c["num"];
        // Bare integers next to a letter are too ambiguous without a degree mark.
        if !num.contains('.') && c.name("deg").is_none() {
            continue;
        }
        let Some(v) = parse_number(num) else { continue };
        match c["hemi"].chars().next().map(|ch| ch.to_ascii_uppercase()) {
            Some('N') if v <= 90.0 => lat = Some(v),
            Some('S') if v <= 90.0 => lat = Some(-v),
            Some('E') if v <= 180.0 => lon = Some(v),
            Some('W') if v <= 180.0 => lon = Some(-v),
            _ => continue,
        }
        if let (Some(a), Some(o)) = (lat, lon) {
            if let Ok(p) = GeoPoint::new(a, o) {
                return Some(p);
            }
        }
    }
    for c in SIGNED_PAIR.captures_iter(text) {
        if let (Some(a), Some(o)) = (parse_number(&c["lat"]), parse_number(&c["lon"])) {
            if let Ok(p) = GeoPoint::new(a, o) {
                return Some(p);
            }
        }
    }
    None
}

fn last_word_len(s: &str) -> usize {
    s.rsplit(char::is_whitespace).next().map_or(0, str::len)
}

fn extract_place_names(text: &str) -> Vec<String> {
    let mut found: Vec<(usize, usize, String)> = Vec::new();
    for re in [&*NAMED_FEATURE, &*FEATURE_OF, &*FEATURE_FIRST, &*CUED] {
        for c in re.captures_iter(text) {
            let m = c.name("name").expect("group present");
            // "Or Lake Tana": the trailing word opens the next name instead.
            let tail = m.end() - last_word_len(m.as_str());
            if std::ptr::eq(re, &*NAMED_FEATURE)
                && FEATURE_FIRST
                    .find_at(text, tail)
                    .is_some_and(|f| f.start() == tail)
            {
                continue;
            }
            if let Some(name) = clean_name(m.as_str()) {
                let first = name.split(' ').next().unwrap_or("");
                let start = m.start() + m.as_str().find(first).unwrap_or(0);
                found.push((start, m.end(), name));
            }
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut out: Vec<String> = Vec::new();
    for (start, end, name) in found {
        // Overlapping phrases describe the same mention; the earliest, longest wins.
        if spans.iter().any(|&(s, e)| start < e && s < end) {
            continue;
        }
        spans.push((start, end));
        if !out.iter().any(|n| n.eq_ignore_ascii_case(&name)) {
            out.push(name);
        }
    }
    out
}

pub fn parse_response(text: &str) -> Result<LocationHypothesis, VlmError> {
    if text.trim().is_empty() {
        return Err(VlmError::EmptyResponse);
    }
    let coords = extract_coords(text);
    let place_names = extract_place_names(text);
    if coords.is_none() && place_names.is_empty() {
        return Err(VlmError::NoHypothesis);
    }
    let confidence_note = HEDGE.find(text).map(|m| m.as_str().to_lowercase());
    Ok(LocationHypothesis {
        place_names,
        coords,
        raw_response: text.to_string(),
        confidence_note,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmMatch {
    pub result: MatchResult,
    pub hypothesis: Option<LocationHypothesis>,
    pub raw_response: String,
}

impl VlmMatch {
    pub fn is_unresolved(&self) -> bool {
        self.result.is_unresolved()
    }
}

/// Prompt, query and parse for one image. Unparseable answers come back as
/// an unresolved result rather than an error.
pub fn vlm_geolocate_image(
    image_id: &str,
    iss: GeoPoint,
    image: &[u8],
    backend: &dyn VlmBackend,
) -> Result<VlmMatch, VlmError> {
    let start = std::time::Instant::now();
    let prompt = build_prompt(iss, image);
    let raw = backend.query(&prompt)?;
    let mut result = MatchResult::new(image_id, Pipeline::Vlm, 1);
    let hypothesis = match parse_response(&raw) {
        Ok(h) => Some(h),
        Err(VlmError::NoHypothesis | VlmError::EmptyResponse) => None,
        Err(e) => return Err(e),
    };
    if let Some(h) = &hypothesis {
        result.predicted = h.coords;
        result.place_names = h.place_names.clone();
        result.score = 1.0;
    }
    result.runtime_s = start.elapsed().as_secs_f64();
    Ok(VlmMatch {
        result,
        hypothesis,
        raw_response: raw,
    })
}

pub fn vlm_geolocate(
    record: &BenchmarkRecord,
    backend: &dyn VlmBackend,
) -> Result<VlmMatch, VlmError> {
    let image = std::fs::read(&record.image_path)?;
    vlm_geolocate_image(&record.image_id, record.iss, &image, backend)
}
