//! Record/replay fixtures.
//!
//! A replay file is pretty-printed JSON:
//!
//! ```json
//! {
//!   "format": "lensaudit-replay",
//!   "version": 1,
//!   "entries": {
//!     "<sha256 fingerprint>": {
//!       "tag": "<request_tag of the first recording>",
//!       "model_id": "gpt-4",
//!       "temperature": 0.7,
//!       "responses": [ { "text": "...", "finish_reason": "complete" } ]
//!     }
//!   }
//! }
//! ```
//!
//! Responses under one fingerprint are handed out in recorded order. Entries
//! are keyed by fingerprint in a sorted map so saved files are byte-stable.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use std::sync::Mutex;

use super::{Backend, ChatRequest, ChatResponse, Fingerprint, FinishReason, LlmError, Usage};

pub const REPLAY_FORMAT: &str = "lensaudit-replay";
pub const REPLAY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedResponse {
    pub text: String,
    #[serde(default)]
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl From<&ChatResponse> for RecordedResponse {
    fn from(r: &ChatResponse) -> Self {
        Self {
            text: r.text.clone(),
            finish_reason: r.finish_reason,
            usage: r.usage,
        }
    }
}

impl From<&RecordedResponse> for ChatResponse {
    fn from(r: &RecordedResponse) -> Self {
        Self {
            text: r.text.clone(),
            finish_reason: r.finish_reason,
            usage: r.usage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub tag: String,
    pub model_id: String,
    pub temperature: f64,
    pub responses: Vec<RecordedResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReplayFile {
    format: String,
    version: u32,
    entries: BTreeMap<Fingerprint, ReplayEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayStore {
    entries: BTreeMap<Fingerprint, ReplayEntry>,
}

impl ReplayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total recorded responses across all fingerprints.
    pub fn response_count(&self) -> usize {
        self.entries.values().map(|e| e.responses.len()).sum()
    }

    pub fn get(&self, fingerprint: &Fingerprint) -> Option<&ReplayEntry> {
        self.entries.get(fingerprint)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Fingerprint, &ReplayEntry)> {
        self.entries.iter()
    }

    /// Appends a response under the request's fingerprint.
    pub fn push(&mut self, request: &ChatRequest, response: &ChatResponse) {
        let entry = self
            .entries
            .entry(request.fingerprint())
            .or_insert_with(|| ReplayEntry {
                tag: request.request_tag.clone(),
                model_id: request.model_id.clone(),
                temperature: request.temperature,
                responses: Vec::new(),
            });
        entry.responses.push(response.into());
    }

    /// Appends every entry of `other` after this store's own recordings.
    pub fn merge(&mut self, other: ReplayStore) {
        for (fp, entry) in other.entries {
            match self.entries.get_mut(&fp) {
                Some(existing) => existing.responses.extend(entry.responses),
                None => {
                    self.entries.insert(fp, entry);
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        let file = ReplayFile {
            format: REPLAY_FORMAT.to_string(),
            version: REPLAY_VERSION,
            entries: self.entries.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("replay store serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: ReplayFile = serde_json::from_str(text).map_err(|e| format!("malformed replay file: {e}"))?;
        if file.format != REPLAY_FORMAT {
            return Err(format!(
                "unexpected replay format {:?} (want {REPLAY_FORMAT:?})",
                file.format
            ));
        }
        if file.version != REPLAY_VERSION {
            return Err(format!(
                "unsupported replay version {} (want {REPLAY_VERSION})",
                file.version
            ));
        }
        Ok(Self { entries: file.entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read replay file {}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }
}

/// Serves recorded responses; each fingerprint has its own cursor.
#[derive(Debug)]
pub struct ReplayBackend {
    store: ReplayStore,
    cursors: Mutex<HashMap<Fingerprint, usize>>,
}

impl ReplayBackend {
    pub fn new(store: ReplayStore) -> Self {
        Self {
            store,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }

    /// Number of responses handed out so far.
    pub fn consumed(&self) -> usize {
        self.cursors.lock().expect("cursor lock").values().sum()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let fingerprint = request.fingerprint();
        let Some(entry) = self.store.get(&fingerprint) else {
            return Err(LlmError::FingerprintMiss {
                tag: request.request_tag.clone(),
                fingerprint,
            });
        };
        let mut cursors = self.cursors.lock().expect("cursor lock");
        let cursor = cursors.entry(fingerprint.clone()).or_insert(0);
        match entry.responses.get(*cursor) {
            Some(recorded) => {
                *cursor += 1;
                Ok(recorded.into())
            }
            None => Err(LlmError::ReplayExhausted {
                tag: request.request_tag.clone(),
                fingerprint,
                recorded: entry.responses.len(),
            }),
        }
    }

    /// Always sequential so identical requests in one batch receive
    /// recordings in request order.
    fn complete_batch(&self, requests: &[ChatRequest], _concurrent: bool) -> Vec<Result<ChatResponse, LlmError>> {
        requests.iter().map(|r| self.complete(r)).collect()
    }
}

/// Forwards to `inner` and records every successful response.
pub struct RecordingBackend<B> {
    inner: B,
    store: Mutex<ReplayStore>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self::with_store(inner, ReplayStore::new())
    }

    pub fn with_store(inner: B, store: ReplayStore) -> Self {
        Self {
            inner,
            store: Mutex::new(store),
        }
    }

    pub fn snapshot(&self) -> ReplayStore {
        self.store.lock().expect("store lock").clone()
    }

    pub fn into_store(self) -> ReplayStore {
        self.store.into_inner().expect("store lock")
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let response = self.inner.complete(request)?;
        self.store.lock().expect("store lock").push(request, &response);
        Ok(response)
    }

    /// Calls may run concurrently, but recordings are appended in request
    /// order so a later replay hands them back in the same positions.
    fn complete_batch(&self, requests: &[ChatRequest], concurrent: bool) -> Vec<Result<ChatResponse, LlmError>> {
        let results = self.inner.complete_batch(requests, concurrent);
        let mut store = self.store.lock().expect("store lock");
        for (req, res) in requests.iter().zip(&results) {
            if let Ok(resp) = res {
                store.push(req, resp);
            }
        }
        results
    }
}

/// Sends `request` to `backend` and appends the response to `store`.
pub fn record(request: &ChatRequest, backend: &dyn Backend, store: &mut ReplayStore) -> Result<ChatResponse, LlmError> {
    request.validate()?;
    let response = backend.complete(request)?;
    store.push(request, &response);
    Ok(response)
}
