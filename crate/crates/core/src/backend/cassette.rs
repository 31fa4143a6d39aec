//! Line-delimited request/response logs for offline replay.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, ChatResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteEntry {
    pub request_hash: String,
    pub model_id: String,
    pub text: String,
    pub completion_tokens: i64,
    pub thought_tokens: i64,
    pub latency_seconds: f64,
}

impl CassetteEntry {
    pub fn to_result(&self) -> ChatResult {
        ChatResult {
            text: self.text.clone(),
            completion_tokens: self.completion_tokens,
            thought_tokens: self.thought_tokens,
            latency_seconds: self.latency_seconds,
            provider_meta: Default::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CassetteError {
    #[error("cassette {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cassette line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cassette {path}: request {index} hash {actual} does not match recorded {expected}")]
    Mismatch {
        path: String,
        index: usize,
        expected: String,
        actual: String,
    },
    #[error("cassette {path}: exhausted after {entries} entries")]
    Exhausted { path: String, entries: usize },
}

/// Hex SHA-256 of `model_id`, a NUL byte, and the prompt.
pub fn request_hash(model_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

pub fn parse_cassette(text: &str) -> Result<Vec<CassetteEntry>, CassetteError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CassetteError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Serves recorded responses in order, checking each request hash.
#[derive(Debug)]
pub struct Replayer {
    label: String,
    entries: Vec<CassetteEntry>,
    cursor: Mutex<usize>,
}

impl Replayer {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CassetteError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CassetteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_entries(path.display().to_string(), parse_cassette(&text)?))
    }

    pub fn from_entries(label: impl Into<String>, entries: Vec<CassetteEntry>) -> Self {
        Self {
            label: label.into(),
            entries,
            cursor: Mutex::new(0),
        }
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - *self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl ChatBackend for Replayer {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResult, BackendError> {
        let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
        let entry = self.entries.get(*cursor).ok_or_else(|| CassetteError::Exhausted {
            path: self.label.clone(),
            entries: self.entries.len(),
        })?;
        let actual = request_hash(&req.model_id, &req.prompt);
        if entry.request_hash != actual {
            return Err(CassetteError::Mismatch {
                path: self.label.clone(),
                index: *cursor,
                expected: entry.request_hash.clone(),
                actual,
            }
            .into());
        }
        *cursor += 1;
        Ok(entry.to_result())
    }

    fn kind(&self) -> BackendKind {
        BackendKind::RecordReplay
    }
}

/// Forwards to an inner backend and appends every exchange to a cassette.
pub struct Recorder<B> {
    inner: B,
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl<B: ChatBackend> Recorder<B> {
    /// Truncates any existing cassette at `path`.
    pub fn create(inner: B, path: impl AsRef<Path>) -> Result<Self, CassetteError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| CassetteError::Io {
            path: path.clone(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(io)?;
        Ok(Self {
            inner,
            path,
            out: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResult, BackendError> {
        let result = self.inner.complete(req)?;
        let entry = CassetteEntry {
            request_hash: request_hash(&req.model_id, &req.prompt),
            model_id: req.model_id.clone(),
            text: result.text.clone(),
            completion_tokens: result.completion_tokens,
            thought_tokens: result.thought_tokens,
            latency_seconds: result.latency_seconds,
        };
        let line = serde_json::to_string(&entry).expect("entry serializes");
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(out, "{line}")
            .and_then(|_| out.flush())
            .map_err(|source| CassetteError::Io {
                path: self.path.clone(),
                source,
            })?;
        Ok(result)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::RecordReplay
    }
}
