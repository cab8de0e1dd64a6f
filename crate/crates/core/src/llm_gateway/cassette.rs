//! JSON Lines cassettes of recorded chat completions.
//!
//! Entries are keyed by `<tag>@<sha256>` where the digest covers the
//! canonical JSON of the messages and sampling parameters, so any prompt
//! change produces a replay miss instead of a stale answer.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatMessage, GatewayError, LlmRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub tag: String,
    pub request_digest: String,
    pub completions: Vec<String>,
    pub recorded_at: String,
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    n_completions: u32,
    max_tokens: u32,
    seed: Option<u64>,
}

/// SHA-256 (hex) of the canonical messages + sampling parameters.
pub fn request_digest(request: &LlmRequest) -> String {
    let canonical = CanonicalRequest {
        messages: &request.messages,
        temperature: request.params.temperature,
        top_p: request.params.top_p,
        n_completions: request.params.n_completions,
        max_tokens: request.params.max_tokens,
        seed: request.params.seed,
    };
    let bytes = serde_json::to_vec(&canonical).expect("request serialises");
    hex::encode(Sha256::digest(&bytes))
}

pub(crate) fn entry_key(request: &LlmRequest) -> String {
    format!("{}@{}", request.tag, request_digest(request))
}

/// Read-only replay store.
#[derive(Debug, Clone, Default)]
pub struct Cassette {
    entries: HashMap<String, CassetteEntry>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Cassette, GatewayError> {
        let file = File::open(path).map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.display())))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Cassette(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Cassette(format!("{}:{}: {e}", path.display(), i + 1)))?;
            // first recording wins
            entries.entry(entry.key.clone()).or_insert(entry);
        }
        Ok(Cassette { entries })
    }

    pub fn from_entries(list: impl IntoIterator<Item = CassetteEntry>) -> Cassette {
        let mut entries = HashMap::new();
        for e in list {
            entries.entry(e.key.clone()).or_insert(e);
        }
        Cassette { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, request: &LlmRequest) -> Option<&CassetteEntry> {
        self.entries.get(&entry_key(request))
    }

    /// Structural integrity check of a cassette file.
    pub fn verify(path: &Path) -> io::Result<CassetteReport> {
        let file = File::open(path)?;
        let mut report = CassetteReport::default();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            report.entries += 1;
            let entry: CassetteEntry = match serde_json::from_str(&line) {
                Ok(e) => e,
                Err(e) => {
                    report.problems.push(format!("line {lineno}: unparseable entry: {e}"));
                    continue;
                }
            };
            if entry.key != format!("{}@{}", entry.tag, entry.request_digest) {
                report.problems.push(format!("line {lineno}: key does not equal <tag>@<request_digest>"));
            }
            if entry.request_digest.len() != 64 || !entry.request_digest.chars().all(|c| c.is_ascii_hexdigit()) {
                report.problems.push(format!("line {lineno}: request_digest is not a SHA-256 hex digest"));
            }
            if entry.completions.is_empty() {
                report.problems.push(format!("line {lineno}: no completions"));
            }
            if let Some(first) = seen.insert(entry.key.clone(), lineno) {
                report.problems.push(format!("line {lineno}: duplicate key first seen on line {first}"));
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CassetteReport {
    pub entries: usize,
    pub problems: Vec<String>,
}

impl CassetteReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Appends entries to a cassette file; shared across threads.
pub struct CassetteWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl CassetteWriter {
    pub fn create(path: &Path) -> io::Result<CassetteWriter> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CassetteWriter {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, request: &LlmRequest, completions: &[String]) -> io::Result<()> {
        let digest = request_digest(request);
        let entry = CassetteEntry {
            key: format!("{}@{digest}", request.tag),
            tag: request.tag.clone(),
            request_digest: digest,
            completions: completions.to_vec(),
            recorded_at: chrono::Utc::now().to_rfc3339(),
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}
