//! Compile-and-simulate bridge to an external Verilog toolchain.
//!
//! [`IcarusSimulator`] drives `iverilog`/`vvp` in per-attempt working
//! directories. [`ReplaySimulator`] and [`RecordingSimulator`] store and
//! serve simulation results keyed by source digest so complete runs can be
//! repeated without a toolchain; [`ScriptedSimulator`] is closure-driven.

mod cassette;
mod diagnostics;
mod icarus;
mod scripted;
mod workdir;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{RecordingSimulator, ReplaySimulator, SimCassetteEntry, SimEntryKind};
pub use diagnostics::{is_unresolved_module, parse_diagnostics};
pub use icarus::{IcarusSimulator, ToolchainConfig};
pub use scripted::ScriptedSimulator;
pub use workdir::WorkdirAllocator;

pub const DEFAULT_SIM_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Dut,
    Testbench,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerilogSource {
    kind: SourceKind,
    top_module: String,
    code: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SourceError {
    #[error("source code is empty")]
    EmptyCode,
    #[error("{0:?} is not a valid Verilog identifier")]
    BadIdentifier(String),
}

impl VerilogSource {
    pub fn new(kind: SourceKind, top_module: impl Into<String>, code: impl Into<String>) -> Result<Self, SourceError> {
        let top_module = top_module.into();
        let code = code.into();
        if code.trim().is_empty() {
            return Err(SourceError::EmptyCode);
        }
        if !is_identifier(&top_module) {
            return Err(SourceError::BadIdentifier(top_module));
        }
        Ok(VerilogSource { kind, top_module, code })
    }

    /// Picks the top module from the code itself; see [`detect_top_module`].
    pub fn detect(kind: SourceKind, code: impl Into<String>, preferred: Option<&str>) -> Result<Self, SourceError> {
        let code = code.into();
        let top = detect_top_module(&code, preferred).ok_or(SourceError::BadIdentifier(String::new()))?;
        Self::new(kind, top, code)
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn top_module(&self) -> &str {
        &self.top_module
    }

    pub fn code(&self) -> &str {
        &self.code
    }

    /// Whitespace-insensitive form used to detect duplicate candidates.
    pub fn normalized_code(&self) -> String {
        self.code
            .lines()
            .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|l| !l.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '$')
}

/// Declared module names in order of appearance.
pub fn module_names(code: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?m)^\s*module\s+([A-Za-z_][A-Za-z0-9_$]*)").expect("static regex"));
    re.captures_iter(&strip_comments(code)).map(|c| c[1].to_string()).collect()
}

/// The preferred name when declared, otherwise the first declared module
/// that no other module in the file instantiates.
pub fn detect_top_module(code: &str, preferred: Option<&str>) -> Option<String> {
    let names = module_names(code);
    if let Some(p) = preferred {
        if names.iter().any(|n| n == p) {
            return Some(p.to_string());
        }
    }
    let stripped = strip_comments(code);
    names
        .iter()
        .find(|candidate| {
            let inst = regex::Regex::new(&format!(r"(?m)^\s*{}\s*(#\s*\(|[A-Za-z_])", regex::escape(candidate)))
                .expect("escaped regex");
            !inst.is_match(&stripped)
        })
        .or_else(|| names.first())
        .cloned()
}

fn strip_comments(code: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?s)/\*.*?\*/|//[^\n]*").expect("static regex"));
    re.replace_all(code, "").into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: String,
    /// `None` when the toolchain line carried no location.
    pub line: Option<u32>,
    pub message: String,
    pub severity: Severity,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.file.is_empty(), self.line) {
            (false, Some(l)) => write!(f, "{}:{}: {}", self.file, l, self.message),
            (false, None) => write!(f, "{}: {}", self.file, self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStatus {
    Ok,
    CompileFailed,
    RuntimeFailed,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub status: SimStatus,
    pub stdout: String,
    pub diagnostics: Vec<Diagnostic>,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
}

impl SimRun {
    pub fn compile_failed(diagnostics: Vec<Diagnostic>) -> SimRun {
        SimRun {
            status: SimStatus::CompileFailed,
            stdout: String::new(),
            diagnostics: ensure_error(diagnostics, "compilation failed"),
            wall_time: Duration::ZERO,
        }
    }
}

/// Guarantees at least one error-severity diagnostic.
pub(crate) fn ensure_error(mut diagnostics: Vec<Diagnostic>, fallback: &str) -> Vec<Diagnostic> {
    if !diagnostics.iter().any(|d| d.severity == Severity::Error) {
        diagnostics.push(Diagnostic {
            file: String::new(),
            line: None,
            message: fallback.to_string(),
            severity: Severity::Error,
        });
    }
    diagnostics
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(secs.max(0.0)))
    }
}

/// A compiled simulation ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledSim {
    pub workdir: PathBuf,
    pub artifact: PathBuf,
    pub sources: Vec<VerilogSource>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("toolchain binary not found: {0}")]
    ToolchainMissing(String),
    #[error("compilation failed with {} diagnostic(s)", .0.len())]
    CompileFailed(Vec<Diagnostic>),
    #[error("simulation failed: {0}")]
    RuntimeFailed(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no recorded simulation for key {0}")]
    ReplayMiss(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Compile + simulate interface used by the agents and the pipeline.
pub trait Simulator: Send + Sync {
    fn compile(&self, sources: &[VerilogSource], workdir: &Path) -> Result<CompiledSim, SimError>;

    fn simulate(&self, artifact: &CompiledSim, timeout: Duration) -> Result<SimRun, SimError>;

    /// Compile then simulate; a compile failure short-circuits.
    fn run_sim(&self, sources: &[VerilogSource], workdir: &Path, timeout: Duration) -> Result<SimRun, SimError> {
        let compiled = match self.compile(sources, workdir) {
            Ok(c) => c,
            Err(SimError::CompileFailed(diags)) => return Ok(SimRun::compile_failed(diags)),
            Err(e) => return Err(e),
        };
        match self.simulate(&compiled, timeout) {
            Err(SimError::RuntimeFailed(msg)) => Ok(SimRun {
                status: SimStatus::RuntimeFailed,
                stdout: String::new(),
                diagnostics: vec![Diagnostic {
                    file: String::new(),
                    line: None,
                    message: msg,
                    severity: Severity::Error,
                }],
                wall_time: Duration::ZERO,
            }),
            other => other,
        }
    }

    /// Error diagnostics for one source compiled on its own. Testbenches are
    /// checked before any DUT exists, so unresolved-module errors are
    /// dropped for them.
    fn check_syntax(&self, source: &VerilogSource, workdir: &Path) -> Result<Vec<Diagnostic>, SimError> {
        match self.compile(std::slice::from_ref(source), workdir) {
            Ok(_) => Ok(Vec::new()),
            Err(SimError::CompileFailed(diags)) => Ok(relevant_syntax_errors(source, diags)),
            Err(e) => Err(e),
        }
    }
}

pub(crate) fn relevant_syntax_errors(source: &VerilogSource, diags: Vec<Diagnostic>) -> Vec<Diagnostic> {
    diags
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .filter(|d| source.kind() == SourceKind::Dut || !is_unresolved_module(&d.message))
        .collect()
}

/// File name a source is written to inside an attempt directory.
pub fn file_name_for(kind: SourceKind, index_of_kind: usize) -> String {
    match (kind, index_of_kind) {
        (SourceKind::Dut, 0) => "dut.v".into(),
        (SourceKind::Testbench, 0) => "tb.v".into(),
        (SourceKind::Dut, i) => format!("dut_{i}.v"),
        (SourceKind::Testbench, i) => format!("tb_{i}.v"),
    }
}

/// SHA-256 over the kinds, top names and code of `sources`, in order.
pub fn sources_digest(sources: &[VerilogSource]) -> String {
    let bytes = serde_json::to_vec(sources).expect("sources serialise");
    hex::encode(Sha256::digest(&bytes))
}

/// The testbench top if one is present, else the first DUT top.
pub fn simulation_top(sources: &[VerilogSource]) -> Option<&str> {
    sources
        .iter()
        .find(|s| s.kind() == SourceKind::Testbench)
        .or_else(|| sources.first())
        .map(|s| s.top_module())
}
