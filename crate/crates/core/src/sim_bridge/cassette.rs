//! Recorded simulator results, keyed by source digest.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    relevant_syntax_errors, sources_digest, CompiledSim, Diagnostic, SimError, SimRun, SimStatus, Simulator,
    VerilogSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEntryKind {
    Syntax,
    Run,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCassetteEntry {
    pub key: String,
    pub kind: SimEntryKind,
    pub run: SimRun,
}

impl SimCassetteEntry {
    pub fn key_for(kind: SimEntryKind, sources: &[VerilogSource]) -> String {
        let prefix = match kind {
            SimEntryKind::Syntax => "syntax",
            SimEntryKind::Run => "run",
        };
        format!("{prefix}:{}", sources_digest(sources))
    }

    pub fn run(sources: &[VerilogSource], run: SimRun) -> Self {
        SimCassetteEntry {
            key: Self::key_for(SimEntryKind::Run, sources),
            kind: SimEntryKind::Run,
            run,
        }
    }

    /// Syntax entry; `errors` empty means the source is clean.
    pub fn syntax(source: &VerilogSource, errors: Vec<Diagnostic>) -> Self {
        let status = if errors.is_empty() {
            SimStatus::Ok
        } else {
            SimStatus::CompileFailed
        };
        SimCassetteEntry {
            key: Self::key_for(SimEntryKind::Syntax, std::slice::from_ref(source)),
            kind: SimEntryKind::Syntax,
            run: SimRun {
                status,
                stdout: String::new(),
                diagnostics: errors,
                wall_time: Duration::ZERO,
            },
        }
    }
}

/// Serves recorded results; never touches a toolchain.
#[derive(Debug, Default)]
pub struct ReplaySimulator {
    entries: HashMap<String, SimRun>,
}

impl ReplaySimulator {
    pub fn load(path: &Path) -> io::Result<Self> {
        let file = File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: SimCassetteEntry = serde_json::from_str(&line).map_err(|err| {
                io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {err}", path.display(), i + 1))
            })?;
            entries.push(e);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn from_entries(list: impl IntoIterator<Item = SimCassetteEntry>) -> Self {
        let mut entries = HashMap::new();
        for e in list {
            entries.entry(e.key).or_insert(e.run);
        }
        ReplaySimulator { entries }
    }

    fn get(&self, kind: SimEntryKind, sources: &[VerilogSource]) -> Result<&SimRun, SimError> {
        let key = SimCassetteEntry::key_for(kind, sources);
        self.entries.get(&key).ok_or(SimError::ReplayMiss(key))
    }
}

impl Simulator for ReplaySimulator {
    fn compile(&self, sources: &[VerilogSource], workdir: &Path) -> Result<CompiledSim, SimError> {
        if sources.is_empty() {
            return Err(SimError::Precondition("no sources to compile".into()));
        }
        let run = self.get(SimEntryKind::Run, sources)?;
        if run.status == SimStatus::CompileFailed {
            return Err(SimError::CompileFailed(run.diagnostics.clone()));
        }
        Ok(CompiledSim {
            workdir: workdir.to_path_buf(),
            artifact: workdir.join("replay"),
            sources: sources.to_vec(),
        })
    }

    fn simulate(&self, artifact: &CompiledSim, _timeout: Duration) -> Result<SimRun, SimError> {
        let run = self.get(SimEntryKind::Run, &artifact.sources)?;
        match run.status {
            SimStatus::RuntimeFailed => Err(SimError::RuntimeFailed(
                run.diagnostics
                    .first()
                    .map_or_else(|| "recorded runtime failure".to_string(), |d| d.message.clone()),
            )),
            _ => Ok(run.clone()),
        }
    }

    fn run_sim(&self, sources: &[VerilogSource], _workdir: &Path, _timeout: Duration) -> Result<SimRun, SimError> {
        if sources.is_empty() {
            return Err(SimError::Precondition("no sources to compile".into()));
        }
        self.get(SimEntryKind::Run, sources).cloned()
    }

    fn check_syntax(&self, source: &VerilogSource, _workdir: &Path) -> Result<Vec<Diagnostic>, SimError> {
        let run = self.get(SimEntryKind::Syntax, std::slice::from_ref(source))?;
        Ok(relevant_syntax_errors(source, run.diagnostics.clone()))
    }
}

/// Wraps a simulator and appends every `run_sim`/`check_syntax` result to a
/// cassette file.
pub struct RecordingSimulator<S> {
    inner: S,
    file: Mutex<File>,
}

impl<S: Simulator> RecordingSimulator<S> {
    pub fn create(inner: S, path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RecordingSimulator {
            inner,
            file: Mutex::new(file),
        })
    }

    fn append(&self, entry: &SimCassetteEntry) -> Result<(), SimError> {
        let mut line = serde_json::to_string(entry).map_err(io::Error::from)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

impl<S: Simulator> Simulator for RecordingSimulator<S> {
    fn compile(&self, sources: &[VerilogSource], workdir: &Path) -> Result<CompiledSim, SimError> {
        self.inner.compile(sources, workdir)
    }

    fn simulate(&self, artifact: &CompiledSim, timeout: Duration) -> Result<SimRun, SimError> {
        self.inner.simulate(artifact, timeout)
    }

    fn run_sim(&self, sources: &[VerilogSource], workdir: &Path, timeout: Duration) -> Result<SimRun, SimError> {
        let run = self.inner.run_sim(sources, workdir, timeout)?;
        self.append(&SimCassetteEntry::run(sources, run.clone()))?;
        Ok(run)
    }

    fn check_syntax(&self, source: &VerilogSource, workdir: &Path) -> Result<Vec<Diagnostic>, SimError> {
        let errors = self.inner.check_syntax(source, workdir)?;
        self.append(&SimCassetteEntry::syntax(source, errors.clone()))?;
        Ok(errors)
    }
}
