use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use super::{file_name_for, relevant_syntax_errors, CompiledSim, Diagnostic, Severity, SimError, SimRun, SimStatus, Simulator, SourceKind, VerilogSource};

type SyntaxFn = dyn Fn(&VerilogSource) -> Vec<Diagnostic> + Send + Sync;
type RunFn = dyn Fn(&[VerilogSource]) -> SimRun + Send + Sync;

/// Simulator backed by closures; no toolchain involved.
pub struct ScriptedSimulator {
    syntax: Box<SyntaxFn>,
    run: Box<RunFn>,
    compiles: AtomicUsize,
    runs: AtomicUsize,
}

/// Source text containing this marker is reported as a syntax error on the
/// marker's line by [`ScriptedSimulator::with_marker_syntax`].
pub const SYNTAX_ERROR_MARKER: &str = "SYNTAX_ERROR";

impl ScriptedSimulator {
    pub fn new<S, R>(syntax: S, run: R) -> Self
    where
        S: Fn(&VerilogSource) -> Vec<Diagnostic> + Send + Sync + 'static,
        R: Fn(&[VerilogSource]) -> SimRun + Send + Sync + 'static,
    {
        ScriptedSimulator {
            syntax: Box::new(syntax),
            run: Box::new(run),
            compiles: AtomicUsize::new(0),
            runs: AtomicUsize::new(0),
        }
    }

    /// Syntax errors wherever [`SYNTAX_ERROR_MARKER`] appears; runs are
    /// answered by `run`.
    pub fn with_marker_syntax<R>(run: R) -> Self
    where
        R: Fn(&[VerilogSource]) -> SimRun + Send + Sync + 'static,
    {
        Self::new(marker_errors, run)
    }

    pub fn compile_count(&self) -> usize {
        self.compiles.load(Ordering::SeqCst)
    }

    pub fn run_count(&self) -> usize {
        self.runs.load(Ordering::SeqCst)
    }

    /// An `ok` run with the given stdout.
    pub fn ok_run(stdout: impl Into<String>) -> SimRun {
        SimRun {
            status: SimStatus::Ok,
            stdout: stdout.into(),
            diagnostics: Vec::new(),
            wall_time: Duration::ZERO,
        }
    }
}

pub fn marker_errors(src: &VerilogSource) -> Vec<Diagnostic> {
    let file = file_name_for(src.kind(), 0);
    src.code()
        .lines()
        .enumerate()
        .filter(|(_, l)| l.contains(SYNTAX_ERROR_MARKER))
        .map(|(i, _)| Diagnostic {
            file: file.clone(),
            line: Some(i as u32 + 1),
            message: "syntax error".into(),
            severity: Severity::Error,
        })
        .collect()
}

impl Simulator for ScriptedSimulator {
    fn compile(&self, sources: &[VerilogSource], workdir: &Path) -> Result<CompiledSim, SimError> {
        if sources.is_empty() {
            return Err(SimError::Precondition("no sources to compile".into()));
        }
        self.compiles.fetch_add(1, Ordering::SeqCst);
        let errors: Vec<Diagnostic> = sources.iter().flat_map(|s| (self.syntax)(s)).collect();
        if !errors.is_empty() {
            return Err(SimError::CompileFailed(errors));
        }
        Ok(CompiledSim {
            workdir: workdir.to_path_buf(),
            artifact: workdir.join("scripted"),
            sources: sources.to_vec(),
        })
    }

    fn simulate(&self, artifact: &CompiledSim, _timeout: Duration) -> Result<SimRun, SimError> {
        self.runs.fetch_add(1, Ordering::SeqCst);
        Ok((self.run)(&artifact.sources))
    }

    fn check_syntax(&self, source: &VerilogSource, workdir: &Path) -> Result<Vec<Diagnostic>, SimError> {
        match self.compile(std::slice::from_ref(source), workdir) {
            Ok(_) => Ok(Vec::new()),
            Err(SimError::CompileFailed(d)) => Ok(relevant_syntax_errors(source, d)),
            Err(e) => Err(e),
        }
    }
}

impl ScriptedSimulator {
    /// The DUT among `sources`, if any.
    pub fn dut(sources: &[VerilogSource]) -> Option<&VerilogSource> {
        sources.iter().find(|s| s.kind() == SourceKind::Dut)
    }
}
