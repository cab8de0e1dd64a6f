use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::debug;

use super::diagnostics::parse_diagnostics;
use super::{
    ensure_error, file_name_for, simulation_top, CompiledSim, Severity, SimError, SimRun, SimStatus, Simulator,
    SourceKind, VerilogSource,
};
use crate::sync::Semaphore;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolchainConfig {
    /// Compiler binary; `iverilog` on `PATH` when unset.
    #[serde(default)]
    pub compiler_path: Option<PathBuf>,
    /// Runtime binary; `vvp` on `PATH` when unset.
    #[serde(default)]
    pub vvp_path: Option<PathBuf>,
    /// Concurrent simulator processes; CPU count when unset.
    #[serde(default)]
    pub max_processes: Option<usize>,
}

pub struct IcarusSimulator {
    compiler: PathBuf,
    runtime: PathBuf,
    processes: Semaphore,
}

const ARTIFACT: &str = "sim.vvp";

impl IcarusSimulator {
    pub fn new(config: &ToolchainConfig) -> Result<Self, SimError> {
        let compiler = resolve(config.compiler_path.as_deref(), "iverilog")?;
        let runtime = resolve(config.vvp_path.as_deref(), "vvp")?;
        let cap = config
            .max_processes
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(4, |n| n.get()));
        Ok(IcarusSimulator {
            compiler,
            runtime,
            processes: Semaphore::new(cap),
        })
    }

    /// Whether both binaries can be found with the default lookup.
    pub fn available() -> bool {
        Self::new(&ToolchainConfig::default()).is_ok()
    }
}

fn resolve(configured: Option<&Path>, default_name: &str) -> Result<PathBuf, SimError> {
    match configured {
        Some(p) if p.components().count() > 1 => {
            if p.is_file() {
                Ok(p.to_path_buf())
            } else {
                Err(SimError::ToolchainMissing(p.display().to_string()))
            }
        }
        Some(p) => find_in_path(p.as_os_str().to_str().unwrap_or(default_name)),
        None => find_in_path(default_name),
    }
}

fn find_in_path(name: &str) -> Result<PathBuf, SimError> {
    std::env::var_os("PATH")
        .and_then(|paths| {
            std::env::split_paths(&paths)
                .map(|dir| dir.join(name))
                .find(|candidate| candidate.is_file())
        })
        .ok_or_else(|| SimError::ToolchainMissing(name.to_string()))
}

impl Simulator for IcarusSimulator {
    fn compile(&self, sources: &[VerilogSource], workdir: &Path) -> Result<CompiledSim, SimError> {
        if sources.is_empty() {
            return Err(SimError::Precondition("no sources to compile".into()));
        }
        std::fs::create_dir_all(workdir)?;
        if std::fs::read_dir(workdir)?.next().is_some() {
            return Err(SimError::Precondition(format!("workdir {} is not empty", workdir.display())));
        }
        let mut files = Vec::with_capacity(sources.len());
        let (mut duts, mut tbs) = (0, 0);
        for src in sources {
            let counter = match src.kind() {
                SourceKind::Dut => &mut duts,
                SourceKind::Testbench => &mut tbs,
            };
            let name = file_name_for(src.kind(), *counter);
            *counter += 1;
            std::fs::write(workdir.join(&name), src.code())?;
            files.push(name);
        }
        let top = simulation_top(sources).expect("sources is non-empty");
        let output = {
            let _permit = self.processes.acquire();
            Command::new(&self.compiler)
                .current_dir(workdir)
                .args(["-g2012", "-o", ARTIFACT, "-s", top])
                .args(&files)
                .output()
                .map_err(|e| SimError::ToolchainMissing(format!("{}: {e}", self.compiler.display())))?
        };
        let text = format!(
            "{}{}",
            String::from_utf8_lossy(&output.stderr),
            String::from_utf8_lossy(&output.stdout)
        );
        let artifact = workdir.join(ARTIFACT);
        if !output.status.success() || !artifact.exists() {
            let diags = parse_diagnostics(&text, Severity::Error);
            let diags = ensure_error(diags, &format!("compiler exited with {}", output.status));
            debug!(workdir = %workdir.display(), n = diags.len(), "compile failed");
            return Err(SimError::CompileFailed(diags));
        }
        Ok(CompiledSim {
            workdir: workdir.to_path_buf(),
            artifact,
            sources: sources.to_vec(),
        })
    }

    fn simulate(&self, artifact: &CompiledSim, timeout: Duration) -> Result<SimRun, SimError> {
        if !artifact.artifact.is_file() {
            return Err(SimError::RuntimeFailed(format!(
                "artifact {} does not exist",
                artifact.artifact.display()
            )));
        }
        let _permit = self.processes.acquire();
        let started = Instant::now();
        let mut cmd = Command::new(&self.runtime);
        cmd.current_dir(&artifact.workdir)
            .arg("-n")
            .arg(&artifact.artifact)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| SimError::ToolchainMissing(format!("{}: {e}", self.runtime.display())))?;
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());

        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break Some(status);
            }
            if started.elapsed() >= timeout {
                timed_out = true;
                kill_tree(&mut child);
                let _ = child.wait();
                break None;
            }
            std::thread::sleep(Duration::from_millis(10));
        };
        let wall_time = started.elapsed();
        let stdout = stdout.join().unwrap_or_default();
        let stderr = stderr.join().unwrap_or_default();

        if timed_out {
            return Ok(SimRun {
                status: SimStatus::TimedOut,
                stdout,
                diagnostics: parse_diagnostics(&stderr, Severity::Warning),
                wall_time,
            });
        }
        let status = status.expect("not timed out");
        let reported = stdout.lines().any(|l| l.trim_start().starts_with("SUMMARY "));
        if !status.success() && !reported {
            return Err(SimError::RuntimeFailed(format!(
                "simulator exited with {status}: {}",
                stderr.trim()
            )));
        }
        Ok(SimRun {
            status: SimStatus::Ok,
            stdout,
            diagnostics: parse_diagnostics(&stderr, Severity::Warning),
            wall_time,
        })
    }
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

fn kill_tree(child: &mut std::process::Child) {
    #[cfg(unix)]
    {
        // the child leads its own process group
        let pgid = child.id() as i32;
        // SAFETY: plain syscall on a pid we spawned
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
}
