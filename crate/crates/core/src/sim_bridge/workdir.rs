use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// Hands out `<root>/<problem>/<candidate>/attempt_<k>/` directories.
#[derive(Debug)]
pub struct WorkdirAllocator {
    root: PathBuf,
    scrub: bool,
    counters: Mutex<HashMap<(String, String), u32>>,
}

impl WorkdirAllocator {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        WorkdirAllocator {
            root: root.into(),
            scrub: false,
            counters: Mutex::new(HashMap::new()),
        }
    }

    /// Remove attempt directories whose simulation succeeded.
    pub fn with_scrub(mut self, scrub: bool) -> Self {
        self.scrub = scrub;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Next unused attempt directory for the pair. The directory itself is
    /// not created, but existing ones are skipped.
    pub fn next(&self, problem_id: &str, candidate_id: &str) -> PathBuf {
        let mut counters = self.counters.lock().unwrap_or_else(|e| e.into_inner());
        let k = counters
            .entry((problem_id.to_string(), candidate_id.to_string()))
            .or_insert(0);
        loop {
            let dir = self
                .root
                .join(problem_id)
                .join(candidate_id)
                .join(format!("attempt_{k}"));
            *k += 1;
            if !dir.exists() {
                return dir;
            }
        }
    }

    /// Called once a simulation in `dir` finished.
    pub fn finish(&self, dir: &Path, succeeded: bool) {
        if self.scrub && succeeded {
            let _ = std::fs::remove_dir_all(dir);
        }
    }
}
