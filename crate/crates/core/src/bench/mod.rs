//! Benchmark harness: problem loading, golden-testbench verification,
//! pass@k and report files.

mod problem;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use problem::{load_problems, DatasetFormat, LoadError, Problem};

use crate::orchestrator::{run_pipeline, Engine, RunConfig, RunPaths, RunStatus};
use crate::sim_bridge::{module_names, SimError, SimStatus, Simulator, SourceKind, VerilogSource, WorkdirAllocator};
use crate::sync::parallel_map;

/// Banner printed by VerilogEval testbenches.
pub const DEFAULT_MISMATCH_BANNER: &str = r"Mismatches:\s*(\d+)\s+in\s+(\d+)\s+samples";

/// How a golden testbench reports its result: a regex whose first capture
/// is the mismatch count and optional second capture the sample count.
#[derive(Debug, Clone)]
pub struct GoldenCriterion {
    banner: Regex,
}

impl GoldenCriterion {
    pub fn new(pattern: &str) -> Result<Self, regex::Error> {
        let banner = Regex::new(pattern)?;
        if banner.captures_len() < 2 {
            return Err(regex::Error::Syntax("banner pattern needs a mismatch-count group".into()));
        }
        Ok(GoldenCriterion { banner })
    }

    fn read(&self, stdout: &str) -> Option<(u64, Option<u64>)> {
        let caps = self.banner.captures_iter(stdout).last()?;
        let m = caps.get(1)?.as_str().parse().ok()?;
        let n = caps.get(2).and_then(|s| s.as_str().parse().ok());
        Some((m, n))
    }
}

impl Default for GoldenCriterion {
    fn default() -> Self {
        GoldenCriterion::new(DEFAULT_MISMATCH_BANNER).expect("static regex")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldenFailure {
    Compile,
    Timeout,
    Runtime,
    Mismatch,
    /// The run finished without printing the banner.
    NoBanner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenResult {
    pub passed: bool,
    pub mismatches: Option<u64>,
    pub samples: Option<u64>,
    pub failure: Option<GoldenFailure>,
    pub detail: String,
}

/// Compiles `rtl` with the unmodified golden testbench and applies the
/// testbench's own pass criterion. `reference` is compiled alongside when
/// the testbench instantiates a reference module it does not define.
pub fn evaluate_golden(
    sim: &dyn Simulator,
    rtl: &VerilogSource,
    golden_tb: &str,
    reference: Option<&str>,
    criterion: &GoldenCriterion,
    workdir: &Path,
    timeout: Duration,
) -> Result<GoldenResult, SimError> {
    if golden_tb.trim().is_empty() {
        return Err(SimError::Precondition("golden testbench is empty".into()));
    }
    let tb = VerilogSource::detect(SourceKind::Testbench, golden_tb, Some("tb"))
        .map_err(|e| SimError::Precondition(format!("golden testbench: {e}")))?;
    let mut sources = vec![rtl.clone(), tb];
    if let Some(reference) = reference.filter(|r| !r.trim().is_empty()) {
        let defined: Vec<String> = module_names(rtl.code())
            .into_iter()
            .chain(module_names(golden_tb))
            .collect();
        if module_names(reference).iter().any(|m| !defined.contains(m)) {
            let r = VerilogSource::detect(SourceKind::Dut, reference, None)
                .map_err(|e| SimError::Precondition(format!("reference: {e}")))?;
            sources.push(r);
        }
    }
    let run = sim.run_sim(&sources, workdir, timeout)?;
    let detail = run
        .diagnostics
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("\n");
    let fail = |failure, detail: String| GoldenResult {
        passed: false,
        mismatches: None,
        samples: None,
        failure: Some(failure),
        detail,
    };
    Ok(match run.status {
        SimStatus::CompileFailed => fail(GoldenFailure::Compile, detail),
        SimStatus::TimedOut => fail(GoldenFailure::Timeout, detail),
        SimStatus::RuntimeFailed => fail(GoldenFailure::Runtime, detail),
        SimStatus::Ok => match criterion.read(&run.stdout) {
            None => fail(GoldenFailure::NoBanner, String::new()),
            Some((m, n)) => GoldenResult {
                passed: m == 0,
                mismatches: Some(m),
                samples: n,
                failure: (m > 0).then_some(GoldenFailure::Mismatch),
                detail: String::new(),
            },
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("pass@k needs 0 <= c_p <= n and 1 <= k <= n, got n={n}, c_p={c_p}, k={k}")]
pub struct DomainError {
    pub n: u64,
    pub c_p: u64,
    pub k: u64,
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// `1 - C(n - c_p, k) / C(n, k)` as an exact fraction.
pub fn pass_at_k_exact(n: u64, c_p: u64, k: u64) -> Result<BigRational, DomainError> {
    if c_p > n || k == 0 || k > n {
        return Err(DomainError { n, c_p, k });
    }
    if n - c_p < k {
        return Ok(BigRational::one());
    }
    let fail = BigRational::new(binomial(n - c_p, k).into(), binomial(n, k).into());
    Ok(BigRational::one() - fail)
}

pub fn pass_at_k(n: u64, c_p: u64, k: u64) -> Result<f64, DomainError> {
    let exact = pass_at_k_exact(n, c_p, k)?;
    Ok(exact.to_f64().expect("value lies in [0, 1]"))
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?.max(0.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub task_id: String,
    pub run_index: u32,
    pub passed_golden: bool,
    /// Best selected score after each round.
    pub engine_score_history: Vec<f64>,
    pub llm_calls: u64,
    #[serde(rename = "wall_time_secs", with = "duration_secs")]
    pub wall_time: Duration,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden: Option<GoldenResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub task_id: String,
    pub n: u64,
    pub c_p: u64,
    pub pass_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub problems: Vec<ProblemSummary>,
    /// Mean of the per-problem pass@1 values.
    pub aggregate_pass_at_1: f64,
    pub config: serde_json::Value,
    pub records: Vec<TrialRecord>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no trial records")]
    Empty,
    #[error("task {task_id}: run_index {run_index} outside [0, {n})")]
    RunIndex { task_id: String, run_index: u32, n: u64 },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SCORES_CSV: &str = "scores_by_round.csv";

impl BenchReport {
    /// Groups records by task in first-seen order.
    pub fn from_records(records: Vec<TrialRecord>, config: serde_json::Value) -> Result<Self, ReportError> {
        if records.is_empty() {
            return Err(ReportError::Empty);
        }
        let mut order: Vec<&str> = Vec::new();
        for r in &records {
            if !order.contains(&r.task_id.as_str()) {
                order.push(&r.task_id);
            }
        }
        let mut problems = Vec::with_capacity(order.len());
        for task in order {
            let runs: Vec<&TrialRecord> = records.iter().filter(|r| r.task_id == task).collect();
            let n = runs.len() as u64;
            if let Some(bad) = runs.iter().find(|r| r.run_index as u64 >= n) {
                return Err(ReportError::RunIndex {
                    task_id: task.to_string(),
                    run_index: bad.run_index,
                    n,
                });
            }
            let c_p = runs.iter().filter(|r| r.passed_golden).count() as u64;
            problems.push(ProblemSummary {
                task_id: task.to_string(),
                n,
                c_p,
                pass_at_1: pass_at_k(n, c_p, 1)?,
            });
        }
        let aggregate_pass_at_1 = problems.iter().map(|p| p.pass_at_1).sum::<f64>() / problems.len() as f64;
        Ok(BenchReport {
            problems,
            aggregate_pass_at_1,
            config,
            records,
        })
    }

    pub fn load(dir: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(dir.join(REPORT_JSON))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `report.json`, `report.csv` and `scores_by_round.csv` into `dir`.
pub fn emit_report(records: Vec<TrialRecord>, config: serde_json::Value, dir: &Path) -> Result<BenchReport, ReportError> {
    let report = BenchReport::from_records(records, config)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(&report)?)?;

    let mut w = csv::Writer::from_path(dir.join(REPORT_CSV))?;
    for p in &report.problems {
        w.serialize(p)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(SCORES_CSV))?;
    w.write_record(["task_id", "run_index", "round", "score"])?;
    for r in &report.records {
        for (round, s) in r.engine_score_history.iter().enumerate() {
            w.write_record([r.task_id.clone(), r.run_index.to_string(), round.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Independent runs per problem.
    pub runs: u32,
    /// Concurrent pipelines.
    pub workers: usize,
    pub run: RunConfig,
    pub out_dir: PathBuf,
    pub criterion: GoldenCriterion,
    /// Extra settings echoed into the report.
    pub settings: serde_json::Value,
}

/// Runs `config.runs` independent pipelines per problem, checks each result
/// against the golden testbench and writes the report into `out_dir`.
pub fn run_bench(engine: &Engine<'_>, problems: &[Problem], config: &BenchConfig) -> Result<BenchReport, ReportError> {
    let jobs: Vec<(&Problem, u32)> = problems
        .iter()
        .flat_map(|p| (0..config.runs).map(move |k| (p, k)))
        .collect();
    let golden_dirs = WorkdirAllocator::new(config.out_dir.join("work").join("golden")).with_scrub(engine.scrub);
    let records = parallel_map(jobs.len(), config.workers, |i| {
        let (problem, k) = jobs[i];
        run_one(engine, problem, k, config, &golden_dirs)
    });
    let echo = serde_json::json!({
        "runs": config.runs,
        "workers": config.workers,
        "model_id": engine.model_id,
        "run": config.run,
        "sampling": config.run.sampling(),
        "settings": config.settings,
    });
    emit_report(records, echo, &config.out_dir)
}

fn run_one(
    engine: &Engine<'_>,
    problem: &Problem,
    k: u32,
    config: &BenchConfig,
    golden_dirs: &WorkdirAllocator,
) -> TrialRecord {
    let started = Instant::now();
    let paths = RunPaths {
        transcript_dir: config.out_dir.join("runs").join(&problem.task_id).join(format!("run{k}")),
        work_root: config.out_dir.join("work"),
        tag_prefix: format!("{}/run{k}/", problem.task_id),
        label: format!("{}_run{k}", problem.task_id),
    };
    let outcome = run_pipeline(engine, problem, &config.run, &paths);
    let mut error = outcome.error.clone();
    let golden = match (&outcome.best, &problem.golden_testbench) {
        (Some(best), Some(tb)) => {
            let dir = golden_dirs.next(&problem.task_id, &format!("run{k}"));
            match evaluate_golden(
                engine.simulator,
                &best.source,
                tb,
                problem.reference_solution.as_deref(),
                &config.criterion,
                &dir,
                config.run.sim_timeout(),
            ) {
                Ok(g) => {
                    golden_dirs.finish(&dir, g.passed);
                    Some(g)
                }
                Err(e) => {
                    error.get_or_insert_with(|| format!("golden check: {e}"));
                    None
                }
            }
        }
        _ => None,
    };
    let passed_golden = match (&golden, &problem.golden_testbench) {
        (Some(g), _) => g.passed,
        (None, Some(_)) => false,
        (None, None) => outcome.status == RunStatus::Solved,
    };
    TrialRecord {
        task_id: problem.task_id.clone(),
        run_index: k,
        passed_golden,
        engine_score_history: outcome.engine_score_history(),
        llm_calls: outcome.llm_calls,
        wall_time: started.elapsed(),
        status: outcome.status,
        golden,
        error,
    }
}
