use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use rtlforge_core::agents::PromptTemplates;
use rtlforge_core::bench::{
    evaluate_golden, load_problems, run_bench, BenchConfig, GoldenCriterion, Problem,
};
use rtlforge_core::checkpoint::{earliest_mismatch, extract_window, parse_trace, render_window, score};
use rtlforge_core::llm_gateway::{Backend, Cassette, CassetteWriter, Gateway, HttpConfig, HttpTransport};
use rtlforge_core::orchestrator::{run_pipeline, Engine, RunPaths, RunStatus};
use rtlforge_core::sim_bridge::{
    IcarusSimulator, RecordingSimulator, ReplaySimulator, SimCassetteEntry, Simulator, WorkdirAllocator,
};

use crate::config::{BackendKind, CliConfig, SimBackendKind};

static CANCEL: AtomicBool = AtomicBool::new(false);

/// First Ctrl-C lets running steps finish and flushes partial results; a
/// second one exits immediately.
pub fn install_interrupt_handler() {
    let _ = ctrlc::set_handler(|| {
        if CANCEL.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupted; finishing current steps (press Ctrl-C again to abort)");
    });
}

struct Services {
    gateway: Gateway,
    sim: Box<dyn Simulator>,
    templates: PromptTemplates,
}

fn need<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| anyhow!("{what} is required for this backend"))
}

fn services(cfg: &CliConfig) -> Result<Services> {
    let http = || -> Result<Arc<HttpTransport>> {
        let t = HttpTransport::new(&HttpConfig {
            endpoint: cfg.endpoint.clone(),
            auth_env: cfg.auth_env.clone(),
            timeout_secs: 300,
        })?;
        Ok(Arc::new(t))
    };
    let backend = match cfg.backend {
        BackendKind::Live => Backend::Live(http()?),
        BackendKind::Record => {
            let path = need(&cfg.cassette, "--cassette")?;
            Backend::Record {
                transport: http()?,
                writer: CassetteWriter::create(path).with_context(|| format!("cannot open {}", path.display()))?,
            }
        }
        BackendKind::Replay => {
            let path = need(&cfg.cassette, "--cassette")?;
            Backend::Replay(Cassette::load(path).with_context(|| format!("cannot load {}", path.display()))?)
        }
    };
    let gateway = Gateway::new(backend).with_max_concurrency(cfg.max_parallel);

    let sim_kind = match (cfg.sim_backend, cfg.backend, &cfg.sim_cassette) {
        (SimBackendKind::Auto, BackendKind::Replay, Some(_)) => SimBackendKind::Replay,
        (SimBackendKind::Auto, BackendKind::Record, Some(_)) => SimBackendKind::Record,
        (SimBackendKind::Auto, _, _) => SimBackendKind::Icarus,
        (k, _, _) => k,
    };
    let sim: Box<dyn Simulator> = match sim_kind {
        SimBackendKind::Replay => {
            let path = need(&cfg.sim_cassette, "--sim-cassette")?;
            Box::new(ReplaySimulator::load(path).with_context(|| format!("cannot load {}", path.display()))?)
        }
        SimBackendKind::Record => {
            let path = need(&cfg.sim_cassette, "--sim-cassette")?;
            let inner = IcarusSimulator::new(&cfg.toolchain)?;
            Box::new(RecordingSimulator::create(inner, path).with_context(|| format!("cannot open {}", path.display()))?)
        }
        _ => Box::new(IcarusSimulator::new(&cfg.toolchain)?),
    };

    let templates = match &cfg.prompts_dir {
        Some(dir) => PromptTemplates::with_overrides(dir)?,
        None => PromptTemplates::builtin(),
    };
    Ok(Services { gateway, sim, templates })
}

fn engine<'a>(svc: &'a Services, cfg: &CliConfig) -> Engine<'a> {
    Engine {
        model_id: cfg.model.clone(),
        fanout: cfg.fanout,
        max_parallel: cfg.max_parallel,
        scrub: cfg.scrub_workdirs,
        cancel: Some(&CANCEL),
        ..Engine::new(&svc.gateway, svc.sim.as_ref(), &svc.templates)
    }
}

fn criterion(cfg: &CliConfig) -> Result<GoldenCriterion> {
    match &cfg.golden_banner {
        Some(p) => GoldenCriterion::new(p).with_context(|| format!("bad golden banner pattern {p:?}")),
        None => Ok(GoldenCriterion::default()),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display()))
}

pub struct GenerateInput {
    pub spec: PathBuf,
    pub interface: Option<PathBuf>,
    pub golden_tb: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub task_id: Option<String>,
}

pub fn generate(cfg: &CliConfig, input: &GenerateInput) -> Result<u8> {
    let spec = read_text(&input.spec, "spec file")?;
    if spec.trim().is_empty() {
        bail!("spec file {} is empty", input.spec.display());
    }
    let opt = |p: &Option<PathBuf>, what: &str| p.as_deref().map(|p| read_text(p, what)).transpose();
    let task_id = input.task_id.clone().unwrap_or_else(|| {
        input
            .spec
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("task")
            .to_string()
    });
    let problem = Problem {
        golden_testbench: opt(&input.golden_tb, "golden testbench")?,
        reference_solution: opt(&input.reference, "reference")?,
        module_interface: opt(&input.interface, "interface")?,
        ..Problem::new(task_id.clone(), spec)
    };
    let out = cfg.out.clone().ok_or_else(|| anyhow!("--out is required"))?;
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;

    let svc = services(cfg)?;
    let eng = engine(&svc, cfg);
    let outcome = run_pipeline(&eng, &problem, &cfg.run, &RunPaths::under(&out, &task_id));

    let solved = matches!(outcome.status, RunStatus::Solved | RunStatus::Generated);
    let mut written = None;
    if let Some(best) = &outcome.best {
        let name = if solved { "final.v" } else { "best_effort.v" };
        std::fs::write(out.join(name), best.source.code())?;
        written = Some(out.join(name));
    }
    let golden = match (&outcome.best, &problem.golden_testbench) {
        (Some(best), Some(tb)) => {
            let dirs = WorkdirAllocator::new(out.join("work")).with_scrub(cfg.scrub_workdirs);
            let dir = dirs.next(&task_id, "golden");
            Some(evaluate_golden(
                svc.sim.as_ref(),
                &best.source,
                tb,
                problem.reference_solution.as_deref(),
                &criterion(cfg)?,
                &dir,
                cfg.run.sim_timeout(),
            )?)
        }
        _ => None,
    };
    let summary = json!({
        "task_id": task_id,
        "status": outcome.status,
        "best_id": outcome.best.as_ref().map(|b| b.id),
        "best_score": outcome.best.as_ref().map(|b| b.score.value()),
        "initial_score": outcome.initial_score,
        "score_history": outcome.score_history,
        "rounds": outcome.rounds,
        "tb_regens": outcome.tb_regens,
        "llm_calls": outcome.llm_calls,
        "golden": golden,
        "error": outcome.error,
        "config": cfg,
        "sampling": cfg.run.sampling(),
    });
    std::fs::write(out.join("outcome.json"), serde_json::to_string_pretty(&summary)?)?;

    println!(
        "status: {}  best score: {}  rounds: {}  llm calls: {}",
        serde_json::to_value(outcome.status)?.as_str().unwrap_or("?"),
        outcome
            .best
            .as_ref()
            .map_or("-".to_string(), |b| format!("{:.4}", b.score.value())),
        outcome.rounds,
        outcome.llm_calls
    );
    if let Some(g) = &golden {
        println!("golden testbench: {}", if g.passed { "pass" } else { "fail" });
    }
    if let Some(p) = written {
        println!("wrote {}", p.display());
    }
    match outcome.status {
        RunStatus::Solved | RunStatus::Generated => Ok(0),
        RunStatus::BudgetExhausted | RunStatus::TbRegenExhausted => Ok(2),
        RunStatus::Error => {
            eprintln!("error: {}", outcome.error.unwrap_or_default());
            Ok(1)
        }
    }
}

pub fn bench(cfg: &CliConfig) -> Result<u8> {
    let dataset = cfg.dataset.as_deref().ok_or_else(|| anyhow!("--dataset is required"))?;
    let problems = load_problems(dataset, cfg.dataset_format)?;
    if problems.is_empty() {
        bail!("{} holds no problems", dataset.display());
    }
    let out = cfg.out.clone().ok_or_else(|| anyhow!("--out is required"))?;
    let svc = services(cfg)?;
    let eng = engine(&svc, cfg);
    let bench_cfg = BenchConfig {
        runs: cfg.runs.max(1),
        workers: cfg.workers.max(1),
        run: cfg.run.clone(),
        out_dir: out.clone(),
        criterion: criterion(cfg)?,
        settings: json!({
            "backend": cfg.backend,
            "sim_backend": cfg.sim_backend,
            "endpoint": cfg.endpoint,
            "auth_env": cfg.auth_env,
            "fanout": cfg.fanout,
            "max_parallel": cfg.max_parallel,
            "dataset_format": cfg.dataset_format,
        }),
    };
    let report = run_bench(&eng, &problems, &bench_cfg)?;
    for p in &report.problems {
        println!("{:<32} n={:<3} c_p={:<3} pass@1={:.4}", p.task_id, p.n, p.c_p, p.pass_at_1);
    }
    println!("aggregate pass@1: {:.4}", report.aggregate_pass_at_1);
    println!("reports written to {}", out.display());
    let interrupted = CANCEL.load(Ordering::SeqCst)
        || report
            .records
            .iter()
            .any(|r| r.error.as_deref() == Some("interrupted"));
    Ok(if interrupted { 1 } else { 0 })
}

pub fn inspect_trace(file: &Path, window_len: u64) -> Result<u8> {
    let stdout = read_text(file, "simulator output")?;
    let trace = parse_trace(&stdout).with_context(|| format!("{}", file.display()))?;
    let s = score(&trace)?;
    println!(
        "checks: {}  mismatches: {}  score: {:.6}",
        trace.total_checks(),
        trace.mismatches(),
        s.value()
    );
    match earliest_mismatch(&trace) {
        None => println!("no mismatches"),
        Some(t_m) => {
            let window = extract_window(&trace, t_m, window_len)?;
            print!("{}", render_window(&window));
        }
    }
    Ok(0)
}

pub fn replay_verify(path: &Path, sim: bool) -> Result<u8> {
    let (entries, problems) = if sim {
        verify_sim_cassette(path)?
    } else {
        let r = Cassette::verify(path).with_context(|| format!("cannot read {}", path.display()))?;
        (r.entries, r.problems)
    };
    for p in &problems {
        println!("{p}");
    }
    println!(
        "{}: {entries} entries, {}",
        path.display(),
        if problems.is_empty() {
            "ok".to_string()
        } else {
            format!("{} problem(s)", problems.len())
        }
    );
    Ok(if problems.is_empty() { 0 } else { 1 })
}

fn verify_sim_cassette(path: &Path) -> Result<(usize, Vec<String>)> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut problems = Vec::new();
    let mut entries = 0;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries += 1;
        match serde_json::from_str::<SimCassetteEntry>(&line) {
            Err(e) => problems.push(format!("line {}: unparseable entry: {e}", i + 1)),
            Ok(e) => {
                let prefix = match e.kind {
                    rtlforge_core::sim_bridge::SimEntryKind::Run => "run:",
                    rtlforge_core::sim_bridge::SimEntryKind::Syntax => "syntax:",
                };
                if !e.key.starts_with(prefix) {
                    problems.push(format!("line {}: key does not match entry kind", i + 1));
                }
                if let Some(first) = seen.get(&e.key) {
                    problems.push(format!("line {}: duplicate key first seen on line {first}", i + 1));
                } else {
                    seen.insert(e.key, i + 1);
                }
            }
        }
    }
    Ok((entries, problems))
}
