#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use rtlforge_core::agents::PromptTemplates;
use rtlforge_core::bench::{run_bench, BenchConfig, BenchReport, GoldenCriterion, Problem};
use rtlforge_core::llm_gateway::{Backend, CassetteWriter, Gateway, LlmRequest, ScriptedTransport};
use rtlforge_core::orchestrator::{run_pipeline, Engine, RunConfig, RunOutcome, RunPaths};
use rtlforge_core::sim_bridge::{RecordingSimulator, Simulator};
use rtlforge_core::testkit::{fenced, plain_testbench, scored_design};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn read(name: &str, file: &str) -> String {
    let path = fixture_dir().join(name).join(file);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn fixture_problem(name: &str) -> Problem {
    Problem {
        golden_testbench: Some(read(name, "golden_tb.v")),
        reference_solution: Some(read(name, "ref.v")),
        module_interface: Some(read(name, "interface.v")),
        ..Problem::new(name, read(name, "spec.txt").trim())
    }
}

pub fn design(m: u64, tc: u64, v: u64) -> String {
    fenced(&scored_design("top_module", m, tc, v))
}

/// Tag without the bench prefix, e.g. `debug/r1/c2`.
pub fn step_tag(tag: &str) -> &str {
    ["tb_gen/", "rtl_gen/", "judge/", "rtl_sample/", "debug/"]
        .iter()
        .filter_map(|s| tag.find(s))
        .min()
        .map_or(tag, |i| &tag[i..])
}

/// Replies for scored designs: every debug trial whose round reaches
/// `solve_round` is perfect; `None` never solves.
pub fn scripted(solve_round: Option<u32>) -> ScriptedTransport {
    ScriptedTransport::new(move |req: &LlmRequest| {
        let n = req.params.n_completions as usize;
        let tag = step_tag(&req.tag);
        let reply = if tag.starts_with("tb_gen/") {
            fenced(&plain_testbench("top_module"))
        } else if tag.starts_with("rtl_gen/") {
            design(3, 4, 0)
        } else if tag.starts_with("judge/") {
            "VERDICT: rtl_faulty\n".to_string()
        } else if tag.starts_with("rtl_sample/") {
            return Ok((0..n).map(|i| design(1 + (i as u64 % 3), 4, 1 + i as u64)).collect());
        } else {
            let round: u32 = tag
                .trim_start_matches("debug/r")
                .split('/')
                .next()
                .and_then(|r| r.parse().ok())
                .unwrap_or(0);
            match solve_round {
                Some(s) if round >= s => design(0, 4, 100 + round as u64),
                _ => design(2, 4, 100 + round as u64),
            }
        };
        Ok(vec![reply; n])
    })
}

pub struct Cassettes {
    pub llm: PathBuf,
    pub sim: PathBuf,
}

fn recording<S: Simulator>(dir: &Path, transport: ScriptedTransport, sim: S) -> (Gateway, RecordingSimulator<S>, Cassettes) {
    let tapes = Cassettes {
        llm: dir.join("llm.jsonl"),
        sim: dir.join("sim.jsonl"),
    };
    let gateway = Gateway::new(Backend::Record {
        transport: Arc::new(transport),
        writer: CassetteWriter::create(&tapes.llm).unwrap(),
    });
    let sim = RecordingSimulator::create(sim, &tapes.sim).unwrap();
    (gateway, sim, tapes)
}

/// Runs one pipeline the way `generate` does and records both cassettes.
pub fn record_generate<S: Simulator>(
    dir: &Path,
    problem: &Problem,
    run: &RunConfig,
    transport: ScriptedTransport,
    sim: S,
) -> (Cassettes, RunOutcome) {
    let (gateway, sim, tapes) = recording(dir, transport, sim);
    let templates = PromptTemplates::builtin();
    let engine = Engine::new(&gateway, &sim, &templates);
    let out = run_pipeline(&engine, problem, run, &RunPaths::under(&dir.join("rec"), &problem.task_id));
    (tapes, out)
}

/// Runs a benchmark the way `bench` does and records both cassettes.
pub fn record_bench<S: Simulator>(
    dir: &Path,
    problems: &[Problem],
    run: &RunConfig,
    runs: u32,
    transport: ScriptedTransport,
    sim: S,
) -> (Cassettes, BenchReport) {
    let (gateway, sim, tapes) = recording(dir, transport, sim);
    let templates = PromptTemplates::builtin();
    let engine = Engine::new(&gateway, &sim, &templates);
    let cfg = BenchConfig {
        runs,
        workers: 1,
        run: run.clone(),
        out_dir: dir.join("rec"),
        criterion: GoldenCriterion::default(),
        settings: serde_json::Value::Null,
    };
    let report = run_bench(&engine, problems, &cfg).unwrap();
    (tapes, report)
}

pub fn write_dataset(path: &Path, problems: &[Problem]) {
    let lines: Vec<String> = problems.iter().map(|p| serde_json::to_string(p).unwrap()).collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

pub fn replay_flags(tapes: &Cassettes) -> Vec<String> {
    vec![
        "--backend".into(),
        "replay".into(),
        "--cassette".into(),
        tapes.llm.display().to_string(),
        "--sim-cassette".into(),
        tapes.sim.display().to_string(),
    ]
}

pub fn rtlforge<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_rtlforge"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

pub fn text(out: &Output) -> String {
    format!(
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}
