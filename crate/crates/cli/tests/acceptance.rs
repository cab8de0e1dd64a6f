//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use rtlforge_core::agents::{AgentError, AgentSettings, Agents, Conversation, PromptTemplates, Role};
use rtlforge_core::bench::{evaluate_golden, pass_at_k, pass_at_k_exact, GoldenCriterion, Problem};
use rtlforge_core::checkpoint::{
    earliest_mismatch, extract_window, parse_trace, score, score_counts, CheckRecord, CheckTrace, Score, SignalMap,
};
use rtlforge_core::llm_gateway::{Backend, Cassette, Gateway, LlmRequest, ScriptedTransport};
use rtlforge_core::orchestrator::{
    run_pipeline, select_top_k, Candidate, Engine, RunConfig, RunOutcome, RunPaths, RunStatus,
};
use rtlforge_core::sim_bridge::{
    IcarusSimulator, ScriptedSimulator, SimRun, SimStatus, Simulator, SourceKind, VerilogSource, WorkdirAllocator,
};
use rtlforge_core::testkit::{fenced, plain_testbench, score_marker_simulator, scored_design};

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    if took > limit {
        Err(format!("took {took:.2?}, limit {limit:?}"))
    } else {
        Ok(())
    }
}

/// Whether `s` lies within one ulp of the exact value `(tc - m) / tc`.
fn within_ulp_of_exact(s: f64, m: u64, tc: u64) -> bool {
    let exact = BigRational::new(BigInt::from(tc - m), BigInt::from(tc));
    let got = BigRational::from_float(s).expect("finite");
    let neighbour = if s < 1.0 { f64::from_bits(s.to_bits() + 1) } else { f64::from_bits(s.to_bits() - 1) };
    let ulp = abs(BigRational::from_float(neighbour).expect("finite") - &got);
    abs(got - exact) <= ulp
}

fn abs(r: BigRational) -> BigRational {
    if r < BigRational::from_integer(BigInt::from(0)) {
        -r
    } else {
        r
    }
}

// 1

fn scoring() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    for i in 0..1000 {
        let tc: u64 = rng.gen_range(1..=10_000);
        let m: u64 = match i % 4 {
            0 => 0,
            1 => tc,
            _ => rng.gen_range(0..=tc),
        };
        let s = score_counts(m, tc).map_err(|e| e.to_string())?.value();
        ensure!((0.0..=1.0).contains(&s), "score {s} out of range for m={m} tc={tc}");
        ensure!((s == 1.0) == (m == 0), "score {s} for m={m} tc={tc}");
        ensure!(within_ulp_of_exact(s, m, tc), "m={m} tc={tc}: {s} is not within 1 ulp of the exact value");
    }
    // the same through a parsed simulator log
    for (m, tc) in [(0u64, 7u64), (3, 16), (16, 16)] {
        let mut log = String::new();
        for t in 0..tc {
            let status = if t < m { "MISMATCH" } else { "MATCH" };
            let dut = if t < m { "1" } else { "0" };
            log.push_str(&format!("CHECK time={t} in:a=0 dut:y={dut} exp:y=0 status={status}\n"));
        }
        let s = score(&parse_trace(&log).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure!(within_ulp_of_exact(s.value(), m, tc), "parsed log m={m} tc={tc}");
    }
    ensure!(score_counts(0, 0).is_err(), "empty trace must not score");
    within(Duration::from_secs(1), started)?;
    Ok("1000 random (m, tc) within 1 ulp".into())
}

// 2

fn brute_pass_at_k(n: u32, c_p: u32, k: u32) -> BigRational {
    let (mut hits, mut total) = (0i64, 0i64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() != k {
            continue;
        }
        total += 1;
        // items 0..c_p are the passing runs
        if mask & ((1u32 << c_p) - 1) != 0 {
            hits += 1;
        }
    }
    BigRational::new(BigInt::from(hits), BigInt::from(total))
}

fn pass_at_k_matches() -> Outcome {
    let started = Instant::now();
    let mut cases = 0;
    for n in 1..=8u32 {
        for c_p in 0..=n {
            for k in 1..=n {
                let got = pass_at_k_exact(n as u64, c_p as u64, k as u64).map_err(|e| e.to_string())?;
                let want = brute_pass_at_k(n, c_p, k);
                ensure!(got == want, "n={n} c_p={c_p} k={k}: {got} vs {want}");
                cases += 1;
            }
        }
    }
    for n in 1..=100u64 {
        for c_p in 0..=n {
            let got = pass_at_k(n, c_p, 1).map_err(|e| e.to_string())?;
            ensure!(got == c_p as f64 / n as f64, "pass@1 n={n} c_p={c_p}: {got}");
        }
    }
    ensure!(pass_at_k(3, 4, 1).is_err() && pass_at_k(3, 1, 4).is_err(), "domain errors");
    within(Duration::from_secs(5), started)?;
    Ok(format!("{cases} brute-force cases, pass@1 = c_p/n for n <= 100"))
}

// 3

fn random_trace(rng: &mut StdRng) -> (Vec<(u64, bool)>, CheckTrace) {
    let len = rng.gen_range(1..=40);
    let p_bad: f64 = [0.0, 0.05, 0.3, 1.0][rng.gen_range(0..4)];
    let mut t = rng.gen_range(0..4u64);
    let mut plan = Vec::new();
    let mut records = Vec::new();
    for _ in 0..len {
        let bad = rng.gen_bool(p_bad);
        let exp: u8 = rng.gen_range(0..16);
        let dut = if bad { exp ^ (1 << rng.gen_range(0..4)) } else { exp };
        let sig = |v: u8| SignalMap::from([("q".to_string(), format!("{v:04b}"))]);
        let inputs = SignalMap::from([("d".to_string(), format!("{}", rng.gen_range(0..2)))]);
        records.push(CheckRecord::new(t, inputs, sig(dut), sig(exp)));
        plan.push((t, bad));
        t += rng.gen_range(1..=3);
    }
    (plan, CheckTrace::from_records(records).expect("increasing times"))
}

fn checkpoint_math() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(3);
    let (mut windows, mut clamped) = (0, 0);
    for _ in 0..1000 {
        let (plan, trace) = random_trace(&mut rng);
        let oracle_tm = plan.iter().filter(|(_, bad)| *bad).map(|(t, _)| *t).min();
        ensure!(earliest_mismatch(&trace) == oracle_tm, "earliest mismatch {:?} vs {oracle_tm:?}", earliest_mismatch(&trace));
        let Some(t_m) = oracle_tm else { continue };
        let len: u64 = rng.gen_range(1..=16);
        let w = extract_window(&trace, t_m, len).map_err(|e| e.to_string())?;
        let lo = if t_m >= len { t_m - len } else { 0 };
        let want: Vec<u64> = plan.iter().map(|(t, _)| *t).filter(|t| *t >= lo && *t <= t_m).collect();
        let got: Vec<u64> = w.records.iter().map(|r| r.t).collect();
        ensure!(got == want, "window for t_m={t_m} len={len}: {got:?} vs {want:?}");
        ensure!(got.len() as u64 <= len + 1, "window longer than len + 1");
        ensure!(w.lower_bound() == lo, "lower bound {} vs {lo}", w.lower_bound());
        ensure!(got.last() == Some(&t_m), "window must end at t_m");
        windows += 1;
        if t_m < len {
            clamped += 1;
        }
    }
    ensure!(clamped > 0, "no clamped windows exercised");
    within(Duration::from_secs(5), started)?;
    Ok(format!("1000 traces, {windows} windows ({clamped} clamped at 0)"))
}

// 4

fn dut_source(code: &str) -> VerilogSource {
    VerilogSource::new(SourceKind::Dut, "top_module", code).expect("valid source")
}

fn candidate(id: u32, score: Score) -> Candidate {
    Candidate {
        id,
        source: dut_source(&format!("module top_module; // {id}\nendmodule\n")),
        score,
        trace: None,
        lineage: None,
        round: 0,
    }
}

fn selection() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(4);
    for _ in 0..500 {
        let size = rng.gen_range(1..=12usize);
        let k = rng.gen_range(1..=5usize);
        // eighths keep every subset sum exact
        let pool: Vec<Candidate> = (0..size as u32)
            .map(|id| {
                let m = rng.gen_range(0..=9u64);
                let s = if m == 9 { Score::UNSIMULATABLE } else { score_counts(m, 8).unwrap() };
                candidate(id, s)
            })
            .collect();
        let want_len = k.min(size);
        let mut best: Option<(f64, Vec<u32>)> = None;
        for mask in 0u32..(1 << size) {
            if mask.count_ones() as usize != want_len {
                continue;
            }
            let ids: Vec<u32> = (0..size as u32).filter(|i| mask & (1 << i) != 0).collect();
            let sum: f64 = ids.iter().map(|i| pool[*i as usize].score.value()).sum();
            let better = match &best {
                None => true,
                Some((s, b)) => sum > *s || (sum == *s && ids < *b),
            };
            if better {
                best = Some((sum, ids));
            }
        }
        let (want_sum, want_ids) = best.expect("non-empty pool");
        let got = select_top_k(&pool, k);
        let mut got_sorted = got.clone();
        got_sorted.sort_unstable();
        let got_sum: f64 = got.iter().map(|i| pool[*i as usize].score.value()).sum();
        ensure!(got_sum == want_sum, "sum {got_sum} vs {want_sum}");
        ensure!(got_sorted == want_ids, "ids {got_sorted:?} vs {want_ids:?}");
        for pair in got.windows(2) {
            let (a, b) = (&pool[pair[0] as usize], &pool[pair[1] as usize]);
            ensure!(
                a.score.value() > b.score.value() || (a.score.value() == b.score.value() && a.id < b.id),
                "selection not ordered best first"
            );
        }
    }
    within(Duration::from_secs(10), started)?;
    Ok("500 pools match exhaustive subset search".into())
}

// 5

fn verdict(v: &str) -> String {
    format!("The failing checks point at the design.\nVERDICT: {v}\n")
}

/// Mismatches out of 4; 5 stands for a design the simulator cannot run.
fn marked(m: u64, variant: u64) -> String {
    if m > 4 {
        fenced(&format!("module top_module(input clk);\n  // variant {variant}\nendmodule"))
    } else {
        fenced(&scored_design("top_module", m, 4, variant))
    }
}

fn value_of(m: u64) -> f64 {
    if m > 4 {
        0.0
    } else {
        (4 - m) as f64 / 4.0
    }
}

struct Scenario {
    config: RunConfig,
    replies: HashMap<String, Vec<String>>,
    expected: Vec<Vec<f64>>,
    solved: bool,
}

#[derive(Clone, Copy)]
enum Trend {
    Regress,
    Stagnate,
    Improve,
    Mixed,
}

/// Builds a script and, alongside, the selection the rules imply.
fn adversarial(rng: &mut StdRng, trend: Trend) -> Scenario {
    let c = rng.gen_range(1..=5u32);
    let k = rng.gen_range(1..=c);
    let d = rng.gen_range(1..=4u32);
    let samples: Vec<u64> = (0..c).map(|_| rng.gen_range(1..=5)).collect();
    let mut replies = HashMap::new();
    replies.insert("tb_gen/0".to_string(), vec![fenced(&plain_testbench("top_module"))]);
    replies.insert("rtl_gen/0".to_string(), vec![marked(4, 999)]);
    replies.insert("judge/0".to_string(), vec![verdict("rtl_faulty")]);
    replies.insert(
        "rtl_sample/0".to_string(),
        samples.iter().enumerate().map(|(i, m)| marked(*m, i as u64)).collect(),
    );

    let mut order: Vec<u32> = (1..=c).collect();
    order.sort_by(|a, b| {
        let (sa, sb) = (value_of(samples[*a as usize - 1]), value_of(samples[*b as usize - 1]));
        sb.partial_cmp(&sa).unwrap().then(a.cmp(b))
    });
    order.truncate(k as usize);
    // (root, mismatches of the current pick)
    let mut slots: Vec<(u32, u64)> = order.iter().map(|id| (*id, samples[*id as usize - 1])).collect();
    let mut expected = vec![slots.iter().map(|(_, m)| value_of(*m)).collect::<Vec<_>>()];
    let mut solved = false;
    for r in 1..=d {
        if slots.iter().any(|(_, m)| *m == 0) {
            solved = true;
            break;
        }
        for (root, cur) in slots.iter_mut() {
            if *cur > 4 {
                continue;
            }
            let trial = match trend {
                Trend::Regress => rng.gen_range(*cur + 1..=5),
                Trend::Stagnate => *cur,
                Trend::Improve => rng.gen_range(0..*cur),
                Trend::Mixed => rng.gen_range(0..=5),
            };
            replies.insert(format!("debug/r{r}/c{root}"), vec![marked(trial, 100 * r as u64 + *root as u64)]);
            if value_of(trial) >= value_of(*cur) {
                *cur = trial;
            }
        }
        expected.push(slots.iter().map(|(_, m)| value_of(*m)).collect());
    }
    solved |= slots.iter().any(|(_, m)| *m == 0);
    Scenario {
        config: RunConfig {
            pool_size: c,
            top_k: k,
            max_debug_rounds: d,
            ..RunConfig::default()
        },
        replies,
        expected,
        solved,
    }
}

fn table_transport(replies: HashMap<String, Vec<String>>) -> ScriptedTransport {
    ScriptedTransport::new(move |req: &LlmRequest| {
        replies.get(&req.tag).cloned().ok_or_else(|| {
            rtlforge_core::llm_gateway::TransportError::Status {
                code: 404,
                body: format!("unscripted tag {}", req.tag),
            }
        })
    })
}

fn run_scripted(dir: &Path, transport: ScriptedTransport, sim: &dyn Simulator, problem: &Problem, config: &RunConfig) -> RunOutcome {
    let gateway = Gateway::new(Backend::Live(Arc::new(transport))).with_request_log();
    let templates = PromptTemplates::builtin();
    let engine = Engine::new(&gateway, sim, &templates);
    run_pipeline(&engine, problem, config, &RunPaths::under(dir, &problem.task_id))
}

fn monotonicity() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(5);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sim = score_marker_simulator();
    let problem = Problem::new("counter", "A 4-bit counter.");
    let trends = [Trend::Regress, Trend::Stagnate, Trend::Improve, Trend::Mixed];
    let mut solved = 0;
    for i in 0..200 {
        let s = adversarial(&mut rng, trends[i % 4]);
        let out = run_scripted(&tmp.path().join(format!("s{i}")), table_transport(s.replies), &sim, &problem, &s.config);
        ensure!(out.error.is_none(), "scenario {i}: {:?}", out.error);
        let got: Vec<Vec<f64>> = out
            .score_history
            .iter()
            .map(|r| r.selected.iter().map(|x| x.score).collect())
            .collect();
        for pair in got.windows(2) {
            for (a, b) in pair[0].iter().zip(&pair[1]) {
                ensure!(b >= a, "scenario {i}: lineage score dropped {a} -> {b}");
            }
        }
        ensure!(got == s.expected, "scenario {i}: history {got:?} vs {:?}", s.expected);
        let rounds = got.len() as u32 - 1;
        let hit = got.iter().position(|r| r.iter().any(|x| *x == 1.0));
        if s.solved {
            ensure!(out.status == RunStatus::Solved, "scenario {i}: status {:?}", out.status);
            ensure!(hit == Some(got.len() - 1), "scenario {i}: kept going after a perfect score");
            solved += 1;
        } else {
            ensure!(out.status == RunStatus::BudgetExhausted, "scenario {i}: status {:?}", out.status);
            ensure!(rounds == s.config.max_debug_rounds && hit.is_none(), "scenario {i}: stopped at round {rounds}");
        }
        ensure!(out.rounds == rounds, "scenario {i}: rounds {} vs {rounds}", out.rounds);
    }
    within(Duration::from_secs(10), started)?;
    Ok(format!("200 scripted sequences, {solved} solved, the rest hit the round budget"))
}

// 6

fn syntax_fix_cap() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let templates = PromptTemplates::builtin();
    let workdirs = WorkdirAllocator::new(tmp.path());
    let broken = "module top_module(input a, output y);\n  SYNTAX_ERROR\nendmodule";
    let fixed = "module top_module(input a, output y);\n  assign y = a;\nendmodule";
    let mut report = Vec::new();
    // replies: always broken, then fixed by the fifth and only "sixth" reply
    for good_from in [None, Some(4), Some(5)] {
        let transport = ScriptedTransport::new(move |req: &LlmRequest| {
            let attempt: usize = req.tag.rsplit("fix").next().and_then(|n| n.parse().ok()).unwrap_or(99);
            let code = if good_from.is_some_and(|g| attempt >= g) { fixed } else { broken };
            Ok(vec![fenced(code)])
        });
        let gateway = Gateway::new(Backend::Live(Arc::new(transport))).with_request_log();
        let sim = ScriptedSimulator::with_marker_syntax(|_| ScriptedSimulator::ok_run(""));
        let agents = Agents::new(&gateway, &sim, &workdirs, &templates, AgentSettings::default());
        let mut conv = Conversation::for_role("rtl", Role::RtlGen, &templates).map_err(|e| e.to_string())?;
        let result = agents.fix_syntax(dut_source(broken), &mut conv, Role::RtlGen, "rtl_gen/0", "cap");
        let calls = gateway.call_count();
        let compiles = sim.compile_count();
        match (good_from, result) {
            (None, Err(AgentError::SyntaxUnfixable { attempts, .. })) | (Some(5), Err(AgentError::SyntaxUnfixable { attempts, .. })) => {
                ensure!(attempts == 5, "attempts {attempts}");
                ensure!(calls == 5, "{calls} fix requests, want 5");
                ensure!(compiles == 6, "{compiles} compiles, want 6");
            }
            (Some(4), Ok(src)) => {
                ensure!(src.code().contains("assign y = a"), "wrong source kept");
                ensure!(calls == 5, "{calls} fix requests before success, want 5");
            }
            (g, r) => return Err(format!("good_from={g:?}: unexpected {:?}", r.map(|s| s.code().to_string()))),
        }
        report.push(calls);
    }
    Ok(format!("unfixable after exactly 5 requests and 6 compiles; requests per case {report:?}"))
}

// 7

fn routing() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sim = score_marker_simulator();
    let problem = Problem::new("counter", "A 4-bit counter.");
    let tb = fenced(&plain_testbench("top_module"));
    let config = RunConfig {
        pool_size: 1,
        top_k: 1,
        max_debug_rounds: 1,
        ..RunConfig::default()
    };

    // one faulty verdict, then the design is blamed
    let mut replies = HashMap::new();
    for p in 0..2 {
        replies.insert(format!("tb_gen/{p}"), vec![tb.clone()]);
        replies.insert(format!("rtl_gen/{p}"), vec![marked(1, p)]);
    }
    replies.insert("judge/0".to_string(), vec![verdict("testbench_faulty")]);
    replies.insert("judge/1".to_string(), vec![verdict("rtl_faulty")]);
    replies.insert("rtl_sample/1".to_string(), vec![marked(0, 50)]);
    let gateway = Gateway::new(Backend::Live(Arc::new(table_transport(replies)))).with_request_log();
    let templates = PromptTemplates::builtin();
    let engine = Engine::new(&gateway, &sim, &templates);
    let out = run_pipeline(&engine, &problem, &config, &RunPaths::under(&tmp.path().join("once"), "once"));
    let tags: Vec<String> = gateway.logged_requests().into_iter().map(|r| r.tag).collect();
    let want = ["tb_gen/0", "rtl_gen/0", "judge/0", "tb_gen/1", "rtl_gen/1", "judge/1", "rtl_sample/1"];
    ensure!(tags == want, "call order {tags:?}");
    ensure!(out.tb_regens == 1 && out.status == RunStatus::Solved, "{:?} after {} regens", out.status, out.tb_regens);
    let events = std::fs::read_to_string(tmp.path().join("once/transcript/events.jsonl")).map_err(|e| e.to_string())?;
    let invalidated = events.lines().filter(|l| l.contains("\"pool_invalidated\"")).count();
    ensure!(invalidated == 1, "{invalidated} pool invalidations");

    // always faulty: two regenerations then give up
    let mut replies = HashMap::new();
    for p in 0..4 {
        replies.insert(format!("tb_gen/{p}"), vec![tb.clone()]);
        replies.insert(format!("rtl_gen/{p}"), vec![marked(1, p)]);
        replies.insert(format!("judge/{p}"), vec![verdict("testbench_faulty")]);
    }
    let gateway = Gateway::new(Backend::Live(Arc::new(table_transport(replies)))).with_request_log();
    let engine = Engine::new(&gateway, &sim, &templates);
    let out = run_pipeline(&engine, &problem, &config, &RunPaths::under(&tmp.path().join("always"), "always"));
    ensure!(out.status == RunStatus::TbRegenExhausted, "status {:?}", out.status);
    ensure!(out.tb_regens == 2, "{} regens", out.tb_regens);
    let tb_calls = gateway.logged_requests().iter().filter(|r| r.tag.starts_with("tb_gen")).count();
    ensure!(tb_calls == 3 && out.llm_calls == 9, "{tb_calls} testbench requests, {} calls", out.llm_calls);
    Ok("one regeneration re-enters at initial RTL; capped at 2 then tb_regen_exhausted".into())
}

// 8

#[derive(Clone, Copy)]
enum CounterModel {
    Wrapping,
    Saturating,
}

/// Stdout the counter testbench prints for a given design.
fn counter_stdout(model: CounterModel) -> String {
    let (mut q, mut exp) = (0u8, 0u8);
    let (mut out, mut bad, mut first) = (String::new(), 0, None);
    for i in 0..16 {
        q = match model {
            CounterModel::Wrapping => (q + 1) & 15,
            CounterModel::Saturating => (q + 1).min(15),
        };
        exp = (exp + 1) & 15;
        let status = if q == exp {
            "MATCH"
        } else {
            bad += 1;
            first.get_or_insert(i);
            "MISMATCH"
        };
        out.push_str(&format!("CHECK time={i} in:reset=0 dut:q={q:04b} exp:q={exp:04b} status={status}\n"));
    }
    let first = first.map_or("none".to_string(), |f: i32| f.to_string());
    out.push_str(&format!("SUMMARY total=16 mismatches={bad} first_mismatch={first}\n"));
    out
}

fn counter_stub() -> ScriptedSimulator {
    let correct = read("counter", "correct.v");
    let buggy = read("counter", "buggy.v");
    ScriptedSimulator::new(
        |_| Vec::new(),
        move |sources| {
            let code = ScriptedSimulator::dut(sources).map(|d| d.code().trim().to_string());
            match code {
                Some(c) if c == correct.trim() => ScriptedSimulator::ok_run(counter_stdout(CounterModel::Wrapping)),
                Some(c) if c == buggy.trim() => ScriptedSimulator::ok_run(counter_stdout(CounterModel::Saturating)),
                _ => SimRun {
                    status: SimStatus::RuntimeFailed,
                    ..ScriptedSimulator::ok_run("")
                },
            }
        },
    )
}

fn counter_script() -> ScriptedTransport {
    let tb = fenced(&read("counter", "tb.v"));
    let buggy = fenced(&read("counter", "buggy.v"));
    let correct = fenced(&read("counter", "correct.v"));
    ScriptedTransport::new(move |req: &LlmRequest| {
        let n = req.params.n_completions as usize;
        let reply = match req.tag.split('/').next().unwrap_or("") {
            "tb_gen" => tb.clone(),
            "rtl_gen" | "rtl_sample" => buggy.clone(),
            "judge" => verdict("rtl_faulty"),
            _ => correct.clone(),
        };
        Ok(vec![reply; n])
    })
}

fn counter_replay() -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let problem = Problem {
        module_interface: Some(read("counter", "interface.v")),
        ..Problem::new("counter", read("counter", "spec.txt").trim())
    };
    let config = RunConfig {
        pool_size: 2,
        top_k: 1,
        max_debug_rounds: 4,
        ..RunConfig::default()
    };
    let (tapes, recorded) = record_generate(tmp.path(), &problem, &config, counter_script(), counter_stub());
    ensure!(recorded.status == RunStatus::Solved, "recording run ended {:?}: {:?}", recorded.status, recorded.error);

    let mut runs = Vec::new();
    for label in ["a", "b"] {
        let cassette = Cassette::load(&tapes.llm).map_err(|e| e.to_string())?;
        let gateway = Gateway::new(Backend::Replay(cassette)).with_request_log();
        let sim = counter_stub();
        let templates = PromptTemplates::builtin();
        let engine = Engine::new(&gateway, &sim, &templates);
        let out_dir = tmp.path().join(label);
        let out = run_pipeline(&engine, &problem, &config, &RunPaths::under(&out_dir, "counter"));
        let events = std::fs::read_to_string(out_dir.join("transcript/events.jsonl"))
            .map_err(|e| e.to_string())?
            .replace(&out_dir.display().to_string(), "<out>");
        runs.push((out, gateway.logged_requests(), events));
    }
    let (out, requests, events) = &runs[0];
    ensure!(out.status == RunStatus::Solved, "status {:?}: {:?}", out.status, out.error);
    ensure!(out.initial_score == Some(0.9375), "initial score {:?}", out.initial_score);
    ensure!(out.rounds == 1, "solved in round {}", out.rounds);
    ensure!(out.engine_score_history() == vec![0.9375, 1.0], "history {:?}", out.engine_score_history());
    let debug = requests
        .iter()
        .find(|r| r.tag.starts_with("debug/r1/"))
        .ok_or("no debug request")?;
    let prompt = &debug.messages.last().ok_or("empty debug request")?.content;
    let row_found = prompt.lines().any(|l| {
        let cells: Vec<&str> = l.split('|').map(str::trim).collect();
        cells.len() == 5 && cells[..4] == ["15", "0", "1111", "0000"] && cells[4].starts_with("MISMATCH")
    });
    ensure!(row_found, "first-mismatch row missing from debug prompt:\n{}", prompt.replace('\n', "\n    "));
    let (out_b, requests_b, events_b) = &runs[1];
    ensure!(
        events == events_b
            && out.llm_calls == out_b.llm_calls
            && out.best.as_ref().map(|b| b.source.code()) == out_b.best.as_ref().map(|b| b.source.code())
            && requests.len() == requests_b.len(),
        "replays differ"
    );
    within(Duration::from_secs(10), started)?;
    Ok(format!("0.9375 -> 1.0 in round 1, {} calls, replays identical", out.llm_calls))
}

// 9

/// Earliest check index where the inverted-carry counter differs from a
/// correct one.
fn mutant_first_mismatch() -> u64 {
    let (mut q, mut exp) = (0u8, 0u8);
    for i in 0..16 {
        let bit = |n: u8| (q >> n) & 1;
        let c0 = bit(0);
        let c1 = bit(0) & bit(1);
        let c2 = bit(0) & bit(1) & (bit(2) ^ 1);
        q ^= (c2 << 3) | (c1 << 2) | (c0 << 1) | 1;
        exp = (exp + 1) & 15;
        if q != exp {
            return i;
        }
    }
    unreachable!("the mutant diverges")
}

fn toolchain_fixtures() -> Result<Option<String>, String> {
    if !IcarusSimulator::available() {
        return Ok(None);
    }
    let sim = IcarusSimulator::new(&Default::default()).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let timeout = Duration::from_secs(60);
    let results: Vec<Result<String, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = ["mux", "dff", "counter"]
            .into_iter()
            .map(|name| {
                let (sim, dir) = (&sim, tmp.path().join(name));
                s.spawn(move || -> Result<String, String> {
                    let tb = fenced(&read(name, "tb.v"));
                    let rtl = fenced(&read(name, "correct.v"));
                    let transport = ScriptedTransport::new(move |req: &LlmRequest| {
                        let reply = if req.tag.starts_with("tb_gen") { tb.clone() } else { rtl.clone() };
                        Ok(vec![reply; req.params.n_completions as usize])
                    });
                    let problem = fixture_problem(name);
                    let out = run_scripted(&dir, transport, sim, &problem, &RunConfig::default());
                    ensure!(out.status == RunStatus::Solved, "{name}: {:?} {:?}", out.status, out.error);
                    let best = out.best.ok_or(format!("{name}: no design"))?;
                    ensure!(best.score.value() == 1.0, "{name}: engine score {}", best.score.value());
                    let golden = evaluate_golden(
                        sim,
                        &best.source,
                        problem.golden_testbench.as_deref().unwrap(),
                        problem.reference_solution.as_deref(),
                        &GoldenCriterion::default(),
                        &dir.join("golden"),
                        timeout,
                    )
                    .map_err(|e| e.to_string())?;
                    ensure!(golden.passed, "{name}: golden check {golden:?}");
                    Ok(name.to_string())
                })
            })
            .collect();
        let mutant = s.spawn(|| -> Result<String, String> {
            let tb = VerilogSource::new(SourceKind::Testbench, "tb", read("counter", "tb.v")).map_err(|e| e.to_string())?;
            let run = sim
                .run_sim(&[dut_source(&read("counter", "mutant.v")), tb], &tmp.path().join("mutant"), timeout)
                .map_err(|e| e.to_string())?;
            let trace = parse_trace(&run.stdout).map_err(|e| e.to_string())?;
            let s = score(&trace).map_err(|e| e.to_string())?.value();
            let want = mutant_first_mismatch();
            ensure!(s < 1.0, "mutant scored {s}");
            ensure!(earliest_mismatch(&trace) == Some(want), "mutant first mismatch {:?}, want {want}", earliest_mismatch(&trace));
            Ok(format!("mutant score {s}, first mismatch at {want}"))
        });
        let mut all: Vec<_> = handles.into_iter().map(|h| h.join().expect("thread")).collect();
        all.push(mutant.join().expect("thread"));
        all
    });
    let parts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Some(parts.join(", ")))
}

// 10

fn bench_args(dataset: &Path, out: &Path, tapes: &Cassettes) -> Vec<String> {
    let mut args: Vec<String> = [
        "bench",
        "--dataset",
        &dataset.display().to_string(),
        "--runs",
        "2",
        "--workers",
        "2",
        "--out",
        &out.display().to_string(),
        "--pool-size",
        "3",
        "--top-k",
        "2",
        "--max-debug-rounds",
        "2",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    args.extend(replay_flags(tapes));
    args
}

fn bench_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let problems: Vec<Problem> = ["mux", "dff", "counter"].into_iter().map(fixture_problem).collect();
    let config = RunConfig {
        pool_size: 3,
        top_k: 2,
        max_debug_rounds: 2,
        ..RunConfig::default()
    };
    let (tapes, _) = record_bench(tmp.path(), &problems, &config, 2, scripted(Some(2)), score_marker_simulator());
    let dataset = tmp.path().join("fixtures.jsonl");
    write_dataset(&dataset, &problems);
    let mut outputs = Vec::new();
    for label in ["first", "second"] {
        let out_dir = tmp.path().join(label);
        let out = rtlforge(bench_args(&dataset, &out_dir, &tapes));
        ensure!(out.status.code() == Some(0), "{label} run failed:\n{}", text(&out));
        let read_out = |f: &str| std::fs::read(out_dir.join(f)).map_err(|e| format!("{f}: {e}"));
        outputs.push((read_out("report.csv")?, read_out("scores_by_round.csv")?));
    }
    ensure!(outputs[0].0 == outputs[1].0, "report.csv differs");
    ensure!(outputs[0].1 == outputs[1].1, "scores_by_round.csv differs");
    let rows = String::from_utf8_lossy(&outputs[0].0).lines().count() - 1;
    ensure!(rows == 3, "{rows} report rows");
    Ok("two replayed bench runs produce identical report.csv and scores_by_round.csv".into())
}

// 11

const LIVE_FLAG: &str = "RTLFORGE_LIVE_SMOKE";

fn live_smoke() -> Result<Option<String>, String> {
    if std::env::var(LIVE_FLAG).map_or(true, |v| v.is_empty() || v == "0") {
        return Ok(None);
    }
    if !IcarusSimulator::available() {
        return Err("live smoke needs iverilog and vvp on PATH".into());
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let problems: Vec<Problem> = ["mux", "dff", "counter"].into_iter().map(fixture_problem).collect();
    let dataset = tmp.path().join("fixtures.jsonl");
    write_dataset(&dataset, &problems);
    let tapes = Cassettes {
        llm: tmp.path().join("llm.jsonl"),
        sim: tmp.path().join("sim.jsonl"),
    };
    let mut common: Vec<String> = vec![
        "bench".into(),
        "--dataset".into(),
        dataset.display().to_string(),
        "--pool-size".into(),
        "3".into(),
        "--top-k".into(),
        "2".into(),
        "--max-debug-rounds".into(),
        "2".into(),
        "--cassette".into(),
        tapes.llm.display().to_string(),
        "--sim-cassette".into(),
        tapes.sim.display().to_string(),
    ];
    for (var, flag) in [("RTLFORGE_ENDPOINT", "--endpoint"), ("RTLFORGE_MODEL", "--model"), ("RTLFORGE_AUTH_ENV", "--auth-env")] {
        if let Ok(v) = std::env::var(var) {
            common.extend([flag.to_string(), v]);
        }
    }
    let run = |backend: &str, out: &Path| {
        let mut args = common.clone();
        args.extend(["--backend".into(), backend.into(), "--out".into(), out.display().to_string()]);
        rtlforge(args)
    };
    let live_dir = tmp.path().join("live");
    let out = run("record", &live_dir);
    ensure!(out.status.code() == Some(0), "live run failed:\n{}", text(&out));
    let replay_dir = tmp.path().join("replay");
    let out = run("replay", &replay_dir);
    ensure!(out.status.code() == Some(0), "replay failed:\n{}", text(&out));

    let decisions = |dir: &Path| -> Result<Vec<String>, String> {
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        ensure!(report["problems"].as_array().map_or(0, Vec::len) == 3, "report.json lacks 3 problems");
        let mut rows = Vec::new();
        for r in report["records"].as_array().ok_or("no records")? {
            rows.push(format!(
                "{} {} {} {}",
                r["task_id"], r["status"], r["llm_calls"], r["engine_score_history"]
            ));
        }
        Ok(rows)
    };
    let live = decisions(&live_dir)?;
    ensure!(live == decisions(&replay_dir)?, "replay diverged from the live run");
    let scores = |dir: &Path| std::fs::read(dir.join("scores_by_round.csv")).map_err(|e| e.to_string());
    ensure!(scores(&live_dir)? == scores(&replay_dir)?, "scores_by_round.csv differs");
    Ok(Some(format!("{} live runs replayed identically", live.len())))
}

// runner

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn guarded<F: FnOnce() -> Result<Option<String>, String>>(f: F) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(Some(detail))) => Verdict::Pass(detail),
        Ok(Ok(None)) => Verdict::Skip(String::new()),
        Ok(Err(e)) => Verdict::Fail(e),
        Err(panic) => Verdict::Fail(
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    }
}

fn always(f: fn() -> Outcome) -> impl FnOnce() -> Result<Option<String>, String> {
    move || f().map(Some)
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Verdict>)> = vec![
        ("scoring", Box::new(|| guarded(always(scoring)))),
        ("pass@k", Box::new(|| guarded(always(pass_at_k_matches)))),
        ("checkpoint window", Box::new(|| guarded(always(checkpoint_math)))),
        ("top-k selection", Box::new(|| guarded(always(selection)))),
        ("debug monotonicity and halting", Box::new(|| guarded(always(monotonicity)))),
        ("syntax-fix cap", Box::new(|| guarded(always(syntax_fix_cap)))),
        ("testbench regeneration routing", Box::new(|| guarded(always(routing)))),
        ("counter replay end to end", Box::new(|| guarded(always(counter_replay)))),
        ("toolchain fixtures", Box::new(|| match guarded(toolchain_fixtures) {
            Verdict::Skip(_) => Verdict::Skip("iverilog/vvp not on PATH".into()),
            v => v,
        })),
        ("bench determinism", Box::new(|| guarded(always(bench_determinism)))),
        ("live smoke", Box::new(|| match guarded(live_smoke) {
            Verdict::Skip(_) => Verdict::Skip(format!("set {LIVE_FLAG}=1 to run")),
            v => v,
        })),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let verdict = run();
        let took = started.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Skip(d) => ("SKIP", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name} ({took:.2}s): {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
