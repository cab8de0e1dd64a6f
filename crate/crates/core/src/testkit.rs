//! Helpers for driving the pipeline without a model or a toolchain.
//!
//! A "scored design" is a module whose localparams say how it should fare
//! against any testbench: `MISMATCHES` failing checks out of `TOTAL`. The
//! simulator from [`score_marker_simulator`] honours those numbers, putting
//! the mismatches at the end of the trace.

use std::sync::OnceLock;

use regex::Regex;

use crate::checkpoint::{CheckRecord, CheckTrace, SignalMap};
use crate::sim_bridge::{ScriptedSimulator, SimRun, SimStatus};

pub fn scored_design(top: &str, mismatches: u64, total: u64, variant: u64) -> String {
    format!(
        "module {top}(input clk, output reg [3:0] q);\n  localparam MISMATCHES = {mismatches};\n  localparam TOTAL = {total};\n  localparam VARIANT = {variant};\nendmodule\n"
    )
}

/// `(mismatches, total)` declared by a scored design.
pub fn design_marks(code: &str) -> Option<(u64, u64)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"localparam MISMATCHES = (\d+);\s*localparam TOTAL = (\d+);").expect("static regex")
    });
    let c = re.captures(code)?;
    Some((c[1].parse().ok()?, c[2].parse().ok()?))
}

/// `total` checks at t = 0..total with mismatches at the given times.
pub fn synthetic_trace(total: u64, mismatch_at: &[u64]) -> CheckTrace {
    let records = (0..total)
        .map(|t| {
            let bad = mismatch_at.contains(&t);
            let sig = |v: u64| SignalMap::from([("q".to_string(), format!("{}", v % 16))]);
            CheckRecord::new(
                t,
                SignalMap::from([("rst".to_string(), "0".to_string())]),
                sig(if bad { t + 1 } else { t }),
                sig(t),
            )
        })
        .collect();
    CheckTrace::from_records(records).expect("times increase")
}

/// Stdout for a scored design: the last `m` of `tc` checks mismatch.
pub fn scored_stdout(m: u64, tc: u64) -> String {
    let bad: Vec<u64> = (tc.saturating_sub(m)..tc).collect();
    synthetic_trace(tc, &bad).to_log()
}

/// Marker-syntax simulator that scores DUTs by their declared marks and
/// also prints a golden-style mismatch banner. DUTs without marks fail at
/// runtime.
pub fn score_marker_simulator() -> ScriptedSimulator {
    ScriptedSimulator::with_marker_syntax(|sources| {
        match ScriptedSimulator::dut(sources).and_then(|d| design_marks(d.code())) {
            Some((m, tc)) => ScriptedSimulator::ok_run(format!(
                "{}Mismatches: {m} in {tc} samples\n",
                scored_stdout(m, tc)
            )),
            None => SimRun {
                status: SimStatus::RuntimeFailed,
                ..ScriptedSimulator::ok_run("")
            },
        }
    })
}

/// A reply holding `code` in one fenced block.
pub fn fenced(code: &str) -> String {
    format!("```verilog\n{}\n```\n", code.trim_end())
}

/// Testbench text accepted by the scripted simulators.
pub fn plain_testbench(dut_top: &str) -> String {
    format!("module tb;\n  reg clk;\n  wire [3:0] q;\n  {dut_top} dut(.clk(clk), .q(q));\nendmodule\n")
}
