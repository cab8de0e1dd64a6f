//! State-checkpoint log protocol.
//!
//! Generated testbenches report one `CHECK` line per check event and a
//! closing `SUMMARY` line:
//!
//! ```text
//! CHECK time=<t> in:<name>=<val>[,...] dut:<name>=<val>[,...] exp:<name>=<val>[,...] status=<MATCH|MISMATCH>
//! SUMMARY total=<tc> mismatches=<m> first_mismatch=<t|none>
//! ```
//!
//! This module parses simulator stdout into a [`CheckTrace`], scores it,
//! locates the earliest mismatch and cuts the textual waveform window that
//! is handed to the debug agent.

mod value;
mod window;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use value::{values_match, LogicValue};
pub use window::{extract_window, render_window, WaveWindow, DEFAULT_WINDOW_LEN};

pub type SignalMap = BTreeMap<String, String>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("no CHECK lines found in simulation output")]
    NoChecksFound,
    #[error("SUMMARY line disagrees with parsed checks: {0}")]
    SummaryMismatch(String),
    #[error("CHECK line {line}: time {time} does not increase")]
    NonIncreasingTime { line: usize, time: u64 },
    #[error("CHECK line {line}: dut and exp report different signal sets")]
    SignalSetMismatch { line: usize },
    #[error("cannot score an empty trace")]
    EmptyTrace,
    #[error("time {0} is not a mismatch point in the trace")]
    NotAMismatch(u64),
    #[error("window length must be at least 1")]
    ZeroWindow,
}

/// One check event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub t: u64,
    pub inputs: SignalMap,
    pub dut_outputs: SignalMap,
    pub expected_outputs: SignalMap,
    pub matched: bool,
}

impl CheckRecord {
    /// Builds a record, deriving `matched` from the comparison rule.
    pub fn new(t: u64, inputs: SignalMap, dut_outputs: SignalMap, expected_outputs: SignalMap) -> Self {
        let matched = outputs_match(&dut_outputs, &expected_outputs);
        CheckRecord {
            t,
            inputs,
            dut_outputs,
            expected_outputs,
            matched,
        }
    }

    /// Formats the record as a `CHECK` line.
    pub fn to_check_line(&self) -> String {
        format!(
            "CHECK time={} in:{} dut:{} exp:{} status={}",
            self.t,
            join_signals(&self.inputs),
            join_signals(&self.dut_outputs),
            join_signals(&self.expected_outputs),
            if self.matched { "MATCH" } else { "MISMATCH" }
        )
    }
}

fn outputs_match(dut: &SignalMap, expected: &SignalMap) -> bool {
    dut.len() == expected.len()
        && dut
            .iter()
            .all(|(name, v)| expected.get(name).is_some_and(|e| values_match(v, e)))
}

fn join_signals(map: &SignalMap) -> String {
    map.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Ordered check records with strictly increasing `t`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CheckTrace {
    records: Vec<CheckRecord>,
    mismatches: usize,
}

impl CheckTrace {
    /// Builds a trace from records already in increasing time order.
    pub fn from_records(records: Vec<CheckRecord>) -> Result<Self, TraceError> {
        for (i, pair) in records.windows(2).enumerate() {
            if pair[1].t <= pair[0].t {
                return Err(TraceError::NonIncreasingTime {
                    line: i + 2,
                    time: pair[1].t,
                });
            }
        }
        let mismatches = records.iter().filter(|r| !r.matched).count();
        Ok(CheckTrace {
            records,
            mismatches,
        })
    }

    pub fn records(&self) -> &[CheckRecord] {
        &self.records
    }

    pub fn total_checks(&self) -> usize {
        self.records.len()
    }

    pub fn mismatches(&self) -> usize {
        self.mismatches
    }

    /// Renders the trace back into the log grammar, including `SUMMARY`.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_check_line());
            out.push('\n');
        }
        let first = earliest_mismatch(self).map_or_else(|| "none".to_string(), |t| t.to_string());
        let _ = writeln!(
            out,
            "SUMMARY total={} mismatches={} first_mismatch={}",
            self.total_checks(),
            self.mismatches,
            first
        );
        out
    }
}

/// Normalised mismatch score. `simulatable == false` always carries 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    value: f64,
    simulatable: bool,
}

impl Score {
    pub const UNSIMULATABLE: Score = Score {
        value: 0.0,
        simulatable: false,
    };

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn simulatable(&self) -> bool {
        self.simulatable
    }

    pub fn is_perfect(&self) -> bool {
        self.simulatable && self.value == 1.0
    }
}

/// `1 - mismatches / total_checks`, rounded once from the exact rational.
pub fn score(trace: &CheckTrace) -> Result<Score, TraceError> {
    score_counts(trace.mismatches() as u64, trace.total_checks() as u64)
}

pub fn score_counts(mismatches: u64, total: u64) -> Result<Score, TraceError> {
    if total == 0 {
        return Err(TraceError::EmptyTrace);
    }
    assert!(mismatches <= total, "mismatches exceed total checks");
    // (tc - m) / tc is exact in integers; the only rounding is the division.
    let value = (total - mismatches) as f64 / total as f64;
    Ok(Score {
        value,
        simulatable: true,
    })
}

/// Smallest `t` whose record is a mismatch.
pub fn earliest_mismatch(trace: &CheckTrace) -> Option<u64> {
    trace.records.iter().find(|r| !r.matched).map(|r| r.t)
}

#[derive(Debug, PartialEq, Eq)]
struct Summary {
    total: usize,
    mismatches: usize,
    first: Option<u64>,
}

/// Parses simulator stdout. Lines that are not well-formed `CHECK` or
/// `SUMMARY` lines are ignored.
pub fn parse_trace(stdout: &str) -> Result<CheckTrace, TraceError> {
    let mut records: Vec<CheckRecord> = Vec::new();
    let mut summary = None;
    for (idx, raw) in stdout.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix("CHECK ") {
            let Some((t, inputs, dut, exp)) = parse_check_fields(rest) else {
                continue;
            };
            if dut.keys().ne(exp.keys()) {
                return Err(TraceError::SignalSetMismatch { line: idx + 1 });
            }
            if let Some(prev) = records.last() {
                if t <= prev.t {
                    return Err(TraceError::NonIncreasingTime {
                        line: idx + 1,
                        time: t,
                    });
                }
            }
            records.push(CheckRecord::new(t, inputs, dut, exp));
        } else if let Some(rest) = line.strip_prefix("SUMMARY ") {
            if let Some(s) = parse_summary(rest) {
                summary = Some(s);
            }
        }
    }
    if records.is_empty() {
        return Err(TraceError::NoChecksFound);
    }
    let trace = CheckTrace::from_records(records)?;
    if let Some(s) = summary {
        let parsed = Summary {
            total: trace.total_checks(),
            mismatches: trace.mismatches(),
            first: earliest_mismatch(&trace),
        };
        if s != parsed {
            return Err(TraceError::SummaryMismatch(format!(
                "reported total={} mismatches={} first={:?}, parsed total={} mismatches={} first={:?}",
                s.total, s.mismatches, s.first, parsed.total, parsed.mismatches, parsed.first
            )));
        }
    }
    Ok(trace)
}

fn parse_check_fields(rest: &str) -> Option<(u64, SignalMap, SignalMap, SignalMap)> {
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    let [time, inputs, dut, exp, status] = tokens.as_slice() else {
        return None;
    };
    let t = time.strip_prefix("time=")?.parse().ok()?;
    let inputs = parse_signals(inputs.strip_prefix("in:")?, true)?;
    let dut = parse_signals(dut.strip_prefix("dut:")?, false)?;
    let exp = parse_signals(exp.strip_prefix("exp:")?, false)?;
    match status.strip_prefix("status=")? {
        "MATCH" | "MISMATCH" => Some((t, inputs, dut, exp)),
        _ => None,
    }
}

fn parse_signals(list: &str, allow_empty: bool) -> Option<SignalMap> {
    let mut map = SignalMap::new();
    if list.is_empty() {
        return allow_empty.then_some(map);
    }
    for pair in list.split(',') {
        let (name, value) = pair.split_once('=')?;
        if name.is_empty() || value.is_empty() || map.insert(name.to_string(), value.to_string()).is_some() {
            return None;
        }
    }
    Some(map)
}

fn parse_summary(rest: &str) -> Option<Summary> {
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    let [total, mismatches, first] = tokens.as_slice() else {
        return None;
    };
    let total = total.strip_prefix("total=")?.parse().ok()?;
    let mismatches = mismatches.strip_prefix("mismatches=")?.parse().ok()?;
    let first = match first.strip_prefix("first_mismatch=")? {
        "none" => None,
        t => Some(t.parse().ok()?),
    };
    Some(Summary {
        total,
        mismatches,
        first,
    })
}
