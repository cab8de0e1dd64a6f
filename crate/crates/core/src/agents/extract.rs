use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Body of the last fenced code block in `reply`, if any. An unterminated
/// final fence runs to the end of the reply.
pub fn last_code_block(reply: &str) -> Option<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in reply.lines() {
        let fence = line.trim_start().starts_with("```");
        match (&mut current, fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(body), true) => {
                blocks.push(body.join("\n"));
                current = None;
            }
            (Some(body), false) => body.push(line),
            (None, false) => {}
        }
    }
    if let Some(body) = current {
        blocks.push(body.join("\n"));
    }
    blocks
        .into_iter()
        .rev()
        .find(|b| !b.trim().is_empty())
        .map(|b| format!("{}\n", b.trim_end()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    RtlFaulty,
    TestbenchFaulty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub decision: Verdict,
    pub rationale: String,
}

fn verdict_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^[`*\s]*VERDICT\s*:[`*\s]*(rtl_faulty|testbench_faulty)[`*\s]*$").expect("static regex")
    })
}

/// The last `VERDICT:` line decides; everything else is the rationale.
pub fn parse_verdict(reply: &str) -> Option<JudgeVerdict> {
    let lines: Vec<&str> = reply.lines().collect();
    let (idx, decision) = lines.iter().enumerate().rev().find_map(|(i, l)| {
        verdict_line().captures(l.trim()).map(|c| {
            let d = if &c[1] == "rtl_faulty" {
                Verdict::RtlFaulty
            } else {
                Verdict::TestbenchFaulty
            };
            (i, d)
        })
    })?;
    let rationale = lines
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, l)| *l)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string();
    Some(JudgeVerdict { decision, rationale })
}
