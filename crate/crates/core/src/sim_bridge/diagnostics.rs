use std::sync::OnceLock;

use regex::Regex;

use super::{Diagnostic, Severity};

fn located() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?P<file>[^:\s][^:]*):(?P<line>\d+):\s*(?P<msg>.*)$").expect("static regex"))
}

fn unresolved() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)unknown module type|cannot find file containing module|error\(s\) during elaboration|these modules were missing|referenced \d+ times|^\*+$",
        )
        .expect("static regex")
    })
}

/// Whether a diagnostic only reports a module that is defined elsewhere.
pub fn is_unresolved_module(message: &str) -> bool {
    unresolved().is_match(message.trim())
}

/// Splits toolchain output into diagnostics. `file:line: message` lines are
/// located; any other non-empty line is kept verbatim without a location
/// and given `fallback` severity. Located diagnostics come first.
pub fn parse_diagnostics(output: &str, fallback: Severity) -> Vec<Diagnostic> {
    let mut located_diags = Vec::new();
    let mut loose = Vec::new();
    for line in output.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(c) = located().captures(trimmed) {
            let msg = c["msg"].trim().to_string();
            let lower = msg.to_ascii_lowercase();
            let severity = if lower.starts_with("warning") || lower.starts_with("sorry") {
                Severity::Warning
            } else {
                Severity::Error
            };
            located_diags.push(Diagnostic {
                file: c["file"].to_string(),
                line: c["line"].parse().ok(),
                message: if msg.is_empty() { trimmed.to_string() } else { msg },
                severity,
            });
        } else {
            loose.push(Diagnostic {
                file: String::new(),
                line: None,
                message: trimmed.to_string(),
                severity: fallback,
            });
        }
    }
    located_diags.extend(loose);
    located_diags
}
