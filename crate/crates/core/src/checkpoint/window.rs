use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{CheckRecord, CheckTrace, TraceError};

/// Default number of check events preceding the first mismatch.
pub const DEFAULT_WINDOW_LEN: u64 = 8;

/// Records with `t` in `[max(t_m - len, 0), t_m]`, ending at the first mismatch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveWindow {
    pub t_m: u64,
    pub window_len: u64,
    pub records: Vec<CheckRecord>,
}

impl WaveWindow {
    pub fn lower_bound(&self) -> u64 {
        self.t_m.saturating_sub(self.window_len)
    }
}

pub fn extract_window(trace: &CheckTrace, t_m: u64, window_len: u64) -> Result<WaveWindow, TraceError> {
    if window_len == 0 {
        return Err(TraceError::ZeroWindow);
    }
    let records = trace.records();
    let end = records.partition_point(|r| r.t <= t_m);
    match end.checked_sub(1).map(|i| &records[i]) {
        Some(r) if r.t == t_m && !r.matched => {}
        _ => return Err(TraceError::NotAMismatch(t_m)),
    }
    let lo = t_m.saturating_sub(window_len);
    let start = records.partition_point(|r| r.t < lo);
    Ok(WaveWindow {
        t_m,
        window_len,
        records: records[start..end].to_vec(),
    })
}

/// Renders a window as a fixed-width table: time, inputs, then each output
/// as a `dut`/`exp` column pair, then the match marker. Signal columns are
/// sorted by name.
pub fn render_window(window: &WaveWindow) -> String {
    let input_names: Vec<&String> = collect_names(window, |r| &r.inputs);
    let output_names: Vec<&String> = collect_names(window, |r| &r.dut_outputs);

    let mut header = vec!["time".to_string()];
    header.extend(input_names.iter().map(|n| n.to_string()));
    for name in &output_names {
        header.push(format!("{name}(dut)"));
        header.push(format!("{name}(exp)"));
    }
    header.push("status".to_string());

    let missing = "-".to_string();
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(window.records.len());
    for rec in &window.records {
        let mut row = vec![rec.t.to_string()];
        row.extend(input_names.iter().map(|n| rec.inputs.get(*n).unwrap_or(&missing).clone()));
        for name in &output_names {
            row.push(rec.dut_outputs.get(*name).unwrap_or(&missing).clone());
            row.push(rec.expected_outputs.get(*name).unwrap_or(&missing).clone());
        }
        row.push(if rec.matched { "MATCH" } else { "MISMATCH" }.to_string());
        rows.push(row);
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain(std::iter::once(header[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();

    let mut out = String::new();
    let _ = writeln!(
        out,
        "Waveform window: check events {}..={} (first mismatch at {})",
        window.lower_bound(),
        window.t_m,
        window.t_m
    );
    push_row(&mut out, &header, &widths, None);
    let last = rows.len().saturating_sub(1);
    for (i, row) in rows.iter().enumerate() {
        push_row(&mut out, row, &widths, (i == last).then_some("<- first mismatch"));
    }
    out
}

fn collect_names<'a>(
    window: &'a WaveWindow,
    pick: impl Fn(&'a CheckRecord) -> &'a super::SignalMap,
) -> Vec<&'a String> {
    let mut names: Vec<&String> = window.records.iter().flat_map(|r| pick(r).keys()).collect();
    names.sort();
    names.dedup();
    names
}

fn push_row(out: &mut String, cells: &[String], widths: &[usize], note: Option<&str>) {
    let line = cells
        .iter()
        .zip(widths)
        .map(|(c, w)| format!("{c:<w$}"))
        .collect::<Vec<_>>()
        .join(" | ");
    match note {
        Some(n) => {
            let _ = writeln!(out, "{line}  {n}");
        }
        None => {
            let _ = writeln!(out, "{}", line.trim_end());
        }
    }
}
