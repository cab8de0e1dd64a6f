#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rtlforge_core::bench::Problem;
use rtlforge_core::sim_bridge::{IcarusSimulator, SourceKind, VerilogSource};

pub const FIXTURES: [&str; 3] = ["mux", "dff", "counter"];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn read(name: &str, file: &str) -> String {
    let path = fixture_dir().join(name).join(file);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn problem(name: &str) -> Problem {
    Problem {
        golden_testbench: Some(read(name, "golden_tb.v")),
        reference_solution: Some(read(name, "ref.v")),
        module_interface: Some(read(name, "interface.v")),
        ..Problem::new(name, read(name, "spec.txt").trim())
    }
}

pub fn dut(name: &str, file: &str) -> VerilogSource {
    VerilogSource::new(SourceKind::Dut, "top_module", read(name, file)).unwrap()
}

pub fn testbench(name: &str) -> VerilogSource {
    VerilogSource::new(SourceKind::Testbench, "tb", read(name, "tb.v")).unwrap()
}

pub fn fenced(code: &str) -> String {
    format!("```verilog\n{}\n```\n", code.trim_end())
}

/// The real toolchain, or `None` (with a note) when it is not installed.
pub fn toolchain() -> Option<IcarusSimulator> {
    if IcarusSimulator::available() {
        Some(IcarusSimulator::new(&Default::default()).unwrap())
    } else {
        eprintln!("iverilog/vvp not found on PATH; skipping toolchain checks");
        None
    }
}
