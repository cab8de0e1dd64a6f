mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use config::{BackendKind, SimBackendKind};
use rtlforge_core::bench::DatasetFormat;

/// Multi-agent RTL generation with checkpoint-driven debugging.
#[derive(Parser, Debug)]
#[command(name = "rtlforge", version)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log filter, e.g. `info` or `rtlforge_core=debug`. RUST_LOG also works.
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the pipeline on one specification.
    ///
    /// Exit status: 0 solved, 2 not solved within budget, 1 error.
    Generate(GenerateArgs),
    /// Run every problem of a dataset several times and write pass@1 reports.
    ///
    /// Exit status: 0 when every problem was attempted, 1 otherwise.
    Bench(BenchArgs),
    /// Parse simulator output and show the score and first-mismatch window.
    InspectTrace(InspectArgs),
    /// Check a cassette file for structural problems.
    ReplayVerify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Natural-language specification.
    #[arg(long)]
    spec: PathBuf,
    /// Port declaration stub appended to the specification.
    #[arg(long)]
    interface: Option<PathBuf>,
    /// Golden testbench used for the testbench prompt and a final check.
    #[arg(long)]
    golden_tb: Option<PathBuf>,
    /// Reference module the golden testbench instantiates.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Task id used in request tags; defaults to the spec file stem.
    #[arg(long)]
    task_id: Option<String>,
    #[command(flatten)]
    shared: SharedFlags,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Problem set: a JSONL file or a dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    dataset_format: Option<DatasetFormat>,
    /// Independent runs per problem (n).
    #[arg(long)]
    runs: Option<u32>,
    /// Pipelines running at once.
    #[arg(long)]
    workers: Option<usize>,
    /// Regex for the golden testbench's mismatch banner; group 1 is the
    /// mismatch count.
    #[arg(long)]
    golden_banner: Option<String>,
    #[command(flatten)]
    shared: SharedFlags,
}

fn parse_format(s: &str) -> Result<DatasetFormat, String> {
    s.parse()
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Captured simulator stdout.
    file: PathBuf,
    /// Check events shown before the first mismatch.
    #[arg(long, default_value_t = 8)]
    window_len: u64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    cassette: PathBuf,
    /// The file is a simulation cassette rather than an LLM cassette.
    #[arg(long)]
    sim: bool,
}

/// Flags shared by `generate` and `bench`.
#[derive(Args, Debug)]
struct SharedFlags {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// live: call the endpoint; record: call it and save replies; replay:
    /// answer from the cassette only.
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// LLM cassette file for record and replay.
    #[arg(long)]
    cassette: Option<PathBuf>,
    #[arg(long, value_enum)]
    sim_backend: Option<SimBackendKind>,
    /// Simulation cassette file.
    #[arg(long)]
    sim_cassette: Option<PathBuf>,
    /// Chat-completions base URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    auth_env: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Concurrent LLM requests and simulations per pipeline.
    #[arg(long)]
    max_parallel: Option<usize>,
    /// Sample candidates with one request per candidate.
    #[arg(long)]
    fanout: bool,
    /// Directory of prompt template overrides (`<role>/<task>.txt`).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Delete the working directories of successful simulations.
    #[arg(long)]
    scrub_workdirs: bool,
    #[arg(long)]
    iverilog: Option<PathBuf>,
    #[arg(long)]
    vvp: Option<PathBuf>,

    /// Candidates sampled per pool (c).
    #[arg(long)]
    pool_size: Option<u32>,
    /// Candidates kept for debugging (K).
    #[arg(long)]
    top_k: Option<u32>,
    #[arg(long)]
    max_debug_rounds: Option<u32>,
    /// Check events before the first mismatch shown to the debug agent (L_W).
    #[arg(long)]
    window_len: Option<u64>,
    /// Fix attempts per generated source (s).
    #[arg(long)]
    syntax_fix_cap: Option<u32>,
    /// high: T=0.85, top_p=0.95, n=pool size; low: T=0, top_p=0.01, n=1.
    #[arg(long, value_parser = ["high", "low"])]
    temp_profile: Option<String>,
    /// multi: one history per role; single: one shared history; vanilla:
    /// one-shot generation.
    #[arg(long, value_parser = ["multi", "single", "vanilla"])]
    mode: Option<String>,
    /// Testbench regenerations allowed after testbench_faulty verdicts.
    #[arg(long)]
    max_tb_regens: Option<u32>,
    #[arg(long)]
    sim_timeout_secs: Option<f64>,
    /// Cut testbenches longer than this many bytes from RTL prompts.
    #[arg(long)]
    tb_prompt_limit: Option<usize>,
}

impl SharedFlags {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            if !v.is_null() {
                m.insert(k.to_string(), v);
            }
        };
        put("out", json!(self.out));
        put("backend", json!(self.backend));
        put("cassette", json!(self.cassette));
        put("sim_backend", json!(self.sim_backend));
        put("sim_cassette", json!(self.sim_cassette));
        put("endpoint", json!(self.endpoint));
        put("auth_env", json!(self.auth_env));
        put("model", json!(self.model));
        put("max_parallel", json!(self.max_parallel));
        if self.fanout {
            put("fanout", json!(true));
        }
        put("prompts_dir", json!(self.prompts));
        if self.scrub_workdirs {
            put("scrub_workdirs", json!(true));
        }
        put("pool_size", json!(self.pool_size));
        put("top_k", json!(self.top_k));
        put("max_debug_rounds", json!(self.max_debug_rounds));
        put("window_len", json!(self.window_len));
        put("syntax_fix_cap", json!(self.syntax_fix_cap));
        put("temp_profile", json!(self.temp_profile));
        put("agent_mode", json!(self.mode));
        put("max_tb_regens", json!(self.max_tb_regens));
        put("sim_timeout_secs", json!(self.sim_timeout_secs));
        put("tb_prompt_limit", json!(self.tb_prompt_limit));
        m
    }

    fn toolchain_overrides(&self, cfg: &mut config::CliConfig) {
        if let Some(p) = &self.iverilog {
            cfg.toolchain.compiler_path = Some(p.clone());
        }
        if let Some(p) = &self.vvp {
            cfg.toolchain.vvp_path = Some(p.clone());
        }
    }
}

fn load_config(path: Option<&PathBuf>, flags: Map<String, Value>) -> anyhow::Result<config::CliConfig> {
    let file = match path {
        Some(p) => Some((p.as_path(), config::read_file(p)?)),
        None => None,
    };
    config::merge(file, flags)
}

fn init_logging(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter));
    let color = std::env::var_os("NO_COLOR").map_or(true, |v| v.is_empty());
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_ansi(color)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.log);
    commands::install_interrupt_handler();

    let result = match cli.command {
        Command::Generate(args) => {
            load_config(cli.config.as_ref(), args.shared.overrides()).and_then(|mut cfg| {
                args.shared.toolchain_overrides(&mut cfg);
                commands::generate(
                    &cfg,
                    &commands::GenerateInput {
                        spec: args.spec,
                        interface: args.interface,
                        golden_tb: args.golden_tb,
                        reference: args.reference,
                        task_id: args.task_id,
                    },
                )
            })
        }
        Command::Bench(args) => {
            let mut flags = args.shared.overrides();
            if let Some(d) = &args.dataset {
                flags.insert("dataset".into(), json!(d));
            }
            if let Some(f) = args.dataset_format {
                flags.insert("dataset_format".into(), json!(f));
            }
            if let Some(n) = args.runs {
                flags.insert("runs".into(), json!(n));
            }
            if let Some(n) = args.workers {
                flags.insert("workers".into(), json!(n));
            }
            if let Some(b) = &args.golden_banner {
                flags.insert("golden_banner".into(), json!(b));
            }
            load_config(cli.config.as_ref(), flags).and_then(|mut cfg| {
                args.shared.toolchain_overrides(&mut cfg);
                commands::bench(&cfg)
            })
        }
        Command::InspectTrace(args) => commands::inspect_trace(&args.file, args.window_len),
        Command::ReplayVerify(args) => commands::replay_verify(&args.cassette, args.sim),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
