//! The five-step pipeline: testbench generation, initial RTL, judging with
//! testbench regeneration, high-temperature sampling with top-K selection,
//! and checkpoint-driven debug rounds.

mod events;
mod select;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::info;

pub use events::EventLog;
pub use select::{select_top_k, should_terminate, update_selection, SelectionError, StopReason};

use crate::agents::{
    AgentError, AgentSettings, Agents, Conversation, Evidence, PromptTemplates, Role, RoleParams, TemplateError,
    Verdict,
};
use crate::bench::Problem;
use crate::checkpoint::{earliest_mismatch, extract_window, parse_trace, score, CheckTrace, Score};
use crate::llm_gateway::{Gateway, SamplingParams};
use crate::sim_bridge::{SimError, SimStatus, Simulator, VerilogSource, WorkdirAllocator};
use crate::sync::parallel_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TempProfile {
    #[default]
    High,
    Low,
}

impl TempProfile {
    /// Parameters for drawing a pool of `n`; the low profile always draws
    /// a single candidate.
    pub fn sampling(self, n: u32) -> SamplingParams {
        match self {
            TempProfile::High => SamplingParams::high_temperature(n),
            TempProfile::Low => SamplingParams::low_temperature(),
        }
    }
}

impl std::str::FromStr for TempProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "high" => Ok(TempProfile::High),
            "low" => Ok(TempProfile::Low),
            other => Err(format!("unknown temperature profile {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentMode {
    /// One history per role.
    #[default]
    Multi,
    /// All roles share one history.
    Single,
    /// One-shot RTL generation, no testbench and no feedback loop.
    Vanilla,
}

impl std::str::FromStr for AgentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multi" => Ok(AgentMode::Multi),
            "single" => Ok(AgentMode::Single),
            "vanilla" => Ok(AgentMode::Vanilla),
            other => Err(format!("unknown agent mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Candidates drawn in step 4.
    #[serde(alias = "c")]
    pub pool_size: u32,
    /// Candidates kept for debugging.
    #[serde(alias = "K")]
    pub top_k: u32,
    pub max_debug_rounds: u32,
    /// Check events shown before the first mismatch.
    #[serde(alias = "L_W")]
    pub window_len: u64,
    pub syntax_fix_cap: u32,
    pub temp_profile: TempProfile,
    pub agent_mode: AgentMode,
    pub max_tb_regens: u32,
    pub sim_timeout_secs: f64,
    /// Sampling for each role's ordinary calls.
    pub role_params: RoleParams,
    /// Testbench text beyond this many bytes is cut from RTL prompts.
    pub tb_prompt_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pool_size: 20,
            top_k: 3,
            max_debug_rounds: 10,
            window_len: crate::checkpoint::DEFAULT_WINDOW_LEN,
            syntax_fix_cap: crate::agents::DEFAULT_SYNTAX_FIX_CAP,
            temp_profile: TempProfile::High,
            agent_mode: AgentMode::Multi,
            max_tb_regens: 2,
            sim_timeout_secs: crate::sim_bridge::DEFAULT_SIM_TIMEOUT.as_secs_f64(),
            role_params: RoleParams::default(),
            tb_prompt_limit: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.pool_size == 0 || self.pool_size > crate::llm_gateway::MAX_COMPLETIONS {
            return Err(format!(
                "pool_size {} outside [1, {}]",
                self.pool_size,
                crate::llm_gateway::MAX_COMPLETIONS
            ));
        }
        if self.top_k == 0 || self.top_k > self.pool_size {
            return Err(format!("top_k {} outside [1, pool_size={}]", self.top_k, self.pool_size));
        }
        if self.window_len == 0 {
            return Err("window_len must be at least 1".into());
        }
        if !(self.sim_timeout_secs > 0.0 && self.sim_timeout_secs.is_finite()) {
            return Err(format!("sim_timeout_secs {} must be positive", self.sim_timeout_secs));
        }
        self.sampling().validate()?;
        for role in Role::ALL {
            self.role_params
                .get(role)
                .validate()
                .map_err(|e| format!("{} params: {e}", role.as_str()))?;
        }
        Ok(())
    }

    /// Step-4 sampling parameters under the configured profile.
    pub fn sampling(&self) -> SamplingParams {
        self.temp_profile.sampling(self.pool_size)
    }

    /// Candidates kept per round, never more than are drawn.
    pub fn effective_top_k(&self) -> u32 {
        self.top_k.min(self.sampling().n_completions)
    }

    pub fn sim_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.sim_timeout_secs)
    }

    /// Upper bound on LLM requests in one run:
    /// `(R+1)(2(1+s)+1) + c + c*s + D*K*(1+s)`.
    pub fn llm_call_bound(&self) -> u64 {
        if self.agent_mode == AgentMode::Vanilla {
            return 1;
        }
        let s = self.syntax_fix_cap as u64;
        let r = self.max_tb_regens as u64;
        let c = self.sampling().n_completions as u64;
        let k = self.effective_top_k() as u64;
        let d = self.max_debug_rounds as u64;
        (r + 1) * (2 * (1 + s) + 1) + c + c * s + d * k * (1 + s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: u32,
    pub source: VerilogSource,
    pub score: Score,
    pub trace: Option<CheckTrace>,
    /// Parent candidate for debug trials.
    pub lineage: Option<u32>,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidatePool {
    pub all: Vec<Candidate>,
    pub selected: Vec<u32>,
    pub round: u32,
}

impl CandidatePool {
    pub fn new(all: Vec<Candidate>) -> Self {
        CandidatePool {
            all,
            selected: Vec::new(),
            round: 0,
        }
    }

    pub fn get(&self, id: u32) -> Option<&Candidate> {
        self.all.iter().find(|c| c.id == id)
    }

    pub fn selected_candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.selected.iter().filter_map(|id| self.get(*id))
    }

    /// The sampled ancestor a debug trial descends from.
    pub fn lineage_root(&self, id: u32) -> u32 {
        let mut cur = id;
        while let Some(parent) = self.get(cur).and_then(|c| c.lineage) {
            cur = parent;
        }
        cur
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Solved,
    BudgetExhausted,
    TbRegenExhausted,
    /// Vanilla mode: code was produced but never checked.
    Generated,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: u32,
    pub score: f64,
    pub lineage: Option<u32>,
}

/// Selected candidates after one round (round 0 is the initial selection).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundScores {
    pub round: u32,
    pub selected: Vec<ScoredId>,
}

impl RoundScores {
    pub fn best(&self) -> f64 {
        self.selected.iter().map(|s| s.score).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub best: Option<Candidate>,
    /// Score of the step-2 RTL of the last testbench pass.
    pub initial_score: Option<f64>,
    pub score_history: Vec<RoundScores>,
    pub testbench: Option<VerilogSource>,
    pub transcript_dir: PathBuf,
    pub llm_calls: u64,
    pub tb_regens: u32,
    pub rounds: u32,
    pub error: Option<String>,
}

impl RunOutcome {
    /// Best selected score per round, or the initial score when the run
    /// never reached sampling.
    pub fn engine_score_history(&self) -> Vec<f64> {
        if self.score_history.is_empty() {
            self.initial_score.into_iter().collect()
        } else {
            self.score_history.iter().map(RoundScores::best).collect()
        }
    }
}

/// Shared services for running pipelines.
pub struct Engine<'a> {
    pub gateway: &'a Gateway,
    pub simulator: &'a dyn Simulator,
    pub templates: &'a PromptTemplates,
    pub model_id: String,
    /// Sample with `n` single-completion requests.
    pub fanout: bool,
    pub max_parallel: usize,
    /// Delete attempt directories of successful simulations.
    pub scrub: bool,
    pub cancel: Option<&'a AtomicBool>,
}

impl<'a> Engine<'a> {
    pub fn new(gateway: &'a Gateway, simulator: &'a dyn Simulator, templates: &'a PromptTemplates) -> Self {
        Engine {
            gateway,
            simulator,
            templates,
            model_id: "default".into(),
            fanout: false,
            max_parallel: 8,
            scrub: false,
            cancel: None,
        }
    }
}

/// Where one run writes, and how its requests are namespaced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub transcript_dir: PathBuf,
    pub work_root: PathBuf,
    /// Prefix for every LLM request tag.
    pub tag_prefix: String,
    /// Directory name for this run under `work_root`.
    pub label: String,
}

impl RunPaths {
    /// `<out>/transcript` and `<out>/work`, no tag prefix.
    pub fn under(out: &Path, label: &str) -> Self {
        RunPaths {
            transcript_dir: out.join("transcript"),
            work_root: out.join("work"),
            tag_prefix: String::new(),
            label: label.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("transcript: {0}")]
    Io(#[from] std::io::Error),
    #[error("interrupted")]
    Interrupted,
}

/// Runs all five steps for `problem`. Failures come back as
/// `status = error` with whatever was produced up to that point.
pub fn run_pipeline(engine: &Engine<'_>, problem: &Problem, config: &RunConfig, paths: &RunPaths) -> RunOutcome {
    let events = std::fs::create_dir_all(&paths.transcript_dir)
        .and_then(|_| EventLog::create(&paths.transcript_dir.join("events.jsonl")));
    let (events, early_error) = match events {
        Ok(log) => (log, None),
        Err(e) => (EventLog::in_memory(), Some(PipelineError::Io(e))),
    };
    let workdirs = WorkdirAllocator::new(&paths.work_root).with_scrub(engine.scrub);
    let settings = AgentSettings {
        model_id: engine.model_id.clone(),
        syntax_fix_cap: config.syntax_fix_cap,
        role_params: config.role_params.clone(),
        fanout: engine.fanout,
        window_len: config.window_len,
        tb_prompt_limit: config.tb_prompt_limit,
        max_parallel: engine.max_parallel,
    };
    let dut_top = problem.dut_top();
    let agents = Agents::new(engine.gateway, engine.simulator, &workdirs, engine.templates, settings)
        .with_problem_id(paths.label.clone())
        .with_tag_prefix(paths.tag_prefix.clone())
        .with_dut_top(dut_top);
    let mut run = Run {
        engine,
        problem,
        config,
        paths,
        events,
        agents,
        workdirs: &workdirs,
        spec: problem.full_spec(),
        next_id: 0,
        cache: Mutex::new(HashMap::new()),
        testbench: None,
        best: None,
        initial_score: None,
        history: Vec::new(),
        tb_regens: 0,
        rounds: 0,
    };
    let result = match early_error {
        Some(e) => Err(e),
        None => config.validate().map_err(PipelineError::Config).and_then(|_| run.execute()),
    };
    match result {
        Ok(status) => run.finish(status, None),
        Err(e) => {
            let msg = e.to_string();
            run.events.emit("error", json!({ "message": msg }));
            run.finish(RunStatus::Error, Some(msg))
        }
    }
}

#[derive(Debug, Clone)]
struct Evaluation {
    score: Score,
    trace: Option<CheckTrace>,
    status: SimStatus,
    detail: String,
}

impl Evaluation {
    fn unsimulatable(detail: impl Into<String>) -> Self {
        Evaluation {
            score: Score::UNSIMULATABLE,
            trace: None,
            status: SimStatus::CompileFailed,
            detail: detail.into(),
        }
    }
}

enum Conversations {
    Multi {
        tb: Conversation,
        rtl: Conversation,
        judge: Conversation,
        debug: BTreeMap<u32, Mutex<Conversation>>,
    },
    Single(Mutex<Conversation>),
}

impl Conversations {
    fn new(mode: AgentMode, templates: &PromptTemplates) -> Result<Self, TemplateError> {
        Ok(match mode {
            AgentMode::Single => Conversations::Single(Mutex::new(Conversation::shared("shared", templates)?)),
            _ => Conversations::Multi {
                tb: Conversation::for_role("testbench_gen", Role::TestbenchGen, templates)?,
                rtl: Conversation::for_role("rtl_gen", Role::RtlGen, templates)?,
                judge: Conversation::for_role("judge", Role::Judge, templates)?,
                debug: BTreeMap::new(),
            },
        })
    }

    fn role(&mut self, role: Role) -> &mut Conversation {
        match self {
            Conversations::Single(c) => c.get_mut().unwrap_or_else(|e| e.into_inner()),
            Conversations::Multi { tb, rtl, judge, .. } => match role {
                Role::TestbenchGen => tb,
                Role::RtlGen => rtl,
                Role::Judge | Role::Debug => judge,
            },
        }
    }

    fn ensure_debug(&mut self, root: u32, templates: &PromptTemplates) -> Result<(), TemplateError> {
        if let Conversations::Multi { debug, .. } = self {
            if !debug.contains_key(&root) {
                let c = Conversation::for_role(format!("debug/c{root}"), Role::Debug, templates)?;
                debug.insert(root, Mutex::new(c));
            }
        }
        Ok(())
    }

    fn debug(&self, root: u32) -> &Mutex<Conversation> {
        match self {
            Conversations::Single(c) => c,
            Conversations::Multi { debug, .. } => &debug[&root],
        }
    }

    fn is_shared(&self) -> bool {
        matches!(self, Conversations::Single(_))
    }
}

struct Run<'r> {
    engine: &'r Engine<'r>,
    problem: &'r Problem,
    config: &'r RunConfig,
    paths: &'r RunPaths,
    events: EventLog,
    agents: Agents<'r>,
    workdirs: &'r WorkdirAllocator,
    spec: String,
    next_id: u32,
    /// Evaluations against the current testbench, by normalised source.
    cache: Mutex<HashMap<String, Evaluation>>,
    testbench: Option<VerilogSource>,
    best: Option<Candidate>,
    initial_score: Option<f64>,
    history: Vec<RoundScores>,
    tb_regens: u32,
    rounds: u32,
}

impl<'r> Run<'r> {
    fn execute(&mut self) -> Result<RunStatus, PipelineError> {
        self.events.emit(
            "run_start",
            json!({
                "task_id": self.problem.task_id,
                "label": self.paths.label,
                "dut_top": self.agents.dut_top(),
                "config": self.config,
                "llm_call_bound": self.config.llm_call_bound(),
            }),
        );
        if self.config.agent_mode == AgentMode::Vanilla {
            return self.vanilla();
        }
        let mut convs = Conversations::new(self.config.agent_mode, self.engine.templates)?;
        for role in [Role::TestbenchGen, Role::RtlGen, Role::Judge] {
            let id = convs.role(role).id.clone();
            self.events
                .emit("conversation", json!({ "role": role.as_str(), "conversation": id }));
        }

        // steps 1-3
        let mut pass = 0u32;
        let (tb, initial) = loop {
            self.check_cancel()?;
            let conv = convs.role(Role::TestbenchGen);
            self.agent_event("generate_testbench", &conv.id, pass);
            let tb = self.agents.generate_testbench(
                &self.spec,
                self.problem.golden_testbench.as_deref(),
                conv,
                pass,
            )?;
            self.save(&format!("tb_pass{pass}.v"), tb.code())?;
            self.events.emit("testbench", json!({ "pass": pass, "top": tb.top_module() }));
            self.testbench = Some(tb.clone());

            let conv = convs.role(Role::RtlGen);
            self.agent_event("generate_rtl", &conv.id, pass);
            let rtl = match self.agents.generate_rtl(&self.spec, &tb, conv, pass) {
                Ok(src) => src,
                Err(AgentError::SyntaxUnfixable { attempts, .. }) => {
                    self.events
                        .emit("initial_rtl_unfixable", json!({ "pass": pass, "attempts": attempts }));
                    break (tb, None);
                }
                Err(e) => return Err(e.into()),
            };
            self.save(&format!("rtl_pass{pass}.v"), rtl.code())?;
            let eval = self.evaluate(&rtl, &tb, &format!("init{pass}"))?;
            let cand = self.candidate(rtl, &eval, None, 0);
            self.initial_score = Some(cand.score.value());
            self.events.emit(
                "initial_rtl",
                json!({ "pass": pass, "id": cand.id, "score": cand.score.value(), "status": eval.status }),
            );
            self.offer_best(&cand);
            if cand.score.is_perfect() {
                return Ok(RunStatus::Solved);
            }

            self.check_cancel()?;
            let evidence = match &eval.trace {
                Some(t) => Evidence::Trace(t),
                None => Evidence::Failure {
                    status: eval.status,
                    detail: &eval.detail,
                },
            };
            let conv = convs.role(Role::Judge);
            self.agent_event("judge", &conv.id, pass);
            let verdict = self.agents.judge(&self.spec, &tb, evidence, conv, pass)?;
            self.events.emit(
                "verdict",
                json!({ "pass": pass, "decision": verdict.decision, "rationale": verdict.rationale }),
            );
            if verdict.decision == Verdict::TestbenchFaulty {
                if pass >= self.config.max_tb_regens {
                    self.events.emit("tb_regen_exhausted", json!({ "regens": pass }));
                    return Ok(RunStatus::TbRegenExhausted);
                }
                pass += 1;
                self.tb_regens = pass;
                self.cache.lock().unwrap_or_else(|e| e.into_inner()).clear();
                self.best = None;
                self.initial_score = None;
                self.events.emit("pool_invalidated", json!({ "pass": pass }));
                continue;
            }
            break (tb, Some(cand));
        };

        // step 4
        self.check_cancel()?;
        let params = self.config.sampling();
        let rtl_id = convs.role(Role::RtlGen).id.clone();
        self.agent_event("sample_rtl_candidates", &rtl_id, pass);
        let samples = self.agents.sample_rtl_candidates(
            &self.spec,
            &tb,
            params.n_completions,
            &params,
            convs.role(Role::RtlGen),
            pass,
        )?;
        let sources: Vec<(VerilogSource, bool)> = samples.into_iter().map(|s| (s.source, s.simulatable)).collect();
        let evals = self.evaluate_many(&sources, &tb, |i| format!("s{i}"))?;
        let mut pool = CandidatePool::new(Vec::with_capacity(sources.len()));
        for ((src, _), eval) in sources.into_iter().zip(evals) {
            let cand = self.candidate(src, &eval, None, 0);
            self.save(&format!("candidates/c{}.v", cand.id), cand.source.code())?;
            pool.all.push(cand);
        }
        self.events.emit(
            "sampled",
            json!({
                "temperature": params.temperature,
                "top_p": params.top_p,
                "candidates": pool.all.iter().map(|c| json!({
                    "id": c.id, "score": c.score.value(), "simulatable": c.score.simulatable(),
                })).collect::<Vec<_>>(),
            }),
        );
        pool.selected = select_top_k(&pool.all, self.config.effective_top_k() as usize);
        self.record_round(&pool);
        if let Some(c) = initial {
            self.offer_best(&c);
        }

        // step 5
        let reason = loop {
            if let Some(reason) = should_terminate(&pool, self.config) {
                break reason;
            }
            self.check_cancel()?;
            pool.round += 1;
            self.debug_round(&mut pool, &mut convs, &tb)?;
            self.rounds = pool.round;
            self.record_round(&pool);
        };
        self.events.emit("terminate", json!({ "reason": reason, "round": pool.round }));
        Ok(match reason {
            StopReason::Solved => RunStatus::Solved,
            StopReason::Budget => RunStatus::BudgetExhausted,
        })
    }

    fn vanilla(&mut self) -> Result<RunStatus, PipelineError> {
        let mut conv = Conversation::for_role("rtl_gen", Role::RtlGen, self.engine.templates)?;
        self.agent_event("generate_rtl_vanilla", &conv.id, 0);
        let src = self.agents.generate_rtl_vanilla(&self.spec, &mut conv)?;
        let cand = self.candidate(src, &Evaluation::unsimulatable("not simulated"), None, 0);
        self.best = Some(cand);
        Ok(RunStatus::Generated)
    }

    fn debug_round(
        &mut self,
        pool: &mut CandidatePool,
        convs: &mut Conversations,
        tb: &VerilogSource,
    ) -> Result<(), PipelineError> {
        let round = pool.round;
        let selected: Vec<Candidate> = pool.selected_candidates().cloned().collect();
        let roots: Vec<u32> = selected.iter().map(|c| pool.lineage_root(c.id)).collect();
        for root in &roots {
            convs.ensure_debug(*root, self.engine.templates)?;
        }
        let width = if convs.is_shared() { 1 } else { self.engine.max_parallel };
        let this = &*self;
        let convs_ref = &*convs;
        let results = parallel_map(selected.len(), width, |j| {
            this.trial_for(&selected[j], roots[j], round, tb, convs_ref.debug(roots[j]))
        });

        let mut next = Vec::with_capacity(selected.len());
        for (j, result) in results.into_iter().enumerate() {
            let orig = &selected[j];
            let Some((src, eval, conv_id)) = result? else {
                self.events.emit(
                    "debug_skipped",
                    json!({ "round": round, "lineage": roots[j], "candidate": orig.id }),
                );
                next.push(orig.id);
                continue;
            };
            let trial = self.candidate(src, &eval, Some(orig.id), round);
            self.save(&format!("candidates/c{}.v", trial.id), trial.source.code())?;
            let kept = update_selection(std::slice::from_ref(orig), std::slice::from_ref(&trial))?.remove(0);
            self.events.emit(
                "debug_trial",
                json!({
                    "round": round,
                    "lineage": roots[j],
                    "conversation": conv_id,
                    "parent": orig.id,
                    "parent_score": orig.score.value(),
                    "trial": trial.id,
                    "trial_score": trial.score.value(),
                    "kept": kept.id,
                }),
            );
            next.push(kept.id);
            pool.all.push(trial);
        }
        pool.selected = next;
        Ok(())
    }

    /// One debug trial; `None` when the candidate has nothing to debug from
    /// or the reply held no code.
    fn trial_for(
        &self,
        cand: &Candidate,
        root: u32,
        round: u32,
        tb: &VerilogSource,
        conv: &Mutex<Conversation>,
    ) -> Result<Option<(VerilogSource, Evaluation, String)>, PipelineError> {
        let Some(trace) = &cand.trace else {
            return Ok(None);
        };
        let Some(t_m) = earliest_mismatch(trace) else {
            return Ok(None);
        };
        let window = extract_window(trace, t_m, self.config.window_len).expect("t_m is a mismatch in trace");
        let mut conv = conv.lock().unwrap_or_else(|e| e.into_inner());
        let thread = format!("c{root}");
        let conv_id = conv.id.clone();
        match self
            .agents
            .debug_trial(&self.spec, &cand.source, &window, tb, &mut conv, round, &thread)
        {
            Ok(src) => {
                drop(conv);
                let eval = self.evaluate(&src, tb, &format!("{thread}_r{round}"))?;
                Ok(Some((src, eval, conv_id)))
            }
            Err(AgentError::SyntaxUnfixable { last, attempts, .. }) => Ok(Some((
                last,
                Evaluation::unsimulatable(format!("syntax errors remain after {attempts} fix attempts")),
                conv_id,
            ))),
            Err(AgentError::NoCodeBlock { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn candidate(&mut self, source: VerilogSource, eval: &Evaluation, lineage: Option<u32>, round: u32) -> Candidate {
        let id = self.next_id;
        self.next_id += 1;
        Candidate {
            id,
            source,
            score: eval.score,
            trace: eval.trace.clone(),
            lineage,
            round,
        }
    }

    /// Simulates each simulatable source once per distinct normalised text,
    /// in parallel.
    fn evaluate_many(
        &self,
        sources: &[(VerilogSource, bool)],
        tb: &VerilogSource,
        label: impl Fn(usize) -> String + Sync,
    ) -> Result<Vec<Evaluation>, PipelineError> {
        let mut first_of: HashMap<String, usize> = HashMap::new();
        let mut unique = Vec::new();
        for (i, (src, ok)) in sources.iter().enumerate() {
            if *ok && !first_of.contains_key(&src.normalized_code()) {
                first_of.insert(src.normalized_code(), i);
                unique.push(i);
            }
        }
        let results = parallel_map(unique.len(), self.engine.max_parallel, |u| {
            let i = unique[u];
            self.evaluate(&sources[i].0, tb, &label(i))
        });
        for r in results {
            r?;
        }
        sources
            .iter()
            .map(|(src, ok)| {
                if *ok {
                    self.evaluate(src, tb, "cached").map_err(Into::into)
                } else {
                    Ok(Evaluation::unsimulatable("syntax errors remain"))
                }
            })
            .collect()
    }

    fn evaluate(&self, src: &VerilogSource, tb: &VerilogSource, label: &str) -> Result<Evaluation, SimError> {
        let key = src.normalized_code();
        if let Some(hit) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let dir = self.workdirs.next(&self.paths.label, label);
        let run = self
            .engine
            .simulator
            .run_sim(&[src.clone(), tb.clone()], &dir, self.config.sim_timeout())?;
        let eval = match run.status {
            SimStatus::Ok => match parse_trace(&run.stdout).and_then(|t| score(&t).map(|s| (t, s))) {
                Ok((trace, s)) => Evaluation {
                    score: s,
                    trace: Some(trace),
                    status: SimStatus::Ok,
                    detail: String::new(),
                },
                Err(e) => Evaluation {
                    score: Score::UNSIMULATABLE,
                    trace: None,
                    status: SimStatus::Ok,
                    detail: format!("{e}\n{}", tail(&run.stdout, 40)),
                },
            },
            status => Evaluation {
                score: Score::UNSIMULATABLE,
                trace: None,
                status,
                detail: run
                    .diagnostics
                    .iter()
                    .map(|d| d.to_string())
                    .chain(std::iter::once(tail(&run.stdout, 20)))
                    .filter(|l| !l.is_empty())
                    .collect::<Vec<_>>()
                    .join("\n"),
            },
        };
        self.workdirs.finish(&dir, eval.score.simulatable());
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, eval.clone());
        Ok(eval)
    }

    fn record_round(&mut self, pool: &CandidatePool) {
        let entry = RoundScores {
            round: pool.round,
            selected: pool
                .selected_candidates()
                .map(|c| ScoredId {
                    id: c.id,
                    score: c.score.value(),
                    lineage: c.lineage,
                })
                .collect(),
        };
        self.events.emit("selection", json!(entry));
        for c in pool.selected_candidates() {
            self.offer_best(c);
        }
        self.history.push(entry);
    }

    /// Keeps the higher score; the earlier candidate wins ties.
    fn offer_best(&mut self, cand: &Candidate) {
        let better = match &self.best {
            None => true,
            Some(b) => cand.score.value() > b.score.value(),
        };
        if better {
            self.best = Some(cand.clone());
        }
    }

    fn agent_event(&self, op: &str, conversation: &str, pass: u32) {
        self.events
            .emit("agent_call", json!({ "op": op, "conversation": conversation, "pass": pass }));
    }

    fn check_cancel(&self) -> Result<(), PipelineError> {
        match self.engine.cancel {
            Some(flag) if flag.load(Ordering::SeqCst) => Err(PipelineError::Interrupted),
            _ => Ok(()),
        }
    }

    fn save(&self, name: &str, text: &str) -> Result<(), PipelineError> {
        let path = self.paths.transcript_dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    fn finish(self, status: RunStatus, error: Option<String>) -> RunOutcome {
        if let Some(best) = &self.best {
            let _ = self.save("best.v", best.source.code());
        }
        self.events.emit(
            "outcome",
            json!({
                "status": status,
                "best": self.best.as_ref().map(|b| b.id),
                "best_score": self.best.as_ref().map(|b| b.score.value()),
                "llm_calls": self.agents.llm_calls(),
                "tb_regens": self.tb_regens,
                "rounds": self.rounds,
            }),
        );
        info!(task = %self.problem.task_id, ?status, calls = self.agents.llm_calls(), "run finished");
        RunOutcome {
            status,
            best: self.best,
            initial_score: self.initial_score,
            score_history: self.history,
            testbench: self.testbench,
            transcript_dir: self.paths.transcript_dir.clone(),
            llm_calls: self.agents.llm_calls(),
            tb_regens: self.tb_regens,
            rounds: self.rounds,
            error,
        }
    }
}

fn tail(text: &str, lines: usize) -> String {
    let all: Vec<&str> = text.lines().collect();
    all[all.len().saturating_sub(lines)..].join("\n")
}
