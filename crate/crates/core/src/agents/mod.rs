//! The four agent roles: testbench generation, RTL generation, judging and
//! debugging. Every operation goes through the [`Gateway`] and, where code
//! is produced, through the bounded syntax-fix loop.

mod extract;
mod templates;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

pub use extract::{last_code_block, parse_verdict, JudgeVerdict, Verdict};
pub use templates::{PromptTemplates, TemplateError};

use crate::checkpoint::{earliest_mismatch, extract_window, render_window, CheckTrace, WaveWindow};
use crate::llm_gateway::{ChatMessage, Gateway, GatewayError, LlmRequest, SamplingParams};
use crate::sim_bridge::{
    detect_top_module, Diagnostic, SimError, SimStatus, Simulator, SourceKind, VerilogSource, WorkdirAllocator,
};
use crate::sync::parallel_map;

pub const DEFAULT_SYNTAX_FIX_CAP: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TestbenchGen,
    RtlGen,
    Judge,
    Debug,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::TestbenchGen, Role::RtlGen, Role::Judge, Role::Debug];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::TestbenchGen => "testbench_gen",
            Role::RtlGen => "rtl_gen",
            Role::Judge => "judge",
            Role::Debug => "debug",
        }
    }
}

/// A chat history. `role` is `None` for the history shared by every role in
/// single-agent mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub role: Option<Role>,
    history: Vec<ChatMessage>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, role: Option<Role>, system_prompt: impl Into<String>) -> Self {
        Conversation {
            id: id.into(),
            role,
            history: vec![ChatMessage::system(system_prompt)],
        }
    }

    /// Fresh history for `role` using its system template.
    pub fn for_role(id: impl Into<String>, role: Role, templates: &PromptTemplates) -> Result<Self, TemplateError> {
        let system = templates.render(&format!("{}/system", role.as_str()), &[])?;
        Ok(Self::new(id, Some(role), system))
    }

    /// Fresh history shared by all roles.
    pub fn shared(id: impl Into<String>, templates: &PromptTemplates) -> Result<Self, TemplateError> {
        let system = templates.render("single/system", &[])?;
        Ok(Self::new(id, None, system))
    }

    pub fn history(&self) -> &[ChatMessage] {
        &self.history
    }

    /// The history followed by a new user turn.
    pub fn request_messages(&self, user: &str) -> Vec<ChatMessage> {
        let mut m = self.history.clone();
        m.push(ChatMessage::user(user));
        m
    }

    pub fn record_turn(&mut self, user: String, assistant: String) {
        self.history.push(ChatMessage::user(user));
        self.history.push(ChatMessage::assistant(assistant));
    }

    /// Copy used for side threads whose turns must not flow back.
    pub fn fork(&self, id: impl Into<String>) -> Self {
        Conversation {
            id: id.into(),
            role: self.role,
            history: self.history.clone(),
        }
    }
}

/// Sampling used for each role's ordinary (non-sampling) calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleParams {
    pub testbench_gen: SamplingParams,
    pub rtl_gen: SamplingParams,
    pub judge: SamplingParams,
    pub debug: SamplingParams,
}

impl Default for RoleParams {
    fn default() -> Self {
        let low = SamplingParams::low_temperature();
        RoleParams {
            testbench_gen: low.clone(),
            rtl_gen: low.clone(),
            judge: low.clone(),
            debug: low,
        }
    }
}

impl RoleParams {
    pub fn get(&self, role: Role) -> &SamplingParams {
        match role {
            Role::TestbenchGen => &self.testbench_gen,
            Role::RtlGen => &self.rtl_gen,
            Role::Judge => &self.judge,
            Role::Debug => &self.debug,
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("reply to {tag} contains no fenced code block")]
    NoCodeBlock { tag: String },
    #[error("syntax errors in {tag} remain after {attempts} fix attempts")]
    SyntaxUnfixable {
        tag: String,
        attempts: u32,
        diagnostics: Vec<Diagnostic>,
        last: VerilogSource,
    },
    #[error("judge reply to {tag} has no VERDICT line")]
    VerdictUnparseable { tag: String, reply: String },
    #[error("debug window is empty")]
    EmptyWindow,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One sampled candidate; unfixable samples are kept as flagged sentinels.
#[derive(Debug, Clone, PartialEq)]
pub struct RtlSample {
    pub source: VerilogSource,
    pub simulatable: bool,
    pub note: Option<String>,
}

/// What the judge is shown about a failing run.
#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    Trace(&'a CheckTrace),
    /// No usable trace: compile or runtime failure, timeout, or output that
    /// does not follow the checking protocol.
    Failure { status: SimStatus, detail: &'a str },
}

#[derive(Debug, Clone)]
pub struct AgentSettings {
    pub model_id: String,
    pub syntax_fix_cap: u32,
    pub role_params: RoleParams,
    /// Issue `n` single-completion calls instead of one `n`-completion call.
    pub fanout: bool,
    pub window_len: u64,
    /// Testbench text longer than this is truncated in RTL prompts.
    pub tb_prompt_limit: Option<usize>,
    pub max_parallel: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings {
            model_id: "default".into(),
            syntax_fix_cap: DEFAULT_SYNTAX_FIX_CAP,
            role_params: RoleParams::default(),
            fanout: false,
            window_len: crate::checkpoint::DEFAULT_WINDOW_LEN,
            tb_prompt_limit: None,
            max_parallel: 8,
        }
    }
}

/// Agent operations bound to one problem run.
pub struct Agents<'a> {
    gateway: &'a Gateway,
    sim: &'a dyn Simulator,
    workdirs: &'a WorkdirAllocator,
    templates: &'a PromptTemplates,
    settings: AgentSettings,
    problem_id: String,
    tag_prefix: String,
    dut_top: String,
    calls: AtomicU64,
}

impl<'a> Agents<'a> {
    pub fn new(
        gateway: &'a Gateway,
        sim: &'a dyn Simulator,
        workdirs: &'a WorkdirAllocator,
        templates: &'a PromptTemplates,
        settings: AgentSettings,
    ) -> Self {
        Agents {
            gateway,
            sim,
            workdirs,
            templates,
            settings,
            problem_id: "problem".into(),
            tag_prefix: String::new(),
            dut_top: "top_module".into(),
            calls: AtomicU64::new(0),
        }
    }

    /// Workdir namespace for syntax checks.
    pub fn with_problem_id(mut self, id: impl Into<String>) -> Self {
        self.problem_id = id.into();
        self
    }

    /// Prepended to every request tag, e.g. `task/run0/`.
    pub fn with_tag_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.tag_prefix = prefix.into();
        self
    }

    pub fn with_dut_top(mut self, top: impl Into<String>) -> Self {
        self.dut_top = top.into();
        self
    }

    pub fn settings(&self) -> &AgentSettings {
        &self.settings
    }

    pub fn dut_top(&self) -> &str {
        &self.dut_top
    }

    /// LLM requests issued through this instance.
    pub fn llm_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Step 1. `regen` numbers the attempt (0 for the first testbench).
    pub fn generate_testbench(
        &self,
        spec: &str,
        golden_tb: Option<&str>,
        conv: &mut Conversation,
        regen: u32,
    ) -> Result<VerilogSource, AgentError> {
        let prompt = match golden_tb {
            Some(g) => self.templates.render(
                "testbench_gen/generate_with_golden",
                &[("spec", spec), ("golden_tb", g), ("dut_top", &self.dut_top)],
            )?,
            None => self
                .templates
                .render("testbench_gen/generate", &[("spec", spec), ("dut_top", &self.dut_top)])?,
        };
        let tag = format!("tb_gen/{regen}");
        let reply = self.ask(conv, Role::TestbenchGen, prompt, &tag)?;
        let src = self.source_from_reply(SourceKind::Testbench, &reply, &tag)?;
        self.fix_syntax(src, conv, Role::TestbenchGen, &tag, &format!("tb{regen}"))
    }

    /// Step 2: one low-temperature RTL attempt against `testbench`.
    pub fn generate_rtl(
        &self,
        spec: &str,
        testbench: &VerilogSource,
        conv: &mut Conversation,
        pass: u32,
    ) -> Result<VerilogSource, AgentError> {
        let tb = self.tb_for_prompt(testbench);
        let prompt = self.templates.render(
            "rtl_gen/generate",
            &[("spec", spec), ("testbench", &tb), ("dut_top", &self.dut_top)],
        )?;
        let tag = format!("rtl_gen/{pass}");
        let reply = self.ask(conv, Role::RtlGen, prompt, &tag)?;
        let src = self.source_from_reply(SourceKind::Dut, &reply, &tag)?;
        self.fix_syntax(src, conv, Role::RtlGen, &tag, &format!("rtl{pass}"))
    }

    /// One-pass generation from the specification alone, no syntax fixing.
    pub fn generate_rtl_vanilla(&self, spec: &str, conv: &mut Conversation) -> Result<VerilogSource, AgentError> {
        let prompt = self
            .templates
            .render("rtl_gen/vanilla", &[("spec", spec), ("dut_top", &self.dut_top)])?;
        let tag = "rtl_gen/0";
        let reply = self.ask(conv, Role::RtlGen, prompt, tag)?;
        self.source_from_reply(SourceKind::Dut, &reply, tag)
    }

    /// Step 4: `c` candidates from one sampling request. Each candidate is
    /// syntax-fixed on its own fork of `conv`; `conv` itself is unchanged.
    pub fn sample_rtl_candidates(
        &self,
        spec: &str,
        testbench: &VerilogSource,
        c: u32,
        params: &SamplingParams,
        conv: &Conversation,
        pass: u32,
    ) -> Result<Vec<RtlSample>, AgentError> {
        let tb = self.tb_for_prompt(testbench);
        let prompt = self.templates.render(
            "rtl_gen/sample",
            &[("spec", spec), ("testbench", &tb), ("dut_top", &self.dut_top)],
        )?;
        let tag = format!("rtl_sample/{pass}");
        let request = LlmRequest {
            model_id: self.settings.model_id.clone(),
            messages: conv.request_messages(&prompt),
            params: params.clone().with_n(c),
            tag: self.full_tag(&tag),
        };
        let response = if self.settings.fanout {
            self.calls.fetch_add(c as u64, Ordering::SeqCst);
            self.gateway.complete_fanout(&request)?
        } else {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.gateway.complete(&request)?
        };
        let results = parallel_map(response.completions.len(), self.settings.max_parallel, |i| {
            let reply = &response.completions[i];
            let sub = format!("{tag}#{i}");
            let mut fork = conv.fork(format!("{}/sample{i}", conv.id));
            fork.record_turn(prompt.clone(), reply.clone());
            let src = match self.source_from_reply(SourceKind::Dut, reply, &sub) {
                Ok(s) => s,
                Err(AgentError::NoCodeBlock { .. }) => {
                    return Ok(self.sentinel("reply contained no code block".into(), None));
                }
                Err(e) => return Err(e),
            };
            match self.fix_syntax(src, &mut fork, Role::RtlGen, &sub, &format!("sample{i}")) {
                Ok(source) => Ok(RtlSample {
                    source,
                    simulatable: true,
                    note: None,
                }),
                Err(AgentError::SyntaxUnfixable { last, attempts, .. }) => Ok(self.sentinel(
                    format!("syntax errors remain after {attempts} fix attempts"),
                    Some(last),
                )),
                Err(e) => Err(e),
            }
        });
        results.into_iter().collect()
    }

    fn sentinel(&self, note: String, last: Option<VerilogSource>) -> RtlSample {
        let source = last.unwrap_or_else(|| {
            VerilogSource::new(SourceKind::Dut, self.dut_top.clone(), format!("// {note}\n"))
                .expect("sentinel source is valid")
        });
        RtlSample {
            source,
            simulatable: false,
            note: Some(note),
        }
    }

    /// Step 3.
    pub fn judge(
        &self,
        spec: &str,
        testbench: &VerilogSource,
        evidence: Evidence<'_>,
        conv: &mut Conversation,
        pass: u32,
    ) -> Result<JudgeVerdict, AgentError> {
        let excerpt = render_evidence(evidence, self.settings.window_len);
        let prompt = self.templates.render(
            "judge/evaluate",
            &[("spec", spec), ("testbench", testbench.code()), ("window", &excerpt)],
        )?;
        let tag = format!("judge/{pass}");
        let reply = self.ask(conv, Role::Judge, prompt, &tag)?;
        parse_verdict(&reply).ok_or(AgentError::VerdictUnparseable { tag, reply })
    }

    /// Step 5: one debug trial for `candidate`, syntax-fixed. `thread` labels
    /// the candidate in tags and workdirs.
    #[allow(clippy::too_many_arguments)]
    pub fn debug_trial(
        &self,
        spec: &str,
        candidate: &VerilogSource,
        window: &WaveWindow,
        testbench: &VerilogSource,
        conv: &mut Conversation,
        round: u32,
        thread: &str,
    ) -> Result<VerilogSource, AgentError> {
        if window.records.is_empty() {
            return Err(AgentError::EmptyWindow);
        }
        let prompt = self.templates.render(
            "debug/trial",
            &[
                ("spec", spec),
                ("rtl", candidate.code()),
                ("testbench", testbench.code()),
                ("window", &render_window(window)),
                ("dut_top", &self.dut_top),
            ],
        )?;
        let tag = format!("debug/r{round}/{thread}");
        let reply = self.ask(conv, Role::Debug, prompt, &tag)?;
        let src = self.source_from_reply(SourceKind::Dut, &reply, &tag)?;
        self.fix_syntax(src, conv, Role::Debug, &tag, &format!("{thread}_r{round}"))
    }

    /// Compile, and while errors remain ask `role` for a corrected version.
    /// At most `syntax_fix_cap` requests are made; the last reply is compiled
    /// once more before giving up.
    pub fn fix_syntax(
        &self,
        source: VerilogSource,
        conv: &mut Conversation,
        role: Role,
        tag: &str,
        label: &str,
    ) -> Result<VerilogSource, AgentError> {
        let cap = self.settings.syntax_fix_cap;
        let mut current = source;
        for attempt in 0..=cap {
            let errors = self.syntax_errors(&current, label)?;
            if errors.is_empty() {
                return Ok(current);
            }
            if attempt == cap {
                return Err(AgentError::SyntaxUnfixable {
                    tag: tag.to_string(),
                    attempts: cap,
                    diagnostics: errors,
                    last: current,
                });
            }
            let listing = errors.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n");
            let key = format!("{}/fix_syntax", fix_template_role(role));
            let code_var = match current.kind() {
                SourceKind::Dut => "rtl",
                SourceKind::Testbench => "testbench",
            };
            let prompt = self
                .templates
                .render(&key, &[(code_var, current.code()), ("diagnostics", &listing)])?;
            let fix_tag = format!("{tag}/fix{attempt}");
            let reply = self.ask(conv, role, prompt, &fix_tag)?;
            match self.source_from_reply(current.kind(), &reply, &fix_tag) {
                Ok(next) => current = next,
                // the attempt is spent; keep the previous code
                Err(AgentError::NoCodeBlock { .. }) => debug!(tag = %fix_tag, "fix reply without code"),
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop returns on its last iteration")
    }

    fn syntax_errors(&self, source: &VerilogSource, label: &str) -> Result<Vec<Diagnostic>, AgentError> {
        let dir = self.workdirs.next(&self.problem_id, &format!("syntax_{label}"));
        let errors = self.sim.check_syntax(source, &dir)?;
        self.workdirs.finish(&dir, errors.is_empty());
        Ok(errors)
    }

    fn ask(&self, conv: &mut Conversation, role: Role, prompt: String, tag: &str) -> Result<String, AgentError> {
        let request = LlmRequest {
            model_id: self.settings.model_id.clone(),
            messages: conv.request_messages(&prompt),
            params: self.settings.role_params.get(role).clone().with_n(1),
            tag: self.full_tag(tag),
        };
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut response = self.gateway.complete(&request)?;
        let reply = response.completions.swap_remove(0);
        conv.record_turn(prompt, reply.clone());
        Ok(reply)
    }

    fn full_tag(&self, tag: &str) -> String {
        format!("{}{tag}", self.tag_prefix)
    }

    fn source_from_reply(&self, kind: SourceKind, reply: &str, tag: &str) -> Result<VerilogSource, AgentError> {
        let code = last_code_block(reply).ok_or_else(|| AgentError::NoCodeBlock { tag: tag.to_string() })?;
        let preferred = match kind {
            SourceKind::Dut => Some(self.dut_top.as_str()),
            SourceKind::Testbench => None,
        };
        // A block without a module header still goes to the compiler, which
        // produces the diagnostics for the fix loop.
        let top = detect_top_module(&code, preferred).unwrap_or_else(|| match kind {
            SourceKind::Dut => self.dut_top.clone(),
            SourceKind::Testbench => "tb".to_string(),
        });
        VerilogSource::new(kind, top, code).map_err(|_| AgentError::NoCodeBlock { tag: tag.to_string() })
    }

    fn tb_for_prompt(&self, testbench: &VerilogSource) -> String {
        let code = testbench.code();
        match self.settings.tb_prompt_limit {
            Some(limit) if code.len() > limit => {
                let mut cut = limit;
                while !code.is_char_boundary(cut) {
                    cut -= 1;
                }
                format!("{}\n// ... testbench truncated ...\n", &code[..cut])
            }
            _ => code.to_string(),
        }
    }
}

fn fix_template_role(role: Role) -> &'static str {
    match role {
        Role::TestbenchGen => "testbench_gen",
        Role::Debug => "debug",
        Role::RtlGen | Role::Judge => "rtl_gen",
    }
}

/// Text shown to the judge: counts plus the window before the first
/// mismatch, or the failure detail.
pub fn render_evidence(evidence: Evidence<'_>, window_len: u64) -> String {
    match evidence {
        Evidence::Trace(trace) => {
            let mut out = format!(
                "{} of {} checks mismatched.\n",
                trace.mismatches(),
                trace.total_checks()
            );
            if let Some(t_m) = earliest_mismatch(trace) {
                let w = extract_window(trace, t_m, window_len.max(1)).expect("t_m is a mismatch");
                out.push_str(&render_window(&w));
            }
            out
        }
        Evidence::Failure { status, detail } => {
            let what = match status {
                SimStatus::Ok => "The simulation ran but its output does not follow the checking protocol",
                SimStatus::CompileFailed => "The design and testbench failed to compile together",
                SimStatus::RuntimeFailed => "The simulation aborted",
                SimStatus::TimedOut => "The simulation did not finish before the timeout",
            };
            format!("{what}:\n{}", detail.trim_end())
        }
    }
}
