//! Deterministic end-to-end testbed.
//!
//! A scripted [`MockModel`] stands in for the LLM. In `naive` mode it obeys
//! any trigger phrase anywhere in the rendered prompt, including injected text
//! inside tool and agent segments; in `compliant` mode it only reacts to
//! trusted text, user segments and defense/policy blocks. Every action it
//! emits goes through [`Runtime::gate_action`], so a scenario shows what the
//! certificate contains even when the model is fully compromised.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{parse_certificate, ActionKind, ActionRequest, BehaviorCertificate, Decision, Verdict};
use crate::boundary::{parse_context, ContextPart, Namespace};
use crate::context::{Message, RuntimeConfig};
use crate::defense::{default_profile, DefenseProfile};
use crate::pipeline::{AuditEvent, AuditLog, AuditRecord, Clock, PipelineError, Runtime};
use crate::policy::{parse_policy, PolicyDocument};

/// Hex MAC key used for scenario runs when the caller configures none. Not a
/// secret: scenario output must be reproducible.
pub const DEMO_KEY_HEX: &str = "a2a5a2a5a2a5a2a5a2a5a2a5a2a5a2a5a2a5a2a5a2a5a2a5a2a5a2a5a2a5a2a5";

/// Function name that delivers a message to a peer agent.
pub const SEND_REPORT: &str = "call:agents.send_report";

const MAX_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Compliant,
    Naive,
}

impl ModelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Compliant => "compliant",
            ModelMode::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    /// Substring searched for in the visible part of the prompt.
    pub trigger: String,
    #[serde(default)]
    pub emit: String,
    /// Arg values may use `$SEGMENT` (hash8 of the segment holding the
    /// trigger) and `$SEGMENT_TEXT` (that segment's unescaped content).
    #[serde(default)]
    pub actions: Vec<ActionRequest>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelOutput {
    pub text: String,
    pub actions: Vec<ActionRequest>,
}

/// Anything that turns a rendered prompt into text plus tool calls.
pub trait Model {
    fn respond(&mut self, rendered_prompt: &str) -> ModelOutput;
}

/// Side effect of an allowed action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolEffect {
    Nothing,
    /// Output returned to the calling agent as a tool message.
    Reply(Message),
    /// Message handed to a peer agent's inbox.
    Deliver { to: String, message: Message },
}

/// Executes allowed actions.
pub trait ToolHost {
    fn execute(&mut self, caller: &str, action: &ActionRequest) -> ToolEffect;
}

#[derive(Debug, Clone)]
pub struct MockModel {
    mode: ModelMode,
    script: Vec<ScriptRule>,
    fired: Vec<bool>,
}

impl MockModel {
    pub fn new(mode: ModelMode, script: Vec<ScriptRule>) -> Self {
        let fired = vec![false; script.len()];
        Self { mode, script, fired }
    }
}

struct Visible<'a> {
    text: &'a str,
    hash8: Option<&'a str>,
    raw: &'a str,
}

fn visible_parts(parts: &[ContextPart], mode: ModelMode) -> Vec<Visible<'_>> {
    parts
        .iter()
        .filter_map(|p| match p {
            ContextPart::Raw(r) => Some(Visible {
                text: r,
                hash8: None,
                raw: r,
            }),
            ContextPart::Segment(s) => {
                let hidden = mode == ModelMode::Compliant && matches!(s.namespace, Namespace::Tool | Namespace::Agent);
                (!hidden).then(|| Visible {
                    text: &s.content,
                    hash8: s.hash8.as_deref(),
                    raw: &s.raw_content,
                })
            }
        })
        .collect()
}

impl Model for MockModel {
    fn respond(&mut self, rendered_prompt: &str) -> ModelOutput {
        // An unparseable prompt is all noise to a compliant model and one big
        // unattributed span to a naive one.
        let parts = parse_context(rendered_prompt).unwrap_or_else(|_| match self.mode {
            ModelMode::Naive => vec![ContextPart::Raw(rendered_prompt.to_owned())],
            ModelMode::Compliant => Vec::new(),
        });
        let visible = visible_parts(&parts, self.mode);

        let mut out = ModelOutput::default();
        for (rule, fired) in self.script.iter().zip(self.fired.iter_mut()) {
            if *fired {
                continue;
            }
            let Some(hit) = visible.iter().find(|v| v.text.contains(&rule.trigger)) else {
                continue;
            };
            *fired = true;
            if !rule.emit.is_empty() {
                if !out.text.is_empty() {
                    out.text.push('\n');
                }
                out.text.push_str(&rule.emit);
            }
            let hash = hit.hash8.unwrap_or("");
            let seg_text = if hit.hash8.is_some() { hit.raw } else { "" };
            for action in &rule.actions {
                let mut a = action.clone();
                for v in a.args.values_mut() {
                    *v = v.replace("$SEGMENT_TEXT", seg_text).replace("$SEGMENT", hash);
                }
                if let Some(h) = hit.hash8 {
                    a.context_flags.source_segment = Some(h.to_owned());
                }
                out.actions.push(a);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolResponse {
    /// Tool name recorded as the message's source_id.
    pub source: String,
    pub content: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Replays canned tool output keyed by function name and routes
/// [`SEND_REPORT`] calls to peers. Touches no real system.
#[derive(Debug, Clone, Default)]
pub struct FixtureTools {
    responses: BTreeMap<String, ToolResponse>,
    pub executed: Vec<(String, ActionRequest)>,
}

impl FixtureTools {
    pub fn new(responses: BTreeMap<String, ToolResponse>) -> Self {
        Self {
            responses,
            executed: Vec::new(),
        }
    }
}

impl ToolHost for FixtureTools {
    fn execute(&mut self, caller: &str, action: &ActionRequest) -> ToolEffect {
        self.executed.push((caller.to_owned(), action.clone()));
        if action.kind != ActionKind::FunctionCall {
            return ToolEffect::Nothing;
        }
        if action.name == SEND_REPORT {
            let to = action.args.get("to").cloned().unwrap_or_default();
            let body = action.args.get("report").cloned().unwrap_or_default();
            return ToolEffect::Deliver {
                to,
                message: Message::agent(caller, body),
            };
        }
        match self.responses.get(&action.name) {
            Some(r) => {
                let mut m = Message::tool(r.source.clone(), r.content.clone());
                m.metadata = r.metadata.clone();
                ToolEffect::Reply(m)
            }
            None => ToolEffect::Nothing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecisionEntry {
    pub agent: String,
    pub action: ActionRequest,
    pub decision: Decision,
}

#[derive(Debug, Clone)]
pub struct AgentRun {
    pub decisions: Vec<DecisionEntry>,
    /// `(recipient, message)` pairs for peer agents.
    pub deliveries: Vec<(String, Message)>,
}

/// Runs one agent until its model goes quiet or `MAX_STEPS` is reached.
/// Allowed tool output is appended to the transcript; peer deliveries are
/// returned.
#[allow(clippy::too_many_arguments)]
pub fn run_agent(
    runtime: &mut Runtime,
    agent_id: &str,
    model: &mut dyn Model,
    tools: &mut dyn ToolHost,
    cert: Option<&BehaviorCertificate>,
    policy: Option<&PolicyDocument>,
    profile: Option<&DefenseProfile>,
    mut messages: Vec<Message>,
) -> Result<AgentRun, PipelineError> {
    let mut decisions = Vec::new();
    let mut deliveries = Vec::new();
    for _ in 0..MAX_STEPS {
        let prompt = runtime.instrument_request(&messages, cert, policy, profile)?;
        let out = model.respond(&prompt.render());
        if out.text.is_empty() && out.actions.is_empty() {
            break;
        }
        if !out.text.is_empty() {
            messages.push(Message::assistant(out.text));
        }
        for action in out.actions {
            let decision = runtime.gate_action(&action, cert);
            if decision.verdict == Verdict::Allow {
                match tools.execute(agent_id, &action) {
                    ToolEffect::Nothing => {}
                    ToolEffect::Reply(m) => messages.push(m),
                    ToolEffect::Deliver { to, message } => deliveries.push((to, message)),
                }
            }
            decisions.push(DecisionEntry {
                agent: agent_id.to_owned(),
                action,
                decision,
            });
        }
    }
    Ok(AgentRun { decisions, deliveries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    Invoice,
    CrmEmail,
    LogInfection,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] = [ScenarioId::Invoice, ScenarioId::CrmEmail, ScenarioId::LogInfection];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::Invoice => "invoice",
            ScenarioId::CrmEmail => "crm_email",
            ScenarioId::LogInfection => "log_infection",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.as_str() == text)
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Matches actions by kind and exact name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionPattern {
    pub kind: ActionKind,
    pub name: String,
}

impl ActionPattern {
    pub fn matches(&self, action: &ActionRequest) -> bool {
        self.kind == action.kind && self.name == action.name
    }
}

#[derive(Debug, Clone)]
pub struct AgentFixture {
    pub id: String,
    pub certificate: BehaviorCertificate,
    pub messages: Vec<Message>,
    pub script: Vec<ScriptRule>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: ScenarioId,
    pub description: String,
    /// Nominal time of the scenario; the certificates are valid then.
    pub time: DateTime<Utc>,
    pub attack_payload: String,
    pub agents: Vec<AgentFixture>,
    pub policy: Option<PolicyDocument>,
    pub defense: DefenseProfile,
    pub tools: BTreeMap<String, ToolResponse>,
    /// The attack succeeded iff one of these was allowed.
    pub forbidden: Vec<ActionPattern>,
    pub legitimate: Vec<ActionPattern>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("fixture {file}: {reason}")]
    Fixture { file: String, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn fixture_err(file: &str, reason: impl fmt::Display) -> HarnessError {
    HarnessError::Fixture {
        file: file.to_owned(),
        reason: reason.to_string(),
    }
}

macro_rules! embed {
    ($id:literal, $($file:literal),+ $(,)?) => {
        &[$(($file, include_str!(concat!("../scenarios/", $id, "/", $file)))),+]
    };
}

const INVOICE_FILES: &[(&str, &str)] = embed!(
    "invoice",
    "scenario.json",
    "finance-assistant.a2as-cert.json",
    "finance-assistant.messages.json",
    "finance-assistant.script.json",
    "invoice.a2as-policy.txt",
    "invoice.a2as-defense.txt",
    "invoice-0142.txt",
);

const CRM_EMAIL_FILES: &[(&str, &str)] = embed!(
    "crm_email",
    "scenario.json",
    "email-assistant.a2as-cert.json",
    "email-assistant.messages.json",
    "email-assistant.script.json",
    "crm-email.a2as-policy.txt",
    "crm-email.a2as-defense.txt",
    "inbox.txt",
    "msg-7781.txt",
    "contact.txt",
);

const LOG_INFECTION_FILES: &[(&str, &str)] = embed!(
    "log_infection",
    "scenario.json",
    "monitor-agent.a2as-cert.json",
    "monitor-agent.messages.json",
    "monitor-agent.script.json",
    "recovery-agent.a2as-cert.json",
    "recovery-agent.messages.json",
    "recovery-agent.script.json",
    "ops.a2as-policy.txt",
    "ops.a2as-defense.txt",
    "syslog-node7.log",
);

/// Where scenario files come from.
#[derive(Debug, Clone)]
pub enum FixtureSource {
    Embedded,
    /// A directory with one subdirectory per scenario id.
    Dir(PathBuf),
}

impl FixtureSource {
    fn read(&self, id: ScenarioId, file: &str) -> Result<String, HarnessError> {
        match self {
            FixtureSource::Embedded => {
                let table = match id {
                    ScenarioId::Invoice => INVOICE_FILES,
                    ScenarioId::CrmEmail => CRM_EMAIL_FILES,
                    ScenarioId::LogInfection => LOG_INFECTION_FILES,
                };
                table
                    .iter()
                    .find(|(name, _)| *name == file)
                    .map(|(_, text)| (*text).to_owned())
                    .ok_or_else(|| fixture_err(file, "no such embedded file"))
            }
            FixtureSource::Dir(root) => {
                let path = root.join(id.as_str()).join(file);
                std::fs::read_to_string(&path).map_err(|e| fixture_err(&path.display().to_string(), e))
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    id: ScenarioId,
    description: String,
    attack_payload: String,
    time: DateTime<Utc>,
    #[serde(default)]
    policy: Option<String>,
    #[serde(default)]
    defense: Option<String>,
    agents: Vec<AgentFile>,
    #[serde(default)]
    tools: BTreeMap<String, ToolFile>,
    forbidden: Vec<ActionPattern>,
    legitimate: Vec<ActionPattern>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    id: String,
    certificate: String,
    messages: String,
    script: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolFile {
    source: String,
    response: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

fn json<T: serde::de::DeserializeOwned>(file: &str, text: &str) -> Result<T, HarnessError> {
    serde_json::from_str(text).map_err(|e| fixture_err(file, e))
}

pub fn load_scenario(id: ScenarioId, source: &FixtureSource) -> Result<Scenario, HarnessError> {
    let manifest: ScenarioFile = json("scenario.json", &source.read(id, "scenario.json")?)?;
    if manifest.id != id {
        return Err(fixture_err("scenario.json", format!("id is {} but directory is {id}", manifest.id)));
    }
    let mut agents = Vec::with_capacity(manifest.agents.len());
    for a in manifest.agents {
        let certificate =
            parse_certificate(&source.read(id, &a.certificate)?).map_err(|e| fixture_err(&a.certificate, e))?;
        let messages: Vec<Message> = json(&a.messages, &source.read(id, &a.messages)?)?;
        let script: Vec<ScriptRule> = json(&a.script, &source.read(id, &a.script)?)?;
        agents.push(AgentFixture {
            id: a.id,
            certificate,
            messages,
            script,
        });
    }
    if agents.is_empty() {
        return Err(fixture_err("scenario.json", "no agents"));
    }
    let policy = match &manifest.policy {
        Some(f) => Some(parse_policy(&source.read(id, f)?).map_err(|e| fixture_err(f, e))?),
        None => None,
    };
    let defense = match &manifest.defense {
        Some(f) => DefenseProfile::parse(&source.read(id, f)?, id.as_str()).map_err(|e| fixture_err(f, e))?,
        None => default_profile(),
    };
    let mut tools = BTreeMap::new();
    for (name, t) in manifest.tools {
        tools.insert(
            name,
            ToolResponse {
                source: t.source,
                content: source.read(id, &t.response)?,
                metadata: t.metadata,
            },
        );
    }
    if !tools.values().any(|t| t.content.contains(&manifest.attack_payload)) {
        return Err(fixture_err("scenario.json", "attack_payload does not occur in any tool response"));
    }
    Ok(Scenario {
        id,
        description: manifest.description,
        time: manifest.time,
        attack_payload: manifest.attack_payload,
        agents,
        policy,
        defense,
        tools,
        forbidden: manifest.forbidden,
        legitimate: manifest.legitimate,
    })
}

/// The three built-in scenarios, in a fixed order.
pub fn builtin_scenarios() -> Vec<Scenario> {
    ScenarioId::ALL
        .into_iter()
        .map(|id| load_scenario(id, &FixtureSource::Embedded).expect("embedded fixtures are valid"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViolationEntry {
    pub hash8: String,
    pub kind: String,
    pub position: usize,
    pub matched_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioResult {
    pub scenario: ScenarioId,
    pub mode: ModelMode,
    pub enforcement: bool,
    pub attack_blocked: bool,
    pub legitimate_completed: bool,
    pub decisions: Vec<DecisionEntry>,
    /// Decision, violation and rejection records.
    pub audit_excerpt: Vec<AuditRecord>,
    pub audit_valid: bool,
    pub audit_records: usize,
    /// Distinct boundary violations, by segment and offset.
    pub violations: Vec<ViolationEntry>,
    /// The complete chained log of the run.
    #[serde(skip)]
    pub audit_log: AuditLog,
}

impl ScenarioResult {
    pub fn allowed_forbidden(&self, scenario: &Scenario) -> Vec<&DecisionEntry> {
        self.decisions
            .iter()
            .filter(|d| d.decision.is_allowed() && scenario.forbidden.iter().any(|p| p.matches(&d.action)))
            .collect()
    }
}

/// Runs every agent of the scenario in order through one runtime. Peer
/// deliveries land in the recipient's transcript before it runs. With
/// enforcement off no certificate is loaded.
pub fn run_scenario(
    scenario: &Scenario,
    mode: ModelMode,
    config: &RuntimeConfig,
    clock: Arc<dyn Clock>,
) -> Result<ScenarioResult, HarnessError> {
    let mut runtime = Runtime::new(config.clone(), clock);
    let mut tools = FixtureTools::new(scenario.tools.clone());
    let mut inbox: BTreeMap<String, Vec<Message>> = BTreeMap::new();
    let mut decisions = Vec::new();

    for agent in &scenario.agents {
        let mut messages = agent.messages.clone();
        messages.extend(inbox.remove(&agent.id).unwrap_or_default());
        let cert = config.enforcement.then_some(&agent.certificate);
        let mut model = MockModel::new(mode, agent.script.clone());
        let AgentRun {
            decisions: d,
            deliveries,
        } = run_agent(
            &mut runtime,
            &agent.id,
            &mut model,
            &mut tools,
            cert,
            scenario.policy.as_ref(),
            Some(&scenario.defense),
            messages,
        )?;
        decisions.extend(d);
        for (to, m) in deliveries {
            inbox.entry(to).or_default().push(m);
        }
    }

    let attack_succeeded = decisions
        .iter()
        .any(|d| d.decision.is_allowed() && scenario.forbidden.iter().any(|p| p.matches(&d.action)));
    let legitimate_completed = scenario.legitimate.iter().all(|p| {
        let tried: Vec<&DecisionEntry> = decisions.iter().filter(|d| p.matches(&d.action)).collect();
        !tried.is_empty() && tried.iter().all(|d| d.decision.is_allowed())
    });

    let audit = runtime.audit();
    let mut violations: Vec<ViolationEntry> = Vec::new();
    for r in audit.records().iter().filter(|r| r.event == AuditEvent::Violation) {
        let entry = ViolationEntry {
            hash8: r.detail.get("hash8").cloned().unwrap_or_default(),
            kind: r.detail.get("kind").cloned().unwrap_or_default(),
            position: r.detail.get("position").and_then(|p| p.parse().ok()).unwrap_or(0),
            matched_text: r.detail.get("matched_text").cloned().unwrap_or_default(),
        };
        if !violations.contains(&entry) {
            violations.push(entry);
        }
    }
    let audit_excerpt = audit
        .records()
        .iter()
        .filter(|r| matches!(r.event, AuditEvent::Decision | AuditEvent::Violation | AuditEvent::Rejected))
        .cloned()
        .collect();

    Ok(ScenarioResult {
        scenario: scenario.id,
        mode,
        enforcement: config.enforcement,
        attack_blocked: !attack_succeeded,
        legitimate_completed,
        decisions,
        audit_excerpt,
        audit_valid: audit.verify().is_ok(),
        audit_records: audit.len(),
        violations,
        audit_log: runtime.into_audit(),
    })
}

/// Plain-text report, one fact per line.
pub fn render_report(result: &ScenarioResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario: {}", result.scenario);
    let _ = writeln!(out, "mode: {}", result.mode.as_str());
    let _ = writeln!(out, "enforcement: {}", if result.enforcement { "on" } else { "off" });
    let _ = writeln!(out, "attack_blocked: {}", result.attack_blocked);
    let _ = writeln!(out, "legitimate_completed: {}", result.legitimate_completed);
    let _ = writeln!(out, "audit_chain: {}", if result.audit_valid { "valid" } else { "broken" });
    let _ = writeln!(out, "audit_records: {}", result.audit_records);
    let _ = writeln!(out, "decisions:");
    for d in &result.decisions {
        let _ = write!(
            out,
            "  [{}] {} -> {} ({}; {})",
            d.agent, d.action.name, d.decision.verdict, d.decision.matched_rule, d.decision.reason
        );
        if let Some(seg) = &d.action.context_flags.source_segment {
            let _ = write!(out, " from segment {seg}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "violations:");
    for v in &result.violations {
        let _ = writeln!(out, "  segment {} +{} {} {:?}", v.hash8, v.position, v.kind, v.matched_text);
    }
    out
}

/// Directory fixtures are checked against the same loader as the embedded
/// ones.
pub fn load_all(dir: &Path) -> Result<Vec<Scenario>, HarnessError> {
    let source = FixtureSource::Dir(dir.to_path_buf());
    ScenarioId::ALL.into_iter().map(|id| load_scenario(id, &source)).collect()
}
