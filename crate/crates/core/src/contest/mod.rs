//! Contestation of a baseline prediction through a chat model, with
//! clinician override and a hash-chained audit trail.

mod audit;
mod client;
mod parse;
mod prompt;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

pub use audit::{read_entries, verify_chain, AuditEntry, AuditLog, GENESIS_DIGEST};
pub use client::{
    chat, ChatBackend, ChatMetrics, ChatRequest, ChatResponse, Choice, ChoiceMessage, Completion, HttpChatClient,
    LlmEndpointConfig, MockScript, ScriptedClient, ScriptedOutcome, Usage, WireMessage, DEFAULT_FINALIZATION_QUERY,
    STRICT_FINALIZATION_QUERY,
};
pub use parse::{parse_final_decision, Decision, DECISION_WINDOW};
pub use prompt::{build_prompt, format_metrics, user_message, SYSTEM_PROMPT};

use crate::hrv::HrvFeatures;
use crate::signal_store::Sex;
use crate::windowing::Label;

/// Default window after an LLM finalization during which a clinician may still override.
pub const DEFAULT_EDIT_WINDOW_HOURS: i64 = 24;

#[derive(Debug, thiserror::Error)]
pub enum ContestError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {excerpt}")]
    Endpoint { status: u16, excerpt: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("audit chain broken at entry {seq}")]
    AuditChain { seq: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub latency_ms: Option<f64>,
    #[serde(default)]
    pub token_count: Option<u64>,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            timestamp: Utc::now(),
            latency_ms: None,
            token_count: None,
        }
    }
}

/// Ordered, append-only conversation that always starts with a system message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ChatMessage>", into = "Vec<ChatMessage>")]
pub struct ChatTranscript {
    messages: Vec<ChatMessage>,
}

impl TryFrom<Vec<ChatMessage>> for ChatTranscript {
    type Error = ContestError;

    fn try_from(messages: Vec<ChatMessage>) -> Result<Self, Self::Error> {
        match messages.first() {
            Some(m) if m.role == Role::System => {}
            _ => return Err(ContestError::Contract("transcript must start with a system message".into())),
        }
        if messages[1..].iter().any(|m| m.role == Role::System) {
            return Err(ContestError::Contract("only the first message may be a system message".into()));
        }
        Ok(Self { messages })
    }
}

impl From<ChatTranscript> for Vec<ChatMessage> {
    fn from(t: ChatTranscript) -> Self {
        t.messages
    }
}

impl ChatTranscript {
    pub fn new(system: ChatMessage) -> Result<Self, ContestError> {
        Self::try_from(vec![system])
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn push(&mut self, message: ChatMessage) -> Result<(), ContestError> {
        if message.role == Role::System {
            return Err(ContestError::Contract("system message can only open a transcript".into()));
        }
        self.messages.push(message);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientProfile {
    #[serde(default)]
    pub age: Option<u32>,
    #[serde(default)]
    pub sex: Option<Sex>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Open,
    NeedsClarification,
    Finalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    LlmRetain,
    LlmOverturn,
    ClinicianOverride,
}

/// Source of a final decision from the baseline, the final label and
/// whether a clinician overrode it.
pub fn classify(baseline: Label, final_decision: Label, override_present: bool) -> DecisionSource {
    if override_present {
        DecisionSource::ClinicianOverride
    } else if baseline == final_decision {
        DecisionSource::LlmRetain
    } else {
        DecisionSource::LlmOverturn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverrideRecord {
    pub decision: Label,
    pub reason: String,
    pub clinician_id: String,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContestCase {
    pub case_id: String,
    pub session_ref: String,
    pub baseline_prediction: Label,
    pub baseline_probability: f64,
    pub f_r: Option<HrvFeatures>,
    #[serde(default)]
    pub f_d: Vec<HrvFeatures>,
    pub sae_flagged: bool,
    /// Set for SAE-flagged cases; the chat model is consulted either way.
    pub priority_review: bool,
    #[serde(default)]
    pub profile: Option<PatientProfile>,
    pub status: CaseStatus,
    #[serde(default)]
    pub final_decision: Option<Label>,
    #[serde(default)]
    pub decision_source: Option<DecisionSource>,
    #[serde(default)]
    pub finalized_at: Option<DateTime<Utc>>,
    /// Unresolved after the stricter re-ask; waiting for a clinician.
    #[serde(default)]
    pub escalated: bool,
    #[serde(default, rename = "override")]
    pub override_record: Option<OverrideRecord>,
    pub transcript: ChatTranscript,
}

/// Inputs for opening a case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseInput {
    pub session_ref: String,
    pub baseline_prediction: Label,
    pub baseline_probability: f64,
    pub f_r: HrvFeatures,
    #[serde(default)]
    pub f_d: Vec<HrvFeatures>,
    pub sae_flagged: bool,
    #[serde(default)]
    pub profile: Option<PatientProfile>,
}

impl ContestCase {
    /// New open case whose transcript holds the system prompt and the case summary.
    pub fn open(case_id: impl Into<String>, input: CaseInput) -> Result<Self, ContestError> {
        if !(0.0..=1.0).contains(&input.baseline_probability) {
            return Err(ContestError::Validation("baseline_probability must lie in [0, 1]".into()));
        }
        let mut case = Self {
            case_id: case_id.into(),
            session_ref: input.session_ref,
            baseline_prediction: input.baseline_prediction,
            baseline_probability: input.baseline_probability,
            f_r: Some(input.f_r),
            f_d: input.f_d,
            sae_flagged: input.sae_flagged,
            priority_review: input.sae_flagged,
            profile: input.profile,
            status: CaseStatus::Open,
            final_decision: None,
            decision_source: None,
            finalized_at: None,
            escalated: false,
            override_record: None,
            transcript: ChatTranscript::new(ChatMessage::new(Role::System, SYSTEM_PROMPT))?,
        };
        let mut prompt = build_prompt(&case)?.into_iter();
        case.transcript = ChatTranscript::new(prompt.next().expect("system message"))?;
        for m in prompt {
            case.transcript.push(m)?;
        }
        Ok(case)
    }

    pub fn is_finalized(&self) -> bool {
        self.status == CaseStatus::Finalized
    }

    fn ensure_open(&self) -> Result<(), ContestError> {
        if self.is_finalized() {
            return Err(ContestError::State(format!("case {} is finalized", self.case_id)));
        }
        Ok(())
    }

    /// Checks the record-level invariants.
    pub fn check(&self) -> Result<(), ContestError> {
        let bad = |m: &str| Err(ContestError::Contract(format!("case {}: {m}", self.case_id)));
        match (self.status, self.final_decision, self.decision_source) {
            (CaseStatus::Finalized, Some(f), Some(src)) => {
                if src != classify(self.baseline_prediction, f, self.override_record.is_some()) {
                    return bad("decision_source disagrees with baseline, final and override");
                }
                if self.override_record.as_ref().is_some_and(|o| o.decision != f) {
                    return bad("override decision differs from final decision");
                }
            }
            (CaseStatus::Finalized, _, _) => return bad("finalized without a decision"),
            (_, None, None) => {}
            _ => return bad("decision recorded on a case that is not finalized"),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalizationOutcome {
    pub decision: Decision,
    /// Finalization queries sent (1 or 2).
    pub attempts: u32,
    pub status: CaseStatus,
    pub escalated: bool,
    pub decision_source: Option<DecisionSource>,
    pub reply: String,
    pub metrics: ChatMetrics,
}

fn audit_payload<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// One exchange with the chat model, logged to the audit trail.
pub fn send_message(
    case: &mut ContestCase,
    backend: &dyn ChatBackend,
    config: &LlmEndpointConfig,
    audit: &AuditLog,
    message: &str,
) -> Result<(String, ChatMetrics), ContestError> {
    case.ensure_open()?;
    if message.trim().is_empty() {
        return Err(ContestError::Validation("message must not be empty".into()));
    }
    let case_id = case.case_id.clone();
    let (reply, metrics) = chat(backend, config, &mut case.transcript, message, Some(&case_id))?;
    audit.append(
        "llm_exchange",
        serde_json::json!({ "case_id": case_id, "user": message, "reply": reply, "metrics": audit_payload(&metrics) }),
    )?;
    Ok((reply, metrics))
}

/// Ask the chat model for its final decision. An unparseable reply triggers
/// one stricter re-ask; if that fails too the case is escalated and stays open.
pub fn request_finalization(
    case: &mut ContestCase,
    backend: &dyn ChatBackend,
    config: &LlmEndpointConfig,
    audit: &AuditLog,
) -> Result<FinalizationOutcome, ContestError> {
    case.ensure_open()?;
    if case.escalated {
        return Err(ContestError::State(format!(
            "case {} is escalated and awaits clinician review",
            case.case_id
        )));
    }
    let queries = [config.finalization_query.as_str(), config.strict_finalization_query.as_str()];
    let mut last = (String::new(), ChatMetrics::default());
    for (i, query) in queries.iter().enumerate() {
        let attempts = i as u32 + 1;
        last = send_message(case, backend, config, audit, query)?;
        let decision = parse_final_decision(&last.0);
        if let Some(label) = decision.label() {
            let source = classify(case.baseline_prediction, label, false);
            case.final_decision = Some(label);
            case.decision_source = Some(source);
            case.status = CaseStatus::Finalized;
            case.finalized_at = Some(Utc::now());
            audit.append(
                "llm_decision",
                serde_json::json!({
                    "case_id": case.case_id,
                    "baseline": case.baseline_prediction,
                    "decision": label,
                    "source": source,
                    "attempts": attempts,
                }),
            )?;
            return Ok(FinalizationOutcome {
                decision,
                attempts,
                status: case.status,
                escalated: false,
                decision_source: Some(source),
                reply: last.0,
                metrics: last.1,
            });
        }
        case.status = CaseStatus::NeedsClarification;
        audit.append(
            "llm_undetermined",
            serde_json::json!({ "case_id": case.case_id, "attempt": attempts }),
        )?;
    }
    case.escalated = true;
    audit.append("escalated", serde_json::json!({ "case_id": case.case_id }))?;
    Ok(FinalizationOutcome {
        decision: Decision::Undetermined,
        attempts: queries.len() as u32,
        status: case.status,
        escalated: true,
        decision_source: None,
        reply: last.0,
        metrics: last.1,
    })
}

/// Clinician decision. Allowed on open cases and on LLM-finalized cases
/// within `edit_window` of finalization; the case is immutable afterwards.
pub fn clinician_override(
    case: &mut ContestCase,
    decision: Label,
    reason: &str,
    clinician_id: &str,
    audit: &AuditLog,
    edit_window: Duration,
    now: DateTime<Utc>,
) -> Result<(), ContestError> {
    if reason.trim().is_empty() {
        return Err(ContestError::Validation("override reason is required".into()));
    }
    if clinician_id.trim().is_empty() {
        return Err(ContestError::Validation("clinician_id is required".into()));
    }
    if case.override_record.is_some() {
        return Err(ContestError::State(format!("case {} was already overridden", case.case_id)));
    }
    if case.is_finalized() {
        let at = case.finalized_at.unwrap_or(now);
        if now - at > edit_window {
            return Err(ContestError::State(format!("edit window for case {} has closed", case.case_id)));
        }
    }
    case.override_record = Some(OverrideRecord {
        decision,
        reason: reason.to_string(),
        clinician_id: clinician_id.to_string(),
        at: now,
    });
    case.final_decision = Some(decision);
    case.decision_source = Some(DecisionSource::ClinicianOverride);
    case.status = CaseStatus::Finalized;
    case.finalized_at = Some(now);
    audit.append(
        "clinician_override",
        serde_json::json!({
            "case_id": case.case_id,
            "baseline": case.baseline_prediction,
            "decision": decision,
            "reason": reason,
            "clinician_id": clinician_id,
        }),
    )?;
    Ok(())
}

/// One JSON file per case.
#[derive(Clone, Debug)]
pub struct CaseStore {
    dir: PathBuf,
}

impl CaseStore {
    pub fn open(dir: &Path) -> Result<Self, ContestError> {
        fs::create_dir_all(dir).map_err(|e| ContestError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, case_id: &str) -> Result<PathBuf, ContestError> {
        if case_id.is_empty() || !case_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(ContestError::Validation(format!("invalid case id `{case_id}`")));
        }
        Ok(self.dir.join(format!("{case_id}.json")))
    }

    pub fn save(&self, case: &ContestCase) -> Result<(), ContestError> {
        let path = self.path(&case.case_id)?;
        let tmp = path.with_extension("json.tmp");
        let json = serde_json::to_vec_pretty(case).map_err(|e| ContestError::Internal(e.to_string()))?;
        fs::write(&tmp, json).map_err(|e| ContestError::Io(format!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, &path).map_err(|e| ContestError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(&self, case_id: &str) -> Result<ContestCase, ContestError> {
        let path = self.path(case_id)?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ContestError::NotFound(format!("case {case_id}")))
            }
            Err(e) => return Err(ContestError::Io(format!("{}: {e}", path.display()))),
        };
        serde_json::from_str(&text).map_err(|e| ContestError::Parse(format!("case {case_id}: {e}")))
    }

    pub fn ids(&self) -> Result<Vec<String>, ContestError> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)
            .map_err(|e| ContestError::Io(e.to_string()))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json").map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}

/// Case store, audit log and chat backend behind per-case locks.
pub struct ContestService {
    store: CaseStore,
    audit: Arc<AuditLog>,
    backend: Arc<dyn ChatBackend>,
    config: LlmEndpointConfig,
    edit_window: Duration,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ContestService {
    pub fn new(
        store: CaseStore,
        audit: Arc<AuditLog>,
        backend: Arc<dyn ChatBackend>,
        config: LlmEndpointConfig,
    ) -> Self {
        Self {
            store,
            audit,
            backend,
            config,
            edit_window: Duration::hours(DEFAULT_EDIT_WINDOW_HOURS),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_edit_window(mut self, window: Duration) -> Self {
        self.edit_window = window;
        self
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    fn lock(&self, case_id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(case_id.to_string()).or_default().clone()
    }

    fn with_case<T>(
        &self,
        case_id: &str,
        f: impl FnOnce(&mut ContestCase) -> Result<T, ContestError>,
    ) -> Result<(T, ContestCase), ContestError> {
        let lock = self.lock(case_id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut case = self.store.load(case_id)?;
        let out = f(&mut case);
        // Partial progress (e.g. a re-ask before escalation) is kept even on error.
        self.store.save(&case)?;
        Ok((out?, case))
    }

    pub fn open_case(&self, input: CaseInput) -> Result<ContestCase, ContestError> {
        let case = ContestCase::open(uuid::Uuid::new_v4().simple().to_string(), input)?;
        self.store.save(&case)?;
        self.audit.append(
            "case_opened",
            serde_json::json!({
                "case_id": case.case_id,
                "session_ref": case.session_ref,
                "baseline": case.baseline_prediction,
                "probability": case.baseline_probability,
                "sae_flagged": case.sae_flagged,
                "regions": case.f_d.len(),
            }),
        )?;
        Ok(case)
    }

    pub fn get(&self, case_id: &str) -> Result<ContestCase, ContestError> {
        self.store.load(case_id)
    }

    pub fn message(&self, case_id: &str, text: &str) -> Result<(String, ChatMetrics, ContestCase), ContestError> {
        let ((reply, metrics), case) = self.with_case(case_id, |c| {
            send_message(c, self.backend.as_ref(), &self.config, &self.audit, text)
        })?;
        Ok((reply, metrics, case))
    }

    pub fn finalize(&self, case_id: &str) -> Result<(FinalizationOutcome, ContestCase), ContestError> {
        self.with_case(case_id, |c| {
            request_finalization(c, self.backend.as_ref(), &self.config, &self.audit)
        })
    }

    pub fn override_case(
        &self,
        case_id: &str,
        decision: Label,
        reason: &str,
        clinician_id: &str,
    ) -> Result<ContestCase, ContestError> {
        let ((), case) = self.with_case(case_id, |c| {
            clinician_override(c, decision, reason, clinician_id, &self.audit, self.edit_window, Utc::now())
        })?;
        Ok(case)
    }
}

/// Outcome counts of contested cases grouped by baseline correctness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub retain_tp: usize,
    pub retain_tn: usize,
    /// Correct baseline predictions that were overturned.
    pub overturn_correct: usize,
    pub overturn_fn: usize,
    pub overturn_fp: usize,
    /// Wrong baseline predictions that were kept.
    pub retain_error: usize,
}

impl Tally {
    pub fn add(&mut self, truth: Label, baseline: Label, final_decision: Label) {
        let correct = truth == baseline;
        let retained = baseline == final_decision;
        match (correct, retained, truth) {
            (true, true, Label::Treatment) => self.retain_tp += 1,
            (true, true, Label::Control) => self.retain_tn += 1,
            (true, false, _) => self.overturn_correct += 1,
            (false, false, Label::Treatment) => self.overturn_fn += 1,
            (false, false, Label::Control) => self.overturn_fp += 1,
            (false, true, _) => self.retain_error += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.retain_tp + self.retain_tn + self.overturn_correct + self.overturn_fn + self.overturn_fp + self.retain_error
    }

    pub fn as_row(&self) -> [usize; 6] {
        [
            self.retain_tp,
            self.retain_tn,
            self.overturn_correct,
            self.overturn_fn,
            self.overturn_fp,
            self.retain_error,
        ]
    }
}

/// One scripted cohort member: ground truth, baseline prediction and what
/// the chat model will do with it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScriptedCase {
    pub truth: Label,
    pub baseline: Label,
    pub outcome: ScriptedOutcome,
}

/// Cohort whose contestation reproduces `target` when every case is
/// finalized by the chat model. Retained errors are split between false
/// negatives and false positives, the odd one going to false negatives.
pub fn cohort_for(target: &Tally) -> Vec<ScriptedCase> {
    let mut out = Vec::with_capacity(target.total());
    let mut push = |n: usize, truth, baseline, outcome| {
        out.extend(std::iter::repeat_n(ScriptedCase { truth, baseline, outcome }, n));
    };
    use Label::{Control as C, Treatment as T};
    push(target.retain_tp, T, T, ScriptedOutcome::Retain);
    push(target.retain_tn, C, C, ScriptedOutcome::Retain);
    let oc_t = target.overturn_correct.div_ceil(2);
    push(oc_t, T, T, ScriptedOutcome::Overturn);
    push(target.overturn_correct - oc_t, C, C, ScriptedOutcome::Overturn);
    push(target.overturn_fn, T, C, ScriptedOutcome::Overturn);
    push(target.overturn_fp, C, T, ScriptedOutcome::Overturn);
    let re_fn = target.retain_error.div_ceil(2);
    push(re_fn, T, C, ScriptedOutcome::Retain);
    push(target.retain_error - re_fn, C, T, ScriptedOutcome::Retain);
    out
}
