//! Language-model gateway: prompts, scripted responses, and call accounting.
//!
//! Every agent call in the pipeline goes through [`invoke`], which asks a
//! [`Backend`] for a response and appends exactly one entry to the
//! [`CallLedger`] on success. The only production backend is the
//! [`ScriptedBackend`]: a fixture-loaded map from `(role, key)` to a frozen
//! response, which makes whole pipeline runs replayable byte for byte.
//! [`EchoBackend`] answers any prompt deterministically and exists for
//! randomized property tests where no fixture can be written in advance;
//! [`RecordingBackend`] wraps another backend and captures the prompts it
//! saw so tests can assert on prompt structure (e.g. hint injection).
//!
//! A prompt is routed by an explicit `key=<value>` line in its body; bodies
//! without one fall back to a digest of the whole body.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::decision::{EvaluatorVerdict, SolutionSpec};
use crate::embedding::fnv1a64;
use crate::error::Error;
use crate::execution::CommandCheck;
use crate::personal::{IntentAnalysis, SelfEvaluation};
use crate::time::Timestamp;

/// Agent roles a prompt can be issued under.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Personal,
    Classifier,
    HighUrgency,
    LowUrgency,
    Evaluator,
    LowLevel,
    Environment,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Personal,
        Role::Classifier,
        Role::HighUrgency,
        Role::LowUrgency,
        Role::Evaluator,
        Role::LowLevel,
        Role::Environment,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Personal => "personal",
            Role::Classifier => "classifier",
            Role::HighUrgency => "high_urgency",
            Role::LowUrgency => "low_urgency",
            Role::Evaluator => "evaluator",
            Role::LowLevel => "low_level",
            Role::Environment => "environment",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A prompt to one agent. `hints` stays empty unless memory recall fired for
/// this intent — tests assert hint injection on this field, structurally.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub role: Role,
    pub body: String,
    pub hints: Vec<String>,
}

impl Prompt {
    pub fn new(role: Role, body: impl Into<String>) -> Result<Self, Error> {
        let body = body.into();
        if body.trim().is_empty() {
            return Err(Error::EmptyPromptBody);
        }
        Ok(Prompt {
            role,
            body,
            hints: Vec::new(),
        })
    }

    pub fn with_hints(mut self, hints: Vec<String>) -> Self {
        self.hints = hints;
        self
    }

    /// Routing key: the first `key=` line of the body, else a digest of the
    /// whole body.
    pub fn key(&self) -> String {
        for line in self.body.lines() {
            if let Some(rest) = line.trim().strip_prefix("key=") {
                return rest.trim().to_string();
            }
        }
        digest(&self.body)
    }
}

/// Stable hex digest used for prompt routing fallback and ledger entries.
pub fn digest(body: &str) -> String {
    format!("{:016x}", fnv1a64(body.as_bytes()))
}

/// Structured payloads a scripted response may carry, tagged by kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StructuredPayload {
    IntentAnalysis(IntentAnalysis),
    SelfEvaluation(SelfEvaluation),
    Solution(SolutionSpec),
    Verdict(EvaluatorVerdict),
    Command(CommandCheck),
}

impl StructuredPayload {
    fn kind(&self) -> &'static str {
        match self {
            StructuredPayload::IntentAnalysis(_) => "intent_analysis",
            StructuredPayload::SelfEvaluation(_) => "self_evaluation",
            StructuredPayload::Solution(_) => "solution",
            StructuredPayload::Verdict(_) => "verdict",
            StructuredPayload::Command(_) => "command",
        }
    }

    fn allowed_for(&self, role: Role) -> bool {
        matches!(
            (role, self),
            (Role::Personal, StructuredPayload::IntentAnalysis(_))
                | (Role::Personal, StructuredPayload::SelfEvaluation(_))
                | (Role::HighUrgency, StructuredPayload::Solution(_))
                | (Role::LowUrgency, StructuredPayload::Solution(_))
                | (Role::Evaluator, StructuredPayload::Verdict(_))
                | (Role::LowLevel, StructuredPayload::Command(_))
                | (Role::Environment, StructuredPayload::Command(_))
        )
    }
}

/// A backend answer. When a structured payload is present, `text` is its
/// canonical JSON serialization, so the two never drift apart.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub text: String,
    pub structured: Option<StructuredPayload>,
}

impl ModelResponse {
    pub fn text_only(text: impl Into<String>) -> Self {
        ModelResponse {
            text: text.into(),
            structured: None,
        }
    }

    pub fn structured(payload: StructuredPayload) -> Self {
        let text = serde_json::to_string(&payload).expect("payload serializes");
        ModelResponse {
            text,
            structured: Some(payload),
        }
    }
}

/// Anything that can answer a prompt. Implementations must be deterministic:
/// the same prompt always gets the same response.
pub trait Backend: Send + Sync {
    fn respond(&self, prompt: &Prompt) -> Result<ModelResponse, Error>;
}

// ─── call ledger ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub role: Role,
    pub prompt_digest: String,
    pub at: Timestamp,
}

#[derive(Debug, Default)]
struct LedgerInner {
    entries: Vec<LedgerEntry>,
    counts: BTreeMap<Role, u64>,
}

/// Append-only record of every successful gateway call in a pipeline run.
/// Appends are funneled through one mutex, so concurrent sub-task agents are
/// linearized; per-role counts are what reports print (entry order under
/// concurrency is not meaningful).
#[derive(Debug, Default)]
pub struct CallLedger {
    inner: Mutex<LedgerInner>,
}

impl CallLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn append(&self, role: Role, prompt_digest: String, at: Timestamp) {
        let mut inner = self.inner.lock().expect("ledger lock");
        inner.entries.push(LedgerEntry {
            role,
            prompt_digest,
            at,
        });
        *inner.counts.entry(role).or_insert(0) += 1;
    }

    pub fn total(&self) -> u64 {
        self.inner.lock().expect("ledger lock").entries.len() as u64
    }

    /// Total calls made under any of `roles`.
    pub fn total_for(&self, roles: &[Role]) -> u64 {
        let inner = self.inner.lock().expect("ledger lock");
        roles
            .iter()
            .map(|r| inner.counts.get(r).copied().unwrap_or(0))
            .sum()
    }

    pub fn counts(&self) -> BTreeMap<Role, u64> {
        self.inner.lock().expect("ledger lock").counts.clone()
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.inner.lock().expect("ledger lock").entries.clone()
    }
}

/// Ask `backend` for a response and account for it. Exactly one ledger entry
/// is appended per successful call; failed lookups append nothing.
pub fn invoke(
    backend: &dyn Backend,
    prompt: &Prompt,
    ledger: &CallLedger,
    now: Timestamp,
) -> Result<ModelResponse, Error> {
    let response = backend.respond(prompt)?;
    ledger.append(prompt.role, digest(&prompt.body), now);
    Ok(response)
}

// ─── scripted backend ───────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    version: u32,
    #[serde(default)]
    responses: Vec<FixtureEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureEntry {
    role: Role,
    key: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    structured: Option<StructuredPayload>,
}

/// Deterministic fixture-backed responder: `(role, key) → response`.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    responses: BTreeMap<(Role, String), ModelResponse>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register one scripted response. Later inserts for the same key replace
    /// earlier ones (tests build small scripts incrementally).
    pub fn insert(&mut self, role: Role, key: impl Into<String>, response: ModelResponse) {
        self.responses.insert((role, key.into()), response);
    }

    /// Parse a fixture document. Parsing is strict: unknown fields, duplicate
    /// keys, payloads on the wrong role, and invariant-violating solutions
    /// all fail here, at load time, not mid-pipeline.
    pub fn from_fixture_str(label: &str, raw: &str) -> Result<Self, Error> {
        let invalid = |message: String| Error::FixtureInvalid {
            path: label.to_string(),
            message,
        };
        let file: FixtureFile =
            toml::from_str(raw).map_err(|e| invalid(e.to_string()))?;
        if file.version != 1 {
            return Err(invalid(format!("unsupported version {}", file.version)));
        }
        let mut backend = ScriptedBackend::new();
        for entry in file.responses {
            let slot = format!("{}/{}", entry.role, entry.key);
            if entry.key.trim().is_empty() {
                return Err(invalid(format!("{slot}: empty key")));
            }
            let response = match (entry.text, entry.structured) {
                (Some(_), Some(_)) => {
                    return Err(invalid(format!(
                        "{slot}: give either text or structured, not both"
                    )));
                }
                (None, None) => {
                    return Err(invalid(format!("{slot}: response has no content")));
                }
                (Some(text), None) => {
                    if text.trim().is_empty() {
                        return Err(invalid(format!("{slot}: empty text")));
                    }
                    ModelResponse::text_only(text)
                }
                (None, Some(payload)) => {
                    if !payload.allowed_for(entry.role) {
                        return Err(invalid(format!(
                            "{slot}: payload kind '{}' not allowed for role {}",
                            payload.kind(),
                            entry.role
                        )));
                    }
                    if let StructuredPayload::Solution(spec) = &payload {
                        spec.validate()
                            .map_err(|e| invalid(format!("{slot}: {e}")))?;
                    }
                    if let StructuredPayload::Verdict(v) = &payload {
                        v.validate()
                            .map_err(|e| invalid(format!("{slot}: {e}")))?;
                    }
                    ModelResponse::structured(payload)
                }
            };
            if backend
                .responses
                .insert((entry.role, entry.key.clone()), response)
                .is_some()
            {
                return Err(invalid(format!("{slot}: duplicate response key")));
            }
        }
        Ok(backend)
    }

    pub fn from_fixture_file(path: &std::path::Path) -> Result<Self, Error> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_fixture_str(&path.display().to_string(), &raw)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Backend for ScriptedBackend {
    fn respond(&self, prompt: &Prompt) -> Result<ModelResponse, Error> {
        let key = prompt.key();
        self.responses
            .get(&(prompt.role, key.clone()))
            .cloned()
            .ok_or_else(|| Error::UnscriptedPrompt(format!("{}/{}", prompt.role, key)))
    }
}

/// Answers every prompt with a deterministic acknowledgement of its key.
/// For randomized tests where scripting each prompt is impossible.
#[derive(Debug, Default)]
pub struct EchoBackend;

impl Backend for EchoBackend {
    fn respond(&self, prompt: &Prompt) -> Result<ModelResponse, Error> {
        Ok(ModelResponse::text_only(format!(
            "ack {}/{}",
            prompt.role,
            prompt.key()
        )))
    }
}

/// Wraps a backend and keeps every prompt it answered, in call order.
pub struct RecordingBackend<B> {
    inner: B,
    seen: Mutex<Vec<Prompt>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<Prompt> {
        self.seen.lock().expect("recording lock").clone()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn respond(&self, prompt: &Prompt) -> Result<ModelResponse, Error> {
        self.seen.lock().expect("recording lock").push(prompt.clone());
        self.inner.respond(prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classifier_script() -> ScriptedBackend {
        let mut b = ScriptedBackend::new();
        b.insert(
            Role::Classifier,
            "meeting-1500",
            ModelResponse::text_only("high"),
        );
        b
    }

    #[test]
    fn scripted_hit_returns_text_and_counts_one_call() {
        let backend = classifier_script();
        let ledger = CallLedger::new();
        let prompt = Prompt::new(Role::Classifier, "classify this\nkey=meeting-1500").unwrap();
        let resp = invoke(&backend, &prompt, &ledger, 1000).unwrap();
        assert_eq!(resp.text, "high");
        assert_eq!(ledger.total(), 1);
        let entries = ledger.entries();
        assert_eq!(entries[0].role, Role::Classifier);
        assert_eq!(entries[0].prompt_digest, digest(&prompt.body));
        assert_eq!(entries[0].at, 1000);
    }

    #[test]
    fn unscripted_prompt_names_role_and_key_and_leaves_ledger_untouched() {
        let backend = classifier_script();
        let ledger = CallLedger::new();
        let prompt = Prompt::new(Role::LowUrgency, "key=meeting-9999").unwrap();
        let err = invoke(&backend, &prompt, &ledger, 0).unwrap_err();
        match err {
            Error::UnscriptedPrompt(slot) => assert_eq!(slot, "low_urgency/meeting-9999"),
            other => panic!("wrong error: {other}"),
        }
        assert_eq!(ledger.total(), 0);
    }

    #[test]
    fn digest_fallback_routes_keyless_prompts() {
        let body = "no explicit routing line here";
        let mut backend = ScriptedBackend::new();
        backend.insert(Role::Personal, digest(body), ModelResponse::text_only("ok"));
        let prompt = Prompt::new(Role::Personal, body).unwrap();
        assert_eq!(backend.respond(&prompt).unwrap().text, "ok");
    }

    #[test]
    fn scripted_backend_is_referentially_transparent() {
        let backend = classifier_script();
        let prompt = Prompt::new(Role::Classifier, "key=meeting-1500").unwrap();
        let a = backend.respond(&prompt).unwrap();
        let b = backend.respond(&prompt).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_prompt_body_is_rejected() {
        assert!(matches!(
            Prompt::new(Role::Personal, "   \n "),
            Err(Error::EmptyPromptBody)
        ));
    }

    #[test]
    fn role_filtered_totals() {
        let ledger = CallLedger::new();
        let mut seed = 0;
        let mut bump = |role: Role, n: u64| {
            for _ in 0..n {
                ledger.append(role, format!("{seed:016x}"), seed as i64);
                seed += 1;
            }
        };
        bump(Role::Personal, 2);
        bump(Role::LowUrgency, 3);
        bump(Role::Evaluator, 1);
        assert_eq!(ledger.total(), 6);
        assert_eq!(ledger.total_for(&[Role::LowUrgency, Role::Evaluator]), 4);
        assert_eq!(ledger.total_for(&[Role::Environment]), 0);
    }

    #[test]
    fn concurrent_appends_are_all_counted() {
        let ledger = std::sync::Arc::new(CallLedger::new());
        let backend = std::sync::Arc::new(EchoBackend);
        let mut handles = Vec::new();
        for t in 0..8 {
            let ledger = ledger.clone();
            let backend = backend.clone();
            handles.push(std::thread::spawn(move || {
                for i in 0..50 {
                    let prompt =
                        Prompt::new(Role::LowLevel, format!("key=t{t}-{i}")).unwrap();
                    invoke(backend.as_ref(), &prompt, &ledger, i).unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(ledger.total(), 400);
        assert_eq!(ledger.total_for(&[Role::LowLevel]), 400);
    }

    #[test]
    fn fixture_rejects_duplicate_keys() {
        let raw = r#"
version = 1
[[responses]]
role = "classifier"
key = "k"
text = "a"
[[responses]]
role = "classifier"
key = "k"
text = "b"
"#;
        let err = ScriptedBackend::from_fixture_str("dup", raw).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn fixture_rejects_text_and_structured_together() {
        let raw = r#"
version = 1
[[responses]]
role = "personal"
key = "k"
text = "a"
[responses.structured.self_evaluation]
verdict = "aligned"
justification = "fine"
"#;
        assert!(ScriptedBackend::from_fixture_str("both", raw).is_err());
    }

    #[test]
    fn fixture_rejects_payload_on_wrong_role() {
        let raw = r#"
version = 1
[[responses]]
role = "classifier"
key = "k"
[responses.structured.self_evaluation]
verdict = "aligned"
justification = "fine"
"#;
        let err = ScriptedBackend::from_fixture_str("role", raw).unwrap_err();
        assert!(err.to_string().contains("not allowed"), "{err}");
    }

    #[test]
    fn fixture_rejects_unknown_fields() {
        let raw = r#"
version = 1
[[responses]]
role = "classifier"
key = "k"
text = "a"
surprise = true
"#;
        assert!(ScriptedBackend::from_fixture_str("unknown", raw).is_err());
    }

    #[test]
    fn structured_response_text_round_trips() {
        let payload = StructuredPayload::SelfEvaluation(SelfEvaluation {
            verdict: crate::personal::AlignmentVerdict::Aligned,
            justification: "matches the request".into(),
        });
        let resp = ModelResponse::structured(payload.clone());
        let parsed: StructuredPayload = serde_json::from_str(&resp.text).unwrap();
        assert_eq!(parsed, payload);
    }
}
