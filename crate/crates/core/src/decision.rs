//! Decision layer: urgency classification, high/low-urgency planning,
//! candidate scoring, Pareto filtering, and the evaluator's learning loop.
//!
//! Urgency is pure arithmetic on the time left to the deadline: gone
//! (≤ 0) is stale, under the threshold is high urgency, at or over it is
//! low urgency. High-urgency intents get exactly one scripted plan.
//! Low-urgency intents get `n` candidate plans — hint-conditioned when
//! solution memory holds a similar enough past intent (similarity at or
//! above θ₂ = 0.7 by default) — which are scored on (LM-call cost,
//! similarity, precision), reduced to the weakly-undominated Pareto front,
//! and judged by an evaluator whose verdict is stored back into solution
//! memory for the next similar intent.
//!
//! Dominance comparisons are exact float comparisons on purpose: scores are
//! deterministic functions of fixture data, so epsilons would only blur
//! which candidates tie.

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder, EmbeddingVector};
use crate::error::Error;
use crate::gateway::{invoke, Backend, CallLedger, Prompt, Role, StructuredPayload};
use crate::metrics::{lm_call_usage_cost, precision, ClaimSet, MetricsTriple};
use crate::par;
use crate::personal::Intent;
use crate::time::Timestamp;

/// Default seconds-to-deadline separating high from low urgency (two hours).
pub const DEFAULT_THETA1_SECONDS: i64 = 7200;
/// Default solution-memory similarity threshold for hint injection.
pub const DEFAULT_THETA2: f64 = 0.7;
/// Default number of low-urgency candidate plans.
pub const DEFAULT_CANDIDATES: usize = 3;

// ─── urgency ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UrgencyLevel {
    Stale,
    High,
    Low,
}

impl std::fmt::Display for UrgencyLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UrgencyLevel::Stale => "stale",
            UrgencyLevel::High => "high",
            UrgencyLevel::Low => "low",
        })
    }
}

/// Trichotomy on Δ = deadline − now: Δ ≤ 0 stale, 0 < Δ < θ₁ high, Δ ≥ θ₁
/// low. The boundary Δ = θ₁ ("exactly two hours out") is low urgency.
pub fn classify_urgency(intent: &Intent, now: Timestamp, theta1_seconds: i64) -> UrgencyLevel {
    let delta = intent.deadline - now;
    if delta <= 0 {
        UrgencyLevel::Stale
    } else if delta < theta1_seconds {
        UrgencyLevel::High
    } else {
        UrgencyLevel::Low
    }
}

// ─── plan structure ─────────────────────────────────────────────────────────

/// The three concern flavors candidate plans are spread across.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriteriaLabel {
    EnvironmentAnalysis,
    PreferenceAlignment,
    NaturalAdjustment,
}

impl std::fmt::Display for CriteriaLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CriteriaLabel::EnvironmentAnalysis => "environment_analysis",
            CriteriaLabel::PreferenceAlignment => "preference_alignment",
            CriteriaLabel::NaturalAdjustment => "natural_adjustment",
        })
    }
}

/// How a sub-task names the room it works on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoomRef {
    /// Query the campus and take the best available match.
    BestMatch,
    /// Read the room id a prior-stage sub-task published under this key.
    FromStage(String),
    /// A literal room id.
    Explicit(String),
}

impl RoomRef {
    fn parse(s: &str) -> RoomRef {
        if s == "best_match" {
            RoomRef::BestMatch
        } else if s == "from_stage" {
            RoomRef::FromStage("room".to_string())
        } else if let Some(key) = s.strip_prefix("from_stage:") {
            RoomRef::FromStage(key.to_string())
        } else {
            RoomRef::Explicit(s.to_string())
        }
    }
}

impl std::fmt::Display for RoomRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoomRef::BestMatch => f.write_str("best_match"),
            RoomRef::FromStage(key) if key == "room" => f.write_str("from_stage"),
            RoomRef::FromStage(key) => write!(f, "from_stage:{key}"),
            RoomRef::Explicit(id) => f.write_str(id),
        }
    }
}

impl Serialize for RoomRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RoomRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(RoomRef::parse(&String::deserialize(d)?))
    }
}

/// Temperature setpoint: explicit °C or "from_preferences".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TempTarget {
    Celsius(f64),
    FromPreferences,
}

impl Serialize for TempTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TempTarget::Celsius(c) => s.serialize_f64(*c),
            TempTarget::FromPreferences => s.serialize_str("from_preferences"),
        }
    }
}

impl<'de> Deserialize<'de> for TempTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(c) => Ok(TempTarget::Celsius(c)),
            Raw::Str(s) if s == "from_preferences" => Ok(TempTarget::FromPreferences),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "temperature target must be a number or 'from_preferences', got '{s}'"
            ))),
        }
    }
}

/// Light setpoint: explicit lux, a named band, or "from_preferences".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LightTarget {
    Lux(f64),
    Level(crate::personal::LightLevel),
    FromPreferences,
}

impl Serialize for LightTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LightTarget::Lux(l) => s.serialize_f64(*l),
            LightTarget::Level(level) => s.serialize_str(&level.to_string()),
            LightTarget::FromPreferences => s.serialize_str("from_preferences"),
        }
    }
}

impl<'de> Deserialize<'de> for LightTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(l) => Ok(LightTarget::Lux(l)),
            Raw::Str(s) => match s.as_str() {
                "from_preferences" => Ok(LightTarget::FromPreferences),
                "off" => Ok(LightTarget::Level(crate::personal::LightLevel::Off)),
                "dim" => Ok(LightTarget::Level(crate::personal::LightLevel::Dim)),
                "bright" => Ok(LightTarget::Level(crate::personal::LightLevel::Bright)),
                other => Err(serde::de::Error::custom(format!(
                    "light target must be lux, off/dim/bright, or 'from_preferences', got '{other}'"
                ))),
            },
        }
    }
}

fn default_publish_key() -> String {
    "room".to_string()
}

/// Machine-readable action of one sub-task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Query the campus for the best available room and publish its id.
    FindRoom {
        #[serde(default = "default_publish_key")]
        publish_key: String,
    },
    /// Reserve a room for the intent's booking window.
    ReserveRoom {
        room: RoomRef,
        #[serde(default = "default_publish_key")]
        publish_key: String,
    },
    /// Emit setpoint commands for temperature and/or light.
    AdjustSettings {
        room: RoomRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<TempTarget>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        light: Option<LightTarget>,
    },
}

/// One unit of work inside a solution. `stage` is a barrier index: all
/// sub-tasks of stage `s` finish before any of stage `s + 1` starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubTask {
    pub id: String,
    pub description: String,
    pub stage: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<String>,
    pub requires_lm_call: bool,
    pub task: TaskSpec,
}

/// The fixture shape of a plan, before it is bound to an intent.
/// `lm_call_count` and `hierarchy_depth` may be declared (they are then
/// cross-checked) or omitted (they are derived).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionSpec {
    pub id: String,
    pub criteria_label: CriteriaLabel,
    pub narrative: String,
    pub claims: Vec<String>,
    pub sub_tasks: Vec<SubTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_call_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy_depth: Option<u32>,
}

impl SolutionSpec {
    pub fn derived_lm_call_count(&self) -> u32 {
        self.sub_tasks.iter().filter(|t| t.requires_lm_call).count() as u32
    }

    pub fn derived_hierarchy_depth(&self) -> u32 {
        1 + self.sub_tasks.iter().map(|t| t.stage).max().unwrap_or(0)
    }

    /// Structural invariants, enforced at fixture-load time.
    pub fn validate(&self) -> Result<(), Error> {
        let fail = |message: String| Error::SolutionInvalid {
            id: self.id.clone(),
            message,
        };
        if self.id.trim().is_empty() {
            return Err(fail("empty solution id".into()));
        }
        if self.narrative.trim().is_empty() {
            return Err(fail("empty narrative".into()));
        }
        if self.claims.is_empty() {
            return Err(fail("a plan must state at least one claim".into()));
        }
        if self.sub_tasks.is_empty() {
            return Err(fail("a plan must have at least one sub-task".into()));
        }
        let mut publish_keys = Vec::new();
        for task in &self.sub_tasks {
            if self.sub_tasks.iter().filter(|t| t.id == task.id).count() > 1 {
                return Err(fail(format!("duplicate sub-task id '{}'", task.id)));
            }
            for dep in &task.depends_on {
                let Some(target) = self.sub_tasks.iter().find(|t| &t.id == dep) else {
                    return Err(fail(format!(
                        "sub-task '{}' depends on unknown '{dep}'",
                        task.id
                    )));
                };
                if target.stage >= task.stage {
                    return Err(fail(format!(
                        "sub-task '{}' (stage {}) depends on '{dep}' (stage {}), \
                         but dependencies must sit at strictly smaller stages",
                        task.id, task.stage, target.stage
                    )));
                }
            }
            match &task.task {
                TaskSpec::FindRoom { publish_key }
                | TaskSpec::ReserveRoom { publish_key, .. } => {
                    if publish_keys.contains(publish_key) {
                        return Err(fail(format!(
                            "publish key '{publish_key}' used by more than one sub-task"
                        )));
                    }
                    publish_keys.push(publish_key.clone());
                }
                TaskSpec::AdjustSettings {
                    temperature, light, ..
                } => {
                    if temperature.is_none() && light.is_none() {
                        return Err(fail(format!(
                            "sub-task '{}' adjusts neither temperature nor light",
                            task.id
                        )));
                    }
                }
            }
        }
        if let Some(declared) = self.lm_call_count {
            if declared != self.derived_lm_call_count() {
                return Err(fail(format!(
                    "declared lm_call_count {declared} but {} sub-tasks require LM calls",
                    self.derived_lm_call_count()
                )));
            }
        }
        if let Some(declared) = self.hierarchy_depth {
            if declared != self.derived_hierarchy_depth() {
                return Err(fail(format!(
                    "declared hierarchy_depth {declared} but stages imply {}",
                    self.derived_hierarchy_depth()
                )));
            }
        }
        Ok(())
    }
}

/// A candidate plan bound to the intent it answers.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub id: String,
    pub intent_id: String,
    pub criteria_label: CriteriaLabel,
    pub narrative: String,
    pub claims: Vec<String>,
    pub sub_tasks: Vec<SubTask>,
    pub lm_call_count: u32,
    pub hierarchy_depth: u32,
}

impl Solution {
    pub fn from_spec(spec: SolutionSpec, intent_id: &str) -> Result<Solution, Error> {
        spec.validate()?;
        let lm_call_count = spec.derived_lm_call_count();
        let hierarchy_depth = spec.derived_hierarchy_depth();
        Ok(Solution {
            id: spec.id,
            intent_id: intent_id.to_string(),
            criteria_label: spec.criteria_label,
            narrative: spec.narrative,
            claims: spec.claims,
            sub_tasks: spec.sub_tasks,
            lm_call_count,
            hierarchy_depth,
        })
    }

    /// The plan's canonicalized claim set for precision scoring.
    pub fn claim_set(&self) -> ClaimSet {
        ClaimSet::new(&self.claims)
    }
}

// ─── verdicts and solution memory ───────────────────────────────────────────

/// What the evaluator said about one candidate set. A verdict without a
/// selection is feedback-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorVerdict {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_solution_id: Option<String>,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
}

impl EvaluatorVerdict {
    pub fn validate(&self) -> Result<(), Error> {
        if self.reason.trim().is_empty() {
            return Err(Error::SolutionInvalid {
                id: self
                    .selected_solution_id
                    .clone()
                    .unwrap_or_else(|| "verdict".into()),
                message: "evaluator verdict needs a non-empty reason".into(),
            });
        }
        Ok(())
    }
}

/// A remembered planning episode, recallable by intent-text similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionMemoryEntry {
    pub intent_text: String,
    pub intent_embedding: EmbeddingVector,
    pub best_solution: Solution,
    pub verdict: EvaluatorVerdict,
    pub stored_at: Timestamp,
}

/// Building-wide append-only memory of evaluator verdicts.
#[derive(Debug, Clone, Default)]
pub struct SolutionMemory {
    entries: Vec<SolutionMemoryEntry>,
}

impl SolutionMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[SolutionMemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn store(&mut self, entry: SolutionMemoryEntry) {
        self.entries.push(entry);
    }

    /// Highest-similarity entry at or above `theta2`; ties go to the most
    /// recent entry. Below the threshold plans are generated from scratch.
    pub fn recall_solution_hints(
        &self,
        embedder: &Embedder,
        intent_text: &str,
        theta2: f64,
    ) -> Option<&SolutionMemoryEntry> {
        let probe = embedder.embed(intent_text);
        let mut best: Option<(f64, &SolutionMemoryEntry)> = None;
        for entry in &self.entries {
            let sim = cosine(&probe, &entry.intent_embedding)
                .expect("memory embeddings share the run dimension");
            if sim < theta2 {
                continue;
            }
            match &best {
                Some((best_sim, _)) if sim < *best_sim => {}
                _ => best = Some((sim, entry)), // later entry wins exact ties
            }
        }
        best.map(|(_, e)| e)
    }
}

/// Hint lines carried into plan prompts when recall fires: the prior
/// best solution, the verdict's reason, and its decisive factors.
pub fn hint_lines(entry: &SolutionMemoryEntry) -> Vec<String> {
    let mut hints = vec![
        format!(
            "prior solution {}: {}",
            entry.best_solution.id, entry.best_solution.narrative
        ),
        format!("reason: {}", entry.verdict.reason),
    ];
    if !entry.verdict.factors.is_empty() {
        hints.push(format!("factors: {}", entry.verdict.factors.join("; ")));
    }
    if let Some(feedback) = &entry.verdict.feedback {
        hints.push(format!("feedback: {feedback}"));
    }
    hints
}

// ─── planning ───────────────────────────────────────────────────────────────

fn expect_solution(
    response: crate::gateway::ModelResponse,
    context: String,
    intent_id: &str,
) -> Result<Solution, Error> {
    match response.structured {
        Some(StructuredPayload::Solution(spec)) => Solution::from_spec(spec, intent_id),
        _ => Err(Error::FixtureInconsistent {
            context,
            message: "planner response must carry a solution payload".into(),
        }),
    }
}

/// One fast plan for a high-urgency intent (single gateway call).
pub fn plan_high_urgency(
    backend: &dyn Backend,
    ledger: &CallLedger,
    intent: &Intent,
    urgency: UrgencyLevel,
    free_rooms_now: usize,
    now: Timestamp,
) -> Result<Solution, Error> {
    if urgency != UrgencyLevel::High {
        return Err(Error::WrongUrgency {
            expected: "high".into(),
            actual: urgency.to_string(),
        });
    }
    let body = format!(
        "Produce one immediately executable plan for this request.\n\
         request: {}\nfree rooms right now: {free_rooms_now}\nkey={}/plan",
        intent.raw_text, intent.id
    );
    let prompt = Prompt::new(Role::HighUrgency, body)?;
    let response = invoke(backend, &prompt, ledger, now)?;
    expect_solution(response, format!("high_urgency/{}/plan", intent.id), &intent.id)
}

/// `n ≥ 2` candidate plans for a low-urgency intent, one gateway call per
/// candidate. When `hint` is present every prompt carries its lines in the
/// structured `hints` field; otherwise hints stay empty.
pub fn plan_low_urgency(
    backend: &dyn Backend,
    ledger: &CallLedger,
    intent: &Intent,
    urgency: UrgencyLevel,
    hint: Option<&SolutionMemoryEntry>,
    n: usize,
    now: Timestamp,
) -> Result<Vec<Solution>, Error> {
    if urgency != UrgencyLevel::Low {
        return Err(Error::WrongUrgency {
            expected: "low".into(),
            actual: urgency.to_string(),
        });
    }
    if n < 2 {
        return Err(Error::TooFewCandidates { n });
    }
    let hints = hint.map(hint_lines).unwrap_or_default();
    let mut solutions = Vec::with_capacity(n);
    for k in 1..=n {
        let body = format!(
            "Propose candidate plan {k} of {n} for this request, exploring a distinct criterion.\n\
             request: {}\nkey={}/plan/{k}",
            intent.raw_text, intent.id
        );
        let prompt = Prompt::new(Role::LowUrgency, body)?.with_hints(hints.clone());
        let response = invoke(backend, &prompt, ledger, now)?;
        let solution = expect_solution(
            response,
            format!("low_urgency/{}/plan/{k}", intent.id),
            &intent.id,
        )?;
        solutions.push(solution);
    }
    // Candidate ids must be unique and criteria coverage must span
    // min(n, 3) distinct flavors.
    let mut labels: Vec<CriteriaLabel> = Vec::new();
    for s in &solutions {
        if solutions.iter().filter(|t| t.id == s.id).count() > 1 {
            return Err(Error::FixtureInconsistent {
                context: format!("low_urgency/{}", intent.id),
                message: format!("duplicate candidate solution id '{}'", s.id),
            });
        }
        if !labels.contains(&s.criteria_label) {
            labels.push(s.criteria_label);
        }
    }
    if labels.len() < n.min(3) {
        return Err(Error::FixtureInconsistent {
            context: format!("low_urgency/{}", intent.id),
            message: format!(
                "{n} candidates cover only {} distinct criteria labels",
                labels.len()
            ),
        });
    }
    Ok(solutions)
}

// ─── scoring and Pareto ─────────────────────────────────────────────────────

/// A candidate with its metric triple attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSolution {
    pub solution: Solution,
    pub metrics: MetricsTriple,
}

/// Score each candidate: usage cost against the heaviest candidate in this
/// very set, narrative similarity to the intent text, and claim precision
/// against the reference commands.
pub fn score_solutions(
    embedder: &Embedder,
    solutions: Vec<Solution>,
    intent: &Intent,
    reference: &ClaimSet,
) -> Result<Vec<ScoredSolution>, Error> {
    if solutions.is_empty() {
        return Err(Error::EmptySolutionSet { operation: "score" });
    }
    let n_max = solutions
        .iter()
        .map(|s| s.lm_call_count)
        .max()
        .expect("non-empty");
    let intent_vec = embedder.embed(&intent.raw_text);
    let scored: Vec<Result<ScoredSolution, Error>> = par::map_indices(solutions.len(), |i| {
        let solution = &solutions[i];
        let narrative_vec = embedder.embed(&solution.narrative);
        let similarity = cosine(&narrative_vec, &intent_vec)?;
        let prec = precision(&solution.claim_set(), reference)?;
        Ok(ScoredSolution {
            solution: solution.clone(),
            metrics: MetricsTriple {
                usage_cost: lm_call_usage_cost(solution.lm_call_count, n_max),
                similarity,
                precision: prec,
            },
        })
    });
    scored.into_iter().collect()
}

/// Weak Pareto dominance: `a` dominates `b` iff `a` is no worse on every
/// axis (cost ≤, similarity ≥, precision ≥) and strictly better on at least
/// one. Exact float comparison, no epsilon.
pub fn dominates(a: &MetricsTriple, b: &MetricsTriple) -> bool {
    let no_worse =
        a.usage_cost <= b.usage_cost && a.similarity >= b.similarity && a.precision >= b.precision;
    let strictly_better =
        a.usage_cost < b.usage_cost || a.similarity > b.similarity || a.precision > b.precision;
    no_worse && strictly_better
}

/// Indices of the undominated triples, in input order.
pub fn pareto_front_indices(triples: &[MetricsTriple]) -> Vec<usize> {
    let undominated: Vec<bool> = par::map_indices(triples.len(), |i| {
        triples
            .iter()
            .enumerate()
            .all(|(j, other)| j == i || !dominates(other, &triples[i]))
    });
    undominated
        .into_iter()
        .enumerate()
        .filter_map(|(i, keep)| keep.then_some(i))
        .collect()
}

/// The undominated candidates, preserving input order (duplicates of the
/// same triple dominate nobody, so exact ties all survive).
pub fn pareto_front(scored: &[ScoredSolution]) -> Vec<ScoredSolution> {
    let triples: Vec<MetricsTriple> = scored.iter().map(|s| s.metrics).collect();
    pareto_front_indices(&triples)
        .into_iter()
        .map(|i| scored[i].clone())
        .collect()
}

/// Pick the plan to execute: the evaluator's explicit selection when it sits
/// on the front, otherwise the deterministic tie-break — highest precision,
/// then highest similarity, then lowest cost, then lowest id.
pub fn select_final(
    front: &[ScoredSolution],
    verdict: &EvaluatorVerdict,
) -> Result<ScoredSolution, Error> {
    if front.is_empty() {
        return Err(Error::EmptySolutionSet {
            operation: "select from",
        });
    }
    if let Some(wanted) = &verdict.selected_solution_id {
        if let Some(hit) = front.iter().find(|s| &s.solution.id == wanted) {
            return Ok(hit.clone());
        }
    }
    let mut best = &front[0];
    for candidate in &front[1..] {
        let better = candidate.metrics.precision > best.metrics.precision
            || (candidate.metrics.precision == best.metrics.precision
                && (candidate.metrics.similarity > best.metrics.similarity
                    || (candidate.metrics.similarity == best.metrics.similarity
                        && (candidate.metrics.usage_cost < best.metrics.usage_cost
                            || (candidate.metrics.usage_cost == best.metrics.usage_cost
                                && candidate.solution.id < best.solution.id)))));
        if better {
            best = candidate;
        }
    }
    Ok(best.clone())
}

/// Ask the evaluator to judge the scored candidates, then append the episode
/// (intent, verdict, and the winning solution) to solution memory.
pub fn evaluate_and_learn(
    backend: &dyn Backend,
    ledger: &CallLedger,
    embedder: &Embedder,
    intent: &Intent,
    scored: &[ScoredSolution],
    memory: &mut SolutionMemory,
    now: Timestamp,
) -> Result<EvaluatorVerdict, Error> {
    if scored.is_empty() {
        return Err(Error::EmptySolutionSet {
            operation: "evaluate",
        });
    }
    let mut body = format!(
        "Judge these candidate plans against the original request and pick the best.\n\
         request: {}\n",
        intent.raw_text
    );
    for s in scored {
        body.push_str(&format!(
            "candidate {}: label={} calls={} cost={:.4} similarity={:.4} precision={:.4}\n",
            s.solution.id,
            s.solution.criteria_label,
            s.solution.lm_call_count,
            s.metrics.usage_cost,
            s.metrics.similarity,
            s.metrics.precision
        ));
    }
    body.push_str(&format!("key={}/evaluate", intent.id));
    let prompt = Prompt::new(Role::Evaluator, body)?;
    let response = invoke(backend, &prompt, ledger, now)?;
    let verdict = match response.structured {
        Some(StructuredPayload::Verdict(v)) => v,
        _ => {
            return Err(Error::FixtureInconsistent {
                context: format!("evaluator/{}/evaluate", intent.id),
                message: "evaluator response must carry a verdict payload".into(),
            });
        }
    };
    verdict.validate()?;
    if let Some(selected) = &verdict.selected_solution_id {
        if !scored.iter().any(|s| &s.solution.id == selected) {
            return Err(Error::UnknownSelection {
                id: selected.clone(),
            });
        }
    }
    let front = pareto_front(scored);
    let best = select_final(&front, &verdict)?;
    memory.store(SolutionMemoryEntry {
        intent_text: intent.raw_text.clone(),
        intent_embedding: embedder.embed(&intent.raw_text),
        best_solution: best.solution,
        verdict: verdict.clone(),
        stored_at: now,
    });
    Ok(verdict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ModelResponse, RecordingBackend, ScriptedBackend};
    use crate::personal::PreferenceSet;

    const T0: Timestamp = 1_741_960_800;

    fn intent(deadline_offset: i64) -> Intent {
        Intent {
            id: "i1".into(),
            user_id: "alice".into(),
            raw_text: "book a meeting room for the team sync".into(),
            plan_type: "meeting room reservation".into(),
            deadline: T0 + deadline_offset,
            preferences: Some(PreferenceSet::default()),
            submitted_at: T0,
            inherited_from: None,
        }
    }

    #[test]
    fn urgency_trichotomy_on_the_named_boundaries() {
        assert_eq!(classify_urgency(&intent(-600), T0, 7200), UrgencyLevel::Stale);
        assert_eq!(classify_urgency(&intent(0), T0, 7200), UrgencyLevel::Stale);
        assert_eq!(classify_urgency(&intent(3600), T0, 7200), UrgencyLevel::High);
        assert_eq!(classify_urgency(&intent(7199), T0, 7200), UrgencyLevel::High);
        assert_eq!(classify_urgency(&intent(7200), T0, 7200), UrgencyLevel::Low);
        assert_eq!(classify_urgency(&intent(86400), T0, 7200), UrgencyLevel::Low);
    }

    fn subtask(id: &str, stage: u32, lm: bool, task: TaskSpec) -> SubTask {
        SubTask {
            id: id.into(),
            description: format!("{id} step"),
            stage,
            depends_on: Vec::new(),
            requires_lm_call: lm,
            task,
        }
    }

    fn spec(id: &str, label: CriteriaLabel, narrative: &str, n_lm_stages: u32) -> SolutionSpec {
        let sub_tasks = (0..n_lm_stages)
            .map(|s| {
                let task = if s == 0 {
                    TaskSpec::ReserveRoom {
                        room: RoomRef::BestMatch,
                        publish_key: "room".into(),
                    }
                } else {
                    TaskSpec::AdjustSettings {
                        room: RoomRef::FromStage("room".into()),
                        temperature: Some(TempTarget::Celsius(21.0)),
                        light: None,
                    }
                };
                let mut t = subtask(&format!("t{s}"), s, true, task);
                if s > 0 {
                    t.depends_on = vec![format!("t{}", s - 1)];
                }
                t
            })
            .collect();
        SolutionSpec {
            id: id.into(),
            criteria_label: label,
            narrative: narrative.into(),
            claims: vec!["booking reserve".into(), "temperature set 21".into()],
            sub_tasks,
            lm_call_count: None,
            hierarchy_depth: None,
        }
    }

    #[test]
    fn solution_derives_call_count_and_depth() {
        let s = Solution::from_spec(
            spec("s1", CriteriaLabel::EnvironmentAnalysis, "narrative", 3),
            "i1",
        )
        .unwrap();
        assert_eq!(s.lm_call_count, 3);
        assert_eq!(s.hierarchy_depth, 3);
    }

    #[test]
    fn declared_counts_must_match_derived() {
        let mut sp = spec("s1", CriteriaLabel::EnvironmentAnalysis, "n", 2);
        sp.lm_call_count = Some(5);
        assert!(matches!(sp.validate(), Err(Error::SolutionInvalid { .. })));
        sp.lm_call_count = Some(2);
        sp.hierarchy_depth = Some(1);
        assert!(sp.validate().is_err());
        sp.hierarchy_depth = Some(2);
        assert!(sp.validate().is_ok());
    }

    #[test]
    fn dependency_on_same_or_later_stage_is_rejected() {
        let mut sp = spec("s1", CriteriaLabel::EnvironmentAnalysis, "n", 2);
        sp.sub_tasks[0].depends_on = vec!["t1".into()];
        let err = sp.validate().unwrap_err();
        assert!(err.to_string().contains("strictly smaller"), "{err}");
    }

    #[test]
    fn three_independent_lookups_share_stage_zero() {
        let sub_tasks = (0..3)
            .map(|k| {
                subtask(
                    &format!("lookup{k}"),
                    0,
                    true,
                    TaskSpec::FindRoom {
                        publish_key: format!("room{k}"),
                    },
                )
            })
            .collect();
        let sp = SolutionSpec {
            id: "flat".into(),
            criteria_label: CriteriaLabel::EnvironmentAnalysis,
            narrative: "three lookups".into(),
            claims: vec!["booking query".into()],
            sub_tasks,
            lm_call_count: None,
            hierarchy_depth: None,
        };
        let s = Solution::from_spec(sp, "i1").unwrap();
        assert_eq!(s.hierarchy_depth, 1);
        assert_eq!(s.lm_call_count, 3);
    }

    fn triple(cost: f64, sim: f64, prec: f64) -> MetricsTriple {
        MetricsTriple {
            usage_cost: cost,
            similarity: sim,
            precision: prec,
        }
    }

    #[test]
    fn dominance_requires_no_worse_everywhere_and_better_somewhere() {
        let a = triple(0.4, 0.9, 0.5);
        let b = triple(0.6, 0.8, 0.4);
        assert!(dominates(&a, &b));
        assert!(!dominates(&b, &a));
        // Equal triples dominate nobody.
        assert!(!dominates(&a, &a));
        // Trade-offs don't dominate.
        let c = triple(0.3, 0.7, 0.9);
        assert!(!dominates(&a, &c));
        assert!(!dominates(&c, &a));
    }

    #[test]
    fn golden_quintet_front_is_the_cheap_row_and_the_precise_row() {
        let quintet = [
            triple(0.6321, 0.7741, 0.4737),
            triple(0.6321, 0.7872, 0.4737),
            triple(0.4866, 0.8288, 0.4211),
            triple(0.6321, 0.7937, 0.5263),
            triple(0.6321, 0.7938, 0.4211),
        ];
        assert_eq!(pareto_front_indices(&quintet), vec![2, 3]);
    }

    #[test]
    fn exact_duplicate_triples_all_stay_on_the_front() {
        let t = triple(0.5, 0.5, 0.5);
        assert_eq!(pareto_front_indices(&[t, t]), vec![0, 1]);
    }

    #[test]
    fn score_solutions_uses_the_sets_own_max_call_count() {
        let embedder = Embedder::default();
        let it = intent(10_000);
        let reference = ClaimSet::new(["booking reserve", "temperature set 21", "light set 150"]);
        let solutions: Vec<Solution> = [3u32, 3, 2]
            .iter()
            .zip([
                CriteriaLabel::EnvironmentAnalysis,
                CriteriaLabel::PreferenceAlignment,
                CriteriaLabel::NaturalAdjustment,
            ])
            .enumerate()
            .map(|(k, (&stages, label))| {
                Solution::from_spec(spec(&format!("s{k}"), label, "book a meeting room", stages), &it.id)
                    .unwrap()
            })
            .collect();
        let scored = score_solutions(&embedder, solutions, &it, &reference).unwrap();
        assert!((scored[0].metrics.usage_cost - 0.6321).abs() < 1e-4);
        assert!((scored[1].metrics.usage_cost - 0.6321).abs() < 1e-4);
        assert!((scored[2].metrics.usage_cost - 0.4866).abs() < 1e-4);
        // 2 of the plan's 2 claims appear among the 3 reference commands.
        assert!((scored[0].metrics.precision - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scoring_an_empty_set_is_a_usage_error() {
        let embedder = Embedder::default();
        assert!(matches!(
            score_solutions(&embedder, Vec::new(), &intent(9000), &ClaimSet::new(["x"])),
            Err(Error::EmptySolutionSet { .. })
        ));
    }

    fn low_urgency_backend(n: usize, distinct: bool) -> ScriptedBackend {
        let mut b = ScriptedBackend::new();
        let labels = [
            CriteriaLabel::EnvironmentAnalysis,
            CriteriaLabel::PreferenceAlignment,
            CriteriaLabel::NaturalAdjustment,
        ];
        for k in 1..=n {
            let label = if distinct { labels[(k - 1) % 3] } else { labels[0] };
            b.insert(
                Role::LowUrgency,
                format!("i1/plan/{k}"),
                ModelResponse::structured(StructuredPayload::Solution(spec(
                    &format!("opt-{k}"),
                    label,
                    &format!("candidate {k} narrative"),
                    2,
                ))),
            );
        }
        b
    }

    #[test]
    fn low_urgency_planning_returns_n_distinct_candidates() {
        let ledger = CallLedger::new();
        let it = intent(10_000);
        let got = plan_low_urgency(
            &low_urgency_backend(3, true),
            &ledger,
            &it,
            UrgencyLevel::Low,
            None,
            3,
            T0,
        )
        .unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(ledger.total_for(&[Role::LowUrgency]), 3);
        let ids: Vec<&str> = got.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["opt-1", "opt-2", "opt-3"]);
    }

    #[test]
    fn low_urgency_planning_rejects_n_below_two_and_wrong_urgency() {
        let ledger = CallLedger::new();
        let it = intent(10_000);
        assert!(matches!(
            plan_low_urgency(
                &low_urgency_backend(1, true),
                &ledger,
                &it,
                UrgencyLevel::Low,
                None,
                1,
                T0
            ),
            Err(Error::TooFewCandidates { n: 1 })
        ));
        assert!(matches!(
            plan_low_urgency(
                &low_urgency_backend(3, true),
                &ledger,
                &it,
                UrgencyLevel::High,
                None,
                3,
                T0
            ),
            Err(Error::WrongUrgency { .. })
        ));
    }

    #[test]
    fn criteria_labels_must_span_distinct_flavors() {
        let ledger = CallLedger::new();
        let it = intent(10_000);
        let err = plan_low_urgency(
            &low_urgency_backend(3, false),
            &ledger,
            &it,
            UrgencyLevel::Low,
            None,
            3,
            T0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("distinct criteria"), "{err}");
    }

    #[test]
    fn hints_reach_prompts_exactly_when_recall_fired() {
        let embedder = Embedder::default();
        let it = intent(10_000);
        let entry = SolutionMemoryEntry {
            intent_text: it.raw_text.clone(),
            intent_embedding: embedder.embed(&it.raw_text),
            best_solution: Solution::from_spec(
                spec("prior", CriteriaLabel::PreferenceAlignment, "prior winning plan", 2),
                "i0",
            )
            .unwrap(),
            verdict: EvaluatorVerdict {
                selected_solution_id: Some("prior".into()),
                reason: "best preference fit".into(),
                factors: vec!["temperature".into(), "availability".into()],
                feedback: None,
            },
            stored_at: T0 - 100,
        };

        let recording = RecordingBackend::new(low_urgency_backend(3, true));
        let ledger = CallLedger::new();
        plan_low_urgency(&recording, &ledger, &it, UrgencyLevel::Low, Some(&entry), 3, T0).unwrap();
        for prompt in recording.prompts() {
            assert!(!prompt.hints.is_empty());
            let joined = prompt.hints.join("\n");
            assert!(joined.contains("prior winning plan"));
            assert!(joined.contains("best preference fit"));
            assert!(joined.contains("temperature"));
        }

        let recording = RecordingBackend::new(low_urgency_backend(3, true));
        plan_low_urgency(&recording, &ledger, &it, UrgencyLevel::Low, None, 3, T0).unwrap();
        for prompt in recording.prompts() {
            assert!(prompt.hints.is_empty());
        }
    }

    #[test]
    fn high_urgency_planning_rejects_low_intents() {
        let ledger = CallLedger::new();
        let it = intent(9000);
        let b = ScriptedBackend::new();
        assert!(matches!(
            plan_high_urgency(&b, &ledger, &it, UrgencyLevel::Low, 5, T0),
            Err(Error::WrongUrgency { .. })
        ));
        assert_eq!(ledger.total(), 0);
    }

    #[test]
    fn solution_memory_threshold_is_inclusive() {
        let embedder = Embedder::default();
        let mut memory = SolutionMemory::new();
        let text = "book a meeting room for the team sync";
        memory.store(SolutionMemoryEntry {
            intent_text: text.into(),
            intent_embedding: embedder.embed(text),
            best_solution: Solution::from_spec(
                spec("s", CriteriaLabel::EnvironmentAnalysis, "n", 2),
                "i0",
            )
            .unwrap(),
            verdict: EvaluatorVerdict {
                selected_solution_id: Some("s".into()),
                reason: "r".into(),
                factors: Vec::new(),
                feedback: None,
            },
            stored_at: T0,
        });
        // Read-your-writes: identical text similarity is 1.0 ≥ θ₂.
        assert!(memory
            .recall_solution_hints(&embedder, text, DEFAULT_THETA2)
            .is_some());
        // Exactly at the threshold fires (θ₂ = 1.0 against similarity 1.0).
        assert!(memory.recall_solution_hints(&embedder, text, 1.0).is_some());
        // Dissimilar text stays below the threshold.
        assert!(memory
            .recall_solution_hints(&embedder, "unrelated catering order", DEFAULT_THETA2)
            .is_none());
    }

    #[test]
    fn solution_memory_prefers_higher_similarity_then_recency() {
        let embedder = Embedder::default();
        let mut memory = SolutionMemory::new();
        let mk = |text: &str, id: &str, at: Timestamp| SolutionMemoryEntry {
            intent_text: text.into(),
            intent_embedding: embedder.embed(text),
            best_solution: Solution::from_spec(
                spec(id, CriteriaLabel::EnvironmentAnalysis, "n", 2),
                "i0",
            )
            .unwrap(),
            verdict: EvaluatorVerdict {
                selected_solution_id: Some(id.into()),
                reason: "r".into(),
                factors: Vec::new(),
                feedback: None,
            },
            stored_at: at,
        };
        let probe = "book the large meeting room for friday";
        memory.store(mk("book the large meeting room for monday", "close", T0));
        memory.store(mk(probe, "exact-old", T0 + 10));
        memory.store(mk(probe, "exact-new", T0 + 20));
        let hit = memory
            .recall_solution_hints(&embedder, probe, 0.7)
            .unwrap();
        assert_eq!(hit.best_solution.id, "exact-new");
    }

    fn scored_set() -> Vec<ScoredSolution> {
        let mk = |id: &str, cost: f64, sim: f64, prec: f64| ScoredSolution {
            solution: Solution::from_spec(
                spec(id, CriteriaLabel::EnvironmentAnalysis, "n", 2),
                "i1",
            )
            .unwrap(),
            metrics: triple(cost, sim, prec),
        };
        vec![
            mk("a", 0.4866, 0.8288, 0.4211),
            mk("b", 0.6321, 0.7937, 0.5263),
        ]
    }

    #[test]
    fn select_final_honors_on_front_selection_else_tie_breaks() {
        let front = scored_set();
        let chosen = select_final(
            &front,
            &EvaluatorVerdict {
                selected_solution_id: Some("a".into()),
                reason: "cheapest".into(),
                factors: Vec::new(),
                feedback: None,
            },
        )
        .unwrap();
        assert_eq!(chosen.solution.id, "a");

        // Off-front (unknown-to-front) selection falls back to tie-break:
        // highest precision wins.
        let chosen = select_final(
            &front,
            &EvaluatorVerdict {
                selected_solution_id: Some("zzz".into()),
                reason: "?".into(),
                factors: Vec::new(),
                feedback: None,
            },
        )
        .unwrap();
        assert_eq!(chosen.solution.id, "b");

        assert!(matches!(
            select_final(
                &[],
                &EvaluatorVerdict {
                    selected_solution_id: None,
                    reason: "r".into(),
                    factors: Vec::new(),
                    feedback: None,
                }
            ),
            Err(Error::EmptySolutionSet { .. })
        ));
    }

    fn evaluator_backend(selected: Option<&str>) -> ScriptedBackend {
        let mut b = ScriptedBackend::new();
        b.insert(
            Role::Evaluator,
            "i1/evaluate",
            ModelResponse::structured(StructuredPayload::Verdict(EvaluatorVerdict {
                selected_solution_id: selected.map(str::to_string),
                reason: "balances precision and cost".into(),
                factors: vec!["precision".into()],
                feedback: selected.is_none().then(|| "prefer warmer rooms".to_string()),
            })),
        );
        b
    }

    #[test]
    fn evaluate_and_learn_appends_one_memory_entry() {
        let embedder = Embedder::default();
        let ledger = CallLedger::new();
        let mut memory = SolutionMemory::new();
        let scored = scored_set();
        let verdict = evaluate_and_learn(
            &evaluator_backend(Some("b")),
            &ledger,
            &embedder,
            &intent(10_000),
            &scored,
            &mut memory,
            T0,
        )
        .unwrap();
        assert_eq!(verdict.selected_solution_id.as_deref(), Some("b"));
        assert_eq!(memory.len(), 1);
        assert_eq!(memory.entries()[0].best_solution.id, "b");
        assert_eq!(ledger.total_for(&[Role::Evaluator]), 1);
    }

    #[test]
    fn feedback_only_verdict_stores_the_tie_break_winner() {
        let embedder = Embedder::default();
        let ledger = CallLedger::new();
        let mut memory = SolutionMemory::new();
        let verdict = evaluate_and_learn(
            &evaluator_backend(None),
            &ledger,
            &embedder,
            &intent(10_000),
            &scored_set(),
            &mut memory,
            T0,
        )
        .unwrap();
        assert!(verdict.selected_solution_id.is_none());
        assert_eq!(memory.len(), 1);
        // Tie-break: "b" has the higher precision.
        assert_eq!(memory.entries()[0].best_solution.id, "b");
    }

    #[test]
    fn evaluator_selecting_an_unknown_candidate_is_an_error() {
        let embedder = Embedder::default();
        let ledger = CallLedger::new();
        let mut memory = SolutionMemory::new();
        let err = evaluate_and_learn(
            &evaluator_backend(Some("ghost")),
            &ledger,
            &embedder,
            &intent(10_000),
            &scored_set(),
            &mut memory,
            T0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownSelection { .. }));
        assert!(memory.is_empty());
    }
}
