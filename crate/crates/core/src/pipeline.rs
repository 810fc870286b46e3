//! End-to-end scenario runs: intents flow through personal analysis with
//! preference recall, urgency classification, planning, scoring, Pareto
//! filtering and evaluation, per-sub-task execution, cross-intent
//! negotiation, the launch queue, and finally the closed monitoring loop.
//!
//! Apart from wall time, a run is a pure function of (scenario, fixture,
//! overrides): the campus comes from a seeded generator, the clock is
//! simulated, and every gateway answer is scripted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::campus::{generate_campus, query_available};
use crate::decision::{
    classify_urgency, evaluate_and_learn, pareto_front, plan_high_urgency, plan_low_urgency,
    score_solutions, select_final, EvaluatorVerdict, Solution, SolutionMemory, UrgencyLevel,
};
use crate::embedding::{cosine, Embedder};
use crate::error::Error;
use crate::execution::{
    negotiate_conflicts, run_group, Action, Command, ExecutionContext, Field, NegotiationOutcome,
    RendezvousStore,
};
use crate::gateway::{Backend, CallLedger, Role, ScriptedBackend};
use crate::management::{run_monitoring, CommandQueue, DriftInjection, MonitoringWindow};
use crate::metrics::{precision, ClaimSet};
use crate::personal::{analyze_intent, self_evaluate, AlignmentVerdict, CaseMemory, Intent};
use crate::scenario::Scenario;
use crate::time::{TimeSlot, Timestamp};

/// CLI-level knob overrides; `None` keeps the scenario's value.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub theta1_seconds: Option<i64>,
    pub theta2: Option<f64>,
    pub candidates: Option<usize>,
    pub tick_seconds: Option<i64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// When set, per-user case memory is read from and persisted under
    /// `<out_dir>/memory/`.
    pub out_dir: Option<PathBuf>,
    pub overrides: RunOverrides,
}

/// One line of the candidate table. High-urgency plans are mandatory
/// singletons, so they carry no usage cost and no front membership.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRow {
    pub intent_key: String,
    pub solution_id: String,
    pub urgency: UrgencyLevel,
    pub lm_calls: u32,
    pub usage_cost: Option<f64>,
    pub similarity: f64,
    pub precision: Option<f64>,
    pub on_front: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentOutcome {
    pub key: String,
    pub user: String,
    pub urgency: UrgencyLevel,
    pub recalled_case: Option<String>,
    pub inherited_preferences: bool,
    pub hint_fired: bool,
    pub self_alignment: &'static str,
    pub chosen_solution: Option<String>,
    pub verdict_reason: Option<String>,
    pub room: Option<String>,
    pub commands_emitted: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario_name: String,
    pub seed: u64,
    pub clock_start: Timestamp,
    pub theta1_seconds: i64,
    pub theta2: f64,
    pub candidates: usize,
    pub intents: Vec<IntentOutcome>,
    pub pareto_rows: Vec<ParetoRow>,
    pub negotiations: Vec<NegotiationOutcome>,
    pub dispatch_log: Vec<String>,
    pub monitor_log: Vec<String>,
    pub ledger_counts: BTreeMap<String, u64>,
    pub alerts: Vec<String>,
    /// (room, final temperature, final light) for every room a command
    /// touched, in room order.
    pub touched_rooms: Vec<(String, f64, f64)>,
    pub ticks_run: u64,
    pub wall: Duration,
}

/// Load a scenario and its fixture from disk and run it.
pub fn run_scenario(path: &Path, options: &RunOptions) -> Result<RunReport, Error> {
    let scenario = Scenario::load(path)?;
    let backend = ScriptedBackend::from_fixture_file(&scenario.fixture_path(path))?;
    run_loaded(&scenario, &backend, options)
}

/// Run an already-loaded scenario against any backend (tests wrap scripted
/// backends in recorders to inspect prompt traffic).
pub fn run_loaded(
    scenario: &Scenario,
    backend: &dyn Backend,
    options: &RunOptions,
) -> Result<RunReport, Error> {
    let started = Instant::now();
    let ov = &options.overrides;
    let seed = ov.seed.unwrap_or(scenario.campus_seed);
    let theta1 = ov.theta1_seconds.unwrap_or(scenario.config.theta1_seconds);
    let theta2 = ov.theta2.unwrap_or(scenario.config.theta2);
    let candidates = ov.candidates.unwrap_or(scenario.config.candidates);
    let tick_seconds = ov.tick_seconds.unwrap_or(scenario.config.tick_seconds);
    let booking_duration = scenario.config.booking_duration_seconds;

    let embedder = Embedder::default();
    let ledger = CallLedger::new();
    let store = RendezvousStore::new();
    let mut solution_memory = SolutionMemory::new();
    let day = scenario.clock_start - scenario.clock_start.rem_euclid(86_400);
    let mut campus = generate_campus(seed, day);

    let memory_dir = options.out_dir.as_ref().map(|d| d.join("memory"));
    let mut case_memories: BTreeMap<String, CaseMemory> = BTreeMap::new();
    for intent in &scenario.intents {
        if !case_memories.contains_key(&intent.user) {
            let memory = match &memory_dir {
                Some(dir) => CaseMemory::load_jsonl(
                    &dir.join(format!("{}.jsonl", intent.user)),
                    &intent.user,
                )?,
                None => CaseMemory::new(&intent.user),
            };
            case_memories.insert(intent.user.clone(), memory);
        }
    }

    let mut outcomes: Vec<IntentOutcome> = Vec::new();
    let mut pareto_rows: Vec<ParetoRow> = Vec::new();
    let mut all_commands: Vec<Command> = Vec::new();
    let mut intents_by_id: BTreeMap<String, Intent> = BTreeMap::new();
    let mut clock = scenario.clock_start;

    for (ord, sintent) in scenario.intents.iter().enumerate() {
        let submitted_at = scenario.clock_start + sintent.submit_offset_seconds;
        clock = clock.max(submitted_at);

        let mut intent = analyze_intent(
            backend,
            &ledger,
            &sintent.key,
            &sintent.user,
            &sintent.text,
            submitted_at,
        )?;

        // Preference recall (strict similarity > 0.5 and age < 1h); a recalled
        // case only fills in when the request stated nothing itself.
        let memory = case_memories.get_mut(&sintent.user).expect("pre-seeded");
        let recalled = memory
            .recall_preferences(&embedder, &intent.plan_type, submitted_at)
            .cloned();
        let mut inherited = false;
        if intent.preferences.as_ref().is_none_or(|p| p.is_unconstrained()) {
            if let Some(case) = &recalled {
                intent.preferences = Some(case.preferences.clone());
                intent.inherited_from = Some(case.case_id.clone());
                inherited = true;
            }
        }

        let urgency = classify_urgency(&intent, submitted_at, theta1);
        let summary = format!(
            "plan_type={} urgency={urgency} preferences={}",
            intent.plan_type,
            intent
                .preferences
                .as_ref()
                .map(|p| p.summary())
                .unwrap_or_else(|| "none".into())
        );
        let evaluation = self_evaluate(
            backend,
            &ledger,
            &intent,
            &summary,
            if inherited { recalled.as_ref() } else { None },
            submitted_at,
        )?;
        let self_alignment = match evaluation.verdict {
            AlignmentVerdict::Aligned => "aligned",
            AlignmentVerdict::Misaligned => "misaligned",
        };

        let mut outcome = IntentOutcome {
            key: sintent.key.clone(),
            user: sintent.user.clone(),
            urgency,
            recalled_case: recalled.as_ref().map(|c| c.case_id.clone()),
            inherited_preferences: inherited,
            hint_fired: false,
            self_alignment,
            chosen_solution: None,
            verdict_reason: None,
            room: None,
            commands_emitted: 0,
        };

        if urgency == UrgencyLevel::Stale {
            // Logged and dropped — but the expressed preferences still
            // become a case, so the user's taste survives the miss.
            memory.commit_case(
                &embedder,
                &intent.plan_type,
                submitted_at,
                intent.preferences.clone().unwrap_or_default(),
                "dropped: deadline already passed",
            );
            outcomes.push(outcome);
            intents_by_id.insert(intent.id.clone(), intent);
            continue;
        }

        let slot = TimeSlot::new(intent.deadline, intent.deadline + booking_duration);
        let reference = ClaimSet::new(&sintent.reference_commands);

        let (solution, verdict): (Solution, Option<EvaluatorVerdict>) = match urgency {
            UrgencyLevel::High => {
                let free = query_available(
                    &campus,
                    &slot,
                    &intent.preferences.clone().unwrap_or_default(),
                )
                .len();
                let solution =
                    plan_high_urgency(backend, &ledger, &intent, urgency, free, submitted_at)?;
                let similarity = cosine(
                    &embedder.embed(&solution.narrative),
                    &embedder.embed(&intent.raw_text),
                )?;
                let prec = if reference.is_empty() {
                    None
                } else {
                    Some(precision(&solution.claim_set(), &reference)?)
                };
                pareto_rows.push(ParetoRow {
                    intent_key: sintent.key.clone(),
                    solution_id: solution.id.clone(),
                    urgency,
                    lm_calls: solution.lm_call_count,
                    usage_cost: None,
                    similarity,
                    precision: prec,
                    on_front: None,
                });
                (solution, None)
            }
            UrgencyLevel::Low => {
                if reference.is_empty() {
                    return Err(Error::ScenarioInvalid {
                        path: scenario.name.clone(),
                        message: format!(
                            "low-urgency intent '{}' needs reference_commands for scoring",
                            sintent.key
                        ),
                    });
                }
                let hint =
                    solution_memory.recall_solution_hints(&embedder, &intent.raw_text, theta2);
                outcome.hint_fired = hint.is_some();
                let hint = hint.cloned();
                let solutions = plan_low_urgency(
                    backend,
                    &ledger,
                    &intent,
                    urgency,
                    hint.as_ref(),
                    candidates,
                    submitted_at,
                )?;
                let scored = score_solutions(&embedder, solutions, &intent, &reference)?;
                let front = pareto_front(&scored);
                let verdict = evaluate_and_learn(
                    backend,
                    &ledger,
                    &embedder,
                    &intent,
                    &scored,
                    &mut solution_memory,
                    submitted_at,
                )?;
                let chosen = select_final(&front, &verdict)?;
                for s in &scored {
                    pareto_rows.push(ParetoRow {
                        intent_key: sintent.key.clone(),
                        solution_id: s.solution.id.clone(),
                        urgency,
                        lm_calls: s.solution.lm_call_count,
                        usage_cost: Some(s.metrics.usage_cost),
                        similarity: s.metrics.similarity,
                        precision: Some(s.metrics.precision),
                        on_front: Some(front.iter().any(|f| f.solution.id == s.solution.id)),
                    });
                }
                (chosen.solution, Some(verdict))
            }
            UrgencyLevel::Stale => unreachable!("handled above"),
        };

        outcome.chosen_solution = Some(solution.id.clone());
        outcome.verdict_reason = verdict.as_ref().map(|v| v.reason.clone());

        let ctx = ExecutionContext {
            intent: &intent,
            intent_ord: ord as u32,
            slot,
            launch_at: slot.start,
            now: submitted_at,
        };
        let commands = run_group(backend, &ledger, &ctx, &campus, &store, &solution)?;
        outcome.commands_emitted = commands.len();
        all_commands.extend(commands);

        memory.commit_case(
            &embedder,
            &intent.plan_type,
            submitted_at,
            intent.preferences.clone().unwrap_or_default(),
            format!("executed solution {}", solution.id),
        );
        outcomes.push(outcome);
        intents_by_id.insert(intent.id.clone(), intent);
    }

    // All planning done: settle cross-intent booking clashes, then queue
    // everything for launch.
    let negotiations = negotiate_conflicts(
        backend,
        &ledger,
        &mut all_commands,
        &campus,
        &intents_by_id,
        &store,
        clock,
    )?;
    store.verify_stage_discipline()?;

    let mut queue = CommandQueue::new();
    for command in &all_commands {
        queue.enqueue(command.clone(), clock)?;
    }

    // Final (post-negotiation) reservations define where monitoring looks
    // and where drifts land.
    let mut reserved: BTreeMap<String, (String, TimeSlot)> = BTreeMap::new();
    for c in &all_commands {
        if c.field == Field::Booking && c.action == Action::Reserve {
            reserved.insert(c.intent_id.clone(), (c.room.clone(), c.slot.expect("reserve")));
        }
    }
    let mut windows = Vec::new();
    for outcome in &mut outcomes {
        if let Some((room, slot)) = reserved.get(&outcome.key) {
            outcome.room = Some(room.clone());
            let intent = &intents_by_id[&outcome.key];
            windows.push(MonitoringWindow::new(
                &outcome.key,
                room,
                intent.preferences.clone().unwrap_or_default(),
                *slot,
            ));
        }
    }
    let mut injections = Vec::new();
    for drift in &scenario.drifts {
        let Some((room, _)) = reserved.get(&drift.intent) else {
            return Err(Error::ScenarioInvalid {
                path: scenario.name.clone(),
                message: format!(
                    "drift targets intent '{}', which holds no reservation",
                    drift.intent
                ),
            });
        };
        injections.push(DriftInjection {
            room: room.clone(),
            field: drift.sensor_field()?,
            delta: drift.delta,
            at_tick: drift.tick,
        });
    }

    // One padding tick past the last window/launch so trailing correctives
    // still get dispatched.
    let horizon = windows
        .iter()
        .map(|w| w.slot.end)
        .chain(all_commands.iter().map(|c| c.launch_at))
        .max()
        .unwrap_or(clock)
        + tick_seconds;
    let monitoring = run_monitoring(
        backend,
        &ledger,
        &windows,
        &mut campus,
        &mut queue,
        &injections,
        tick_seconds,
        clock,
        horizon,
    )?;

    if let Some(expected) = &scenario.expected_calls {
        let counts = ledger.counts();
        let mut diffs = Vec::new();
        for role in Role::ALL {
            let want = expected.get(role.as_str()).copied().unwrap_or(0);
            let got = counts.get(&role).copied().unwrap_or(0);
            if want != got {
                diffs.push(format!("{role}: expected {want}, got {got}"));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::LedgerMismatch {
                detail: diffs.join("; "),
            });
        }
    }

    if let Some(dir) = &memory_dir {
        std::fs::create_dir_all(dir)?;
        for (user, memory) in &case_memories {
            let mut lines = String::new();
            for record in memory.records() {
                lines.push_str(&serde_json::to_string(record).expect("record serializes"));
                lines.push('\n');
            }
            std::fs::write(dir.join(format!("{user}.jsonl")), lines)?;
        }
    }

    let mut touched: Vec<String> = all_commands.iter().map(|c| c.room.clone()).collect();
    touched.sort();
    touched.dedup();
    let touched_rooms = touched
        .into_iter()
        .filter_map(|id| campus.room(&id).ok().map(|r| (r.id.clone(), r.temperature_c, r.light_lux)))
        .collect();

    Ok(RunReport {
        scenario_name: scenario.name.clone(),
        seed,
        clock_start: scenario.clock_start,
        theta1_seconds: theta1,
        theta2,
        candidates,
        intents: outcomes,
        pareto_rows,
        negotiations,
        dispatch_log: queue.dispatch_log().to_vec(),
        monitor_log: monitoring.monitor_log,
        ledger_counts: ledger
            .counts()
            .into_iter()
            .map(|(r, n)| (r.as_str().to_string(), n))
            .collect(),
        alerts: campus.alert_log.clone(),
        touched_rooms,
        ticks_run: monitoring.ticks_run,
        wall: started.elapsed(),
    })
}

// ─── learning replay ────────────────────────────────────────────────────────

/// Evidence that hint recall improved planning within one run.
#[derive(Debug, Clone)]
pub struct LearningOutcome {
    pub first_intent: String,
    pub second_intent: String,
    /// Similarity between the two intents' raw texts (what recall keys on).
    pub pair_similarity: f64,
    pub first_best_similarity: f64,
    pub second_best_similarity: f64,
    /// Fractional improvement of the second round's best candidate.
    pub gain: f64,
    pub hint_fired: bool,
    pub report: RunReport,
}

/// Run a scenario as a learning replay: find the most similar consecutive
/// intent pair (it must clear the hint threshold, otherwise the scenario
/// can't demonstrate learning), run the pipeline once — the second intent
/// plans with the first one's verdict as hints — and compare the best
/// candidate similarity across the two rounds.
pub fn replay_learning(path: &Path, options: &RunOptions) -> Result<LearningOutcome, Error> {
    let scenario = Scenario::load(path)?;
    let backend = ScriptedBackend::from_fixture_file(&scenario.fixture_path(path))?;
    replay_learning_loaded(&scenario, &backend, options)
}

pub fn replay_learning_loaded(
    scenario: &Scenario,
    backend: &dyn Backend,
    options: &RunOptions,
) -> Result<LearningOutcome, Error> {
    let embedder = Embedder::default();
    let theta2 = options.overrides.theta2.unwrap_or(scenario.config.theta2);

    let mut best: Option<(usize, f64)> = None;
    for i in 0..scenario.intents.len().saturating_sub(1) {
        let sim = cosine(
            &embedder.embed(&scenario.intents[i].text),
            &embedder.embed(&scenario.intents[i + 1].text),
        )?;
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((i, sim));
        }
    }
    let (i, pair_similarity) = best.ok_or_else(|| Error::ScenarioInvalid {
        path: scenario.name.clone(),
        message: "learning replay needs at least two intents".into(),
    })?;
    if pair_similarity < theta2 {
        return Err(Error::NoLearningPair {
            best: pair_similarity,
        });
    }

    let report = run_loaded(scenario, backend, options)?;
    let first_key = scenario.intents[i].key.clone();
    let second_key = scenario.intents[i + 1].key.clone();
    let best_similarity = |key: &str| -> f64 {
        report
            .pareto_rows
            .iter()
            .filter(|r| r.intent_key == key)
            .map(|r| r.similarity)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let first_best_similarity = best_similarity(&first_key);
    let second_best_similarity = best_similarity(&second_key);
    if !first_best_similarity.is_finite() || !second_best_similarity.is_finite() {
        return Err(Error::ScenarioInvalid {
            path: scenario.name.clone(),
            message: "the learning pair produced no scored candidates".into(),
        });
    }
    let hint_fired = report
        .intents
        .iter()
        .find(|o| o.key == second_key)
        .map(|o| o.hint_fired)
        .unwrap_or(false);

    Ok(LearningOutcome {
        first_intent: first_key,
        second_intent: second_key,
        pair_similarity,
        gain: (second_best_similarity - first_best_similarity) / first_best_similarity,
        first_best_similarity,
        second_best_similarity,
        hint_fired,
        report,
    })
}
