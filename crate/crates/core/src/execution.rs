//! Execution layer: one agent per sub-task, stage-barrier scheduling, the
//! write-once rendezvous store agents coordinate through, dataset selection,
//! and cross-intent conflict negotiation over room bookings.
//!
//! Everything here is deterministic by construction. Sub-tasks inside a
//! stage may run on worker threads, but command identity comes from fixed
//! ordinals (intent order, stage, task order, emit order) — never from
//! scheduling — and per-stage results are spliced back in task order, so the
//! same inputs always produce byte-identical command streams.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::campus::{query_available, CampusSnapshot};
use crate::decision::{LightTarget, RoomRef, Solution, SubTask, TaskSpec, TempTarget};
use crate::error::Error;
use crate::gateway::{invoke, Backend, CallLedger, Prompt, Role, StructuredPayload};
use crate::par;
use crate::personal::{Intent, PreferenceSet};
use crate::time::{TimeSlot, Timestamp};

/// Emit-ordinal offset for commands created during negotiation, so they can
/// never collide with the small per-sub-task emit ordinals.
const NEGOTIATION_EMIT_OFFSET: u32 = 100;

// ─── commands ───────────────────────────────────────────────────────────────

/// Deterministic command identity: (intent order, stage, task order within
/// the solution, emit order within the sub-task). Lexicographic `Ord`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CommandId {
    pub intent_ord: u32,
    pub stage: u32,
    pub task_ord: u32,
    pub emit_ord: u32,
}

impl CommandId {
    pub fn new(intent_ord: u32, stage: u32, task_ord: u32, emit_ord: u32) -> CommandId {
        CommandId {
            intent_ord,
            stage,
            task_ord,
            emit_ord,
        }
    }
}

impl std::fmt::Display for CommandId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "c{}.{}.{}.{}",
            self.intent_ord, self.stage, self.task_ord, self.emit_ord
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Temperature,
    Light,
    Booking,
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Field::Temperature => "temperature",
            Field::Light => "light",
            Field::Booking => "booking",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Set,
    Increase,
    Decrease,
    Reserve,
    Release,
    Alert,
}

impl Action {
    fn needs_magnitude(self) -> bool {
        matches!(self, Action::Set | Action::Increase | Action::Decrease)
    }

    fn needs_slot(self) -> bool {
        matches!(self, Action::Reserve | Action::Release)
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Action::Set => "set",
            Action::Increase => "increase",
            Action::Decrease => "decrease",
            Action::Reserve => "reserve",
            Action::Release => "release",
            Action::Alert => "alert",
        })
    }
}

/// An actuation the building will receive once dispatched.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Command {
    pub id: CommandId,
    pub room: String,
    pub field: Field,
    pub action: Action,
    pub magnitude: Option<f64>,
    pub slot: Option<TimeSlot>,
    /// Earliest simulated time this command may be dispatched.
    pub launch_at: Timestamp,
    /// Agent id (or "negotiator") that emitted the command.
    pub issued_by: String,
    pub intent_id: String,
}

impl Command {
    /// Magnitude iff the action sets or nudges a value; slot iff it books.
    pub fn validate(&self) -> Result<(), Error> {
        let malformed = |what: &'static str| Error::MalformedCommand {
            command_id: self.id.to_string(),
            what,
        };
        if self.action.needs_magnitude() && self.magnitude.is_none() {
            return Err(malformed("magnitude"));
        }
        if !self.action.needs_magnitude() && self.magnitude.is_some() {
            return Err(malformed("no stray magnitude"));
        }
        if self.action.needs_slot() && self.slot.is_none() {
            return Err(malformed("slot"));
        }
        if !self.action.needs_slot() && self.slot.is_some() {
            return Err(malformed("no stray slot"));
        }
        Ok(())
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} intent={} room={} {} {}",
            self.id, self.intent_id, self.room, self.field, self.action
        )?;
        if let Some(m) = self.magnitude {
            write!(f, " magnitude={m:.1}")?;
        }
        if let Some(slot) = &self.slot {
            write!(f, " slot={slot}")?;
        }
        Ok(())
    }
}

/// The command shape a scripted sub-task response may carry. It never drives
/// execution — computed commands are authoritative — it only cross-checks
/// that the script and the deterministic computation agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandCheck {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<String>,
    pub field: Field,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
}

impl CommandCheck {
    pub fn matches(&self, command: &Command) -> bool {
        if self.field != command.field || self.action != command.action {
            return false;
        }
        if let Some(room) = &self.room {
            if room != &command.room {
                return false;
            }
        }
        match self.magnitude {
            None => true,
            Some(m) => command.magnitude.is_some_and(|cm| (cm - m).abs() < 1e-9),
        }
    }
}

// ─── dataset selection ──────────────────────────────────────────────────────

/// A queryable dataset an agent can ground its sub-task in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetRef {
    pub name: &'static str,
    pub schema_tag: &'static str,
}

/// The building's dataset catalog.
pub const DATASETS: [DatasetRef; 3] = [
    DatasetRef {
        name: "room_availability",
        schema_tag: "availability",
    },
    DatasetRef {
        name: "ambient_sensors",
        schema_tag: "sensor",
    },
    DatasetRef {
        name: "occupancy_history",
        schema_tag: "occupancy",
    },
];

/// Pick the dataset whose schema tag occurs in the requirement text.
/// Zero matches and multiple matches are both typed errors — an agent must
/// ground each sub-task in exactly one dataset.
pub fn select_dataset(requirement: &str) -> Result<&'static DatasetRef, Error> {
    let needle = requirement.to_lowercase();
    let hits: Vec<&'static DatasetRef> = DATASETS
        .iter()
        .filter(|d| needle.contains(d.schema_tag))
        .collect();
    match hits.as_slice() {
        [] => Err(Error::NoCompatibleDataset {
            requirement: requirement.to_string(),
        }),
        [one] => Ok(one),
        _ => Err(Error::AmbiguousDataset {
            requirement: requirement.to_string(),
        }),
    }
}

fn dataset_requirement(task: &TaskSpec) -> &'static str {
    match task {
        TaskSpec::FindRoom { .. } | TaskSpec::ReserveRoom { .. } => "room availability lookup",
        TaskSpec::AdjustSettings { .. } => "ambient sensor setpoints",
    }
}

// ─── rendezvous store ───────────────────────────────────────────────────────

/// One published intermediate result.
#[derive(Debug, Clone, PartialEq)]
pub struct RendezvousEntry {
    pub value: String,
    pub writer: String,
    pub shared_same_stage: bool,
    pub written_at: Timestamp,
}

/// Audit record of one read, kept so stage discipline can be re-verified
/// after the fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    pub group: String,
    pub key: String,
    pub entry_stage: u32,
    pub reader_stage: u32,
    pub reader: String,
    pub shared_same_stage: bool,
}

#[derive(Debug, Default)]
struct StoreInner {
    entries: BTreeMap<(String, u32, String), RendezvousEntry>,
    reads: Vec<AccessRecord>,
}

/// Write-once shared memory agents exchange intermediate results through,
/// keyed by (group, stage, key). Readers at stage `s` see entries from
/// stages `< s`, plus stage-`s` entries that opted into same-stage sharing.
#[derive(Debug, Default)]
pub struct RendezvousStore {
    inner: Mutex<StoreInner>,
}

impl RendezvousStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Publish a value. A second write to the same (group, stage, key) is an
    /// error — results are immutable once posted.
    #[allow(clippy::too_many_arguments)]
    pub fn publish(
        &self,
        group: &str,
        stage: u32,
        key: &str,
        value: &str,
        writer: &str,
        shared_same_stage: bool,
        now: Timestamp,
    ) -> Result<(), Error> {
        let mut inner = self.inner.lock().expect("rendezvous store poisoned");
        let slot = (group.to_string(), stage, key.to_string());
        if inner.entries.contains_key(&slot) {
            return Err(Error::RendezvousOverwrite {
                group: group.to_string(),
                stage,
                key: key.to_string(),
            });
        }
        inner.entries.insert(
            slot,
            RendezvousEntry {
                value: value.to_string(),
                writer: writer.to_string(),
                shared_same_stage,
                written_at: now,
            },
        );
        Ok(())
    }

    /// Read the latest visible value for `key` in `group` from the viewpoint
    /// of a reader at `reader_stage`. Entries at the reader's own stage are
    /// visible only when shared; later stages never are.
    pub fn read(
        &self,
        group: &str,
        reader_stage: u32,
        key: &str,
        reader: &str,
    ) -> Result<String, Error> {
        let mut inner = self.inner.lock().expect("rendezvous store poisoned");
        let mut best: Option<(u32, RendezvousEntry)> = None;
        let mut blocked_same_stage = false;
        for ((g, stage, k), entry) in &inner.entries {
            if g != group || k != key {
                continue;
            }
            if *stage < reader_stage || (*stage == reader_stage && entry.shared_same_stage) {
                if best.as_ref().is_none_or(|(s, _)| stage >= s) {
                    best = Some((*stage, entry.clone()));
                }
            } else if *stage == reader_stage {
                blocked_same_stage = true;
            }
        }
        match best {
            Some((entry_stage, entry)) => {
                inner.reads.push(AccessRecord {
                    group: group.to_string(),
                    key: key.to_string(),
                    entry_stage,
                    reader_stage,
                    reader: reader.to_string(),
                    shared_same_stage: entry.shared_same_stage,
                });
                Ok(entry.value)
            }
            None if blocked_same_stage => Err(Error::StageDiscipline {
                reader_stage,
                entry_stage: reader_stage,
                key: key.to_string(),
            }),
            None => Err(Error::DependencyUnmet {
                group: group.to_string(),
                stage: reader_stage,
                key: key.to_string(),
            }),
        }
    }

    /// All reads performed so far, in order.
    pub fn reads(&self) -> Vec<AccessRecord> {
        self.inner
            .lock()
            .expect("rendezvous store poisoned")
            .reads
            .clone()
    }

    /// Re-check every recorded read against stage discipline.
    pub fn verify_stage_discipline(&self) -> Result<(), Error> {
        for read in self.reads() {
            let legal = read.entry_stage < read.reader_stage
                || (read.entry_stage == read.reader_stage && read.shared_same_stage);
            if !legal {
                return Err(Error::StageDiscipline {
                    reader_stage: read.reader_stage,
                    entry_stage: read.entry_stage,
                    key: read.key,
                });
            }
        }
        Ok(())
    }
}

// ─── agents ─────────────────────────────────────────────────────────────────

/// One agent is spun up per sub-task, numbered in (stage, sub-task id) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentAssignment {
    pub agent_id: String,
    pub sub_task_id: String,
    pub stage: u32,
}

pub fn assign_agents(solution: &Solution) -> Vec<AgentAssignment> {
    let mut ordered: Vec<&SubTask> = solution.sub_tasks.iter().collect();
    ordered.sort_by(|a, b| (a.stage, a.id.as_str()).cmp(&(b.stage, b.id.as_str())));
    ordered
        .into_iter()
        .enumerate()
        .map(|(i, t)| AgentAssignment {
            agent_id: format!("a{i}"),
            sub_task_id: t.id.clone(),
            stage: t.stage,
        })
        .collect()
}

/// Everything a sub-task agent needs to know about the intent it serves.
#[derive(Debug, Clone)]
pub struct ExecutionContext<'a> {
    pub intent: &'a Intent,
    /// Position in the submission order; first half of every command id.
    pub intent_ord: u32,
    /// The booking window the plan is for.
    pub slot: TimeSlot,
    /// When emitted commands should go live (the window start).
    pub launch_at: Timestamp,
    /// Simulated wall clock for ledger entries and store timestamps.
    pub now: Timestamp,
}

impl ExecutionContext<'_> {
    fn prefs(&self) -> PreferenceSet {
        self.intent.preferences.clone().unwrap_or_default()
    }
}

fn resolve_room(
    ctx: &ExecutionContext<'_>,
    campus: &CampusSnapshot,
    store: &RendezvousStore,
    task: &SubTask,
    room: &RoomRef,
) -> Result<String, Error> {
    match room {
        RoomRef::BestMatch => query_available(campus, &ctx.slot, &ctx.prefs())
            .into_iter()
            .next()
            .ok_or_else(|| Error::NoRoomAvailable {
                intent_id: ctx.intent.id.clone(),
                slot: ctx.slot,
            }),
        RoomRef::FromStage(key) => store.read(&ctx.intent.id, task.stage, key, &task.id),
        RoomRef::Explicit(id) => {
            campus.room(id)?;
            Ok(id.clone())
        }
    }
}

/// Run one sub-task: resolve its room, publish any rendezvous results, emit
/// its commands, and — when the plan marked it as LM-backed — make exactly
/// one low-level gateway call narrating the work. A structured command in
/// the scripted response is cross-checked against the computed commands; the
/// computation always wins, so a mismatch is a fixture bug.
#[allow(clippy::too_many_arguments)]
pub fn execute_sub_task(
    backend: &dyn Backend,
    ledger: &CallLedger,
    ctx: &ExecutionContext<'_>,
    campus: &CampusSnapshot,
    store: &RendezvousStore,
    task: &SubTask,
    task_ord: u32,
    issued_by: &str,
) -> Result<Vec<Command>, Error> {
    let group = &ctx.intent.id;
    let dataset = select_dataset(dataset_requirement(&task.task))?;
    let mut commands = Vec::new();
    let mut emit_ord = 0u32;
    let mut emit = |commands: &mut Vec<Command>,
                    room: String,
                    field: Field,
                    action: Action,
                    magnitude: Option<f64>,
                    slot: Option<TimeSlot>|
     -> Result<(), Error> {
        let command = Command {
            id: CommandId::new(ctx.intent_ord, task.stage, task_ord, emit_ord),
            room,
            field,
            action,
            magnitude,
            slot,
            launch_at: ctx.launch_at,
            issued_by: issued_by.to_string(),
            intent_id: group.clone(),
        };
        command.validate()?;
        emit_ord += 1;
        commands.push(command);
        Ok(())
    };

    let worked_room: Option<String> = match &task.task {
        TaskSpec::FindRoom { publish_key } => {
            let best = query_available(campus, &ctx.slot, &ctx.prefs())
                .into_iter()
                .next()
                .ok_or_else(|| Error::NoRoomAvailable {
                    intent_id: group.clone(),
                    slot: ctx.slot,
                })?;
            // Lookups are meant for siblings too, so they share within
            // their own stage.
            store.publish(group, task.stage, publish_key, &best, &task.id, true, ctx.now)?;
            Some(best)
        }
        TaskSpec::ReserveRoom { room, publish_key } => {
            let resolved = resolve_room(ctx, campus, store, task, room)?;
            store.publish(
                group, task.stage, publish_key, &resolved, &task.id, false, ctx.now,
            )?;
            emit(
                &mut commands,
                resolved.clone(),
                Field::Booking,
                Action::Reserve,
                None,
                Some(ctx.slot),
            )?;
            Some(resolved)
        }
        TaskSpec::AdjustSettings {
            room,
            temperature,
            light,
        } => {
            let resolved = resolve_room(ctx, campus, store, task, room)?;
            let prefs = ctx.prefs();
            let temp_c = match temperature {
                Some(TempTarget::Celsius(c)) => Some(*c),
                Some(TempTarget::FromPreferences) => prefs.temperature_c,
                None => None,
            };
            if let Some(c) = temp_c {
                emit(
                    &mut commands,
                    resolved.clone(),
                    Field::Temperature,
                    Action::Set,
                    Some(c),
                    None,
                )?;
            }
            let lux = match light {
                Some(LightTarget::Lux(l)) => Some(*l),
                Some(LightTarget::Level(level)) => Some(level.target_lux()),
                Some(LightTarget::FromPreferences) => prefs.light.map(|p| p.target_lux()),
                None => None,
            };
            if let Some(l) = lux {
                emit(
                    &mut commands,
                    resolved.clone(),
                    Field::Light,
                    Action::Set,
                    Some(l),
                    None,
                )?;
            }
            Some(resolved)
        }
    };

    if task.requires_lm_call {
        let body = format!(
            "Carry out sub-task {task_id} ({description}) using dataset {dataset}.\n\
             room: {room}\ncommands prepared: {n}\nkey={group}/subtask/{task_id}",
            task_id = task.id,
            description = task.description,
            dataset = dataset.name,
            room = worked_room.as_deref().unwrap_or("-"),
            n = commands.len(),
        );
        let prompt = Prompt::new(Role::LowLevel, body)?;
        let response = invoke(backend, &prompt, ledger, ctx.now)?;
        if let Some(payload) = response.structured {
            let context = format!("low_level/{group}/subtask/{}", task.id);
            let StructuredPayload::Command(check) = payload else {
                return Err(Error::FixtureInconsistent {
                    context,
                    message: "sub-task response must carry a command payload".into(),
                });
            };
            if commands.is_empty() {
                return Err(Error::FixtureInconsistent {
                    context,
                    message: "scripted a command for a query-only sub-task".into(),
                });
            }
            if !commands.iter().any(|c| check.matches(c)) {
                return Err(Error::FixtureInconsistent {
                    context,
                    message: format!(
                        "scripted {:?} {:?} command matches none of the computed commands",
                        check.field, check.action
                    ),
                });
            }
        }
    }

    Ok(commands)
}

/// Run every sub-task of a solution, stage by stage. Stages are barriers;
/// inside a stage agents run data-parallel, and their command batches are
/// spliced back in (stage, sub-task id) order so output never depends on
/// scheduling.
pub fn run_group(
    backend: &dyn Backend,
    ledger: &CallLedger,
    ctx: &ExecutionContext<'_>,
    campus: &CampusSnapshot,
    store: &RendezvousStore,
    solution: &Solution,
) -> Result<Vec<Command>, Error> {
    let assignments = assign_agents(solution);
    let mut ordered: Vec<&SubTask> = solution.sub_tasks.iter().collect();
    ordered.sort_by(|a, b| (a.stage, a.id.as_str()).cmp(&(b.stage, b.id.as_str())));

    let mut commands = Vec::new();
    let mut idx = 0;
    while idx < ordered.len() {
        let stage = ordered[idx].stage;
        let mut stage_tasks: Vec<(u32, &SubTask, &str)> = Vec::new();
        while idx < ordered.len() && ordered[idx].stage == stage {
            let agent = &assignments[idx];
            stage_tasks.push((idx as u32, ordered[idx], agent.agent_id.as_str()));
            idx += 1;
        }
        let results: Vec<Result<Vec<Command>, Error>> =
            par::map_slice(&stage_tasks, |&(task_ord, task, agent_id)| {
                execute_sub_task(backend, ledger, ctx, campus, store, task, task_ord, agent_id)
            });
        for result in results {
            commands.extend(result?);
        }
    }
    Ok(commands)
}

// ─── conflicts ──────────────────────────────────────────────────────────────

/// A set of pending reservations from different intents that claim the same
/// room for overlapping windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictGroup {
    pub room: String,
    /// Ids of the clashing reserve commands, ascending.
    pub commands: Vec<CommandId>,
    /// Distinct intent ids involved, in command order.
    pub intents: Vec<String>,
}

/// Find cross-intent booking conflicts among pending commands: same room,
/// overlapping half-open slots, different intents — grouped into connected
/// components so chains (A↔B, B↔C) negotiate together.
pub fn detect_conflicts(commands: &[Command]) -> Vec<ConflictGroup> {
    let mut reserves: Vec<&Command> = commands
        .iter()
        .filter(|c| c.field == Field::Booking && c.action == Action::Reserve && c.slot.is_some())
        .collect();
    reserves.sort_by_key(|c| c.id);

    let mut by_room: BTreeMap<&str, Vec<&Command>> = BTreeMap::new();
    for c in reserves {
        by_room.entry(c.room.as_str()).or_default().push(c);
    }

    let mut groups = Vec::new();
    for (room, room_commands) in by_room {
        let n = room_commands.len();
        let mut component: Vec<usize> = (0..n).collect();
        fn root(component: &mut Vec<usize>, i: usize) -> usize {
            if component[i] != i {
                let r = root(component, component[i]);
                component[i] = r;
            }
            component[i]
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (room_commands[i], room_commands[j]);
                if a.intent_id != b.intent_id
                    && a.slot.expect("filtered").overlaps(&b.slot.expect("filtered"))
                {
                    let (ra, rb) = (root(&mut component, i), root(&mut component, j));
                    component[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut members: BTreeMap<usize, Vec<&Command>> = BTreeMap::new();
        for (i, command) in room_commands.iter().enumerate() {
            let r = root(&mut component, i);
            members.entry(r).or_default().push(*command);
        }
        for (_, member_commands) in members {
            let mut intents: Vec<String> = Vec::new();
            for c in &member_commands {
                if !intents.contains(&c.intent_id) {
                    intents.push(c.intent_id.clone());
                }
            }
            if intents.len() >= 2 {
                groups.push(ConflictGroup {
                    room: room.to_string(),
                    commands: member_commands.iter().map(|c| c.id).collect(),
                    intents,
                });
            }
        }
    }
    groups
}

/// How one conflict group was settled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegotiationOutcome {
    pub room: String,
    /// The earliest-submitted intent, which keeps the room.
    pub kept_intent: String,
    /// (intent, replacement room) for every loser that found one.
    pub reassigned: Vec<(String, String)>,
    /// Intents left without any alternative; each raised exactly one alert.
    pub failed: Vec<String>,
    pub alert_ids: Vec<CommandId>,
}

/// Settle every conflict among `commands`, mutating them in place: the
/// earliest-submitted intent (ties by intent id) keeps the room, each loser
/// is moved to its next-best free room (its own preference order, skipping
/// rooms claimed by any pending overlapping reservation), and a loser with
/// no alternative has its commands withdrawn in favor of exactly one alert.
/// One low-level narration call records each group's outcome in the store
/// under ("negotiation", 0, room).
pub fn negotiate_conflicts(
    backend: &dyn Backend,
    ledger: &CallLedger,
    commands: &mut Vec<Command>,
    campus: &CampusSnapshot,
    intents: &BTreeMap<String, Intent>,
    store: &RendezvousStore,
    now: Timestamp,
) -> Result<Vec<NegotiationOutcome>, Error> {
    let lookup = |id: &str| -> Result<&Intent, Error> {
        intents.get(id).ok_or_else(|| Error::FixtureInconsistent {
            context: "negotiation".into(),
            message: format!("command references unknown intent {id}"),
        })
    };

    let mut outcomes = Vec::new();
    for conflict in detect_conflicts(commands) {
        let mut participants: Vec<&str> = conflict.intents.iter().map(String::as_str).collect();
        participants.sort_by_key(|id| {
            let submitted = intents.get(*id).map(|i| i.submitted_at).unwrap_or(i64::MAX);
            (submitted, id.to_string())
        });
        lookup(participants[0])?; // surface unknown-intent fixtures early
        let kept_intent = participants[0].to_string();
        let mut reassigned = Vec::new();
        let mut failed = Vec::new();
        let mut alert_ids = Vec::new();

        for loser_id in &participants[1..] {
            let loser = lookup(loser_id)?;
            let loser_reserve = commands
                .iter()
                .find(|c| {
                    conflict.commands.contains(&c.id) && c.intent_id == *loser_id
                })
                .expect("conflict member present")
                .clone();
            let loser_slot = loser_reserve.slot.expect("reserve carries a slot");
            let prefs = loser.preferences.clone().unwrap_or_default();

            // Rooms claimed by any *other* pending overlapping reservation
            // are off the table; query_available already excludes rooms
            // whose existing campus bookings clash.
            let claimed: Vec<&str> = commands
                .iter()
                .filter(|c| {
                    c.field == Field::Booking
                        && c.action == Action::Reserve
                        && c.intent_id != *loser_id
                        && c.slot.is_some_and(|s| s.overlaps(&loser_slot))
                })
                .map(|c| c.room.as_str())
                .collect();
            let next_best = query_available(campus, &loser_slot, &prefs)
                .into_iter()
                .find(|r| r != &conflict.room && !claimed.contains(&r.as_str()));

            match next_best {
                Some(new_room) => {
                    for c in commands.iter_mut() {
                        if c.intent_id == *loser_id && c.room == conflict.room {
                            c.room = new_room.clone();
                        }
                    }
                    reassigned.push((loser_id.to_string(), new_room));
                }
                None => {
                    // NegotiationFailed: withdraw the loser's commands on
                    // this room and raise exactly one alert in their place.
                    commands
                        .retain(|c| !(c.intent_id == *loser_id && c.room == conflict.room));
                    let rid = loser_reserve.id;
                    let alert = Command {
                        id: CommandId::new(
                            rid.intent_ord,
                            rid.stage,
                            rid.task_ord,
                            rid.emit_ord + NEGOTIATION_EMIT_OFFSET,
                        ),
                        room: conflict.room.clone(),
                        field: Field::Booking,
                        action: Action::Alert,
                        magnitude: None,
                        slot: None,
                        launch_at: now,
                        issued_by: "negotiator".to_string(),
                        intent_id: loser_id.to_string(),
                    };
                    alert_ids.push(alert.id);
                    commands.push(alert);
                    failed.push(loser_id.to_string());
                }
            }
        }

        let mut body = format!(
            "Summarize how the booking clash over room {} was settled.\nkept: {kept_intent}\n",
            conflict.room
        );
        for (intent, new_room) in &reassigned {
            body.push_str(&format!("moved: {intent} -> {new_room}\n"));
        }
        for intent in &failed {
            body.push_str(&format!("unplaced: {intent}\n"));
        }
        body.push_str(&format!("key=negotiation/{}", conflict.room));
        let prompt = Prompt::new(Role::LowLevel, body)?;
        let response = invoke(backend, &prompt, ledger, now)?;
        store.publish(
            "negotiation",
            0,
            &conflict.room,
            &response.text,
            "negotiator",
            true,
            now,
        )?;

        outcomes.push(NegotiationOutcome {
            room: conflict.room,
            kept_intent,
            reassigned,
            failed,
            alert_ids,
        });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campus::RoomState;
    use crate::decision::CriteriaLabel;
    use crate::gateway::{EchoBackend, ModelResponse, ScriptedBackend};
    use crate::personal::LightPreference;

    const T0: Timestamp = 1_741_960_800; // 2025-03-14T14:00:00Z
    const SLOT: TimeSlot = TimeSlot {
        start: T0 + 3600,
        end: T0 + 7200,
    };

    #[test]
    fn command_ids_order_lexicographically_and_render_compactly() {
        let mut ids = [CommandId::new(1, 0, 0, 0),
            CommandId::new(0, 2, 0, 0),
            CommandId::new(0, 0, 1, 0),
            CommandId::new(0, 0, 0, 5),
            CommandId::new(0, 0, 0, 0)];
        ids.sort();
        assert_eq!(
            ids.iter().map(ToString::to_string).collect::<Vec<_>>(),
            ["c0.0.0.0", "c0.0.0.5", "c0.0.1.0", "c0.2.0.0", "c1.0.0.0"]
        );
    }

    fn command(field: Field, action: Action, magnitude: Option<f64>, slot: Option<TimeSlot>) -> Command {
        Command {
            id: CommandId::new(0, 0, 0, 0),
            room: "TS501".into(),
            field,
            action,
            magnitude,
            slot,
            launch_at: T0,
            issued_by: "a0".into(),
            intent_id: "i1".into(),
        }
    }

    #[test]
    fn command_validation_pairs_payload_with_action() {
        assert!(command(Field::Temperature, Action::Set, Some(21.0), None)
            .validate()
            .is_ok());
        assert!(command(Field::Booking, Action::Reserve, None, Some(SLOT))
            .validate()
            .is_ok());
        assert!(command(Field::Booking, Action::Alert, None, None)
            .validate()
            .is_ok());
        // Missing required payloads.
        assert!(matches!(
            command(Field::Temperature, Action::Set, None, None).validate(),
            Err(Error::MalformedCommand { what: "magnitude", .. })
        ));
        assert!(matches!(
            command(Field::Booking, Action::Reserve, None, None).validate(),
            Err(Error::MalformedCommand { what: "slot", .. })
        ));
        // Stray payloads.
        assert!(command(Field::Booking, Action::Reserve, Some(1.0), Some(SLOT))
            .validate()
            .is_err());
        assert!(command(Field::Temperature, Action::Set, Some(1.0), Some(SLOT))
            .validate()
            .is_err());
    }

    #[test]
    fn dataset_selection_is_exact_or_typed_error() {
        assert_eq!(
            select_dataset("room availability lookup").unwrap().name,
            "room_availability"
        );
        assert_eq!(
            select_dataset("ambient sensor setpoints").unwrap().name,
            "ambient_sensors"
        );
        assert!(matches!(
            select_dataset("weather forecast"),
            Err(Error::NoCompatibleDataset { .. })
        ));
        assert!(matches!(
            select_dataset("availability and sensor data"),
            Err(Error::AmbiguousDataset { .. })
        ));
    }

    #[test]
    fn rendezvous_store_is_write_once() {
        let store = RendezvousStore::new();
        store.publish("g", 0, "room", "TS501", "t0", false, T0).unwrap();
        assert!(matches!(
            store.publish("g", 0, "room", "PK258", "t1", false, T0),
            Err(Error::RendezvousOverwrite { .. })
        ));
        // Same key at a different stage is a distinct slot.
        store.publish("g", 1, "room", "PK258", "t1", false, T0).unwrap();
    }

    #[test]
    fn rendezvous_reads_respect_stage_discipline() {
        let store = RendezvousStore::new();
        store.publish("g", 0, "room", "TS501", "t0", false, T0).unwrap();
        store.publish("g", 1, "room", "PK258", "t1", false, T0).unwrap();
        store.publish("g", 1, "hint", "warm", "t1", true, T0).unwrap();

        // A stage-2 reader sees the highest visible stage.
        assert_eq!(store.read("g", 2, "room", "t2").unwrap(), "PK258");
        // A stage-1 reader only sees stage 0 for the unshared key…
        assert_eq!(store.read("g", 1, "room", "t1b").unwrap(), "TS501");
        // …but sees a same-stage entry that opted into sharing.
        assert_eq!(store.read("g", 1, "hint", "t1b").unwrap(), "warm");
        // Same-stage unshared with nothing earlier is a discipline error.
        assert!(matches!(
            store.read("g", 1, "hint2", "t1b"),
            Err(Error::DependencyUnmet { .. })
        ));
        store.publish("g", 1, "hint2", "x", "t1", false, T0).unwrap();
        assert!(matches!(
            store.read("g", 1, "hint2", "t1b"),
            Err(Error::StageDiscipline { .. })
        ));
        // Future stages are invisible.
        assert!(matches!(
            store.read("g", 0, "room", "t0b"),
            Err(Error::StageDiscipline { .. })
        ));

        assert!(store.verify_stage_discipline().is_ok());
        assert_eq!(store.reads().len(), 3);
    }

    fn room(id: &str, capacity: u32, temperature_c: f64, light_lux: f64) -> RoomState {
        RoomState {
            id: id.into(),
            capacity,
            temperature_c,
            light_lux,
            bookings: Vec::new(),
        }
    }

    fn intent(id: &str, submitted_at: Timestamp, temp_pref: Option<f64>) -> Intent {
        Intent {
            id: id.into(),
            user_id: "u".into(),
            raw_text: format!("{id} wants a meeting room"),
            plan_type: "meeting room reservation".into(),
            deadline: SLOT.start,
            preferences: Some(PreferenceSet {
                temperature_c: temp_pref,
                light: Some(LightPreference::Level(crate::personal::LightLevel::Bright)),
                room_capacity: None,
                other: BTreeMap::new(),
            }),
            submitted_at,
            inherited_from: None,
        }
    }

    fn two_stage_solution(intent_id: &str) -> Solution {
        let spec = crate::decision::SolutionSpec {
            id: "plan".into(),
            criteria_label: CriteriaLabel::PreferenceAlignment,
            narrative: "reserve the closest match and set it up".into(),
            claims: vec!["booking reserve".into()],
            sub_tasks: vec![
                SubTask {
                    id: "t0".into(),
                    description: "reserve best room".into(),
                    stage: 0,
                    depends_on: Vec::new(),
                    requires_lm_call: true,
                    task: TaskSpec::ReserveRoom {
                        room: RoomRef::BestMatch,
                        publish_key: "room".into(),
                    },
                },
                SubTask {
                    id: "t1".into(),
                    description: "apply preferred settings".into(),
                    stage: 1,
                    depends_on: vec!["t0".into()],
                    requires_lm_call: true,
                    task: TaskSpec::AdjustSettings {
                        room: RoomRef::FromStage("room".into()),
                        temperature: Some(TempTarget::FromPreferences),
                        light: Some(LightTarget::FromPreferences),
                    },
                },
            ],
            lm_call_count: None,
            hierarchy_depth: None,
        };
        Solution::from_spec(spec, intent_id).unwrap()
    }

    fn context<'a>(it: &'a Intent, ord: u32) -> ExecutionContext<'a> {
        ExecutionContext {
            intent: it,
            intent_ord: ord,
            slot: SLOT,
            launch_at: SLOT.start,
            now: T0,
        }
    }

    #[test]
    fn run_group_emits_deterministic_commands_across_stage_barriers() {
        let campus = CampusSnapshot::from_rooms([
            room("R1", 4, 20.0, 150.0),
            room("R2", 8, 23.0, 400.0),
        ]);
        let it = intent("i1", T0 - 100, Some(21.0));
        let solution = two_stage_solution("i1");

        let run = || {
            let store = RendezvousStore::new();
            let ledger = CallLedger::new();
            let commands = run_group(
                &EchoBackend,
                &ledger,
                &context(&it, 0),
                &campus,
                &store,
                &solution,
            )
            .unwrap();
            (commands, ledger.total_for(&[Role::LowLevel]))
        };
        let (commands, low_level_calls) = run();

        // R1 is the better match for a 21 °C preference (|20−21| < |23−21|).
        assert_eq!(commands.len(), 3);
        assert_eq!(commands[0].to_string(), format!("c0.0.0.0 intent=i1 room=R1 booking reserve slot={SLOT}"));
        assert_eq!(commands[1].room, "R1");
        assert_eq!(commands[1].field, Field::Temperature);
        assert_eq!(commands[1].magnitude, Some(21.0));
        assert_eq!(commands[1].id, CommandId::new(0, 1, 1, 0));
        assert_eq!(commands[2].field, Field::Light);
        assert_eq!(commands[2].magnitude, Some(700.0)); // bright band
        assert_eq!(commands[2].id, CommandId::new(0, 1, 1, 1));
        assert!(commands.iter().all(|c| c.launch_at == SLOT.start));
        assert_eq!(low_level_calls, 2);

        // Bit-identical on a second run (worker scheduling can't leak in).
        assert_eq!(run().0, commands);
    }

    #[test]
    fn find_room_publishes_for_siblings_and_emits_nothing() {
        let campus = CampusSnapshot::from_rooms([room("R1", 4, 20.0, 150.0)]);
        let it = intent("i1", T0, None);
        let store = RendezvousStore::new();
        let ledger = CallLedger::new();
        let task = SubTask {
            id: "find".into(),
            description: "scout".into(),
            stage: 0,
            depends_on: Vec::new(),
            requires_lm_call: false,
            task: TaskSpec::FindRoom {
                publish_key: "room".into(),
            },
        };
        let commands = execute_sub_task(
            &EchoBackend,
            &ledger,
            &context(&it, 0),
            &campus,
            &store,
            &task,
            0,
            "a0",
        )
        .unwrap();
        assert!(commands.is_empty());
        assert_eq!(ledger.total(), 0);
        // Same-stage siblings may read a lookup's result.
        assert_eq!(store.read("i1", 0, "room", "sibling").unwrap(), "R1");
    }

    #[test]
    fn missing_stage_dependency_is_a_typed_error() {
        let campus = CampusSnapshot::from_rooms([room("R1", 4, 20.0, 150.0)]);
        let it = intent("i1", T0, None);
        let store = RendezvousStore::new();
        let ledger = CallLedger::new();
        let task = SubTask {
            id: "adjust".into(),
            description: "apply settings".into(),
            stage: 1,
            depends_on: Vec::new(),
            requires_lm_call: false,
            task: TaskSpec::AdjustSettings {
                room: RoomRef::FromStage("room".into()),
                temperature: Some(TempTarget::Celsius(21.0)),
                light: None,
            },
        };
        assert!(matches!(
            execute_sub_task(
                &EchoBackend,
                &ledger,
                &context(&it, 0),
                &campus,
                &store,
                &task,
                0,
                "a0"
            ),
            Err(Error::DependencyUnmet { .. })
        ));
    }

    #[test]
    fn preference_sourced_targets_skip_absent_preferences() {
        let campus = CampusSnapshot::from_rooms([room("R1", 4, 20.0, 150.0)]);
        let mut it = intent("i1", T0, None);
        it.preferences = None;
        let store = RendezvousStore::new();
        let ledger = CallLedger::new();
        let task = SubTask {
            id: "adjust".into(),
            description: "apply settings".into(),
            stage: 0,
            depends_on: Vec::new(),
            requires_lm_call: false,
            task: TaskSpec::AdjustSettings {
                room: RoomRef::Explicit("R1".into()),
                temperature: Some(TempTarget::FromPreferences),
                light: Some(LightTarget::FromPreferences),
            },
        };
        let commands = execute_sub_task(
            &EchoBackend,
            &ledger,
            &context(&it, 0),
            &campus,
            &store,
            &task,
            0,
            "a0",
        )
        .unwrap();
        assert!(commands.is_empty());
    }

    #[test]
    fn no_available_room_is_a_typed_error() {
        let mut booked = room("R1", 4, 20.0, 150.0);
        booked.bookings.push(SLOT);
        let campus = CampusSnapshot::from_rooms([booked]);
        let it = intent("i1", T0, None);
        let store = RendezvousStore::new();
        let ledger = CallLedger::new();
        let solution = two_stage_solution("i1");
        assert!(matches!(
            run_group(&EchoBackend, &ledger, &context(&it, 0), &campus, &store, &solution),
            Err(Error::NoRoomAvailable { .. })
        ));
    }

    #[test]
    fn scripted_command_payload_is_cross_checked_not_trusted() {
        let campus = CampusSnapshot::from_rooms([room("R1", 4, 20.0, 150.0)]);
        let it = intent("i1", T0, Some(21.0));
        let solution = two_stage_solution("i1");

        // Agreeing script: passes.
        let mut b = ScriptedBackend::new();
        b.insert(
            Role::LowLevel,
            "i1/subtask/t0",
            ModelResponse::structured(StructuredPayload::Command(CommandCheck {
                room: Some("R1".into()),
                field: Field::Booking,
                action: Action::Reserve,
                magnitude: None,
            })),
        );
        b.insert(
            Role::LowLevel,
            "i1/subtask/t1",
            ModelResponse::structured(StructuredPayload::Command(CommandCheck {
                room: None,
                field: Field::Temperature,
                action: Action::Set,
                magnitude: Some(21.0),
            })),
        );
        let store = RendezvousStore::new();
        let ledger = CallLedger::new();
        assert!(run_group(&b, &ledger, &context(&it, 0), &campus, &store, &solution).is_ok());

        // Disagreeing script (wrong room): typed inconsistency.
        let mut b = ScriptedBackend::new();
        b.insert(
            Role::LowLevel,
            "i1/subtask/t0",
            ModelResponse::structured(StructuredPayload::Command(CommandCheck {
                room: Some("R9".into()),
                field: Field::Booking,
                action: Action::Reserve,
                magnitude: None,
            })),
        );
        b.insert(
            Role::LowLevel,
            "i1/subtask/t1",
            ModelResponse::text_only("ok"),
        );
        let store = RendezvousStore::new();
        assert!(matches!(
            run_group(&b, &ledger, &context(&it, 0), &campus, &store, &solution),
            Err(Error::FixtureInconsistent { .. })
        ));
    }

    fn reserve(id: CommandId, intent_id: &str, room: &str, slot: TimeSlot) -> Command {
        Command {
            id,
            room: room.into(),
            field: Field::Booking,
            action: Action::Reserve,
            magnitude: None,
            slot: Some(slot),
            launch_at: slot.start,
            issued_by: "a0".into(),
            intent_id: intent_id.into(),
        }
    }

    #[test]
    fn conflicts_need_same_room_overlap_and_distinct_intents() {
        let disjoint = TimeSlot::new(SLOT.end, SLOT.end + 3600);
        let commands = vec![
            reserve(CommandId::new(0, 0, 0, 0), "a", "R1", SLOT),
            reserve(CommandId::new(1, 0, 0, 0), "b", "R1", SLOT),
            reserve(CommandId::new(2, 0, 0, 0), "c", "R1", disjoint),
            reserve(CommandId::new(3, 0, 0, 0), "d", "R2", SLOT),
        ];
        let groups = detect_conflicts(&commands);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].room, "R1");
        assert_eq!(groups[0].intents, vec!["a".to_string(), "b".to_string()]);

        // Same intent double-booking itself is not a cross-intent conflict.
        let own = vec![
            reserve(CommandId::new(0, 0, 0, 0), "a", "R1", SLOT),
            reserve(CommandId::new(0, 1, 1, 0), "a", "R1", SLOT),
        ];
        assert!(detect_conflicts(&own).is_empty());
    }

    #[test]
    fn overlap_chains_negotiate_as_one_group() {
        // a: [0, 2h), b: [1h, 3h), c: [2h, 4h) — a↔b and b↔c overlap, a↔c don't.
        let h = 3600;
        let commands = vec![
            reserve(CommandId::new(0, 0, 0, 0), "a", "R1", TimeSlot::new(T0, T0 + 2 * h)),
            reserve(CommandId::new(1, 0, 0, 0), "b", "R1", TimeSlot::new(T0 + h, T0 + 3 * h)),
            reserve(CommandId::new(2, 0, 0, 0), "c", "R1", TimeSlot::new(T0 + 2 * h, T0 + 4 * h)),
        ];
        let groups = detect_conflicts(&commands);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].intents.len(), 3);
    }

    #[test]
    fn negotiation_keeps_earliest_and_reroutes_losers_around_claims() {
        let campus = CampusSnapshot::from_rooms([
            room("R1", 4, 21.0, 150.0),
            room("R2", 4, 21.5, 150.0),
            room("R3", 4, 25.0, 150.0),
        ]);
        // b prefers 21 °C: its next-best after R1 would be R2, but intent c
        // already holds a pending overlapping reservation on R2.
        let mut commands = vec![
            reserve(CommandId::new(0, 0, 0, 0), "a", "R1", SLOT),
            reserve(CommandId::new(1, 0, 0, 0), "b", "R1", SLOT),
            Command {
                id: CommandId::new(1, 1, 1, 0),
                room: "R1".into(),
                field: Field::Temperature,
                action: Action::Set,
                magnitude: Some(21.0),
                slot: None,
                launch_at: SLOT.start,
                issued_by: "a1".into(),
                intent_id: "b".into(),
            },
            reserve(CommandId::new(2, 0, 0, 0), "c", "R2", SLOT),
        ];
        let intents: BTreeMap<String, Intent> = [
            ("a".to_string(), intent("a", 100, Some(21.0))),
            ("b".to_string(), intent("b", 200, Some(21.0))),
            ("c".to_string(), intent("c", 300, Some(21.0))),
        ]
        .into();
        let store = RendezvousStore::new();
        let ledger = CallLedger::new();
        let outcomes = negotiate_conflicts(
            &EchoBackend,
            &ledger,
            &mut commands,
            &campus,
            &intents,
            &store,
            T0,
        )
        .unwrap();

        assert_eq!(outcomes.len(), 1);
        assert_eq!(outcomes[0].kept_intent, "a");
        assert_eq!(outcomes[0].reassigned, vec![("b".to_string(), "R3".to_string())]);
        assert!(outcomes[0].failed.is_empty());
        // b's dependent setting command moved with the reservation.
        let b_temp = commands
            .iter()
            .find(|c| c.intent_id == "b" && c.field == Field::Temperature)
            .unwrap();
        assert_eq!(b_temp.room, "R3");
        assert!(detect_conflicts(&commands).is_empty());
        // One narration call per group, recorded in the store.
        assert_eq!(ledger.total_for(&[Role::LowLevel]), 1);
        assert!(store.read("negotiation", 1, "R1", "report").is_ok());
    }

    #[test]
    fn ties_on_submission_time_break_by_intent_id() {
        let campus = CampusSnapshot::from_rooms([
            room("R1", 4, 21.0, 150.0),
            room("R2", 4, 22.0, 150.0),
        ]);
        let mut commands = vec![
            reserve(CommandId::new(0, 0, 0, 0), "zeta", "R1", SLOT),
            reserve(CommandId::new(1, 0, 0, 0), "alpha", "R1", SLOT),
        ];
        let intents: BTreeMap<String, Intent> = [
            ("zeta".to_string(), intent("zeta", 100, None)),
            ("alpha".to_string(), intent("alpha", 100, None)),
        ]
        .into();
        let store = RendezvousStore::new();
        let ledger = CallLedger::new();
        let outcomes = negotiate_conflicts(
            &EchoBackend,
            &ledger,
            &mut commands,
            &campus,
            &intents,
            &store,
            T0,
        )
        .unwrap();
        assert_eq!(outcomes[0].kept_intent, "alpha");
    }

    #[test]
    fn loser_without_alternative_raises_exactly_one_alert() {
        // Only one room: the loser has nowhere to go.
        let campus = CampusSnapshot::from_rooms([room("R1", 4, 21.0, 150.0)]);
        let mut commands = vec![
            reserve(CommandId::new(0, 0, 0, 0), "a", "R1", SLOT),
            reserve(CommandId::new(1, 0, 0, 0), "b", "R1", SLOT),
            Command {
                id: CommandId::new(1, 1, 1, 0),
                room: "R1".into(),
                field: Field::Light,
                action: Action::Set,
                magnitude: Some(700.0),
                slot: None,
                launch_at: SLOT.start,
                issued_by: "a1".into(),
                intent_id: "b".into(),
            },
        ];
        let intents: BTreeMap<String, Intent> = [
            ("a".to_string(), intent("a", 100, None)),
            ("b".to_string(), intent("b", 200, None)),
        ]
        .into();
        let store = RendezvousStore::new();
        let ledger = CallLedger::new();
        let outcomes = negotiate_conflicts(
            &EchoBackend,
            &ledger,
            &mut commands,
            &campus,
            &intents,
            &store,
            T0,
        )
        .unwrap();

        assert_eq!(outcomes[0].failed, vec!["b".to_string()]);
        assert_eq!(outcomes[0].alert_ids.len(), 1);
        let b_commands: Vec<&Command> =
            commands.iter().filter(|c| c.intent_id == "b").collect();
        assert_eq!(b_commands.len(), 1, "only the alert survives for b");
        assert_eq!(b_commands[0].action, Action::Alert);
        assert_eq!(b_commands[0].launch_at, T0, "alerts launch immediately");
        assert!(detect_conflicts(&commands).is_empty());
    }
}
