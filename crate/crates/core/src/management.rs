//! Management layer: the time-to-launch command queue and the closed
//! monitoring loop that keeps rooms at their desired settings.
//!
//! The queue holds commands until their launch time, dispatches each exactly
//! once in (launch_at, id) order, and leaves failed deliveries pending for
//! the next tick. Monitoring compares observed room state against each
//! active window's desired settings every tick and enqueues a corrective
//! command per out-of-tolerance field whose magnitude is the exact gap, so a
//! single disturbance is corrected within two ticks: one to observe, one to
//! dispatch.
//!
//! Tick order is fixed: dispatch due commands, then inject scheduled drifts,
//! then monitor and enqueue correctives. A disturbance injected at tick `k`
//! is therefore observed at `k` and corrected by the dispatch at `k + 1`.

use crate::campus::{apply_command, CampusSnapshot, SensorField};
use crate::error::Error;
use crate::execution::{Action, Command, CommandCheck, CommandId, Field};
use crate::gateway::{invoke, Backend, CallLedger, Prompt, Role, StructuredPayload};
use crate::personal::PreferenceSet;
use crate::time::{format_ts, TimeSlot, Timestamp};

/// Allowed temperature error before a corrective command is raised.
pub const DEFAULT_TEMP_TOLERANCE_C: f64 = 0.5;
/// Allowed light error before a corrective command is raised.
pub const DEFAULT_LUX_TOLERANCE: f64 = 50.0;
/// Intent-ordinal base for monitor-issued commands; far above any real
/// submission ordinal, so corrective ids can't collide with plan commands.
const MONITOR_INTENT_ORD_BASE: u32 = 9000;

// ─── command queue ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryStatus {
    Pending,
    Dispatched,
    Expired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub command: Command,
    pub status: EntryStatus,
    pub expires_at: Option<Timestamp>,
    pub enqueued_at: Timestamp,
}

/// Where dispatched commands land. The campus itself is the production sink;
/// tests substitute failing ones.
pub trait ControlSink {
    fn deliver(&mut self, command: &Command) -> Result<(), Error>;
}

impl ControlSink for CampusSnapshot {
    fn deliver(&mut self, command: &Command) -> Result<(), Error> {
        apply_command(self, command)
    }
}

/// What one dispatch pass did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DispatchSummary {
    pub dispatched: Vec<CommandId>,
    /// Deliveries the sink refused; their entries stay pending.
    pub failed: Vec<(CommandId, String)>,
    pub expired: Vec<CommandId>,
}

/// Time-to-launch queue: commands wait until `launch_at`, then leave exactly
/// once, in (launch_at, id) order.
#[derive(Debug, Default)]
pub struct CommandQueue {
    entries: Vec<QueueEntry>,
    dispatch_log: Vec<String>,
}

impl CommandQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accept a command whose launch time has not already passed.
    pub fn enqueue(&mut self, command: Command, now: Timestamp) -> Result<(), Error> {
        self.enqueue_expiring(command, now, None)
    }

    /// Like [`enqueue`](Self::enqueue), with a drop-dead time after which the
    /// entry expires undelivered.
    pub fn enqueue_expiring(
        &mut self,
        command: Command,
        now: Timestamp,
        expires_at: Option<Timestamp>,
    ) -> Result<(), Error> {
        command.validate()?;
        if command.launch_at < now {
            return Err(Error::RejectedStale {
                command_id: command.id.to_string(),
                launch_at: command.launch_at,
                now,
            });
        }
        self.entries.push(QueueEntry {
            command,
            status: EntryStatus::Pending,
            expires_at,
            enqueued_at: now,
        });
        self.entries
            .sort_by_key(|e| (e.command.launch_at, e.command.id));
        Ok(())
    }

    pub fn entries(&self) -> &[QueueEntry] {
        &self.entries
    }

    pub fn pending(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status == EntryStatus::Pending)
            .count()
    }

    pub fn dispatch_log(&self) -> &[String] {
        &self.dispatch_log
    }

    /// Deliver every pending entry whose launch time has arrived, in queue
    /// order. Expired entries are marked and skipped; a sink refusal leaves
    /// its entry pending for a later pass and records the failure.
    pub fn dispatch_due(&mut self, now: Timestamp, sink: &mut dyn ControlSink) -> DispatchSummary {
        let mut summary = DispatchSummary::default();
        for entry in &mut self.entries {
            if entry.status != EntryStatus::Pending || entry.command.launch_at > now {
                continue;
            }
            if entry.expires_at.is_some_and(|e| e <= now) {
                entry.status = EntryStatus::Expired;
                self.dispatch_log.push(format!(
                    "{} expired {}",
                    format_ts(now),
                    entry.command
                ));
                summary.expired.push(entry.command.id);
                continue;
            }
            match sink.deliver(&entry.command) {
                Ok(()) => {
                    entry.status = EntryStatus::Dispatched;
                    self.dispatch_log.push(format!(
                        "{} dispatch {}",
                        format_ts(now),
                        entry.command
                    ));
                    summary.dispatched.push(entry.command.id);
                }
                Err(e) => {
                    self.dispatch_log.push(format!(
                        "{} failed {} ({e})",
                        format_ts(now),
                        entry.command
                    ));
                    summary.failed.push((entry.command.id, e.to_string()));
                }
            }
        }
        summary
    }
}

// ─── monitoring ─────────────────────────────────────────────────────────────

/// One room the loop watches while its booking window is active.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitoringWindow {
    pub intent_id: String,
    pub room: String,
    pub desired: PreferenceSet,
    pub slot: TimeSlot,
    pub tolerance_temp_c: f64,
    pub tolerance_lux: f64,
}

impl MonitoringWindow {
    pub fn new(
        intent_id: &str,
        room: &str,
        desired: PreferenceSet,
        slot: TimeSlot,
    ) -> MonitoringWindow {
        MonitoringWindow {
            intent_id: intent_id.to_string(),
            room: room.to_string(),
            desired,
            slot,
            tolerance_temp_c: DEFAULT_TEMP_TOLERANCE_C,
            tolerance_lux: DEFAULT_LUX_TOLERANCE,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.slot.start >= self.slot.end {
            return Err(Error::InvalidWindow {
                intent_id: self.intent_id.clone(),
            });
        }
        Ok(())
    }
}

/// One observed deviation and the corrective command raised for it.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorEvent {
    pub tick: u64,
    pub at: Timestamp,
    pub intent_id: String,
    pub room: String,
    pub field: Field,
    pub observed: f64,
    pub desired: f64,
    pub command: Command,
}

fn corrective_id(window_index: usize, tick: u64, field_ord: u32) -> CommandId {
    CommandId::new(
        MONITOR_INTENT_ORD_BASE + window_index as u32,
        tick as u32,
        field_ord,
        0,
    )
}

/// Compare every active window against the campus and build corrective
/// commands: per out-of-tolerance field, one exact-gap nudge (increase or
/// decrease of |desired − observed|) launching immediately, and an alert if
/// the window's booking has vanished from the room. Each deviation also
/// makes one environment-role gateway call; a structured command in the
/// scripted response is cross-checked against the computed corrective.
pub fn monitor_tick(
    backend: &dyn Backend,
    ledger: &CallLedger,
    windows: &[MonitoringWindow],
    campus: &CampusSnapshot,
    tick: u64,
    now: Timestamp,
) -> Result<Vec<MonitorEvent>, Error> {
    let mut events = Vec::new();
    for (w_idx, window) in windows.iter().enumerate() {
        window.validate()?;
        if !window.slot.contains(now) {
            continue;
        }
        let room = campus.room(&window.room)?;
        let mut deviations: Vec<(Field, u32, f64, f64)> = Vec::new(); // (field, ord, observed, desired)
        if let Some(desired) = window.desired.temperature_c {
            if (room.temperature_c - desired).abs() > window.tolerance_temp_c {
                deviations.push((Field::Temperature, 0, room.temperature_c, desired));
            }
        }
        if let Some(light) = window.desired.light {
            let desired = light.target_lux();
            if (room.light_lux - desired).abs() > window.tolerance_lux {
                deviations.push((Field::Light, 1, room.light_lux, desired));
            }
        }
        let booking_gone = !room.bookings.contains(&window.slot);

        for (field, field_ord, observed, desired) in deviations {
            let gap = desired - observed;
            let command = Command {
                id: corrective_id(w_idx, tick, field_ord),
                room: window.room.clone(),
                field,
                action: if gap > 0.0 { Action::Increase } else { Action::Decrease },
                magnitude: Some(gap.abs()),
                slot: None,
                launch_at: now,
                issued_by: "monitor".to_string(),
                intent_id: window.intent_id.clone(),
            };
            confirm_with_environment(backend, ledger, window, &command, field, tick, observed, desired, now)?;
            events.push(MonitorEvent {
                tick,
                at: now,
                intent_id: window.intent_id.clone(),
                room: window.room.clone(),
                field,
                observed,
                desired,
                command,
            });
        }

        if booking_gone {
            let command = Command {
                id: corrective_id(w_idx, tick, 2),
                room: window.room.clone(),
                field: Field::Booking,
                action: Action::Alert,
                magnitude: None,
                slot: None,
                launch_at: now,
                issued_by: "monitor".to_string(),
                intent_id: window.intent_id.clone(),
            };
            confirm_with_environment(
                backend, ledger, window, &command, Field::Booking, tick, 0.0, 0.0, now,
            )?;
            events.push(MonitorEvent {
                tick,
                at: now,
                intent_id: window.intent_id.clone(),
                room: window.room.clone(),
                field: Field::Booking,
                observed: 0.0,
                desired: 0.0,
                command,
            });
        }
    }
    Ok(events)
}

#[allow(clippy::too_many_arguments)]
fn confirm_with_environment(
    backend: &dyn Backend,
    ledger: &CallLedger,
    window: &MonitoringWindow,
    command: &Command,
    field: Field,
    tick: u64,
    observed: f64,
    desired: f64,
    now: Timestamp,
) -> Result<(), Error> {
    let body = format!(
        "Confirm corrective action for room {room}.\nfield: {field}\nobserved: {observed:.1}\n\
         desired: {desired:.1}\nkey={intent}/monitor/{field}/{tick}",
        room = window.room,
        intent = window.intent_id,
    );
    let prompt = Prompt::new(Role::Environment, body)?;
    let response = invoke(backend, &prompt, ledger, now)?;
    if let Some(payload) = response.structured {
        let context = format!("environment/{}/monitor/{field}/{tick}", window.intent_id);
        let StructuredPayload::Command(check) = payload else {
            return Err(Error::FixtureInconsistent {
                context,
                message: "environment response must carry a command payload".into(),
            });
        };
        let check: CommandCheck = check;
        if !check.matches(command) {
            return Err(Error::FixtureInconsistent {
                context,
                message: format!(
                    "scripted {:?} {:?} corrective disagrees with the computed one",
                    check.field, check.action
                ),
            });
        }
    }
    Ok(())
}

// ─── the closed loop ────────────────────────────────────────────────────────

/// A scheduled external disturbance, applied at the start of its tick
/// (after dispatch, before monitoring).
#[derive(Debug, Clone, PartialEq)]
pub struct DriftInjection {
    pub room: String,
    pub field: SensorField,
    pub delta: f64,
    pub at_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonitoringReport {
    pub events: Vec<MonitorEvent>,
    pub monitor_log: Vec<String>,
    pub ticks_run: u64,
}

/// Drive the campus from `start` to `end` inclusive in `tick_seconds` steps.
/// Each tick: dispatch due commands into the campus, apply scheduled drifts,
/// then monitor active windows and enqueue any correctives. The inclusive
/// final tick exists so correctives raised on the last active tick still get
/// dispatched.
#[allow(clippy::too_many_arguments)]
pub fn run_monitoring(
    backend: &dyn Backend,
    ledger: &CallLedger,
    windows: &[MonitoringWindow],
    campus: &mut CampusSnapshot,
    queue: &mut CommandQueue,
    injections: &[DriftInjection],
    tick_seconds: i64,
    start: Timestamp,
    end: Timestamp,
) -> Result<MonitoringReport, Error> {
    assert!(tick_seconds > 0, "tick length must be positive");
    let mut report = MonitoringReport::default();
    let mut tick: u64 = 0;
    let mut now = start;
    while now <= end {
        queue.dispatch_due(now, campus);

        for injection in injections.iter().filter(|i| i.at_tick == tick) {
            crate::campus::inject_drift(campus, &injection.room, injection.field, injection.delta)?;
            report.monitor_log.push(format!(
                "{} tick={tick} drift room={} {} delta={:+.1}",
                format_ts(now),
                injection.room,
                match injection.field {
                    SensorField::Temperature => "temperature",
                    SensorField::Light => "light",
                },
                injection.delta
            ));
        }

        let events = monitor_tick(backend, ledger, windows, campus, tick, now)?;
        for event in &events {
            queue.enqueue(event.command.clone(), now)?;
            report.monitor_log.push(format!(
                "{} tick={tick} deviation intent={} room={} {} observed={:.1} desired={:.1} -> {}",
                format_ts(event.at),
                event.intent_id,
                event.room,
                event.field,
                event.observed,
                event.desired,
                event.command.id
            ));
        }
        report.events.extend(events);

        tick += 1;
        now = start + (tick as i64) * tick_seconds;
    }
    report.ticks_run = tick;
    Ok(report)
}
