//! Plain-text rendering of run results. Everything except the trailing
//! wall-time line is deterministic, so two runs of the same scenario can be
//! compared byte-for-byte after dropping that one line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Error;
use crate::pipeline::{LearningOutcome, ParetoRow, RunReport};
use crate::time::format_ts;

fn opt_f64(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    }
}

fn opt_bool(value: Option<bool>) -> String {
    match value {
        Some(true) => "yes".into(),
        Some(false) => "no".into(),
        None => "-".into(),
    }
}

/// The per-candidate metrics table as TSV.
pub fn render_pareto_tsv(rows: &[ParetoRow]) -> String {
    let mut out = String::from(
        "intent\tsolution\turgency\tlm_calls\tusage_cost\tsimilarity\tprecision\ton_front\n",
    );
    for row in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{}\t{}",
            row.intent_key,
            row.solution_id,
            row.urgency,
            row.lm_calls,
            opt_f64(row.usage_cost),
            row.similarity,
            opt_f64(row.precision),
            opt_bool(row.on_front),
        );
    }
    out
}

/// Human-readable run summary.
pub fn render_report(run: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario: {}", run.scenario_name);
    let _ = writeln!(out, "seed: {}", run.seed);
    let _ = writeln!(out, "clock start: {}", format_ts(run.clock_start));
    let _ = writeln!(
        out,
        "knobs: theta1={}s theta2={} candidates={}",
        run.theta1_seconds, run.theta2, run.candidates
    );
    let _ = writeln!(out, "intents: {}", run.intents.len());
    for intent in &run.intents {
        let _ = writeln!(out, "  {} ({})", intent.key, intent.user);
        let _ = writeln!(out, "    urgency: {}", intent.urgency);
        let _ = writeln!(
            out,
            "    recalled case: {}",
            intent.recalled_case.as_deref().unwrap_or("-")
        );
        let _ = writeln!(
            out,
            "    inherited preferences: {}",
            if intent.inherited_preferences { "yes" } else { "no" }
        );
        let _ = writeln!(
            out,
            "    hint fired: {}",
            if intent.hint_fired { "yes" } else { "no" }
        );
        let _ = writeln!(out, "    self check: {}", intent.self_alignment);
        let _ = writeln!(
            out,
            "    chosen solution: {}",
            intent.chosen_solution.as_deref().unwrap_or("-")
        );
        if let Some(reason) = &intent.verdict_reason {
            let _ = writeln!(out, "    verdict: {reason}");
        }
        let _ = writeln!(out, "    room: {}", intent.room.as_deref().unwrap_or("-"));
        let _ = writeln!(out, "    commands: {}", intent.commands_emitted);
    }
    let _ = writeln!(out, "negotiations: {}", run.negotiations.len());
    for n in &run.negotiations {
        let _ = writeln!(out, "  {} kept by {}", n.room, n.kept_intent);
        for (intent, room) in &n.reassigned {
            let _ = writeln!(out, "    {intent} moved to {room}");
        }
        for intent in &n.failed {
            let _ = writeln!(out, "    {intent} left unplaced");
        }
    }
    let _ = writeln!(out, "alerts: {}", run.alerts.len());
    for a in &run.alerts {
        let _ = writeln!(out, "  {a}");
    }
    let _ = writeln!(out, "ledger:");
    for (role, count) in &run.ledger_counts {
        let _ = writeln!(out, "  {role}: {count}");
    }
    let _ = writeln!(out, "ticks run: {}", run.ticks_run);
    let _ = writeln!(out, "final rooms:");
    for (room, temp, lux) in &run.touched_rooms {
        let _ = writeln!(out, "  {room}: {temp:.1}C {lux:.0}lux");
    }
    let _ = writeln!(out, "wall_time: {:?}", run.wall);
    out
}

pub fn render_learning(outcome: &LearningOutcome) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "learning pair: {} -> {}",
        outcome.first_intent, outcome.second_intent
    );
    let _ = writeln!(out, "pair similarity: {:.4}", outcome.pair_similarity);
    let _ = writeln!(
        out,
        "hint fired: {}",
        if outcome.hint_fired { "yes" } else { "no" }
    );
    let _ = writeln!(
        out,
        "best candidate similarity: first={:.4} second={:.4}",
        outcome.first_best_similarity, outcome.second_best_similarity
    );
    let _ = writeln!(out, "gain: {:+.2}%", outcome.gain * 100.0);
    out
}

/// Write `report.txt`, `pareto.tsv`, `dispatch.log`, and `monitor.log` into
/// `dir` (created if missing).
pub fn write_run(run: &RunReport, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.txt"), render_report(run))?;
    std::fs::write(dir.join("pareto.tsv"), render_pareto_tsv(&run.pareto_rows))?;
    let mut dispatch = run.dispatch_log.join("\n");
    if !dispatch.is_empty() {
        dispatch.push('\n');
    }
    std::fs::write(dir.join("dispatch.log"), dispatch)?;
    let mut monitor = run.monitor_log.join("\n");
    if !monitor.is_empty() {
        monitor.push('\n');
    }
    std::fs::write(dir.join("monitor.log"), monitor)?;
    Ok(())
}

pub fn write_learning(outcome: &LearningOutcome, dir: &Path) -> Result<(), Error> {
    write_run(&outcome.report, dir)?;
    std::fs::write(dir.join("learning.txt"), render_learning(outcome))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::UrgencyLevel;

    #[test]
    fn pareto_tsv_renders_missing_columns_as_dashes() {
        let rows = vec![
            ParetoRow {
                intent_key: "a".into(),
                solution_id: "s1".into(),
                urgency: UrgencyLevel::High,
                lm_calls: 2,
                usage_cost: None,
                similarity: 0.5,
                precision: None,
                on_front: None,
            },
            ParetoRow {
                intent_key: "b".into(),
                solution_id: "s2".into(),
                urgency: UrgencyLevel::Low,
                lm_calls: 3,
                usage_cost: Some(0.6321),
                similarity: 0.75,
                precision: Some(1.0),
                on_front: Some(true),
            },
        ];
        let tsv = render_pareto_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "a\ts1\thigh\t2\t-\t0.5000\t-\t-");
        assert_eq!(lines[2], "b\ts2\tlow\t3\t0.6321\t0.7500\t1.0000\tyes");
    }
}
