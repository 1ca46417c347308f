//! The `evaluate` command: scores trace lines against gold records, writes
//! the report JSON, and prints one `metric value` row per aggregate to
//! stdout.

use std::path::PathBuf;

use clap::Args;
use planact::agent::AgentTrace;
use planact::backend::{Backend, ScriptedMock};
use planact::eval::{evaluate_batch, EvalError, GoldRecord, Metric};
use serde::Deserialize;

use crate::error::CliError;
use crate::jsonl;

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Trace JSONL produced by `run`.
    #[arg(long)]
    pub traces: PathBuf,
    /// Gold JSONL: id plus answer and/or steps.
    #[arg(long)]
    pub golds: PathBuf,
    /// Comma-separated metrics: exact_match, step_success, judge_accuracy.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_metric)]
    pub metrics: Vec<Metric>,
    /// Destination report JSON.
    #[arg(long)]
    pub output: PathBuf,
    /// Scripted judge fixture: JSON array of verdict strings.
    #[arg(long)]
    pub judge: Option<PathBuf>,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse()
}

#[derive(Deserialize)]
struct TraceLine {
    id: String,
    #[serde(default)]
    trace: Option<AgentTrace>,
    #[serde(default)]
    error: Option<String>,
}

pub fn exec(args: EvaluateArgs) -> Result<(), CliError> {
    let lines: Vec<TraceLine> = jsonl::read_jsonl(&args.traces)?;
    let mut traces: Vec<(String, AgentTrace)> = Vec::new();
    for line in lines {
        match line.trace {
            Some(trace) => traces.push((line.id, trace)),
            None => log::warn!(
                "task `{}` has no trace ({}); excluded from evaluation",
                line.id,
                line.error.as_deref().unwrap_or("no error recorded")
            ),
        }
    }
    if traces.is_empty() {
        return Err(CliError::data("no traces to evaluate"));
    }

    let golds: Vec<GoldRecord> = jsonl::read_jsonl(&args.golds)?;
    let judge: Option<ScriptedMock> = match &args.judge {
        Some(path) => {
            let verdicts: Vec<String> = jsonl::read_json(path)?;
            Some(ScriptedMock::ordinal("judge", verdicts))
        }
        None => None,
    };
    let judge_ref = judge.as_ref().map(|j| j as &dyn Backend);

    let report = evaluate_batch(&traces, &golds, &args.metrics, judge_ref).map_err(|e| match e {
        EvalError::JudgeUnavailable => {
            CliError::usage("judge_accuracy requires --judge".to_string())
        }
        other => CliError::data(other.to_string()),
    })?;

    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::data(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    jsonl::write_text(&args.output, &text)?;

    for (metric, value) in &report.aggregate {
        println!("{metric} {value:.4}");
    }
    Ok(())
}
