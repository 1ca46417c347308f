//! The `convert` command: rewrites natural-language rationales into
//! subgoal/action annotations through a scripted rewriter, then filters
//! them. Outputs land in the given directory as accepted.jsonl,
//! rejects.jsonl, and stats.json.

use std::path::PathBuf;

use clap::Args;
use planact::annotate::{convert_batch, parse_conversion_fixture_file, FilterLimits, PipelineError, SourceExample};
use planact::backend::ScriptedMock;
use serde::Serialize;

use crate::config::{self, ConvertFile};
use crate::error::CliError;
use crate::jsonl;

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// TOML config carrying a [convert] table.
    #[arg(long)]
    pub config: PathBuf,
    /// Source JSONL: task_text, rationale, task_type, optional extra_docs.
    #[arg(long)]
    pub sources: PathBuf,
    /// Directory receiving accepted.jsonl, rejects.jsonl, stats.json.
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Serialize)]
struct RejectLine<'a> {
    task_text: &'a str,
    reason: String,
}

pub fn exec(args: ConvertArgs) -> Result<(), CliError> {
    let (file, base): (ConvertFile, _) = config::load_toml(&args.config)?;
    let cfg = file.convert;
    let task_type = config::parse_task_type(&cfg.task_type)?;
    let interfaces = config::interfaces_for(task_type);

    let icl_path = config::resolve(&base, &cfg.icl);
    let icl = parse_conversion_fixture_file(&jsonl::read_text(&icl_path)?)
        .map_err(|e| CliError::usage(format!("invalid demonstrations `{}`: {e}", icl_path.display())))?;
    let responses: Vec<String> = jsonl::read_json(&config::resolve(&base, &cfg.backend))?;
    let backend = ScriptedMock::ordinal("rewriter", responses);

    let sources: Vec<SourceExample> = jsonl::read_jsonl(&args.sources)?;
    let limits = FilterLimits {
        max_chars: cfg.max_chars,
        max_subgoals: cfg.max_subgoals,
    };

    let batch = convert_batch(&sources, &backend, &icl, &interfaces, &limits).map_err(
        |e| match e {
            PipelineError::WrongFixtureCount(_) => CliError::usage(e.to_string()),
            other => CliError::data(other.to_string()),
        },
    )?;

    let rejects: Vec<RejectLine> = batch
        .rejected
        .iter()
        .map(|(example, reason)| RejectLine {
            task_text: &example.task_text,
            reason: reason.to_string(),
        })
        .collect();
    let mut stats = serde_json::to_string_pretty(&batch.stats)
        .map_err(|e| CliError::data(format!("cannot serialize stats: {e}")))?;
    stats.push('\n');

    jsonl::write_jsonl(&args.output_dir.join("accepted.jsonl"), &batch.accepted)?;
    jsonl::write_jsonl(&args.output_dir.join("rejects.jsonl"), &rejects)?;
    jsonl::write_text(&args.output_dir.join("stats.json"), &stats)?;
    log::info!(
        "accepted {} of {} example(s)",
        batch.stats.accepted,
        batch.stats.total
    );
    Ok(())
}
