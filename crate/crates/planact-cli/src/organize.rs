//! The `organize` command: shapes converted annotations into training
//! conversations and loss-masked records. Malformed annotation lines are
//! skipped and counted rather than failing the batch; the skip count goes to
//! stderr so stdout and the output files stay clean.

use std::path::PathBuf;

use clap::Args;
use planact::annotate::{
    emit_training_record, organize_grounding, organize_planning, Conversation,
    ConvertedAnnotation, Formulation, TrainingRecord, WhitespaceTokenizer,
};
use serde::Serialize;

use crate::config;
use crate::error::CliError;
use crate::jsonl;

#[derive(Debug, Args)]
pub struct OrganizeArgs {
    /// Annotation JSONL, one converted annotation per line.
    #[arg(long)]
    pub annotations: PathBuf,
    /// onepass or iterative.
    #[arg(long)]
    pub formulation: String,
    /// planning, grounding, or both.
    #[arg(long, default_value = "both")]
    pub module: String,
    /// Interface catalog advertised in grounding conversations.
    #[arg(long, default_value = "custom")]
    pub task_type: String,
    /// Directory receiving conversations.jsonl and records.jsonl.
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Serialize)]
struct ConversationLine<'a> {
    module: &'static str,
    formulation: Formulation,
    conversation: &'a Conversation,
}

#[derive(Serialize)]
struct RecordLine<'a> {
    module: &'static str,
    formulation: Formulation,
    #[serde(flatten)]
    record: &'a TrainingRecord,
}

pub fn exec(args: OrganizeArgs) -> Result<(), CliError> {
    let formulation = config::parse_formulation(&args.formulation)?;
    let modules: &[&'static str] = match args.module.as_str() {
        "planning" => &["planning"],
        "grounding" => &["grounding"],
        "both" => &["planning", "grounding"],
        other => {
            return Err(CliError::usage(format!(
                "unknown module `{other}` (expected planning, grounding, or both)"
            )))
        }
    };
    let task_type = config::parse_task_type(&args.task_type)?;
    let interfaces = config::interfaces_for(task_type);

    let text = jsonl::read_text(&args.annotations)?;
    let mut skipped = 0usize;
    let mut conversation_lines: Vec<String> = Vec::new();
    let mut record_lines: Vec<String> = Vec::new();
    let tokenizer = WhitespaceTokenizer;

    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann: ConvertedAnnotation = match serde_json::from_str(line) {
            Ok(ann) => ann,
            Err(e) => {
                log::warn!("line {}: malformed annotation: {e}", i + 1);
                skipped += 1;
                continue;
            }
        };
        for module in modules {
            let organized = match *module {
                "planning" => organize_planning(&ann, formulation),
                _ => organize_grounding(&ann, &interfaces, formulation),
            };
            let conversation = match organized {
                Ok(conv) => conv,
                Err(e) => {
                    log::warn!("line {}: cannot organize {module}: {e}", i + 1);
                    skipped += 1;
                    continue;
                }
            };
            let record = match emit_training_record(&conversation, &tokenizer) {
                Ok(record) => record,
                Err(e) => {
                    log::warn!("line {}: cannot emit record for {module}: {e}", i + 1);
                    skipped += 1;
                    continue;
                }
            };
            let conv_json = serde_json::to_string(&ConversationLine {
                module,
                formulation,
                conversation: &conversation,
            })
            .map_err(|e| CliError::data(format!("cannot serialize conversation: {e}")))?;
            let record_json = serde_json::to_string(&RecordLine {
                module,
                formulation,
                record: &record,
            })
            .map_err(|e| CliError::data(format!("cannot serialize record: {e}")))?;
            conversation_lines.push(conv_json);
            record_lines.push(record_json);
        }
    }

    let mut conv_out = String::new();
    for line in &conversation_lines {
        conv_out.push_str(line);
        conv_out.push('\n');
    }
    let mut rec_out = String::new();
    for line in &record_lines {
        rec_out.push_str(line);
        rec_out.push('\n');
    }
    jsonl::write_text(&args.output_dir.join("conversations.jsonl"), &conv_out)?;
    jsonl::write_text(&args.output_dir.join("records.jsonl"), &rec_out)?;
    eprintln!(
        "organized {} conversation(s), skipped {skipped}",
        conversation_lines.len()
    );
    Ok(())
}
