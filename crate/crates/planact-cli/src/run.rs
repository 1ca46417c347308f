//! The `run` command: drives one episode per task line against configured
//! backends and writes one JSON line per task, in input order. Episode
//! failures (bad task line, exhausted fixture, tool error surfaced as a
//! backend fault) become `{"id", "error"}` lines rather than a nonzero exit;
//! only I/O and configuration problems fail the process.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use planact::agent::{run_iterative, run_onepass, AgentTrace, FewShotBundle, Task, TaskType};
use planact::annotate::Formulation;
use planact::backend::{Backend, ScriptedMock};
use planact::catalog::registry_with_mocks;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, BackendConfig, RunConfig};
use crate::error::CliError;
use crate::jsonl;

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Task JSONL: id, task_type, description, optional image_caption.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Destination trace JSONL.
    #[arg(long)]
    pub output: PathBuf,
    /// Override the configured formulation.
    #[arg(long)]
    pub formulation: Option<String>,
    /// Override the configured iteration cap.
    #[arg(long)]
    pub max_iterations: Option<u32>,
    /// Episode parallelism; output order stays input order.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    #[serde(default)]
    pub task_type: Option<String>,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_caption: Option<String>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a AgentTrace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

/// Where a module's completions come from. Scripted sources key response
/// queues by task id so episodes stay independent under `--jobs`.
enum BackendSource {
    Scripted(BTreeMap<String, Vec<String>>),
    #[cfg(feature = "http")]
    Http {
        endpoint: String,
        model: String,
        auth_env: Option<String>,
    },
}

impl BackendSource {
    fn from_config(role: &str, cfg: &BackendConfig, base: &std::path::Path) -> Result<Self, CliError> {
        match cfg.kind.as_str() {
            "scripted" => {
                let fixture = cfg.fixture.as_ref().ok_or_else(|| {
                    CliError::usage(format!("backend `{role}`: scripted kind needs a fixture path"))
                })?;
                let map = jsonl::read_json(&config::resolve(base, fixture))?;
                Ok(BackendSource::Scripted(map))
            }
            #[cfg(feature = "http")]
            "http" => {
                let endpoint = cfg.endpoint.clone().ok_or_else(|| {
                    CliError::usage(format!("backend `{role}`: http kind needs an endpoint"))
                })?;
                let model = cfg.model.clone().ok_or_else(|| {
                    CliError::usage(format!("backend `{role}`: http kind needs a model"))
                })?;
                Ok(BackendSource::Http {
                    endpoint,
                    model,
                    auth_env: cfg.auth_env.clone(),
                })
            }
            #[cfg(not(feature = "http"))]
            "http" => Err(CliError::usage(format!(
                "backend `{role}`: this binary was built without http support"
            ))),
            other => Err(CliError::usage(format!(
                "backend `{role}`: unknown kind `{other}`"
            ))),
        }
    }

    fn backend_for(&self, role: &str, task_id: &str) -> Result<Box<dyn Backend>, String> {
        match self {
            BackendSource::Scripted(map) => {
                let responses = map
                    .get(task_id)
                    .cloned()
                    .ok_or_else(|| format!("no scripted {role} responses for task `{task_id}`"))?;
                Ok(Box::new(ScriptedMock::ordinal(
                    format!("{role}:{task_id}"),
                    responses,
                )))
            }
            #[cfg(feature = "http")]
            BackendSource::Http {
                endpoint,
                model,
                auth_env,
            } => {
                let mut backend = planact::backend::HttpChatCompletion::new(
                    format!("{role}@{endpoint}"),
                    endpoint.clone(),
                    model.clone(),
                    std::time::Duration::from_secs(120),
                );
                backend.auth_env = auth_env.clone();
                Ok(Box::new(backend))
            }
        }
    }
}

struct RunContext {
    formulation: Formulation,
    max_iterations: u32,
    default_task_type: Option<String>,
    planner: BackendSource,
    grounder: BackendSource,
    tool_fixtures: BTreeMap<String, BTreeMap<String, String>>,
    few_shot: Option<FewShotBundle>,
}

impl RunContext {
    fn episode(&self, record: &TaskRecord) -> Result<AgentTrace, String> {
        let type_name = record
            .task_type
            .as_deref()
            .or(self.default_task_type.as_deref())
            .ok_or("task line lacks task_type and the config declares no default")?;
        let task_type = TaskType::from_str(type_name)?;
        let mut task = Task::new(record.description.clone(), task_type);
        if let Some(caption) = &record.image_caption {
            task = task.with_caption(caption.clone());
        }
        let interfaces = config::interfaces_for(task_type);
        let registry =
            registry_with_mocks(&interfaces, &self.tool_fixtures).map_err(|e| e.to_string())?;
        let planner = self.planner.backend_for("planner", &record.id)?;
        let grounder = self.grounder.backend_for("grounder", &record.id)?;
        let outcome = match self.formulation {
            Formulation::OnePass => run_onepass(
                &task,
                &interfaces,
                planner.as_ref(),
                grounder.as_ref(),
                &registry,
                self.few_shot.as_ref(),
            ),
            Formulation::Iterative => run_iterative(
                &task,
                &interfaces,
                planner.as_ref(),
                grounder.as_ref(),
                &registry,
                self.max_iterations,
                self.few_shot.as_ref(),
            ),
        };
        outcome.map_err(|e| e.to_string())
    }

    fn trace_line(&self, record: &TaskRecord) -> Result<String, CliError> {
        let line = match self.episode(record) {
            Ok(trace) => serde_json::to_string(&TraceLine {
                id: &record.id,
                trace: Some(&trace),
                error: None,
            }),
            Err(error) => {
                log::warn!("task `{}` failed: {error}", record.id);
                serde_json::to_string(&TraceLine {
                    id: &record.id,
                    trace: None,
                    error: Some(&error),
                })
            }
        };
        line.map_err(|e| CliError::data(format!("cannot serialize trace for `{}`: {e}", record.id)))
    }
}

pub fn exec(args: RunArgs) -> Result<(), CliError> {
    let (cfg, base): (RunConfig, _) = config::load_toml(&args.config)?;
    let formulation_name = args.formulation.as_deref().unwrap_or(&cfg.formulation);
    let formulation = config::parse_formulation(formulation_name)?;
    let max_iterations = args.max_iterations.unwrap_or(cfg.max_iterations);
    if max_iterations < 1 {
        return Err(CliError::usage("max_iterations must be at least 1"));
    }
    if args.jobs < 1 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    if let Some(default) = &cfg.task_type {
        config::parse_task_type(default)?;
    }

    let planner_cfg = cfg
        .backends
        .get("planner")
        .ok_or_else(|| CliError::usage("config lacks a [backends.planner] table"))?;
    let grounder_cfg = cfg
        .backends
        .get("grounder")
        .ok_or_else(|| CliError::usage("config lacks a [backends.grounder] table"))?;
    let planner = BackendSource::from_config("planner", planner_cfg, &base)?;
    let grounder = BackendSource::from_config("grounder", grounder_cfg, &base)?;

    let tool_fixtures = match cfg.tools.as_ref().and_then(|t| t.fixtures.as_ref()) {
        Some(path) => jsonl::read_json(&config::resolve(&base, path))?,
        None => BTreeMap::new(),
    };
    let few_shot: Option<FewShotBundle> = match &cfg.few_shot {
        Some(path) => Some(jsonl::read_json(&config::resolve(&base, path))?),
        None => None,
    };

    let records: Vec<TaskRecord> = jsonl::read_jsonl(&args.tasks)?;
    let ctx = RunContext {
        formulation,
        max_iterations,
        default_task_type: cfg.task_type,
        planner,
        grounder,
        tool_fixtures,
        few_shot,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::usage(format!("cannot build thread pool: {e}")))?;
    let lines: Vec<Result<String, CliError>> =
        pool.install(|| records.par_iter().map(|r| ctx.trace_line(r)).collect());

    let mut out = String::new();
    for line in lines {
        out.push_str(&line?);
        out.push('\n');
    }
    jsonl::write_text(&args.output, &out)?;
    log::info!("wrote {} trace line(s) to {}", records.len(), args.output.display());
    Ok(())
}
