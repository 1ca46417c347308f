//! TOML configuration for `run` and `convert`. Relative paths inside a
//! config file resolve against the directory holding that file, so fixture
//! bundles stay relocatable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use planact::agent::TaskType;
use planact::annotate::Formulation;
use planact::catalog;
use planact::exec::ActionInterfaceSet;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Deserialize)]
pub struct RunConfig {
    pub formulation: String,
    /// Default task type for task lines that omit one.
    #[serde(default)]
    pub task_type: Option<String>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default)]
    pub tools: Option<ToolsConfig>,
    /// JSON file holding few-shot example conversations for both modules.
    #[serde(default)]
    pub few_shot: Option<PathBuf>,
}

fn default_max_iterations() -> u32 {
    8
}

// The http fields parse under every feature set (a config written for an
// http build must still produce a clean usage error, not a parse error,
// when the feature is off), so they are knowingly unread in that case.
#[derive(Debug, Deserialize)]
#[cfg_attr(not(feature = "http"), allow(dead_code))]
pub struct BackendConfig {
    /// `scripted` replays a fixture; `http` calls a chat-completion server.
    pub kind: String,
    /// Scripted: JSON object mapping task id to the ordered response list.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding a bearer token, if the server needs one.
    #[serde(default)]
    pub auth_env: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct ToolsConfig {
    /// JSON object: tool name -> { resolved-args key -> value }.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct ConvertFile {
    pub convert: ConvertConfig,
}

#[derive(Debug, Deserialize)]
pub struct ConvertConfig {
    pub task_type: String,
    /// Demonstration file: 4 or 5 blocks separated by `===` lines.
    pub icl: PathBuf,
    /// JSON array of scripted rewriter responses, consumed in order.
    pub backend: PathBuf,
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
    #[serde(default = "default_max_subgoals")]
    pub max_subgoals: usize,
}

fn default_max_chars() -> usize {
    8192
}

fn default_max_subgoals() -> usize {
    30
}

/// Reads and deserializes a TOML file, returning the value and the directory
/// that relative paths inside it resolve against.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<(T, PathBuf), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config `{}`: {e}", path.display())))?;
    let value = toml::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid config `{}`: {e}", path.display())))?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    Ok((value, base))
}

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

pub fn parse_formulation(s: &str) -> Result<Formulation, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "onepass" | "one_pass" => Ok(Formulation::OnePass),
        "iterative" => Ok(Formulation::Iterative),
        other => Err(CliError::usage(format!(
            "unknown formulation `{other}` (expected onepass or iterative)"
        ))),
    }
}

pub fn parse_task_type(s: &str) -> Result<TaskType, CliError> {
    TaskType::from_str(s).map_err(CliError::Usage)
}

/// The action interfaces advertised to the grounder for a task type. Custom
/// tasks declare no catalog and ground free-form statements.
pub fn interfaces_for(task_type: TaskType) -> ActionInterfaceSet {
    match task_type {
        TaskType::Qa => catalog::qa_interfaces(),
        TaskType::Web => catalog::web_interfaces(),
        TaskType::Math => catalog::math_interfaces(),
        TaskType::Multimodal => catalog::multimodal_interfaces(),
        TaskType::Custom => ActionInterfaceSet::empty(),
    }
}
