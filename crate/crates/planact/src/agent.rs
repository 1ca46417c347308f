//! Planning and grounding controllers.
//!
//! Two formulations are implemented. The one-pass controller asks the
//! planning model for every subgoal at once, grounds them all in a single
//! call, and executes the full script. The iterative controller alternates:
//! plan one subgoal, ground it, execute it, and feed the execution result
//! back before planning the next, until the planner signals termination.
//!
//! Prompt surfaces here are load-bearing: trained modules expect the exact
//! instruction wording, the `"Subgoal <k>: <text>"` rendering, and the
//! `"Subgoal to be grounded:"` prefix, so all of it is pinned by fixtures.

use crate::annotate::{split_action_label, Conversation};
use crate::backend::{Backend, BackendError, ChatRequest, ChatTurn, Role};
use crate::dsl::{
    assemble_script, parse_action_script, serialize_action_script, Action, ActionScript, ParseError,
};
use crate::exec::{execute_script, ActionInterfaceSet, ExecutionResult, RefStore, ToolRegistry};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

pub const PLANNING_INSTRUCTION: &str =
    "Please provide a reasonable subgoal-based plan to solve the given task.";
pub const GROUNDING_INSTRUCTION: &str = "Please ground the given subgoal to corresponding executable actions for solving the given task. The grounded actions must be the one in available action list.";
/// Supervised planner reply that closes an episode.
pub const TERMINATION_SENTINEL: &str = "No more subgoal. Planning is done.";
pub const SUBGOAL_TO_GROUND_PREFIX: &str = "Subgoal to be grounded: ";

/// Feedback turn sent to the planner after executing subgoal `index`.
pub fn executed_result_question(index: u32, value: &str) -> String {
    format!("The executed result for Subgoal {index} is {value}. Should we stop planning?")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Qa,
    Web,
    Math,
    Multimodal,
    Custom,
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TaskType::Qa => "qa",
            TaskType::Web => "web",
            TaskType::Math => "math",
            TaskType::Multimodal => "multimodal",
            TaskType::Custom => "custom",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for TaskType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qa" => Ok(TaskType::Qa),
            "web" => Ok(TaskType::Web),
            "math" => Ok(TaskType::Math),
            "multimodal" => Ok(TaskType::Multimodal),
            "custom" => Ok(TaskType::Custom),
            other => Err(format!("unknown task type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub description: String,
    pub task_type: TaskType,
    /// Caption text standing in for the image; tasks whose actions use IMG
    /// must carry one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_caption: Option<String>,
}

impl Task {
    pub fn new(description: impl Into<String>, task_type: TaskType) -> Task {
        Task {
            description: description.into(),
            task_type,
            image_caption: None,
        }
    }

    pub fn with_caption(mut self, caption: impl Into<String>) -> Task {
        self.image_caption = Some(caption.into());
        self
    }

    /// Task text as it appears in prompts: the description, with the image
    /// caption appended after one space when present.
    pub fn prompt_text(&self) -> String {
        match &self.image_caption {
            Some(caption) => format!("{} {}", self.description, caption),
            None => self.description.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgoal {
    pub index: u32,
    pub text: String,
}

impl Subgoal {
    pub fn new(index: u32, text: impl Into<String>) -> Subgoal {
        Subgoal {
            index,
            text: text.into(),
        }
    }

    pub fn render(&self) -> String {
        format!("Subgoal {}: {}", self.index, self.text)
    }
}

impl fmt::Display for Subgoal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Iterative planner output: either the next subgoal or the stop signal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanStep {
    Terminal,
    Subgoal(Subgoal),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PlannerTerminated,
    MaxIterations,
    ExecutionError,
    ParseError,
}

/// One plan→ground→execute round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub subgoal: Subgoal,
    pub script: ActionScript,
    pub results: Vec<ExecutionResult>,
}

/// The full record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub task: Task,
    pub iterations: Vec<IterationRecord>,
    /// Present iff the planner terminated and at least one execution result
    /// exists; equals the last execution result's value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    pub stop_reason: StopReason,
    pub planner_calls: u32,
    pub grounder_calls: u32,
}

/// Example conversations prepended verbatim to live prompts when adapting
/// to unseen tasks. Bundles carry up to 3 examples per module; an empty
/// side leaves that module's prompt unchanged.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FewShotBundle {
    #[serde(default)]
    pub planner_examples: Vec<Conversation>,
    #[serde(default)]
    pub grounder_examples: Vec<Conversation>,
}

impl FewShotBundle {
    pub fn new(
        planner_examples: Vec<Conversation>,
        grounder_examples: Vec<Conversation>,
    ) -> Result<FewShotBundle, AgentError> {
        if planner_examples.len() > 3 {
            return Err(AgentError::FewShotBundleSize {
                module: "planner",
                count: planner_examples.len(),
            });
        }
        if grounder_examples.len() > 3 {
            return Err(AgentError::FewShotBundleSize {
                module: "grounder",
                count: grounder_examples.len(),
            });
        }
        Ok(FewShotBundle {
            planner_examples,
            grounder_examples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("planner output not recognized: `{0}`")]
    UnrecognizedPlannerOutput(String),
    #[error("few-shot example conversation breaks role alternation")]
    RoleAlternationViolation,
    #[error("{module} few-shot bundle holds {count} examples, at most 3 are supported")]
    FewShotBundleSize { module: &'static str, count: usize },
    #[error("cannot assemble a grounding prompt without subgoals")]
    EmptyPlan,
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub(crate) fn plan_first_turn_text(task_text: &str) -> String {
    format!("{PLANNING_INSTRUCTION}\nTask: {task_text}")
}

fn plan_first_turn(task: &Task) -> String {
    plan_first_turn_text(&task.prompt_text())
}

/// First user turn of every grounding conversation: instruction, interface
/// advertisement (omitted when the set is empty), then the task block.
pub(crate) fn ground_first_turn(
    task_text: &str,
    interfaces: &ActionInterfaceSet,
    tail: &str,
) -> String {
    let mut parts = vec![GROUNDING_INSTRUCTION.to_string()];
    if let Some(list) = interfaces.render_action_list() {
        parts.push(list);
    }
    parts.push(format!("Task: {task_text}\n{tail}"));
    parts.join("\n\n")
}

/// Builds the single-turn one-pass planning prompt.
pub fn assemble_plan_prompt_onepass(task: &Task) -> Result<ChatRequest, AgentError> {
    if task.description.is_empty() {
        return Err(AgentError::InvalidTask("empty description".to_string()));
    }
    Ok(ChatRequest::new(vec![ChatTurn::user(plan_first_turn(task))])
        .expect("single user turn is a valid request"))
}

/// Builds the iterative planning prompt: the task, then each planned
/// subgoal and its execution feedback in order, most recent last. With an
/// empty history this equals the one-pass prompt.
pub fn assemble_plan_prompt_iterative(
    task: &Task,
    history: &[(Subgoal, ExecutionResult)],
) -> Result<ChatRequest, AgentError> {
    if task.description.is_empty() {
        return Err(AgentError::InvalidTask("empty description".to_string()));
    }
    let mut turns = vec![ChatTurn::user(plan_first_turn(task))];
    for (subgoal, result) in history {
        turns.push(ChatTurn::assistant(subgoal.render()));
        turns.push(ChatTurn::user(executed_result_question(
            subgoal.index,
            &result.value,
        )));
    }
    Ok(ChatRequest::new(turns).expect("alternating turns ending on user"))
}

/// Classifies an iterative planner reply. A reply opening with
/// `"Subgoal <k>:"` continues the plan; a negative or stop-style answer to
/// the feedback question terminates it.
pub fn parse_plan_step(text: &str) -> Result<PlanStep, AgentError> {
    let trimmed = text.trim();
    if let Some((index, body)) = parse_subgoal_prefix(trimmed) {
        if index >= 1 && !body.is_empty() {
            return Ok(PlanStep::Subgoal(Subgoal::new(index, body)));
        }
        return Err(AgentError::UnrecognizedPlannerOutput(trimmed.to_string()));
    }
    if is_termination(trimmed) {
        return Ok(PlanStep::Terminal);
    }
    Err(AgentError::UnrecognizedPlannerOutput(trimmed.to_string()))
}

/// `("Subgoal", digits, ":")` prefix → (index, body after the colon).
pub(crate) fn parse_subgoal_prefix(text: &str) -> Option<(u32, &str)> {
    let rest = strip_prefix_ci(text, "subgoal")?;
    let rest = rest.trim_start();
    let digits_end = rest
        .char_indices()
        .take_while(|(_, c)| c.is_ascii_digit())
        .map(|(i, c)| i + c.len_utf8())
        .last()?;
    let digits = &rest[..digits_end];
    let after = rest[digits_end..].trim_start();
    let body = after.strip_prefix(':')?;
    let index: u32 = digits.parse().ok()?;
    Some((index, body.trim()))
}

pub(crate) fn strip_prefix_ci<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    // `get` rather than indexing: `prefix.len()` may fall inside a
    // multi-byte character of `text`, and such a head can never equal an
    // ASCII prefix anyway.
    let head = text.get(..prefix.len())?;
    if head.eq_ignore_ascii_case(prefix) {
        Some(&text[prefix.len()..])
    } else {
        None
    }
}

/// Terminal iff the reply answers the stop question negatively ("No", "No
/// more subgoal. …") or opens with a stop phrase. Matching is on the start
/// of the reply only, so a subgoal mentioning "stop" is not a termination.
fn is_termination(text: &str) -> bool {
    if let Some(rest) = strip_prefix_ci(text, "no") {
        let next = rest.chars().next();
        if next.map_or(true, |c| !c.is_alphanumeric()) {
            return true;
        }
    }
    strip_prefix_ci(text, "we should stop").is_some() || strip_prefix_ci(text, "stop").is_some()
}

/// What the grounder is being asked to ground.
#[derive(Debug, Clone)]
pub enum GroundingPhase<'a> {
    /// All subgoals at once; the reply is the full script.
    OnePass { subgoals: &'a [Subgoal] },
    /// The current subgoal, with previously grounded (subgoal, script)
    /// pairs replayed as conversation history.
    Iterative {
        current: &'a Subgoal,
        prior: &'a [(Subgoal, ActionScript)],
    },
}

/// Builds the grounding prompt for either formulation.
pub fn assemble_ground_prompt(
    task: &Task,
    interfaces: &ActionInterfaceSet,
    phase: GroundingPhase<'_>,
) -> Result<ChatRequest, AgentError> {
    if task.description.is_empty() {
        return Err(AgentError::InvalidTask("empty description".to_string()));
    }
    let task_text = task.prompt_text();
    match phase {
        GroundingPhase::OnePass { subgoals } => {
            if subgoals.is_empty() {
                return Err(AgentError::EmptyPlan);
            }
            let lines: Vec<String> = subgoals.iter().map(Subgoal::render).collect();
            let content = ground_first_turn(&task_text, interfaces, &lines.join("\n"));
            Ok(ChatRequest::new(vec![ChatTurn::user(content)])
                .expect("single user turn is a valid request"))
        }
        GroundingPhase::Iterative { current, prior } => {
            let first = prior.first().map(|(s, _)| s).unwrap_or(current);
            let tail = format!("{SUBGOAL_TO_GROUND_PREFIX}{}", first.render());
            let mut turns = vec![ChatTurn::user(ground_first_turn(&task_text, interfaces, &tail))];
            for (i, (_, script)) in prior.iter().enumerate() {
                turns.push(ChatTurn::assistant(serialize_action_script(script)));
                let next = prior.get(i + 1).map(|(s, _)| s).unwrap_or(current);
                turns.push(ChatTurn::user(format!(
                    "{SUBGOAL_TO_GROUND_PREFIX}{}",
                    next.render()
                )));
            }
            Ok(ChatRequest::new(turns).expect("alternating turns ending on user"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleRole {
    Planner,
    Grounder,
}

/// Prepends the bundle's example conversations for the requested module as
/// literal turns before the live prompt. Each example must itself be a
/// user-first alternating conversation; the seam between an example (which
/// ends on a user turn) and what follows is intentionally user→user.
pub fn attach_few_shot(
    prompt: &ChatRequest,
    bundle: &FewShotBundle,
    which: ModuleRole,
) -> Result<ChatRequest, AgentError> {
    let examples = match which {
        ModuleRole::Planner => &bundle.planner_examples,
        ModuleRole::Grounder => &bundle.grounder_examples,
    };
    if examples.is_empty() {
        return Ok(prompt.clone());
    }
    let mut turns = Vec::new();
    for conversation in examples {
        let mut expected = Role::User;
        for turn in &conversation.turns {
            if turn.role != expected || turn.content.is_empty() {
                return Err(AgentError::RoleAlternationViolation);
            }
            expected = match expected {
                Role::User => Role::Assistant,
                Role::Assistant => Role::User,
            };
            turns.push(ChatTurn {
                role: turn.role,
                content: turn.content.clone(),
            });
        }
        if conversation.turns.is_empty() {
            return Err(AgentError::RoleAlternationViolation);
        }
    }
    turns.extend(prompt.turns.iter().cloned());
    Ok(ChatRequest::from_turns_unchecked(turns).with_limits(prompt.max_tokens, prompt.temperature))
}

/// Parses grounder output. Replies may label statements per subgoal
/// (`"Action <k>-<m>: <statement>"`, one per line) or be a flat script;
/// both reduce to one ordered action list, with the labeling kept for
/// attribution when present.
fn parse_grounder_output(text: &str) -> Result<(ActionScript, Option<Vec<u32>>), ParseError> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let all_labeled = !lines.is_empty() && lines.iter().all(|l| split_action_label(l).is_some());
    if !all_labeled {
        return Ok((parse_action_script(text, false)?, None));
    }
    let mut actions: Vec<Action> = Vec::new();
    let mut groups: Vec<u32> = Vec::new();
    for line in lines {
        let (subgoal_index, _, statement) = split_action_label(line).expect("checked above");
        let parsed = parse_action_script(statement, false)?;
        for action in parsed.actions {
            actions.push(action);
            groups.push(subgoal_index);
        }
    }
    Ok((assemble_script(actions)?, Some(groups)))
}

fn make_trace(
    task: &Task,
    iterations: Vec<IterationRecord>,
    stop_reason: StopReason,
    store: &RefStore,
    planner_calls: u32,
    grounder_calls: u32,
) -> AgentTrace {
    let has_result = iterations.iter().any(|it| !it.results.is_empty());
    let final_answer = if stop_reason == StopReason::PlannerTerminated && has_result {
        store.last_value().map(str::to_string)
    } else {
        None
    };
    AgentTrace {
        task: task.clone(),
        iterations,
        final_answer,
        stop_reason,
        planner_calls,
        grounder_calls,
    }
}

fn fresh_store(task: &Task) -> RefStore {
    match &task.image_caption {
        Some(caption) => RefStore::with_image_context(caption.clone()),
        None => RefStore::new(),
    }
}

/// Runs the one-pass formulation: one planner call for all subgoals, one
/// grounder call for the full script, one execution sweep. Parse and
/// execution failures are recorded in the trace's stop reason; only backend
/// failures surface as errors.
pub fn run_onepass(
    task: &Task,
    interfaces: &ActionInterfaceSet,
    planner: &dyn Backend,
    grounder: &dyn Backend,
    registry: &ToolRegistry,
    few_shot: Option<&FewShotBundle>,
) -> Result<AgentTrace, AgentError> {
    let mut store = fresh_store(task);
    let mut prompt = assemble_plan_prompt_onepass(task)?;
    if let Some(bundle) = few_shot {
        prompt = attach_few_shot(&prompt, bundle, ModuleRole::Planner)?;
    }
    let plan_text = planner.complete(&prompt)?;
    let planner_calls = 1;

    let subgoals: Vec<Subgoal> = plan_text
        .lines()
        .filter_map(|line| parse_subgoal_prefix(line.trim()))
        .filter(|(index, body)| *index >= 1 && !body.is_empty())
        .map(|(index, body)| Subgoal::new(index, body))
        .collect();
    if subgoals.is_empty() {
        return Ok(make_trace(task, Vec::new(), StopReason::ParseError, &store, planner_calls, 0));
    }

    let mut ground_prompt =
        assemble_ground_prompt(task, interfaces, GroundingPhase::OnePass { subgoals: &subgoals })?;
    if let Some(bundle) = few_shot {
        ground_prompt = attach_few_shot(&ground_prompt, bundle, ModuleRole::Grounder)?;
    }
    let ground_text = grounder.complete(&ground_prompt)?;
    let grounder_calls = 1;

    let (script, groups) = match parse_grounder_output(&ground_text) {
        Ok(parsed) => parsed,
        Err(_) => {
            return Ok(make_trace(
                task,
                Vec::new(),
                StopReason::ParseError,
                &store,
                planner_calls,
                grounder_calls,
            ))
        }
    };
    if !crate::dsl::validate_interlinks(&script, &BTreeSet::new()).is_empty() {
        return Ok(make_trace(
            task,
            Vec::new(),
            StopReason::ParseError,
            &store,
            planner_calls,
            grounder_calls,
        ));
    }

    let run = execute_script(&script, registry, &mut store);
    let iterations = attribute_results(&subgoals, &script, groups, run.results);
    let stop_reason = if run.error.is_some() {
        StopReason::ExecutionError
    } else {
        StopReason::PlannerTerminated
    };
    Ok(make_trace(task, iterations, stop_reason, &store, planner_calls, grounder_calls))
}

/// Splits the executed script back into per-subgoal iteration entries when
/// the grounder labeled its statements; otherwise everything lands in a
/// single entry under the first subgoal.
fn attribute_results(
    subgoals: &[Subgoal],
    script: &ActionScript,
    groups: Option<Vec<u32>>,
    mut results: Vec<ExecutionResult>,
) -> Vec<IterationRecord> {
    let Some(groups) = groups else {
        return vec![IterationRecord {
            subgoal: subgoals[0].clone(),
            script: script.clone(),
            results,
        }];
    };
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut result_queue = results.drain(..);
    for subgoal in subgoals {
        let actions: Vec<Action> = script
            .actions
            .iter()
            .zip(groups.iter())
            .filter(|(_, g)| **g == subgoal.index)
            .map(|(a, _)| a.clone())
            .collect();
        let taken: Vec<ExecutionResult> = result_queue.by_ref().take(actions.len()).collect();
        iterations.push(IterationRecord {
            subgoal: subgoal.clone(),
            script: ActionScript { actions },
            results: taken,
        });
    }
    iterations
}

/// Runs the iterative formulation: plan one subgoal at a time, ground and
/// execute it, and feed the result back until the planner terminates or
/// `max_iterations` is reached. The store persists across iterations, so
/// later scripts may reference earlier bindings.
pub fn run_iterative(
    task: &Task,
    interfaces: &ActionInterfaceSet,
    planner: &dyn Backend,
    grounder: &dyn Backend,
    registry: &ToolRegistry,
    max_iterations: u32,
    few_shot: Option<&FewShotBundle>,
) -> Result<AgentTrace, AgentError> {
    if max_iterations < 1 {
        return Err(AgentError::InvalidConfig(
            "max_iterations must be at least 1".to_string(),
        ));
    }
    let mut store = fresh_store(task);
    let mut history: Vec<(Subgoal, ExecutionResult)> = Vec::new();
    let mut prior: Vec<(Subgoal, ActionScript)> = Vec::new();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut planner_calls = 0;
    let mut grounder_calls = 0;

    for _ in 0..max_iterations {
        let mut plan_prompt = assemble_plan_prompt_iterative(task, &history)?;
        if let Some(bundle) = few_shot {
            plan_prompt = attach_few_shot(&plan_prompt, bundle, ModuleRole::Planner)?;
        }
        planner_calls += 1;
        let plan_text = planner.complete(&plan_prompt)?;
        let subgoal = match parse_plan_step(&plan_text) {
            Ok(PlanStep::Terminal) => {
                return Ok(make_trace(
                    task,
                    iterations,
                    StopReason::PlannerTerminated,
                    &store,
                    planner_calls,
                    grounder_calls,
                ));
            }
            Ok(PlanStep::Subgoal(subgoal)) => subgoal,
            Err(_) => {
                return Ok(make_trace(
                    task,
                    iterations,
                    StopReason::ParseError,
                    &store,
                    planner_calls,
                    grounder_calls,
                ));
            }
        };

        let mut ground_prompt = assemble_ground_prompt(
            task,
            interfaces,
            GroundingPhase::Iterative {
                current: &subgoal,
                prior: &prior,
            },
        )?;
        if let Some(bundle) = few_shot {
            ground_prompt = attach_few_shot(&ground_prompt, bundle, ModuleRole::Grounder)?;
        }
        grounder_calls += 1;
        let ground_text = grounder.complete(&ground_prompt)?;
        let script = match parse_grounder_output(&ground_text) {
            Ok((script, _)) => script,
            Err(_) => {
                iterations.push(IterationRecord {
                    subgoal,
                    script: ActionScript::default(),
                    results: Vec::new(),
                });
                return Ok(make_trace(
                    task,
                    iterations,
                    StopReason::ParseError,
                    &store,
                    planner_calls,
                    grounder_calls,
                ));
            }
        };
        if !crate::dsl::validate_interlinks(&script, &store.bound_refs()).is_empty() {
            iterations.push(IterationRecord {
                subgoal,
                script,
                results: Vec::new(),
            });
            return Ok(make_trace(
                task,
                iterations,
                StopReason::ParseError,
                &store,
                planner_calls,
                grounder_calls,
            ));
        }

        let run = execute_script(&script, registry, &mut store);
        let failed = run.error.is_some();
        let last_ok = run.results.iter().rev().find(|r| r.ok).cloned();
        iterations.push(IterationRecord {
            subgoal: subgoal.clone(),
            script: script.clone(),
            results: run.results,
        });
        if failed {
            return Ok(make_trace(
                task,
                iterations,
                StopReason::ExecutionError,
                &store,
                planner_calls,
                grounder_calls,
            ));
        }
        let feedback = last_ok.expect("successful run has at least one result");
        history.push((subgoal.clone(), feedback));
        prior.push((subgoal, script));
    }

    Ok(make_trace(
        task,
        iterations,
        StopReason::MaxIterations,
        &store,
        planner_calls,
        grounder_calls,
    ))
}
