//! Annotation pipeline: turning natural-language rationales into
//! subgoal/action training data.
//!
//! The pipeline has four stages. `assemble_conversion_prompt` builds the
//! few-shot rewriting prompt for a source example; `parse_converted` reads
//! the rewritten plan back into structured form; `filter_annotation` drops
//! outputs that fail quality gates; `organize_planning` / `organize_grounding`
//! reshape an accepted annotation into the chat conversations the planner and
//! grounder are trained on. `emit_training_record` then renders a
//! conversation with role markers, tokenizes it, and derives the loss mask.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::{
    self, executed_result_question, Subgoal, TaskType, SUBGOAL_TO_GROUND_PREFIX,
    TERMINATION_SENTINEL,
};
use crate::backend::{Backend, BackendError, ChatRequest, ChatTurn, Role};
use crate::dsl::{
    parse_action_script, parse_ref_id, serialize_action_script, validate_interlinks, Action,
    ActionScript, ParseError, RefId, Violation,
};
use crate::exec::ActionInterfaceSet;

/// Rewriting instruction for math word problems.
pub const CONVERT_INSTRUCTION_MATH: &str = "Please convert natural language plans into a series of subgoals and their corresponding actions that lead to the successful implementation with respect to the given instructions. Please use `R[number]' to represent the intermediate results for each subgoal, without generating any exact values. Please also use functions to represent the corresponding actions. For the actions, they must be one of `Calculator', `SetEquation', `SolveEquation', `SolveInequality', `Count', `Code', and `Define'.";

/// Rewriting instruction for complex question answering.
pub const CONVERT_INSTRUCTION_QA: &str = "Please convert natural language plans into a series of subgoals and their corresponding actions that lead to the successful implementation with respect to the given instructions. Please use `R[number]' to represent the intermediate results for each subgoal, without generating any exact values. Please also use functions to represent the corresponding actions. For the actions, they must be one of one of `KnowledgeQuery', `ParagraphRetrieve', `QA', `Calculator' and `Code'.";

/// Rewriting instruction for web-browsing episodes.
pub const CONVERT_INSTRUCTION_WEB: &str = "Please convert natural language plans into a series of subgoals and their corresponding actions that lead to the successful implementation with respect to the given instructions. Please use `R[number]' to represent the intermediate results for each subgoal, without generating any exact values. Please also use functions to represent the corresponding actions. For the actions, they must be one of they must be one of `TYPE', `CLICK', and `SELECT'.";

/// Rewriting instruction for multimodal question answering. Unlike the other
/// three it asks for execution results to be attached inline.
pub const CONVERT_INSTRUCTION_MULTIMODAL: &str = "Please convert natural language plans into a series of subgoals, their corresponding actions that lead to the successful implementation with respect to the given instructions. When generating the actions, please also attach the action's results contained in the natural language plans. Please use 'R[number]' to represent the execution results for each action. Please also use functions to represent the corresponding actions. For the actions, they must be one of the available actions, 'QA', 'VQA'.";

/// Role marker opening a user turn in rendered chat text.
pub const USER_MARKER: &str = "<|user|>";
/// Role marker opening an assistant turn in rendered chat text.
pub const ASSISTANT_MARKER: &str = "<|assistant|>";

/// Errors produced by the annotation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("expected 4 or 5 in-context fixtures, found {0}")]
    WrongFixtureCount(usize),
    #[error(transparent)]
    Script(#[from] ParseError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no `Subgoal <k>:` header found before plan content")]
    MissingSubgoalHeader,
    #[error("action labeled for subgoal {found} appears under Subgoal {expected}")]
    ActionIndexMismatch { expected: u32, found: u32 },
    #[error("subgoal {0} has no annotated execution result")]
    MissingResult(u32),
    #[error("subgoal {0} has no actions")]
    EmptySubgoal(u32),
    #[error("subgoal header {found} does not increase over {previous}")]
    SubgoalIndexOrder { previous: u32, found: u32 },
    #[error("annotation references {0}, which no action binds")]
    UnboundRef(RefId),
    #[error("conversation must alternate user/assistant starting with user, with non-empty turns")]
    RoleAlternation,
    #[error("logprob and mask lengths differ: {logprobs} vs {mask}")]
    LengthMismatch { logprobs: usize, mask: usize },
    #[error("token span {start}..{end} straddles a turn boundary")]
    TokenizerOffsetGap { start: usize, end: usize },
    #[error("task type `{0}` has no rewriting instruction")]
    UnsupportedTaskType(TaskType),
    #[error("malformed fixture file: {0}")]
    FixtureFormat(String),
}

/// A raw dataset example before rewriting: the task, its free-form rationale,
/// and optional supporting documents appended to the rationale in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceExample {
    pub task_text: String,
    pub rationale: String,
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_docs: Option<String>,
}

/// A completed rewriting demonstration used as an in-context example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionExample {
    pub task: String,
    pub rationale: String,
    pub plan: String,
}

/// Structured form of a rewritten plan: ordered subgoals, the actions grouped
/// under each subgoal index, and (when annotated) the execution result of
/// each subgoal's final action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertedAnnotation {
    pub task: String,
    pub subgoals: Vec<Subgoal>,
    pub actions: BTreeMap<u32, ActionScript>,
    pub results: BTreeMap<u32, String>,
}

impl ConvertedAnnotation {
    pub fn with_task(mut self, task: impl Into<String>) -> ConvertedAnnotation {
        self.task = task.into();
        self
    }

    /// Total number of actions across all subgoals.
    pub fn action_count(&self) -> usize {
        self.actions.values().map(ActionScript::len).sum()
    }
}

/// Returns the rewriting instruction for a task type. Custom tasks carry
/// their own tooling and have no canned instruction.
pub fn conversion_instruction(task_type: TaskType) -> Result<&'static str, PipelineError> {
    match task_type {
        TaskType::Math => Ok(CONVERT_INSTRUCTION_MATH),
        TaskType::Qa => Ok(CONVERT_INSTRUCTION_QA),
        TaskType::Web => Ok(CONVERT_INSTRUCTION_WEB),
        TaskType::Multimodal => Ok(CONVERT_INSTRUCTION_MULTIMODAL),
        TaskType::Custom => Err(PipelineError::UnsupportedTaskType(task_type)),
    }
}

/// Whether annotations for this task type must carry `= <result>` suffixes.
/// Web episodes are grounded against a live page and carry none; custom task
/// sets choose their own convention and default to none.
pub fn require_results_for(task_type: TaskType) -> bool {
    !matches!(task_type, TaskType::Web | TaskType::Custom)
}

fn example_block(number: usize, task: &str, rationale: &str, plan: Option<&str>) -> String {
    let mut block = format!(
        "Example {number}:\n\nTask: {task}\n\nNatural language plan:\n{rationale}\n\nSubgoal-based plan:"
    );
    if let Some(plan) = plan {
        block.push('\n');
        block.push_str(plan);
    }
    block
}

/// Builds the single-turn rewriting prompt: the instruction, each in-context
/// demonstration as a numbered example, then the live example ending at the
/// open `Subgoal-based plan:` header for the model to continue. Exactly 4 or
/// 5 demonstrations are accepted.
pub fn assemble_conversion_prompt(
    example: &SourceExample,
    icl: &[ConversionExample],
    interfaces: &ActionInterfaceSet,
) -> Result<ChatRequest, PipelineError> {
    if !(4..=5).contains(&icl.len()) {
        return Err(PipelineError::WrongFixtureCount(icl.len()));
    }
    let instruction = conversion_instruction(example.task_type)?;
    for spec in interfaces.specs() {
        if !instruction.contains(&spec.name) {
            log::debug!(
                "interface `{}` is not named in the {} rewriting instruction",
                spec.name,
                example.task_type
            );
        }
    }
    let mut sections = vec![instruction.to_string()];
    for (i, fixture) in icl.iter().enumerate() {
        sections.push(example_block(
            i + 1,
            &fixture.task,
            &fixture.rationale,
            Some(&fixture.plan),
        ));
    }
    let mut rationale = example.rationale.clone();
    if let Some(docs) = &example.extra_docs {
        rationale.push('\n');
        rationale.push_str(docs);
    }
    sections.push(example_block(
        icl.len() + 1,
        &example.task_text,
        &rationale,
        None,
    ));
    Ok(ChatRequest::new(vec![ChatTurn::user(sections.join("\n\n"))])?)
}

/// Splits an `Action <k>-<m>: <statement>` line into its subgoal index, its
/// per-subgoal ordinal, and the statement text. Returns `None` for anything
/// else.
pub(crate) fn split_action_label(line: &str) -> Option<(u32, u32, &str)> {
    let rest = agent::strip_prefix_ci(line.trim(), "action")?;
    let (subgoal, rest) = take_digits(rest.trim_start())?;
    let (ordinal, rest) = take_digits(rest.strip_prefix('-')?)?;
    let statement = rest.trim_start().strip_prefix(':')?.trim();
    if statement.is_empty() {
        return None;
    }
    Some((subgoal, ordinal, statement))
}

fn take_digits(text: &str) -> Option<(u32, &str)> {
    let end = text
        .char_indices()
        .take_while(|(_, c)| c.is_ascii_digit())
        .map(|(i, c)| i + c.len_utf8())
        .last()?;
    let value = text[..end].parse().ok()?;
    Some((value, &text[end..]))
}

/// Parses rewritten plan text into a [`ConvertedAnnotation`]. The text is
/// line-oriented: `Subgoal <k>: <text>` headers open groups and
/// `Action <k>-<m>: <statement>` lines attach actions to the open group.
/// Subgoal indices must strictly increase, every action's `k` must match its
/// enclosing subgoal, bindings must increase across the whole plan, and every
/// referenced result must be bound by an earlier action. When
/// `require_results` is set, each subgoal's final action must carry an
/// `= <result>` suffix; the suffix becomes that subgoal's execution result.
///
/// The caller owns the task text; `task` is left empty here.
pub fn parse_converted(
    text: &str,
    require_results: bool,
) -> Result<ConvertedAnnotation, PipelineError> {
    let mut subgoals: Vec<Subgoal> = Vec::new();
    let mut grouped: Vec<Vec<Action>> = Vec::new();
    for raw_line in text.lines() {
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        if subgoals.is_empty() && line.eq_ignore_ascii_case("subgoal-based plan:") {
            continue;
        }
        if let Some((index, body)) = agent::parse_subgoal_prefix(line) {
            if body.is_empty() {
                return Err(ParseError::MalformedStatement(line.to_string()).into());
            }
            if let Some(previous) = subgoals.last() {
                if index <= previous.index {
                    return Err(PipelineError::SubgoalIndexOrder {
                        previous: previous.index,
                        found: index,
                    });
                }
            }
            subgoals.push(Subgoal::new(index, body));
            grouped.push(Vec::new());
            continue;
        }
        if let Some((label_index, _, statement)) = split_action_label(line) {
            let current = subgoals.last().ok_or(PipelineError::MissingSubgoalHeader)?;
            if label_index != current.index {
                return Err(PipelineError::ActionIndexMismatch {
                    expected: current.index,
                    found: label_index,
                });
            }
            let script = parse_action_script(statement, true)?;
            grouped
                .last_mut()
                .expect("grouped tracks subgoals")
                .extend(script.actions);
            continue;
        }
        if subgoals.is_empty() {
            return Err(PipelineError::MissingSubgoalHeader);
        }
        return Err(ParseError::MalformedStatement(line.to_string()).into());
    }
    if subgoals.is_empty() {
        return Err(PipelineError::MissingSubgoalHeader);
    }
    for (subgoal, actions) in subgoals.iter().zip(&grouped) {
        if actions.is_empty() {
            return Err(PipelineError::EmptySubgoal(subgoal.index));
        }
    }
    // Bindings must increase across the whole plan and interlinks must
    // resolve within it, not just within each subgoal.
    let whole = crate::dsl::assemble_script(grouped.iter().flatten().cloned().collect())?;
    if let Some(Violation::UnboundRef(r)) =
        validate_interlinks(&whole, &BTreeSet::new()).into_iter().next()
    {
        return Err(PipelineError::UnboundRef(r));
    }
    let mut results = BTreeMap::new();
    if require_results {
        for (subgoal, actions) in subgoals.iter().zip(&grouped) {
            let last = actions.last().expect("group checked non-empty");
            match &last.annotated_result {
                Some(value) => {
                    results.insert(subgoal.index, value.clone());
                }
                None => return Err(PipelineError::MissingResult(subgoal.index)),
            }
        }
    }
    let mut actions = BTreeMap::new();
    for (subgoal, group) in subgoals.iter().zip(grouped) {
        let script = crate::dsl::assemble_script(group).expect("validated as part of whole plan");
        actions.insert(subgoal.index, script);
    }
    Ok(ConvertedAnnotation {
        task: String::new(),
        subgoals,
        actions,
        results,
    })
}

/// Renders an annotation back to plan text: one group per subgoal, groups
/// separated by a blank line, actions labeled `Action <k>-<m>:` with their
/// annotated results re-attached. `parse_converted` inverts this exactly.
pub fn render_converted(ann: &ConvertedAnnotation) -> String {
    let mut groups = Vec::with_capacity(ann.subgoals.len());
    for subgoal in &ann.subgoals {
        let mut lines = vec![subgoal.render()];
        if let Some(script) = ann.actions.get(&subgoal.index) {
            for (m, action) in script.actions.iter().enumerate() {
                let mut line = format!("Action {}-{}: {}", subgoal.index, m + 1, action.render());
                if let Some(result) = &action.annotated_result {
                    line.push_str(" = ");
                    line.push_str(result);
                }
                lines.push(line);
            }
        }
        groups.push(lines.join("\n"));
    }
    groups.join("\n\n")
}

/// Size limits applied by [`filter_annotation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterLimits {
    /// Maximum rendered plan length in bytes.
    pub max_chars: usize,
    /// Maximum number of subgoals.
    pub max_subgoals: usize,
}

impl Default for FilterLimits {
    fn default() -> FilterLimits {
        FilterLimits {
            max_chars: 8192,
            max_subgoals: 30,
        }
    }
}

/// Why an annotation was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnbalancedParentheses,
    MalformedOutput,
    InvalidExecution,
    TooLong,
    BackendFailure,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            RejectReason::UnbalancedParentheses => "unbalanced_parentheses",
            RejectReason::MalformedOutput => "malformed_output",
            RejectReason::InvalidExecution => "invalid_execution",
            RejectReason::TooLong => "too_long",
            RejectReason::BackendFailure => "backend_failure",
        };
        f.write_str(name)
    }
}

/// Verdict of the quality filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterOutcome {
    Accept,
    Reject(RejectReason),
}

fn is_placeholder_result(value: &str) -> bool {
    let trimmed = value.trim();
    trimmed.is_empty() || trimmed.eq_ignore_ascii_case("none") || parse_ref_id(trimmed).is_some()
}

/// Applies the quality gates to a parsed annotation: size limits, one or more
/// actions per subgoal, and (when results are required) a non-placeholder
/// execution result per subgoal. A result is a placeholder when it is empty,
/// `None`, or a bare `R<k>` echoed back instead of a value.
pub fn filter_annotation(
    ann: &ConvertedAnnotation,
    limits: &FilterLimits,
    require_results: bool,
) -> FilterOutcome {
    if ann.subgoals.len() > limits.max_subgoals {
        return FilterOutcome::Reject(RejectReason::TooLong);
    }
    if render_converted(ann).len() > limits.max_chars {
        return FilterOutcome::Reject(RejectReason::TooLong);
    }
    for subgoal in &ann.subgoals {
        match ann.actions.get(&subgoal.index) {
            Some(script) if !script.is_empty() => {}
            _ => return FilterOutcome::Reject(RejectReason::MalformedOutput),
        }
    }
    if require_results {
        for subgoal in &ann.subgoals {
            match ann.results.get(&subgoal.index) {
                Some(value) if !is_placeholder_result(value) => {}
                _ => return FilterOutcome::Reject(RejectReason::InvalidExecution),
            }
        }
    }
    FilterOutcome::Accept
}

/// One turn of a training conversation. `supervised` marks the turns whose
/// tokens contribute to the loss; organization sets it on assistant turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTurn {
    pub role: Role,
    pub content: String,
    pub supervised: bool,
}

/// An alternating user/assistant conversation, always opened by the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<ConvTurn>,
}

impl Conversation {
    /// Builds a conversation from (role, content) pairs, marking assistant
    /// turns supervised. Roles must strictly alternate starting with the
    /// user; every turn must be non-empty. The final turn may have either
    /// role: prompts end on a user turn, training conversations on an
    /// assistant turn.
    pub fn from_turns(turns: Vec<(Role, String)>) -> Result<Conversation, PipelineError> {
        if turns.is_empty() {
            return Err(PipelineError::RoleAlternation);
        }
        for (i, (role, content)) in turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if *role != expected || content.is_empty() {
                return Err(PipelineError::RoleAlternation);
            }
        }
        Ok(Conversation {
            turns: turns
                .into_iter()
                .map(|(role, content)| ConvTurn {
                    supervised: role == Role::Assistant,
                    role,
                    content,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Renders the conversation as marker-delimited text: each turn is
    /// `<|role|>` on its own line followed by the content, turns separated
    /// by a blank line, with one trailing newline.
    pub fn render_chat(&self) -> String {
        rendered_with_spans(self).0
    }
}

struct ContentSpan {
    start: usize,
    end: usize,
    supervised: bool,
}

fn rendered_with_spans(conv: &Conversation) -> (String, Vec<ContentSpan>) {
    let mut out = String::new();
    let mut spans = Vec::with_capacity(conv.turns.len());
    for (i, turn) in conv.turns.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(match turn.role {
            Role::User => USER_MARKER,
            Role::Assistant => ASSISTANT_MARKER,
        });
        out.push('\n');
        let start = out.len();
        out.push_str(&turn.content);
        spans.push(ContentSpan {
            start,
            end: out.len(),
            supervised: turn.supervised,
        });
    }
    out.push('\n');
    (out, spans)
}

/// Which conversation shape to organize an annotation into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// The whole plan in one exchange.
    OnePass,
    /// One subgoal per exchange with execution feedback in between.
    Iterative,
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Formulation::OnePass => "one_pass",
            Formulation::Iterative => "iterative",
        })
    }
}

impl std::str::FromStr for Formulation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "one_pass" | "onepass" | "one-pass" => Ok(Formulation::OnePass),
            "iterative" => Ok(Formulation::Iterative),
            other => Err(format!("unknown formulation `{other}`")),
        }
    }
}

/// Organizes an annotation into a planner training conversation.
///
/// One-pass: the task prompt, then one assistant turn listing every subgoal.
/// Iterative: the task prompt, then each subgoal as its own assistant turn
/// with the execution feedback question in between; after the last subgoal's
/// feedback the assistant answers with the termination sentence. A plan with
/// n subgoals yields 2n+2 turns.
pub fn organize_planning(
    ann: &ConvertedAnnotation,
    formulation: Formulation,
) -> Result<Conversation, PipelineError> {
    if ann.subgoals.is_empty() {
        return Err(PipelineError::MissingSubgoalHeader);
    }
    let opening = agent::plan_first_turn_text(&ann.task);
    match formulation {
        Formulation::OnePass => {
            let plan = ann
                .subgoals
                .iter()
                .map(Subgoal::render)
                .collect::<Vec<_>>()
                .join("\n");
            Conversation::from_turns(vec![(Role::User, opening), (Role::Assistant, plan)])
        }
        Formulation::Iterative => {
            let result_for = |subgoal: &Subgoal| -> Result<&String, PipelineError> {
                ann.results
                    .get(&subgoal.index)
                    .ok_or(PipelineError::MissingResult(subgoal.index))
            };
            let mut turns = vec![(Role::User, opening)];
            for (i, subgoal) in ann.subgoals.iter().enumerate() {
                if i > 0 {
                    let previous = &ann.subgoals[i - 1];
                    turns.push((
                        Role::User,
                        executed_result_question(previous.index, result_for(previous)?),
                    ));
                }
                turns.push((Role::Assistant, subgoal.render()));
            }
            let last = ann.subgoals.last().expect("checked non-empty");
            turns.push((
                Role::User,
                executed_result_question(last.index, result_for(last)?),
            ));
            turns.push((Role::Assistant, TERMINATION_SENTINEL.to_string()));
            Conversation::from_turns(turns)
        }
    }
}

/// Organizes an annotation into a grounder training conversation.
///
/// The first user turn always carries the grounding instruction, the
/// interface advertisement, and the task. One-pass: that turn lists every
/// subgoal and the single assistant turn answers with every action as an
/// `Action <k>-<m>:` line. Iterative: each subgoal gets its own
/// user/assistant exchange, the assistant answering with the subgoal's
/// serialized actions (results stripped); a plan with n subgoals yields 2n
/// turns.
pub fn organize_grounding(
    ann: &ConvertedAnnotation,
    interfaces: &ActionInterfaceSet,
    formulation: Formulation,
) -> Result<Conversation, PipelineError> {
    if ann.subgoals.is_empty() {
        return Err(PipelineError::MissingSubgoalHeader);
    }
    let mut scripts = Vec::with_capacity(ann.subgoals.len());
    for subgoal in &ann.subgoals {
        match ann.actions.get(&subgoal.index) {
            Some(script) if !script.is_empty() => scripts.push(script),
            _ => return Err(PipelineError::EmptySubgoal(subgoal.index)),
        }
    }
    match formulation {
        Formulation::OnePass => {
            let tail = ann
                .subgoals
                .iter()
                .map(Subgoal::render)
                .collect::<Vec<_>>()
                .join("\n");
            let opening = agent::ground_first_turn(&ann.task, interfaces, &tail);
            let mut lines = Vec::new();
            for (subgoal, script) in ann.subgoals.iter().zip(&scripts) {
                for (m, action) in script.actions.iter().enumerate() {
                    lines.push(format!(
                        "Action {}-{}: {}",
                        subgoal.index,
                        m + 1,
                        action.render()
                    ));
                }
            }
            Conversation::from_turns(vec![
                (Role::User, opening),
                (Role::Assistant, lines.join("\n")),
            ])
        }
        Formulation::Iterative => {
            let mut turns = Vec::with_capacity(ann.subgoals.len() * 2);
            for (i, (subgoal, script)) in ann.subgoals.iter().zip(&scripts).enumerate() {
                let subgoal_line = format!("{SUBGOAL_TO_GROUND_PREFIX}{}", subgoal.render());
                if i == 0 {
                    turns.push((
                        Role::User,
                        agent::ground_first_turn(&ann.task, interfaces, &subgoal_line),
                    ));
                } else {
                    turns.push((Role::User, subgoal_line));
                }
                turns.push((Role::Assistant, serialize_action_script(script)));
            }
            Conversation::from_turns(turns)
        }
    }
}

/// Builds a planner few-shot demonstration: the task prompt, then each
/// subgoal answered in turn with a plain execution-result statement after it
/// (no stop question). The conversation ends on the final result statement,
/// ready to be spliced ahead of a live prompt.
pub fn build_few_shot_planner_example(
    ann: &ConvertedAnnotation,
) -> Result<Conversation, PipelineError> {
    if ann.subgoals.is_empty() {
        return Err(PipelineError::MissingSubgoalHeader);
    }
    let mut turns = vec![(Role::User, agent::plan_first_turn_text(&ann.task))];
    for subgoal in &ann.subgoals {
        let value = ann
            .results
            .get(&subgoal.index)
            .ok_or(PipelineError::MissingResult(subgoal.index))?;
        turns.push((Role::Assistant, subgoal.render()));
        turns.push((
            Role::User,
            format!(
                "The execution result for Subgoal {} is {}.",
                subgoal.index, value
            ),
        ));
    }
    Conversation::from_turns(turns)
}

/// Builds a grounder few-shot demonstration; this is exactly the iterative
/// grounding conversation.
pub fn build_few_shot_grounder_example(
    ann: &ConvertedAnnotation,
    interfaces: &ActionInterfaceSet,
) -> Result<Conversation, PipelineError> {
    organize_grounding(ann, interfaces, Formulation::Iterative)
}

/// A token with its id and the byte span it covers in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

/// Anything that can split text into identified byte spans.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<TokenSpan>;
}

/// Splits on Unicode whitespace; ids are assigned by first occurrence of
/// each distinct token string within the text.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<TokenSpan> {
        let mut pieces: Vec<(usize, usize)> = Vec::new();
        let mut start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    pieces.push((s, i));
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            pieces.push((s, text.len()));
        }
        let mut ids: HashMap<&str, u32> = HashMap::new();
        pieces
            .into_iter()
            .map(|(s, e)| {
                let next = ids.len() as u32;
                let id = *ids.entry(&text[s..e]).or_insert(next);
                TokenSpan { id, start: s, end: e }
            })
            .collect()
    }
}

/// A conversation plus its tokenized rendering and per-token loss mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub conversation: Conversation,
    pub token_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// Renders a conversation, tokenizes it, and derives the loss mask: a token
/// is supervised exactly when its span lies inside a supervised turn's
/// content. Tokens covering markers or separators are unsupervised. A token
/// that straddles a content boundary means the tokenizer disagrees with the
/// rendering and is reported as an offset gap.
pub fn emit_training_record(
    conv: &Conversation,
    tokenizer: &dyn Tokenizer,
) -> Result<TrainingRecord, PipelineError> {
    let (rendered, spans) = rendered_with_spans(conv);
    let mut token_ids = Vec::new();
    let mut loss_mask = Vec::new();
    for token in tokenizer.tokenize(&rendered) {
        let mut supervised = false;
        let mut contained = false;
        let mut overlapped = false;
        for span in &spans {
            if token.start >= span.start && token.end <= span.end {
                contained = true;
                supervised = span.supervised;
                break;
            }
            if token.start < span.end && token.end > span.start {
                overlapped = true;
            }
        }
        if overlapped && !contained {
            return Err(PipelineError::TokenizerOffsetGap {
                start: token.start,
                end: token.end,
            });
        }
        token_ids.push(token.id);
        loss_mask.push(contained && supervised);
    }
    Ok(TrainingRecord {
        conversation: conv.clone(),
        token_ids,
        loss_mask,
    })
}

/// Negative sum of the masked log-probabilities. The two slices must be the
/// same length.
pub fn masked_nll(logprobs: &[f64], mask: &[bool]) -> Result<f64, PipelineError> {
    if logprobs.len() != mask.len() {
        return Err(PipelineError::LengthMismatch {
            logprobs: logprobs.len(),
            mask: mask.len(),
        });
    }
    Ok(-logprobs
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(lp, _)| *lp)
        .sum::<f64>())
}

/// Counts for one rewriting batch. `rejected` maps reason names to counts;
/// the acceptance ratio is fixed to four decimals so batch reports compare
/// byte-for-byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionStats {
    pub total: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<String, usize>,
    pub acceptance_ratio: String,
}

impl ConversionStats {
    fn tally(total: usize, accepted: usize, rejected: &[(SourceExample, RejectReason)]) -> Self {
        let mut map = BTreeMap::new();
        for (_, reason) in rejected {
            *map.entry(reason.to_string()).or_insert(0usize) += 1;
        }
        let ratio = if total == 0 {
            0.0
        } else {
            accepted as f64 / total as f64
        };
        ConversionStats {
            total,
            accepted,
            rejected: map,
            acceptance_ratio: format!("{ratio:.4}"),
        }
    }
}

/// Result of rewriting a batch of source examples.
#[derive(Debug)]
pub struct ConversionBatch {
    pub accepted: Vec<ConvertedAnnotation>,
    pub rejected: Vec<(SourceExample, RejectReason)>,
    pub stats: ConversionStats,
}

fn reject_reason_for(err: &PipelineError) -> RejectReason {
    match err {
        PipelineError::Script(ParseError::UnbalancedParentheses { .. }) => {
            RejectReason::UnbalancedParentheses
        }
        PipelineError::MissingResult(_) => RejectReason::InvalidExecution,
        _ => RejectReason::MalformedOutput,
    }
}

/// Rewrites each source example through the backend, parses and filters the
/// outputs, and tallies the batch. A malformed in-context fixture set is a
/// configuration error and aborts the batch; a backend failure or an
/// unusable output only rejects that example. Examples are processed in
/// order, so a scripted backend replays deterministically.
pub fn convert_batch(
    examples: &[SourceExample],
    backend: &dyn Backend,
    icl: &[ConversionExample],
    interfaces: &ActionInterfaceSet,
    limits: &FilterLimits,
) -> Result<ConversionBatch, PipelineError> {
    let mut accepted = Vec::new();
    let mut rejected: Vec<(SourceExample, RejectReason)> = Vec::new();
    for example in examples {
        let request = assemble_conversion_prompt(example, icl, interfaces)?;
        let response = match backend.complete(&request) {
            Ok(text) => text,
            Err(err) => {
                log::warn!("rewriting backend failed: {err}");
                rejected.push((example.clone(), RejectReason::BackendFailure));
                continue;
            }
        };
        let require = require_results_for(example.task_type);
        match parse_converted(&response, require) {
            Ok(ann) => {
                let ann = ann.with_task(example.task_text.clone());
                match filter_annotation(&ann, limits, require) {
                    FilterOutcome::Accept => accepted.push(ann),
                    FilterOutcome::Reject(reason) => rejected.push((example.clone(), reason)),
                }
            }
            Err(err) => rejected.push((example.clone(), reject_reason_for(&err))),
        }
    }
    let stats = ConversionStats::tally(examples.len(), accepted.len(), &rejected);
    Ok(ConversionBatch {
        accepted,
        rejected,
        stats,
    })
}

/// Loads rewriting demonstrations from fixture text: blocks separated by
/// `===` lines, each block holding `Task:`, `Natural language plan:`, and
/// `Subgoal-based plan:` sections in that order.
pub fn parse_conversion_fixture_file(text: &str) -> Result<Vec<ConversionExample>, PipelineError> {
    let mut blocks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim() == "===" {
            blocks.push(current.join("\n"));
            current = Vec::new();
        } else {
            current.push(line);
        }
    }
    blocks.push(current.join("\n"));
    blocks
        .iter()
        .map(|b| b.trim())
        .filter(|b| !b.is_empty())
        .map(parse_conversion_block)
        .collect()
}

fn parse_conversion_block(block: &str) -> Result<ConversionExample, PipelineError> {
    const RATIONALE_HEADER: &str = "Natural language plan:";
    const PLAN_HEADER: &str = "Subgoal-based plan:";
    let rationale_at = block
        .find(RATIONALE_HEADER)
        .ok_or_else(|| PipelineError::FixtureFormat("missing natural language plan".into()))?;
    let plan_at = block
        .find(PLAN_HEADER)
        .filter(|&at| at > rationale_at)
        .ok_or_else(|| PipelineError::FixtureFormat("missing subgoal-based plan".into()))?;
    let task = block[..rationale_at]
        .trim()
        .strip_prefix("Task: ")
        .ok_or_else(|| PipelineError::FixtureFormat("missing task header".into()))?
        .trim();
    let rationale = block[rationale_at + RATIONALE_HEADER.len()..plan_at].trim();
    let plan = block[plan_at + PLAN_HEADER.len()..].trim();
    if task.is_empty() || rationale.is_empty() || plan.is_empty() {
        return Err(PipelineError::FixtureFormat("empty section".into()));
    }
    Ok(ConversionExample {
        task: task.to_string(),
        rationale: rationale.to_string(),
        plan: plan.to_string(),
    })
}
