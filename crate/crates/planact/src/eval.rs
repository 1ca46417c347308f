//! Metrics and the batch evaluation harness: exact match over final
//! answers, per-step success for browsing episodes, and a pluggable
//! semantic-judge slot for answers that differ in surface form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentTrace, StopReason};
use crate::backend::{Backend, ChatRequest, ChatTurn};
use crate::dsl::Arg;

/// Instruction opening every semantic-judge request.
pub const JUDGE_INSTRUCTION: &str =
    "Judge whether the prediction and the gold answer mean the same thing. Reply with yes or no only.";

/// Errors surfaced by the evaluation harness.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no gold record for task `{0}`")]
    MissingGold(String),
    #[error("gold record `{id}` lacks the `{field}` field required by {metric}")]
    MissingGoldField {
        id: String,
        field: &'static str,
        metric: Metric,
    },
    #[error("semantic judge unavailable")]
    JudgeUnavailable,
}

/// The browsing actions a step can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionType {
    #[serde(rename = "CLICK")]
    Click,
    #[serde(rename = "TYPE")]
    Type,
    #[serde(rename = "SELECT")]
    Select,
}

impl ActionType {
    /// Maps an executed tool name onto a step action type.
    pub fn from_tool(tool: &str) -> Option<ActionType> {
        match tool {
            "CLICK" => Some(ActionType::Click),
            "TYPE" => Some(ActionType::Type),
            "SELECT" => Some(ActionType::Select),
            _ => None,
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionType::Click => "CLICK",
            ActionType::Type => "TYPE",
            ActionType::Select => "SELECT",
        })
    }
}

/// One browsing step: the element acted on, how, and with what text.
/// Typing and selecting carry text; clicking does not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAction {
    pub element_id: String,
    pub action_type: ActionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl StepAction {
    pub fn click(element_id: impl Into<String>) -> StepAction {
        StepAction {
            element_id: element_id.into(),
            action_type: ActionType::Click,
            text: None,
        }
    }

    pub fn type_text(element_id: impl Into<String>, text: impl Into<String>) -> StepAction {
        StepAction {
            element_id: element_id.into(),
            action_type: ActionType::Type,
            text: Some(text.into()),
        }
    }

    pub fn select(element_id: impl Into<String>, text: impl Into<String>) -> StepAction {
        StepAction {
            element_id: element_id.into(),
            action_type: ActionType::Select,
            text: Some(text.into()),
        }
    }

    /// Whether the text field matches the action type: present for
    /// TYPE/SELECT, absent for CLICK.
    pub fn is_well_formed(&self) -> bool {
        match self.action_type {
            ActionType::Click => self.text.is_none(),
            ActionType::Type | ActionType::Select => self.text.is_some(),
        }
    }
}

/// The metrics the harness can compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    StepSuccess,
    JudgeAccuracy,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::ExactMatch => "exact_match",
            Metric::StepSuccess => "step_success",
            Metric::JudgeAccuracy => "judge_accuracy",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exact_match" => Ok(Metric::ExactMatch),
            "step_success" => Ok(Metric::StepSuccess),
            "judge_accuracy" => Ok(Metric::JudgeAccuracy),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Reference record for one task: a final answer, a gold step sequence, or
/// both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<StepAction>>,
}

/// Per-task metric values (null where the judge was unavailable), their
/// per-metric means, and the task count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub aggregate: BTreeMap<String, f64>,
    pub n: usize,
}

/// Answer normalization: lowercase, strip surrounding punctuation from each
/// token, drop articles, and collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .map(|token| token.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|token| !token.is_empty() && !matches!(*token, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 iff the two answers agree after normalization.
pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 iff the chosen element and the action type both match exactly. Text is
/// compared (after whitespace collapse) only when both steps carry it.
pub fn step_success(pred: &StepAction, gold: &StepAction) -> u8 {
    if pred.element_id != gold.element_id || pred.action_type != gold.action_type {
        return 0;
    }
    if let (Some(p), Some(g)) = (&pred.text, &gold.text) {
        if collapse_whitespace(p) != collapse_whitespace(g) {
            return 0;
        }
    }
    1
}

/// Fraction of gold steps matched position-by-position by the predicted
/// steps. An empty gold sequence is vacuously satisfied.
pub fn step_sequence_score(pred: &[StepAction], gold: &[StepAction]) -> f64 {
    if gold.is_empty() {
        return 1.0;
    }
    let matched = gold
        .iter()
        .enumerate()
        .filter(|(i, g)| pred.get(*i).is_some_and(|p| step_success(p, g) == 1))
        .count();
    matched as f64 / gold.len() as f64
}

fn judge_request(pred: &str, gold: &str) -> ChatRequest {
    ChatRequest::new(vec![ChatTurn::user(format!(
        "{JUDGE_INSTRUCTION}\nPrediction: {pred}\nGold answer: {gold}"
    ))])
    .expect("single user turn is a valid request")
}

/// Asks the judge backend whether the prediction matches the gold answer in
/// meaning. The reply's first word must be yes or no; anything else, or a
/// backend failure, marks the judge unavailable for this pair.
pub fn judge_accuracy(pred: &str, gold: &str, judge: &dyn Backend) -> Result<u8, EvalError> {
    let reply = judge.complete(&judge_request(pred, gold)).map_err(|err| {
        log::warn!("judge backend failed: {err}");
        EvalError::JudgeUnavailable
    })?;
    let first: String = reply
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    match first.as_str() {
        "yes" => Ok(1),
        "no" => Ok(0),
        _ => Err(EvalError::JudgeUnavailable),
    }
}

/// Reads the browsing steps an episode actually took: every successfully
/// executed CLICK/TYPE/SELECT action, in order. The element acted on is the
/// action's execution result (the tag the environment reported); the text is
/// the action's `TEXT:` argument when present.
pub fn derive_step_predictions(trace: &AgentTrace) -> Vec<StepAction> {
    let mut steps = Vec::new();
    for iteration in &trace.iterations {
        for (action, result) in iteration.script.actions.iter().zip(&iteration.results) {
            if !result.ok {
                continue;
            }
            let Some(action_type) = ActionType::from_tool(&action.tool) else {
                continue;
            };
            let text = action.args.iter().find_map(|arg| match arg {
                Arg::Tagged { tag, payload } if tag.eq_ignore_ascii_case("text") => {
                    Some(payload.clone())
                }
                _ => None,
            });
            steps.push(StepAction {
                element_id: result.value.clone(),
                action_type,
                text,
            });
        }
    }
    steps
}

fn gold_answer<'a>(
    gold: &'a GoldRecord,
    metric: Metric,
) -> Result<&'a str, EvalError> {
    gold.answer
        .as_deref()
        .ok_or_else(|| EvalError::MissingGoldField {
            id: gold.id.clone(),
            field: "answer",
            metric,
        })
}

/// Scores a batch of traced episodes against gold records.
///
/// Every trace must have a gold record with the fields its metrics need.
/// Episodes that did not finish with a planner termination score 0 on every
/// metric. A judge failure leaves that task's judge entry null and the
/// aggregate is taken over the remaining tasks; a metric whose entries are
/// all null is omitted from the aggregate.
pub fn evaluate_batch(
    traces: &[(String, AgentTrace)],
    golds: &[GoldRecord],
    metrics: &[Metric],
    judge: Option<&dyn Backend>,
) -> Result<EvalReport, EvalError> {
    if metrics.contains(&Metric::JudgeAccuracy) && judge.is_none() {
        return Err(EvalError::JudgeUnavailable);
    }
    let gold_map: BTreeMap<&str, &GoldRecord> =
        golds.iter().map(|g| (g.id.as_str(), g)).collect();
    let metrics: BTreeSet<Metric> = metrics.iter().copied().collect();
    let mut per_task: BTreeMap<String, BTreeMap<String, Option<f64>>> = BTreeMap::new();
    for (id, trace) in traces {
        let gold = *gold_map
            .get(id.as_str())
            .ok_or_else(|| EvalError::MissingGold(id.clone()))?;
        let completed = trace.stop_reason == StopReason::PlannerTerminated;
        let answer = trace.final_answer.as_deref().filter(|_| completed);
        let mut row = BTreeMap::new();
        for metric in &metrics {
            let value = match metric {
                Metric::ExactMatch => {
                    let gold_value = gold_answer(gold, *metric)?;
                    Some(answer.map_or(0.0, |pred| f64::from(exact_match(pred, gold_value))))
                }
                Metric::StepSuccess => {
                    let gold_steps =
                        gold.steps
                            .as_ref()
                            .ok_or_else(|| EvalError::MissingGoldField {
                                id: gold.id.clone(),
                                field: "steps",
                                metric: *metric,
                            })?;
                    if completed {
                        Some(step_sequence_score(
                            &derive_step_predictions(trace),
                            gold_steps,
                        ))
                    } else {
                        Some(0.0)
                    }
                }
                Metric::JudgeAccuracy => {
                    let gold_value = gold_answer(gold, *metric)?;
                    match answer {
                        None => Some(0.0),
                        Some(pred) => {
                            let judge = judge.expect("checked above");
                            match judge_accuracy(pred, gold_value, judge) {
                                Ok(v) => Some(f64::from(v)),
                                Err(EvalError::JudgeUnavailable) => None,
                                Err(other) => return Err(other),
                            }
                        }
                    }
                }
            };
            row.insert(metric.to_string(), value);
        }
        per_task.insert(id.clone(), row);
    }
    let mut aggregate = BTreeMap::new();
    for metric in &metrics {
        let name = metric.to_string();
        let values: Vec<f64> = per_task
            .values()
            .filter_map(|row| row.get(&name).copied().flatten())
            .collect();
        if !values.is_empty() {
            aggregate.insert(name, values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    Ok(EvalReport {
        per_task,
        aggregate,
        n: traces.len(),
    })
}
