//! Execution module: tool registry, per-episode reference store, and the
//! loop that turns an action script into execution results.
//!
//! A `RefStore` is confined to one task episode. The registry is immutable
//! after setup and can be shared across concurrently running episodes;
//! executors must therefore be `Send + Sync`.

use crate::calc::{calculator_eval, count_eval};
use crate::dsl::{Action, ActionScript, Arg, RefId, RefListItem, RAW_TOOL};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("tool `{0}` is already registered")]
    DuplicateTool(String),
    #[error("no tool named `{0}` is registered")]
    UnknownTool(String),
    #[error("reference {0} is not bound in the store")]
    UnboundRef(RefId),
    #[error("IMG used but no image context is bound")]
    MissingImageContext,
    #[error("cannot bind {attempted}: store already holds {last}")]
    BindingOrder { last: RefId, attempted: RefId },
    #[error("tool `{tool}` failed: {detail}")]
    ToolFailure { tool: String, detail: String },
}

/// Outcome of one executed action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub value: String,
    pub tool: String,
    /// Wall-clock time of the call. Excluded from serialized forms so that
    /// recorded traces stay byte-stable across reruns.
    #[serde(skip, default)]
    pub elapsed: Duration,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
}

impl ExecutionResult {
    pub fn success(value: impl Into<String>, tool: impl Into<String>) -> Self {
        ExecutionResult {
            value: value.into(),
            tool: tool.into(),
            elapsed: Duration::ZERO,
            ok: true,
            error_detail: None,
        }
    }

    pub fn failure(tool: impl Into<String>, detail: impl Into<String>) -> Self {
        ExecutionResult {
            value: String::new(),
            tool: tool.into(),
            elapsed: Duration::ZERO,
            ok: false,
            error_detail: Some(detail.into()),
        }
    }
}

/// Ordered mapping from reference identifiers to execution results within
/// one episode, plus the optional image caption bound to `IMG`.
///
/// Binding order equals reference index order: a bind with an index at or
/// below the highest bound one is rejected, and lookups of unbound
/// references surface as errors rather than defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RefStore {
    entries: BTreeMap<RefId, ExecutionResult>,
    pub image_context: Option<String>,
}

impl RefStore {
    pub fn new() -> Self {
        RefStore::default()
    }

    pub fn with_image_context(caption: impl Into<String>) -> Self {
        RefStore {
            entries: BTreeMap::new(),
            image_context: Some(caption.into()),
        }
    }

    pub fn bind(&mut self, id: RefId, result: ExecutionResult) -> Result<(), ExecError> {
        if let Some((&last, _)) = self.entries.iter().next_back() {
            if id <= last {
                return Err(ExecError::BindingOrder { last, attempted: id });
            }
        }
        self.entries.insert(id, result);
        Ok(())
    }

    pub fn get(&self, id: RefId) -> Option<&ExecutionResult> {
        self.entries.get(&id)
    }

    pub fn value(&self, id: RefId) -> Option<&str> {
        self.entries.get(&id).map(|r| r.value.as_str())
    }

    /// Value bound to the highest reference index, i.e. the last execution
    /// result of the episode so far.
    pub fn last_value(&self) -> Option<&str> {
        self.entries.values().next_back().map(|r| r.value.as_str())
    }

    pub fn bound_refs(&self) -> BTreeSet<RefId> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    /// Implemented in-process (calculator, count).
    Native,
    /// Backed by a remote service.
    ExternalClient,
    /// Fixture-driven stand-in for tests and replay.
    Mock,
}

/// Declaration of one action interface: how it is advertised to the
/// grounding model and what kind of executor backs it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    /// Callable surface shown in prompts, e.g. `Search(Query)` or
    /// `Calculator(Expression) -> Value`.
    pub signature: String,
    pub description: String,
    pub kind: ToolKind,
}

impl ToolSpec {
    pub fn new(
        name: impl Into<String>,
        signature: impl Into<String>,
        description: impl Into<String>,
        kind: ToolKind,
    ) -> Self {
        ToolSpec {
            name: name.into(),
            signature: signature.into(),
            description: description.into(),
            kind,
        }
    }
}

/// The ordered set of action interfaces available to one task domain.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActionInterfaceSet {
    specs: Vec<ToolSpec>,
}

impl ActionInterfaceSet {
    pub fn new(specs: Vec<ToolSpec>) -> Result<Self, ExecError> {
        let mut seen = BTreeSet::new();
        for spec in &specs {
            if !seen.insert(spec.name.clone()) {
                return Err(ExecError::DuplicateTool(spec.name.clone()));
            }
        }
        Ok(ActionInterfaceSet { specs })
    }

    pub fn empty() -> Self {
        ActionInterfaceSet::default()
    }

    pub fn specs(&self) -> &[ToolSpec] {
        &self.specs
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.specs.iter().any(|s| s.name == name)
    }

    /// Renders the interface advertisement inserted into grounding prompts:
    ///
    /// ```text
    /// The available action list is `A', `B' and `C'. A(..): desc; B(..): desc; C(..): desc.
    /// ```
    ///
    /// Returns `None` when the set is empty (domains whose statements are
    /// raw text advertise nothing).
    pub fn render_action_list(&self) -> Option<String> {
        if self.specs.is_empty() {
            return None;
        }
        let names: Vec<String> = self.specs.iter().map(|s| format!("`{}'", s.name)).collect();
        let name_list = match names.len() {
            1 => names[0].clone(),
            n => format!("{} and {}", names[..n - 1].join(", "), names[n - 1]),
        };
        let details: Vec<String> = self
            .specs
            .iter()
            .map(|s| format!("{}: {}", s.signature, s.description))
            .collect();
        Some(format!(
            "The available action list is {name_list}. {}.",
            details.join("; ")
        ))
    }
}

/// Executor contract: from resolved argument strings (plus store context)
/// to a result value or a failure detail.
pub trait ToolExecutor: Send + Sync {
    fn call(&self, args: &[String], store: &RefStore) -> Result<String, String>;
}

impl<F> ToolExecutor for F
where
    F: Fn(&[String], &RefStore) -> Result<String, String> + Send + Sync,
{
    fn call(&self, args: &[String], store: &RefStore) -> Result<String, String> {
        self(args, store)
    }
}

/// Name → executor table, immutable once an episode starts.
#[derive(Default, Clone)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn ToolExecutor>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        ToolRegistry::default()
    }

    pub fn register_tool(
        &mut self,
        name: impl Into<String>,
        executor: Arc<dyn ToolExecutor>,
    ) -> Result<(), ExecError> {
        let name = name.into();
        if self.tools.contains_key(&name) {
            return Err(ExecError::DuplicateTool(name));
        }
        self.tools.insert(name, executor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn ToolExecutor>> {
        self.tools.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.tools.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Resolves an action's arguments against the store.
///
/// Ref args become the stored value; literal text and tagged payloads have
/// reference tokens inside them substituted by their bound values (unbound
/// mentions stay verbatim, they are prose), so an expression like
/// `Calculator(R1 / 0.25)` sees the computed value; reference lists
/// concatenate member values with `"\n"`; `IMG` resolves to the bound image
/// context.
pub fn resolve_args(action: &Action, store: &RefStore) -> Result<Vec<String>, ExecError> {
    let mut resolved = Vec::with_capacity(action.args.len());
    for arg in &action.args {
        resolved.push(match arg {
            Arg::Literal { text } => substitute_refs(text, store),
            Arg::Ref { r#ref } => store
                .value(*r#ref)
                .ok_or(ExecError::UnboundRef(*r#ref))?
                .to_string(),
            Arg::Tagged { tag, payload } => {
                format!("{tag}: {}", substitute_refs(payload, store))
            }
            Arg::RefList { refs } => {
                let mut values = Vec::with_capacity(refs.len());
                for item in refs {
                    match item {
                        RefListItem::Ref(r) => values.push(
                            store
                                .value(*r)
                                .ok_or(ExecError::UnboundRef(*r))?
                                .to_string(),
                        ),
                        RefListItem::Img => values.push(
                            store
                                .image_context
                                .clone()
                                .ok_or(ExecError::MissingImageContext)?,
                        ),
                    }
                }
                values.join("\n")
            }
        });
    }
    Ok(resolved)
}

/// Replaces standalone `R<digits>` tokens that are bound in the store with
/// their values. Token boundaries are non-identifier characters, so
/// `R1` inside `CAR1` or `R1x` is untouched.
fn substitute_refs(text: &str, store: &RefStore) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        let boundary_before = i == 0 || {
            let prev = bytes[i - 1] as char;
            !(prev.is_ascii_alphanumeric() || prev == '_')
        };
        if bytes[i] == b'R' && boundary_before {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            let boundary_after = j == bytes.len() || {
                let next = bytes[j] as char;
                !(next.is_ascii_alphanumeric() || next == '_')
            };
            if j > i + 1 && boundary_after {
                if let Some(id) = crate::dsl::parse_ref_id(&text[i..j]) {
                    if let Some(value) = store.value(id) {
                        out.push_str(value);
                        i = j;
                        continue;
                    }
                }
            }
        }
        let c = text[i..].chars().next().expect("in-bounds char");
        out.push(c);
        i += c.len_utf8();
    }
    out
}

/// Result of running a script: one entry per attempted action (a failing
/// action contributes a `ok = false` entry), plus the halting error if any.
#[derive(Debug, Clone)]
pub struct ScriptRun {
    pub results: Vec<ExecutionResult>,
    pub error: Option<ExecError>,
}

impl ScriptRun {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Executes the script's actions strictly in order, binding each successful
/// result under its reference. On the first failure, execution halts; the
/// store keeps only successful bindings.
pub fn execute_script(script: &ActionScript, registry: &ToolRegistry, store: &mut RefStore) -> ScriptRun {
    let mut results = Vec::with_capacity(script.actions.len());
    for action in &script.actions {
        match execute_action(action, registry, store) {
            Ok(result) => {
                if let Err(e) = store.bind(action.binding, result.clone()) {
                    results.push(ExecutionResult::failure(&action.tool, e.to_string()));
                    return ScriptRun {
                        results,
                        error: Some(e),
                    };
                }
                results.push(result);
            }
            Err(e) => {
                results.push(ExecutionResult::failure(&action.tool, e.to_string()));
                return ScriptRun {
                    results,
                    error: Some(e),
                };
            }
        }
    }
    ScriptRun {
        results,
        error: None,
    }
}

fn execute_action(
    action: &Action,
    registry: &ToolRegistry,
    store: &RefStore,
) -> Result<ExecutionResult, ExecError> {
    let executor = registry
        .get(&action.tool)
        .ok_or_else(|| ExecError::UnknownTool(action.tool.clone()))?;
    let args = resolve_args(action, store)?;
    let started = Instant::now();
    let outcome = executor.call(&args, store);
    let elapsed = started.elapsed();
    match outcome {
        Ok(value) => Ok(ExecutionResult {
            value,
            tool: action.tool.clone(),
            elapsed,
            ok: true,
            error_detail: None,
        }),
        Err(detail) => Err(ExecError::ToolFailure {
            tool: action.tool.clone(),
            detail,
        }),
    }
}

/// In-process arithmetic tool. Arguments are re-joined before evaluation so
/// a literal split on a stray top-level comma still evaluates whole.
pub struct CalculatorTool;

impl ToolExecutor for CalculatorTool {
    fn call(&self, args: &[String], _store: &RefStore) -> Result<String, String> {
        calculator_eval(&args.join(", ")).map_err(|e| e.to_string())
    }
}

/// In-process list-length tool.
pub struct CountTool;

impl ToolExecutor for CountTool {
    fn call(&self, args: &[String], _store: &RefStore) -> Result<String, String> {
        Ok(count_eval(&args.join(", ")))
    }
}

/// Fixture-backed tool: exact lookup keyed by the resolved arguments joined
/// with `", "`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockTool {
    pub fixtures: BTreeMap<String, String>,
}

impl MockTool {
    pub fn new(fixtures: BTreeMap<String, String>) -> Self {
        MockTool { fixtures }
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        MockTool {
            fixtures: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }
}

impl ToolExecutor for MockTool {
    fn call(&self, args: &[String], _store: &RefStore) -> Result<String, String> {
        let key = args.join(", ");
        self.fixtures
            .get(&key)
            .cloned()
            .ok_or_else(|| format!("no fixture for arguments `{key}`"))
    }
}

/// Remote tool client: POSTs `{"tool", "args"}` as JSON and reads back
/// `{"value"}`. One retry on transport failures and 5xx responses.
#[cfg(feature = "http")]
pub struct HttpTool {
    pub name: String,
    pub endpoint: String,
    pub timeout: Duration,
    /// Environment variable holding a bearer token, if the service needs one.
    pub auth_env: Option<String>,
}

#[cfg(feature = "http")]
impl HttpTool {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>, timeout: Duration) -> Self {
        HttpTool {
            name: name.into(),
            endpoint: endpoint.into(),
            timeout,
            auth_env: None,
        }
    }

    fn attempt(&self, args: &[String]) -> Result<String, (bool, String)> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut request = agent.post(&self.endpoint);
        if let Some(var) = &self.auth_env {
            if let Ok(token) = std::env::var(var) {
                request = request.header("Authorization", &format!("Bearer {token}"));
            }
        }
        let body = serde_json::json!({ "tool": self.name, "args": args });
        let response = request.send_json(&body);
        match response {
            Ok(mut resp) => {
                let parsed: serde_json::Value = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| (false, format!("bad response body: {e}")))?;
                parsed
                    .get("value")
                    .and_then(|v| v.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| (false, "response missing `value`".to_string()))
            }
            Err(ureq::Error::StatusCode(code)) => {
                Err((code >= 500, format!("HTTP status {code}")))
            }
            Err(other) => Err((true, format!("transport error: {other}"))),
        }
    }
}

#[cfg(feature = "http")]
impl ToolExecutor for HttpTool {
    fn call(&self, args: &[String], _store: &RefStore) -> Result<String, String> {
        match self.attempt(args) {
            Ok(value) => Ok(value),
            Err((retryable, first)) if retryable => {
                self.attempt(args).map_err(|(_, second)| {
                    format!("{first}; retry failed: {second}")
                })
            }
            Err((_, detail)) => Err(detail),
        }
    }
}

/// Registers the built-in native tools under their advertised names.
pub fn register_native_tools(registry: &mut ToolRegistry) -> Result<(), ExecError> {
    registry.register_tool("Calculator", Arc::new(CalculatorTool))?;
    registry.register_tool("Count", Arc::new(CountTool))?;
    Ok(())
}

/// Registers a raw-statement executor, used by domains whose grounded
/// statements are passed through whole (e.g. SQL).
pub fn register_raw_executor(
    registry: &mut ToolRegistry,
    executor: Arc<dyn ToolExecutor>,
) -> Result<(), ExecError> {
    registry.register_tool(RAW_TOOL, executor)
}
