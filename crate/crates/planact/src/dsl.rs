//! The interlinked action language: parser, validator, and serializer.
//!
//! Grounding output is a script of statements like
//!
//! ```text
//! R1 = KnowledgeQuery(Zombies); R2 = ParagraphRetrieve(R1, Query: What color skin are zombies typically depicted with?)
//! ```
//!
//! Each statement binds a reference (`R1`, `R2`, ...) to one tool call whose
//! arguments may point back at earlier results, so a script is a DAG that
//! executes in statement order. Annotation text additionally allows a
//! `= <result>` suffix after the call, carrying the executed result observed
//! when the annotation was written.
//!
//! The grammar is line-oriented and deliberately forgiving about argument
//! content: anything that is not a reference, a reference list, or a tagged
//! argument is kept as a verbatim literal. One consequence is that a literal
//! containing top-level commas parses as several literal arguments; the
//! serializer re-joins them with `", "`, so the byte round-trip still holds
//! even though the argument boundaries moved.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

/// Reserved tool name for statements whose right-hand side is not call
/// syntax, e.g. raw SQL (`R1 = SHOW TABLES`). The full right-hand side is
/// kept as a single literal argument. Raw statements never carry a result
/// suffix: their text may itself contain `=`.
pub const RAW_TOOL: &str = "__raw__";

/// Reserved member of a reference list standing for the bound image context.
pub const IMG_SYMBOL: &str = "IMG";

/// Tags recognized as structured argument prefixes. Matching is
/// case-insensitive (annotations use both `Query:` and `QUERY:`); the
/// original casing is preserved on the parsed argument.
pub const KNOWN_TAGS: [&str; 3] = ["Query", "Question", "TEXT"];

/// A result reference. Canonical rendering is `R` followed by the index,
/// with no leading zeros; parsing accepts exactly that form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RefId(u32);

impl RefId {
    /// Index must be at least 1; `R0` is not a reference.
    pub fn new(index: u32) -> Option<RefId> {
        if index >= 1 {
            Some(RefId(index))
        } else {
            None
        }
    }

    pub fn index(self) -> u32 {
        self.0
    }
}

impl fmt::Display for RefId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

/// Parses a token of the exact form `R<digits>` (no leading zeros, index at
/// least 1). Anything else is not a reference token.
pub fn parse_ref_id(token: &str) -> Option<RefId> {
    let digits = token.strip_prefix('R')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.starts_with('0') {
        return None;
    }
    digits.parse().ok().and_then(RefId::new)
}

/// One member of a reference-list argument such as `[R2, R5]` or `[IMG]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefListItem {
    Ref(RefId),
    Img,
}

impl fmt::Display for RefListItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefListItem::Ref(r) => write!(f, "{r}"),
            RefListItem::Img => f.write_str(IMG_SYMBOL),
        }
    }
}

/// One argument of an action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arg {
    /// Verbatim text, including text that merely looks structured (unknown
    /// `Word:` prefixes, bracketed fragments outside the first position).
    Literal { text: String },
    /// A bare reference token (`R3`).
    Ref { r#ref: RefId },
    /// `<Tag>: <payload>`; the payload is verbatim and may itself mention
    /// references, which are substituted at resolution time.
    Tagged { tag: String, payload: String },
    /// Bracketed reference list in first-argument position.
    RefList { refs: Vec<RefListItem> },
}

impl Arg {
    pub fn literal(text: impl Into<String>) -> Arg {
        Arg::Literal { text: text.into() }
    }

    pub fn reference(index: u32) -> Arg {
        Arg::Ref {
            r#ref: RefId::new(index).expect("reference index must be >= 1"),
        }
    }

    pub fn tagged(tag: impl Into<String>, payload: impl Into<String>) -> Arg {
        Arg::Tagged {
            tag: tag.into(),
            payload: payload.into(),
        }
    }

    pub fn ref_list(items: Vec<RefListItem>) -> Arg {
        Arg::RefList { refs: items }
    }

    /// References this argument formally carries (payload mentions are not
    /// formal references).
    pub fn refs(&self) -> Vec<RefId> {
        match self {
            Arg::Ref { r#ref } => vec![*r#ref],
            Arg::RefList { refs } => refs
                .iter()
                .filter_map(|item| match item {
                    RefListItem::Ref(r) => Some(*r),
                    RefListItem::Img => None,
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Literal { text } => f.write_str(text),
            Arg::Ref { r#ref } => write!(f, "{}", r#ref),
            Arg::Tagged { tag, payload } => write!(f, "{tag}: {payload}"),
            Arg::RefList { refs } => {
                f.write_str("[")?;
                for (i, item) in refs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
        }
    }
}

/// One statement: a binding of a reference to a tool invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub binding: RefId,
    pub tool: String,
    pub args: Vec<Arg>,
    /// The `= <result>` suffix found in annotation text; never present in
    /// live grounding output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_result: Option<String>,
}

impl Action {
    /// Renders the statement in canonical form, without any result suffix.
    pub fn render(&self) -> String {
        if self.tool == RAW_TOOL {
            let rhs = match self.args.first() {
                Some(Arg::Literal { text }) => text.as_str(),
                _ => "",
            };
            return format!("{} = {}", self.binding, rhs);
        }
        let args: Vec<String> = self.args.iter().map(|a| a.to_string()).collect();
        format!("{} = {}({})", self.binding, self.tool, args.join(", "))
    }
}

/// An ordered list of actions with strictly increasing binding indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActionScript {
    pub actions: Vec<Action>,
}

impl ActionScript {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn bindings(&self) -> impl Iterator<Item = RefId> + '_ {
        self.actions.iter().map(|a| a.binding)
    }
}

/// A reference-hygiene problem found by [`validate_interlinks`]. Violations
/// are data, not parse failures: a script can be structurally well-formed
/// and still dangle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// The reference is neither bound earlier in the script, nor supplied
    /// externally, nor the reserved image symbol.
    UnboundRef(RefId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnboundRef(r) => write!(f, "unbound reference {r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("unbalanced parentheses or brackets in `{statement}`")]
    UnbalancedParentheses { statement: String },
    #[error("reference {0} is bound twice")]
    DuplicateBinding(RefId),
    #[error("statement binding {binding} references {referenced}, which is not bound yet")]
    ForwardReference { binding: RefId, referenced: RefId },
    #[error("script contains no statements")]
    EmptyScript,
    #[error("malformed statement `{0}`")]
    MalformedStatement(String),
    #[error("binding {found} follows {previous}; binding indices must increase")]
    NonMonotonicBinding { previous: RefId, found: RefId },
}

/// Parses a script of `;`- or newline-separated statements.
///
/// `allow_result_suffix` admits the annotation-only `= <result>` suffix
/// after a call; live grounding output must not carry one.
///
/// References to indices smaller than the statement's own binding that are
/// not bound inside this script are accepted here: they may be bound by a
/// previous iteration's script. [`validate_interlinks`] settles whether they
/// actually are.
pub fn parse_action_script(text: &str, allow_result_suffix: bool) -> Result<ActionScript, ParseError> {
    let mut actions = Vec::new();
    for statement in split_statements(text) {
        let statement = statement.trim();
        if statement.is_empty() {
            continue;
        }
        actions.push(parse_statement(statement, allow_result_suffix)?);
    }
    assemble_script(actions)
}

/// Builds a script from already-parsed actions, enforcing the structural
/// invariants shared by every parsing entry point: at least one statement,
/// strictly increasing binding indices, no duplicate bindings, and no
/// references at or above the statement's own binding.
pub fn assemble_script(actions: Vec<Action>) -> Result<ActionScript, ParseError> {
    if actions.is_empty() {
        return Err(ParseError::EmptyScript);
    }
    let mut previous: Option<RefId> = None;
    for action in &actions {
        if let Some(prev) = previous {
            if action.binding == prev {
                return Err(ParseError::DuplicateBinding(action.binding));
            }
            if action.binding < prev {
                return Err(ParseError::NonMonotonicBinding {
                    previous: prev,
                    found: action.binding,
                });
            }
        }
        for arg in &action.args {
            for referenced in arg.refs() {
                if referenced >= action.binding {
                    return Err(ParseError::ForwardReference {
                        binding: action.binding,
                        referenced,
                    });
                }
            }
        }
        previous = Some(action.binding);
    }
    Ok(ActionScript { actions })
}

/// Renders the canonical text form: statements joined with `"; "`, result
/// suffixes omitted. For scripts built by the parser from canonical text,
/// `parse_action_script(serialize_action_script(s))` equals `s` up to the
/// dropped suffixes.
pub fn serialize_action_script(script: &ActionScript) -> String {
    let statements: Vec<String> = script.actions.iter().map(Action::render).collect();
    statements.join("; ")
}

/// Checks that every formal reference is bound earlier in the script, or is
/// a member of `external_refs` (bindings from previous iterations), or is
/// the reserved image symbol (always admissible here; whether an image is
/// actually bound is an execution-time concern).
pub fn validate_interlinks(script: &ActionScript, external_refs: &BTreeSet<RefId>) -> Vec<Violation> {
    let mut bound = external_refs.clone();
    let mut violations = Vec::new();
    for action in &script.actions {
        for arg in &action.args {
            for referenced in arg.refs() {
                if !bound.contains(&referenced) {
                    violations.push(Violation::UnboundRef(referenced));
                }
            }
        }
        bound.insert(action.binding);
    }
    violations
}

/// Splits on `;` and newlines outside any parentheses or brackets.
fn split_statements(text: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth_paren = 0i32;
    let mut depth_bracket = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth_paren += 1,
            ')' => depth_paren -= 1,
            '[' => depth_bracket += 1,
            ']' => depth_bracket -= 1,
            ';' | '\n' if depth_paren <= 0 && depth_bracket <= 0 => {
                parts.push(&text[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}

fn parse_statement(statement: &str, allow_result_suffix: bool) -> Result<Action, ParseError> {
    let malformed = || ParseError::MalformedStatement(statement.to_string());
    // Balance is checked before structure: a statement with mismatched
    // brackets is always an UnbalancedParentheses error, never a
    // MalformedStatement, no matter where the mismatch sits. This also
    // extends the accepted-input balance invariant to result suffixes.
    if !balanced(statement) {
        return Err(ParseError::UnbalancedParentheses {
            statement: statement.to_string(),
        });
    }
    let eq = statement.find('=').ok_or_else(malformed)?;
    let binding = parse_ref_id(statement[..eq].trim()).ok_or_else(malformed)?;
    let rhs = statement[eq + 1..].trim_start();

    if let Some((tool, after_name)) = leading_identifier(rhs) {
        if after_name.starts_with('(') {
            let close = matching_paren(after_name).ok_or(ParseError::UnbalancedParentheses {
                statement: statement.to_string(),
            })?;
            let inside = &after_name[1..close];
            if !balanced(inside) {
                return Err(ParseError::UnbalancedParentheses {
                    statement: statement.to_string(),
                });
            }
            let rest = after_name[close + 1..].trim();
            let annotated_result = match rest {
                "" => None,
                suffix => {
                    let value = suffix.strip_prefix('=').ok_or_else(malformed)?;
                    if !allow_result_suffix {
                        return Err(malformed());
                    }
                    Some(value.trim().to_string())
                }
            };
            return Ok(Action {
                binding,
                tool: tool.to_string(),
                args: parse_args(inside),
                annotated_result,
            });
        }
    }

    // Raw statement: the whole right-hand side is one literal. It still has
    // to be bracket-balanced so that every accepted input keeps the balance
    // invariant.
    let rhs = rhs.trim();
    if rhs.is_empty() {
        return Err(malformed());
    }
    if !balanced(rhs) {
        return Err(ParseError::UnbalancedParentheses {
            statement: statement.to_string(),
        });
    }
    Ok(Action {
        binding,
        tool: RAW_TOOL.to_string(),
        args: vec![Arg::literal(rhs)],
        annotated_result: None,
    })
}

/// Leading `[A-Za-z][A-Za-z0-9_]*` identifier and the remainder.
fn leading_identifier(s: &str) -> Option<(&str, &str)> {
    let mut end = 0;
    for (i, c) in s.char_indices() {
        let ok = if i == 0 {
            c.is_ascii_alphabetic()
        } else {
            c.is_ascii_alphanumeric() || c == '_'
        };
        if !ok {
            break;
        }
        end = i + c.len_utf8();
    }
    if end == 0 {
        None
    } else {
        Some((&s[..end], &s[end..]))
    }
}

/// Byte offset of the parenthesis matching the opening one at offset 0,
/// counting both bracket kinds so a stray `]` cannot hide an unbalanced `(`.
fn matching_paren(s: &str) -> Option<usize> {
    debug_assert!(s.starts_with('('));
    let mut depth_paren = 0i32;
    let mut depth_bracket = 0i32;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth_paren += 1,
            ')' => {
                depth_paren -= 1;
                if depth_paren == 0 && depth_bracket == 0 {
                    return Some(i);
                }
                if depth_paren < 0 {
                    return None;
                }
            }
            '[' => depth_bracket += 1,
            ']' => {
                depth_bracket -= 1;
                if depth_bracket < 0 {
                    return None;
                }
            }
            _ => {}
        }
    }
    None
}

fn balanced(s: &str) -> bool {
    let mut depth_paren = 0i32;
    let mut depth_bracket = 0i32;
    for c in s.chars() {
        match c {
            '(' => depth_paren += 1,
            ')' => depth_paren -= 1,
            '[' => depth_bracket += 1,
            ']' => depth_bracket -= 1,
            _ => {}
        }
        if depth_paren < 0 || depth_bracket < 0 {
            return false;
        }
    }
    depth_paren == 0 && depth_bracket == 0
}

/// Splits an argument list on top-level commas and classifies each token.
///
/// Once a token has opened with a known tag (`Query:` etc.), later commas
/// stay inside its payload unless the text after the comma opens a new known
/// tag; payloads in the wild contain plenty of prose commas.
fn parse_args(inside: &str) -> Vec<Arg> {
    let trimmed = inside.trim();
    if trimmed.is_empty() {
        return Vec::new();
    }
    let mut tokens: Vec<&str> = Vec::new();
    let mut depth_paren = 0i32;
    let mut depth_bracket = 0i32;
    let mut start = 0;
    let mut current_is_tagged = starts_with_known_tag(trimmed);
    for (i, c) in trimmed.char_indices() {
        match c {
            '(' => depth_paren += 1,
            ')' => depth_paren -= 1,
            '[' => depth_bracket += 1,
            ']' => depth_bracket -= 1,
            ',' if depth_paren == 0 && depth_bracket == 0 => {
                let rest = &trimmed[i + 1..];
                if !current_is_tagged || starts_with_known_tag(rest.trim_start()) {
                    tokens.push(&trimmed[start..i]);
                    start = i + 1;
                    current_is_tagged = starts_with_known_tag(rest.trim_start());
                }
            }
            _ => {}
        }
    }
    tokens.push(&trimmed[start..]);

    tokens
        .iter()
        .enumerate()
        .map(|(position, token)| classify_arg(token.trim(), position == 0))
        .collect()
}

fn starts_with_known_tag(s: &str) -> bool {
    split_known_tag(s).is_some()
}

/// `("Query", "payload")` when the text opens with a known tag and a colon.
fn split_known_tag(s: &str) -> Option<(&str, &str)> {
    let colon = s.find(':')?;
    let word = s[..colon].trim();
    let known = KNOWN_TAGS.iter().any(|t| t.eq_ignore_ascii_case(word));
    if known {
        Some((word, s[colon + 1..].trim_start()))
    } else {
        None
    }
}

fn classify_arg(token: &str, first: bool) -> Arg {
    if let Some(r) = parse_ref_id(token) {
        return Arg::Ref { r#ref: r };
    }
    if first {
        if let Some(items) = parse_ref_list(token) {
            return Arg::RefList { refs: items };
        }
    }
    if let Some((tag, payload)) = split_known_tag(token) {
        return Arg::tagged(tag, payload);
    }
    Arg::literal(token)
}

/// `[R2, R5]` or `[IMG]`: every member must be a reference or the image
/// symbol, and the list must be non-empty. Anything else stays literal.
fn parse_ref_list(token: &str) -> Option<Vec<RefListItem>> {
    let inner = token.strip_prefix('[')?.strip_suffix(']')?;
    let mut items = Vec::new();
    for member in inner.split(',') {
        let member = member.trim();
        if member == IMG_SYMBOL {
            items.push(RefListItem::Img);
        } else if let Some(r) = parse_ref_id(member) {
            items.push(RefListItem::Ref(r));
        } else {
            return None;
        }
    }
    if items.is_empty() {
        None
    } else {
        Some(items)
    }
}
