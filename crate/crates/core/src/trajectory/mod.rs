//! Multi-turn reasoning trajectories: the fast-answer and reasoning-turn
//! grammars, the per-sample record, and its JSONL encoding.
//!
//! Parsers are total. Malformed model output becomes a [`FormatViolation`]
//! value that the reward engine and the verifier consume; it is never an
//! error.

mod codec;
pub mod prompts;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::vistools::{ToolCall, ToolId};

pub use codec::{parse_trajectory, read_trajectories, serialize_trajectory, write_trajectories};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cls {
    Real,
    Spoof,
}

impl Cls {
    pub fn token(self) -> &'static str {
        match self {
            Cls::Real => "<Real>",
            Cls::Spoof => "<Spoof>",
        }
    }

    fn from_token(s: &str) -> Option<Cls> {
        match s {
            "<Real>" => Some(Cls::Real),
            "<Spoof>" => Some(Cls::Spoof),
            _ => None,
        }
    }

    pub fn flipped(self) -> Cls {
        match self {
            Cls::Real => Cls::Spoof,
            Cls::Spoof => Cls::Real,
        }
    }
}

impl fmt::Display for Cls {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cls::Real => "Real",
            Cls::Spoof => "Spoof",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    BadTags,
    BadJson,
    InvalidTool,
    BadAnswerToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatViolation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl FormatViolation {
    fn new(kind: ViolationKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for FormatViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

/// First-turn, tool-free classification: `<CLS><reason>…</reason>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastAnswer {
    pub cls: Cls,
    pub reason: String,
}

impl FastAnswer {
    pub fn to_text(&self) -> String {
        format!("{}<reason>{}</reason>", self.cls.token(), self.reason)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    ToolCall(ToolCall),
    Answer(Cls),
}

/// One reasoning turn: a think block plus exactly one action.
#[derive(Debug, Clone, PartialEq)]
pub struct SubAnnotation {
    pub think: String,
    pub action: Action,
}

impl SubAnnotation {
    /// Canonical text; [`parse_turn`] maps it back to `self`.
    pub fn to_text(&self) -> String {
        let action = match &self.action {
            Action::ToolCall(call) => format!("<tool_call>{}</tool_call>", call.to_json_string()),
            Action::Answer(cls) => format!("<answer>{}</answer>", cls.token()),
        };
        format!("<think>{}</think>{}", self.think, action)
    }

    pub fn tool_call(&self) -> Option<&ToolCall> {
        match &self.action {
            Action::ToolCall(c) => Some(c),
            Action::Answer(_) => None,
        }
    }

    pub fn answer(&self) -> Option<Cls> {
        match self.action {
            Action::Answer(c) => Some(c),
            Action::ToolCall(_) => None,
        }
    }
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const CALL_OPEN: &str = "<tool_call>";
const CALL_CLOSE: &str = "</tool_call>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const REASON_OPEN: &str = "<reason>";
const REASON_CLOSE: &str = "</reason>";

const STRUCTURAL_TAGS: [&str; 8] = [
    THINK_OPEN,
    THINK_CLOSE,
    CALL_OPEN,
    CALL_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
    REASON_OPEN,
    REASON_CLOSE,
];

fn stray_tag(s: &str) -> Option<&'static str> {
    STRUCTURAL_TAGS.into_iter().find(|t| s.contains(t))
}

/// Parses a fast answer. Surrounding whitespace is tolerated, and so is
/// whitespace between the class token and the reason block; anything else
/// outside the grammar is a violation.
pub fn parse_fast(text: &str) -> Result<FastAnswer, FormatViolation> {
    use ViolationKind::*;
    let s = text.trim();
    let (cls, rest) = if let Some(rest) = s.strip_prefix(Cls::Real.token()) {
        (Cls::Real, rest)
    } else if let Some(rest) = s.strip_prefix(Cls::Spoof.token()) {
        (Cls::Spoof, rest)
    } else if s.starts_with(REASON_OPEN) {
        return Err(FormatViolation::new(BadTags, "missing class token"));
    } else if let Some(tok) = leading_token(s) {
        return Err(FormatViolation::new(
            BadAnswerToken,
            format!("unknown class token `{tok}`"),
        ));
    } else {
        return Err(FormatViolation::new(BadTags, "expected <Real> or <Spoof>"));
    };
    let body = rest
        .trim_start()
        .strip_prefix(REASON_OPEN)
        .ok_or_else(|| FormatViolation::new(BadTags, "missing <reason> block"))?;
    let reason = body
        .strip_suffix(REASON_CLOSE)
        .ok_or_else(|| FormatViolation::new(BadTags, "text after or missing </reason>"))?;
    if let Some(tag) = stray_tag(reason).or_else(|| {
        [Cls::Real.token(), Cls::Spoof.token()]
            .into_iter()
            .find(|t| reason.contains(t))
    }) {
        return Err(FormatViolation::new(
            BadTags,
            format!("unexpected `{tag}` inside reason"),
        ));
    }
    if reason.trim().is_empty() {
        return Err(FormatViolation::new(BadTags, "empty reason"));
    }
    Ok(FastAnswer {
        cls,
        reason: reason.to_string(),
    })
}

/// `<Word>` at the start of `s`, if any.
fn leading_token(s: &str) -> Option<&str> {
    let inner = s.strip_prefix('<')?;
    let end = inner.find('>')?;
    let name = &inner[..end];
    (!name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
        .then(|| &s[..end + 2])
}

/// Parses one reasoning turn:
/// `<think>T</think>` followed by either `<tool_call>J</tool_call>` or
/// `<answer><Real></answer>` / `<answer><Spoof></answer>`.
pub fn parse_turn(text: &str) -> Result<SubAnnotation, FormatViolation> {
    use ViolationKind::*;
    let s = text.trim();
    let body = s
        .strip_prefix(THINK_OPEN)
        .ok_or_else(|| FormatViolation::new(BadTags, "turn must start with <think>"))?;
    let close = body
        .find(THINK_CLOSE)
        .ok_or_else(|| FormatViolation::new(BadTags, "missing </think>"))?;
    let think = &body[..close];
    if let Some(tag) = stray_tag(think) {
        return Err(FormatViolation::new(
            BadTags,
            format!("unexpected `{tag}` inside think"),
        ));
    }
    if think.trim().is_empty() {
        return Err(FormatViolation::new(BadTags, "empty think block"));
    }
    let rest = body[close + THINK_CLOSE.len()..].trim_start();

    let action = if let Some(after) = rest.strip_prefix(CALL_OPEN) {
        let payload = after
            .strip_suffix(CALL_CLOSE)
            .ok_or_else(|| FormatViolation::new(BadTags, "text after or missing </tool_call>"))?;
        if let Some(tag) = stray_tag(payload) {
            return Err(FormatViolation::new(
                BadTags,
                format!("unexpected `{tag}` inside tool_call"),
            ));
        }
        Action::ToolCall(parse_tool_payload(payload)?)
    } else if let Some(after) = rest.strip_prefix(ANSWER_OPEN) {
        let token = after
            .strip_suffix(ANSWER_CLOSE)
            .ok_or_else(|| FormatViolation::new(BadTags, "text after or missing </answer>"))?;
        if let Some(tag) = stray_tag(token) {
            return Err(FormatViolation::new(
                BadTags,
                format!("unexpected `{tag}` inside answer"),
            ));
        }
        let cls = Cls::from_token(token).ok_or_else(|| {
            FormatViolation::new(BadAnswerToken, format!("answer must be <Real> or <Spoof>, got `{token}`"))
        })?;
        Action::Answer(cls)
    } else {
        return Err(FormatViolation::new(
            BadTags,
            "expected <tool_call> or <answer> after </think>",
        ));
    };

    Ok(SubAnnotation {
        think: think.to_string(),
        action,
    })
}

/// Hermes-style `{"name": …, "arguments": {…}}`. The tool name is checked
/// before the arguments so any unknown name is reported as `InvalidTool`.
fn parse_tool_payload(payload: &str) -> Result<ToolCall, FormatViolation> {
    use ViolationKind::*;
    let value: Value = serde_json::from_str(payload.trim())
        .map_err(|e| FormatViolation::new(BadJson, e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(FormatViolation::new(BadJson, "tool call must be a JSON object"));
    };
    let name = match obj.remove("name") {
        Some(Value::String(n)) => n,
        _ => return Err(FormatViolation::new(BadJson, "`name` must be a string")),
    };
    let tool = ToolId::from_wire(&name)
        .ok_or_else(|| FormatViolation::new(InvalidTool, format!("unknown tool `{name}`")))?;
    let arguments = match obj.remove("arguments") {
        Some(Value::Object(a)) => a,
        Some(_) => return Err(FormatViolation::new(BadJson, "`arguments` must be an object")),
        None => return Err(FormatViolation::new(BadJson, "missing `arguments`")),
    };
    if let Some(extra) = obj.keys().next() {
        return Err(FormatViolation::new(BadJson, format!("unexpected key `{extra}`")));
    }
    Ok(ToolCall { tool, arguments })
}

/// Raw fast-answer text with its parse.
#[derive(Debug, Clone, PartialEq)]
pub struct FastRecord {
    pub raw: String,
    pub parsed: Result<FastAnswer, FormatViolation>,
}

impl FastRecord {
    pub fn from_raw(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let parsed = parse_fast(&raw);
        Self { raw, parsed }
    }
}

/// Raw reasoning-turn text with its parse.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub raw: String,
    pub parsed: Result<SubAnnotation, FormatViolation>,
}

impl Turn {
    pub fn from_raw(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let parsed = parse_turn(&raw);
        Self { raw, parsed }
    }

    pub fn from_sub(sub: SubAnnotation) -> Self {
        Self {
            raw: sub.to_text(),
            parsed: Ok(sub),
        }
    }

    pub fn tool_call(&self) -> Option<&ToolCall> {
        self.parsed.as_ref().ok().and_then(SubAnnotation::tool_call)
    }

    pub fn answer(&self) -> Option<Cls> {
        self.parsed.as_ref().ok().and_then(SubAnnotation::answer)
    }
}

/// Execution record for the tool call made in reasoning turn `turn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub turn: usize,
    pub tool: ToolId,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryStatus {
    /// The last turn is a well-formed answer.
    Answered,
    /// Every turn parsed but the turn budget ran out before an answer.
    Unterminated,
    /// A turn violated the format.
    FormatFailure,
}

/// A full sample: optional fast answer, the reasoning turns, and the
/// execution records of every tool call.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_id: String,
    pub label: Cls,
    pub hint: Option<String>,
    pub fast: Option<FastRecord>,
    pub turns: Vec<Turn>,
    pub tool_results: Vec<ToolResult>,
    pub final_cls: Option<Cls>,
    pub final_logit: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("answer in turn {0} is not the last turn")]
    AnswerNotLast(usize),
    #[error("{turns} reasoning turns exceed the limit of {limit}")]
    TooManyTurns { turns: usize, limit: usize },
    #[error("tool call in turn {0} has no tool result")]
    MissingToolResult(usize),
    #[error("tool result for turn {0} does not match a tool call in that turn")]
    OrphanToolResult(usize),
    #[error("final_cls {recorded:?} disagrees with the answer turn {parsed:?}")]
    FinalMismatch {
        recorded: Option<Cls>,
        parsed: Option<Cls>,
    },
    #[error("line {line}: {message}")]
    Decode { line: usize, message: String },
}

impl Trajectory {
    pub fn new(sample_id: impl Into<String>, label: Cls) -> Self {
        Self {
            sample_id: sample_id.into(),
            label,
            hint: None,
            fast: None,
            turns: Vec::new(),
            tool_results: Vec::new(),
            final_cls: None,
            final_logit: None,
        }
    }

    pub fn status(&self) -> TrajectoryStatus {
        if self.turns.iter().any(|t| t.parsed.is_err()) {
            TrajectoryStatus::FormatFailure
        } else if self.turns.last().and_then(Turn::answer).is_some() {
            TrajectoryStatus::Answered
        } else {
            TrajectoryStatus::Unterminated
        }
    }

    /// Answer of the final turn, when that turn is a well-formed answer.
    pub fn parsed_final(&self) -> Option<Cls> {
        self.turns.last().and_then(Turn::answer)
    }

    pub fn tool_result(&self, turn: usize) -> Option<&ToolResult> {
        self.tool_results.iter().find(|r| r.turn == turn)
    }

    /// Number of tool-call turns.
    pub fn tool_call_count(&self) -> usize {
        self.turns.iter().filter(|t| t.tool_call().is_some()).count()
    }

    /// Checks the structural invariants; `max_turns` bounds the reasoning turns.
    pub fn validate(&self, max_turns: Option<usize>) -> Result<(), TrajectoryError> {
        if let Some(i) = self
            .turns
            .iter()
            .position(|t| t.answer().is_some())
            .filter(|&i| i + 1 != self.turns.len())
        {
            return Err(TrajectoryError::AnswerNotLast(i));
        }
        if let Some(limit) = max_turns {
            if self.turns.len() > limit {
                return Err(TrajectoryError::TooManyTurns {
                    turns: self.turns.len(),
                    limit,
                });
            }
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.tool_call().is_some() && self.tool_result(i).is_none() {
                return Err(TrajectoryError::MissingToolResult(i));
            }
        }
        let mut seen = Vec::new();
        for r in &self.tool_results {
            let matches = self
                .turns
                .get(r.turn)
                .and_then(Turn::tool_call)
                .is_some_and(|c| c.tool == r.tool);
            if !matches || seen.contains(&r.turn) {
                return Err(TrajectoryError::OrphanToolResult(r.turn));
            }
            seen.push(r.turn);
        }
        let parsed = self.parsed_final();
        if self.final_cls != parsed {
            return Err(TrajectoryError::FinalMismatch {
                recorded: self.final_cls,
                parsed,
            });
        }
        Ok(())
    }
}
