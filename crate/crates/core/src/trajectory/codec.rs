//! One-line JSON encoding of [`Trajectory`].
//!
//! Each turn carries its raw text next to the parse. On read the raw text is
//! re-parsed; parsed fields, when present, must agree with it, so producers
//! may also emit raw text only.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    parse_fast, parse_turn, Action, Cls, FastRecord, FormatViolation, ToolResult, Trajectory,
    TrajectoryError, Turn, ViolationKind,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    sample_id: String,
    label: Cls,
    #[serde(default)]
    hint: Option<String>,
    #[serde(default)]
    fast: Option<FastJson>,
    #[serde(default)]
    turns: Vec<TurnJson>,
    #[serde(default)]
    tool_results: Vec<ToolResult>,
    #[serde(default)]
    final_cls: Option<Cls>,
    #[serde(default)]
    final_logit: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FastJson {
    raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cls: Option<Cls>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    violation: Option<FormatViolation>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnJson {
    raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    think: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_call: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<Cls>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    violation: Option<FormatViolation>,
}

impl From<&FastRecord> for FastJson {
    fn from(f: &FastRecord) -> Self {
        match &f.parsed {
            Ok(a) => FastJson {
                raw: f.raw.clone(),
                cls: Some(a.cls),
                reason: Some(a.reason.clone()),
                violation: None,
            },
            Err(v) => FastJson {
                raw: f.raw.clone(),
                cls: None,
                reason: None,
                violation: Some(v.clone()),
            },
        }
    }
}

impl From<&Turn> for TurnJson {
    fn from(t: &Turn) -> Self {
        let mut out = TurnJson {
            raw: t.raw.clone(),
            think: None,
            tool_call: None,
            answer: None,
            violation: None,
        };
        match &t.parsed {
            Ok(sub) => {
                out.think = Some(sub.think.clone());
                match &sub.action {
                    Action::ToolCall(c) => out.tool_call = Some(c.to_json()),
                    Action::Answer(c) => out.answer = Some(*c),
                }
            }
            Err(v) => out.violation = Some(v.clone()),
        }
        out
    }
}

fn violation_kind(v: &Option<FormatViolation>) -> Option<ViolationKind> {
    v.as_ref().map(|v| v.kind)
}

fn fast_from_json(f: FastJson, line: usize) -> Result<FastRecord, TrajectoryError> {
    let rec = FastRecord {
        parsed: parse_fast(&f.raw),
        raw: f.raw.clone(),
    };
    let canonical = FastJson::from(&rec);
    let supplied = f.cls.is_some() || f.reason.is_some() || f.violation.is_some();
    if supplied
        && (f.cls != canonical.cls
            || f.reason != canonical.reason
            || violation_kind(&f.violation) != violation_kind(&canonical.violation))
    {
        return Err(TrajectoryError::Decode {
            line,
            message: "fast answer fields disagree with its raw text".into(),
        });
    }
    Ok(rec)
}

fn turn_from_json(t: TurnJson, index: usize, line: usize) -> Result<Turn, TrajectoryError> {
    let turn = Turn {
        parsed: parse_turn(&t.raw),
        raw: t.raw.clone(),
    };
    let canonical = TurnJson::from(&turn);
    let supplied =
        t.think.is_some() || t.tool_call.is_some() || t.answer.is_some() || t.violation.is_some();
    if supplied
        && (t.think != canonical.think
            || t.tool_call != canonical.tool_call
            || t.answer != canonical.answer
            || violation_kind(&t.violation) != violation_kind(&canonical.violation))
    {
        return Err(TrajectoryError::Decode {
            line,
            message: format!("turn {index} fields disagree with its raw text"),
        });
    }
    Ok(turn)
}

/// Encodes a trajectory as a single JSON line (no trailing newline).
pub fn serialize_trajectory(t: &Trajectory) -> String {
    let record = TrajectoryRecord {
        sample_id: t.sample_id.clone(),
        label: t.label,
        hint: t.hint.clone(),
        fast: t.fast.as_ref().map(FastJson::from),
        turns: t.turns.iter().map(TurnJson::from).collect(),
        tool_results: t.tool_results.clone(),
        final_cls: t.final_cls,
        final_logit: t.final_logit,
    };
    serde_json::to_string(&record).expect("trajectory records always serialize")
}

/// Decodes one JSON line and checks the structural invariants.
pub fn parse_trajectory(line: &str) -> Result<Trajectory, TrajectoryError> {
    parse_numbered(line, 1)
}

fn parse_numbered(line: &str, lineno: usize) -> Result<Trajectory, TrajectoryError> {
    let rec: TrajectoryRecord =
        serde_json::from_str(line).map_err(|e| TrajectoryError::Decode {
            line: lineno,
            message: e.to_string(),
        })?;
    let fast = rec.fast.map(|f| fast_from_json(f, lineno)).transpose()?;
    let turns = rec
        .turns
        .into_iter()
        .enumerate()
        .map(|(i, t)| turn_from_json(t, i, lineno))
        .collect::<Result<Vec<_>, _>>()?;
    let t = Trajectory {
        sample_id: rec.sample_id,
        label: rec.label,
        hint: rec.hint,
        fast,
        turns,
        tool_results: rec.tool_results,
        final_cls: rec.final_cls,
        final_logit: rec.final_logit,
    };
    t.validate(None).map_err(|e| TrajectoryError::Decode {
        line: lineno,
        message: e.to_string(),
    })?;
    Ok(t)
}

/// Reads a JSONL stream, skipping blank lines. Errors carry 1-based line numbers.
pub fn read_trajectories<R: BufRead>(reader: R) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TrajectoryError::Decode {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_numbered(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_trajectories<W: Write>(mut w: W, trajectories: &[Trajectory]) -> std::io::Result<()> {
    for t in trajectories {
        writeln!(w, "{}", serialize_trajectory(t))?;
    }
    w.flush()
}
