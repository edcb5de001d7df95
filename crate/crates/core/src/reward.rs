//! Rollout rewards and group-normalized advantages.
//!
//! A rollout earns three components: the fast-answer reward, the reasoning
//! reward (format and final accuracy), and the tool-diversity reward gated
//! on a correct final answer. Their weighted sum is standardized within the
//! group of rollouts sampled for the same query.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Cls, FastRecord, Trajectory, TrajectoryStatus};
use crate::vistools::{validate_arguments, ToolId};

pub const TOOL_COUNT: usize = ToolId::ALL.len();

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("group of {0} rewards is too small, need at least 2")]
    GroupTooSmall(usize),
    #[error("{len} rewards do not split into groups of {group}")]
    RaggedGroups { len: usize, group: usize },
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

/// How per-tool call counts enter the diversity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClampMode {
    /// `γ_k · min(count_k, 1)`: one credit per distinct tool.
    CappedMin,
    /// `γ_k · max(count_k, 1)`: the formula as printed; unused tools still
    /// earn `γ_k` and repeats keep adding.
    LiteralMax,
}

fn d_beta_fast() -> f64 {
    0.1
}
fn d_beta_rsn() -> f64 {
    0.5
}
fn d_beta_tool() -> f64 {
    0.4
}
fn d_gamma() -> [f64; TOOL_COUNT] {
    [0.2; TOOL_COUNT]
}
fn d_clamp() -> ClampMode {
    ClampMode::CappedMin
}
fn d_group() -> usize {
    8
}
fn d_eps() -> f64 {
    1e-8
}
fn d_max_turns() -> Option<usize> {
    Some(3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default = "d_beta_fast")]
    pub beta_fast: f64,
    #[serde(default = "d_beta_rsn")]
    pub beta_rsn: f64,
    #[serde(default = "d_beta_tool")]
    pub beta_tool: f64,
    /// Per-tool weights in [`ToolId::ALL`] order.
    #[serde(default = "d_gamma")]
    pub gamma: [f64; TOOL_COUNT],
    #[serde(default = "d_clamp")]
    pub clamp_mode: ClampMode,
    #[serde(default = "d_group")]
    pub group_size: usize,
    #[serde(default = "d_eps")]
    pub std_epsilon: f64,
    /// Reasoning-turn budget; longer rollouts are format failures.
    #[serde(default = "d_max_turns")]
    pub max_turns: Option<usize>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta_fast: d_beta_fast(),
            beta_rsn: d_beta_rsn(),
            beta_tool: d_beta_tool(),
            gamma: d_gamma(),
            clamp_mode: d_clamp(),
            group_size: d_group(),
            std_epsilon: d_eps(),
            max_turns: d_max_turns(),
        }
    }
}

impl RewardConfig {
    pub fn with_mode(mut self, mode: ClampMode) -> Self {
        self.clamp_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: &str| Err(RewardError::InvalidConfig(m.into()));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if ![self.beta_fast, self.beta_rsn, self.beta_tool]
            .into_iter()
            .all(finite_nonneg)
        {
            return bad("beta weights must be finite and non-negative");
        }
        if !self.gamma.iter().copied().all(finite_nonneg) {
            return bad("gamma weights must be finite and non-negative");
        }
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.std_epsilon > 0.0 && self.std_epsilon.is_finite()) {
            return bad("std_epsilon must be positive");
        }
        if self.max_turns == Some(0) {
            return bad("max_turns must be positive");
        }
        Ok(())
    }

    pub fn gamma_for(&self, tool: ToolId) -> f64 {
        self.gamma[tool.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fast: f64,
    pub r_rsn: f64,
    pub f_tool: f64,
    pub r_tool: f64,
    pub total: f64,
    pub fast_fmt_ok: bool,
    pub rsn_fmt_ok: bool,
    pub per_tool_counts: BTreeMap<ToolId, usize>,
    /// One flag per reasoning turn: set for executed, schema-valid tool calls.
    pub valid_flags: Vec<bool>,
}

/// −1 for a missing or malformed fast answer, otherwise 1 when correct and 0
/// when wrong.
pub fn score_fast(fast: Option<&FastRecord>, label: Cls) -> f64 {
    match fast.map(|f| &f.parsed) {
        Some(Ok(answer)) => {
            if answer.cls == label {
                1.0
            } else {
                0.0
            }
        }
        _ => -1.0,
    }
}

/// Per-turn validity: the turn is a tool call whose arguments validate and
/// whose recorded execution succeeded.
pub fn valid_flags(traj: &Trajectory) -> Vec<bool> {
    traj.turns
        .iter()
        .enumerate()
        .map(|(i, turn)| {
            turn.tool_call().is_some_and(|call| {
                validate_arguments(call.tool, &call.arguments).is_ok()
                    && traj
                        .tool_result(i)
                        .is_some_and(|r| r.ok && r.tool == call.tool)
            })
        })
        .collect()
}

/// Whether the reasoning turns are well formed: every turn parses, every
/// tool call is valid, the only answer is the last turn, and the rollout
/// fits the turn budget.
pub fn reasoning_format_ok(traj: &Trajectory, cfg: &RewardConfig) -> bool {
    let flags = valid_flags(traj);
    let calls_ok = traj
        .turns
        .iter()
        .zip(&flags)
        .all(|(t, &v)| t.tool_call().is_none() || v);
    let within_budget = cfg.max_turns.is_none_or(|m| traj.turns.len() <= m);
    let answer_last = traj
        .turns
        .iter()
        .rev()
        .skip(1)
        .all(|t| t.answer().is_none());
    traj.status() == TrajectoryStatus::Answered && calls_ok && within_budget && answer_last
}

pub fn score_reasoning(traj: &Trajectory, label: Cls, cfg: &RewardConfig) -> f64 {
    if !reasoning_format_ok(traj, cfg) {
        return -1.0;
    }
    if traj.parsed_final() == Some(label) {
        1.0
    } else {
        0.0
    }
}

/// Valid calls per tool.
pub fn tool_counts(traj: &Trajectory) -> [usize; TOOL_COUNT] {
    let mut counts = [0; TOOL_COUNT];
    for (turn, valid) in traj.turns.iter().zip(valid_flags(traj)) {
        if let (true, Some(call)) = (valid, turn.tool_call()) {
            counts[call.tool.index()] += 1;
        }
    }
    counts
}

pub fn tool_diversity(traj: &Trajectory, cfg: &RewardConfig) -> f64 {
    let counts = tool_counts(traj);
    ToolId::ALL
        .iter()
        .map(|&t| {
            let c = counts[t.index()] as f64;
            let term = match cfg.clamp_mode {
                ClampMode::CappedMin => c.min(1.0),
                ClampMode::LiteralMax => c.max(1.0),
            };
            cfg.gamma_for(t) * term
        })
        .sum()
}

/// Diversity score, paid only when the final answer exists and is correct.
pub fn score_tool(traj: &Trajectory, label: Cls, cfg: &RewardConfig) -> f64 {
    if traj.parsed_final() == Some(label) {
        tool_diversity(traj, cfg)
    } else {
        0.0
    }
}

pub fn total_reward(traj: &Trajectory, label: Cls, cfg: &RewardConfig) -> RewardBreakdown {
    let r_fast = score_fast(traj.fast.as_ref(), label);
    let r_rsn = score_reasoning(traj, label, cfg);
    let f_tool = tool_diversity(traj, cfg);
    let r_tool = if traj.parsed_final() == Some(label) {
        f_tool
    } else {
        0.0
    };
    let total = cfg.beta_fast * r_fast + cfg.beta_rsn * r_rsn + cfg.beta_tool * r_tool;
    let counts = tool_counts(traj);
    RewardBreakdown {
        r_fast,
        r_rsn,
        f_tool,
        r_tool,
        total,
        fast_fmt_ok: r_fast > -1.0,
        rsn_fmt_ok: r_rsn > -1.0,
        per_tool_counts: ToolId::ALL.iter().map(|&t| (t, counts[t.index()])).collect(),
        valid_flags: valid_flags(traj),
    }
}

/// Single-tool baseline: `fmt + acc + 1{valid zoom-in call} · 1{acc > 0}`,
/// where any tool other than zoom-in is an invalid call.
pub fn st_grpo_reward(traj: &Trajectory, label: Cls, cfg: &RewardConfig) -> f64 {
    let only_zoom = traj
        .turns
        .iter()
        .filter_map(|t| t.tool_call())
        .all(|c| c.tool == ToolId::ZoomIn);
    let fmt = if reasoning_format_ok(traj, cfg) && only_zoom {
        0.0
    } else {
        -1.0
    };
    let acc = if traj.parsed_final() == Some(label) {
        1.0
    } else {
        0.0
    };
    let used_zoom = tool_counts(traj)[ToolId::ZoomIn.index()] > 0;
    let bonus = if used_zoom && acc > 0.0 { 1.0 } else { 0.0 };
    fmt + acc + bonus
}

/// `(R_i − mean) / std` with the population standard deviation. Groups whose
/// std falls below `std_epsilon` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std.is_nan() || std < std_epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Advantages for consecutive groups of `group_size` rewards.
pub fn batch_advantages(
    rewards: &[f64],
    group_size: usize,
    std_epsilon: f64,
) -> Result<Vec<f64>, RewardError> {
    if group_size < 2 {
        return Err(RewardError::GroupTooSmall(group_size));
    }
    if !rewards.len().is_multiple_of(group_size) {
        return Err(RewardError::RaggedGroups {
            len: rewards.len(),
            group: group_size,
        });
    }
    let mut out = Vec::with_capacity(rewards.len());
    for chunk in rewards.chunks(group_size) {
        out.extend(group_advantages(chunk, std_epsilon)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Action, SubAnnotation, ToolResult, Turn};
    use crate::vistools::ToolCall;

    /// Builder for rollouts: `tools` are executed successfully, then an
    /// optional final answer.
    fn rollout(fast: &str, tools: &[ToolId], answer: Option<Cls>, label: Cls) -> Trajectory {
        let mut t = Trajectory::new("r", label);
        t.fast = Some(FastRecord::from_raw(fast));
        for (i, &tool) in tools.iter().enumerate() {
            let call = if tool == ToolId::ZoomIn {
                ToolCall::zoom([0.0, 0.0, 0.5, 0.5])
            } else {
                ToolCall::new(tool)
            };
            t.turns.push(Turn::from_sub(SubAnnotation {
                think: format!("step {i}"),
                action: Action::ToolCall(call),
            }));
            t.tool_results.push(ToolResult {
                turn: i,
                tool,
                ok: true,
                sha256: None,
                path: None,
                expert_p: None,
                error: None,
            });
        }
        if let Some(cls) = answer {
            t.turns.push(Turn::from_sub(SubAnnotation {
                think: "conclude".into(),
                action: Action::Answer(cls),
            }));
            t.final_cls = Some(cls);
        }
        t
    }

    const SPOOF_FAST: &str = "<Spoof><reason>flat</reason>";

    fn unbounded() -> RewardConfig {
        RewardConfig {
            max_turns: None,
            ..RewardConfig::default()
        }
    }

    #[test]
    fn fast_scores() {
        let ok = FastRecord::from_raw(SPOOF_FAST);
        assert_eq!(score_fast(Some(&ok), Cls::Spoof), 1.0);
        assert_eq!(score_fast(Some(&ok), Cls::Real), 0.0);
        assert_eq!(score_fast(Some(&FastRecord::from_raw("<Fake><reason>x</reason>")), Cls::Real), -1.0);
        assert_eq!(score_fast(None, Cls::Real), -1.0);
    }

    #[test]
    fn reasoning_scores() {
        let cfg = RewardConfig::default();
        let t = rollout(SPOOF_FAST, &[ToolId::Fft], Some(Cls::Spoof), Cls::Spoof);
        assert_eq!(score_reasoning(&t, Cls::Spoof, &cfg), 1.0);
        assert_eq!(score_reasoning(&t, Cls::Real, &cfg), 0.0);

        let mut bad = t.clone();
        bad.turns.insert(
            0,
            Turn::from_raw("<think>x</think><tool_call>{\"name\":\"LaserTool\",\"arguments\":{}}</tool_call>"),
        );
        for r in &mut bad.tool_results {
            r.turn += 1;
        }
        assert_eq!(score_reasoning(&bad, Cls::Spoof, &cfg), -1.0);

        let open = rollout(SPOOF_FAST, &[ToolId::Fft], None, Cls::Spoof);
        assert_eq!(score_reasoning(&open, Cls::Spoof, &cfg), -1.0);

        let mut early = t.clone();
        early.turns.insert(0, t.turns[1].clone());
        for r in &mut early.tool_results {
            r.turn += 1;
        }
        assert_eq!(score_reasoning(&early, Cls::Spoof, &unbounded()), -1.0);

        let long = rollout(SPOOF_FAST, &[ToolId::Fft, ToolId::Lbp, ToolId::Hog], Some(Cls::Spoof), Cls::Spoof);
        assert_eq!(score_reasoning(&long, Cls::Spoof, &cfg), -1.0);
        assert_eq!(score_reasoning(&long, Cls::Spoof, &unbounded()), 1.0);
    }

    #[test]
    fn failed_execution_is_invalid() {
        let mut t = rollout(SPOOF_FAST, &[ToolId::Fft, ToolId::Lbp], Some(Cls::Spoof), Cls::Spoof);
        t.tool_results[1].ok = false;
        assert_eq!(valid_flags(&t), vec![true, false, false]);
        assert_eq!(score_reasoning(&t, Cls::Spoof, &RewardConfig::default()), -1.0);
        let f = tool_diversity(&t, &RewardConfig::default());
        assert!((f - 0.2).abs() < 1e-15);
    }

    #[test]
    fn diversity_examples() {
        let capped = RewardConfig::default();
        let literal = RewardConfig::default().with_mode(ClampMode::LiteralMax);
        let none = rollout(SPOOF_FAST, &[], Some(Cls::Spoof), Cls::Spoof);
        assert!((tool_diversity(&none, &literal) - 1.2).abs() < 1e-12);
        assert_eq!(tool_diversity(&none, &capped), 0.0);

        let two = rollout(SPOOF_FAST, &[ToolId::Fft, ToolId::Lbp], Some(Cls::Spoof), Cls::Spoof);
        assert!((tool_diversity(&two, &capped) - 0.4).abs() < 1e-12);

        let fft3 = rollout(SPOOF_FAST, &[ToolId::Fft; 3], Some(Cls::Spoof), Cls::Spoof);
        assert!((tool_diversity(&fft3, &literal) - 1.6).abs() < 1e-12);
        assert!((tool_diversity(&fft3, &capped) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn tool_gate() {
        let cfg = RewardConfig::default();
        let t = rollout(SPOOF_FAST, &[ToolId::Fft, ToolId::Lbp], Some(Cls::Spoof), Cls::Spoof);
        assert!((score_tool(&t, Cls::Spoof, &cfg) - 0.4).abs() < 1e-12);
        let literal = cfg.clone().with_mode(ClampMode::LiteralMax);
        let wrong = rollout(SPOOF_FAST, &[], Some(Cls::Real), Cls::Spoof);
        assert_eq!(score_tool(&wrong, Cls::Spoof, &literal), 0.0);
        let open = rollout(SPOOF_FAST, &[ToolId::Fft], None, Cls::Spoof);
        assert_eq!(score_tool(&open, Cls::Spoof, &literal), 0.0);
    }

    #[test]
    fn totals() {
        let cfg = RewardConfig::default();
        let perfect = rollout(SPOOF_FAST, &[ToolId::Fft, ToolId::Lbp], Some(Cls::Spoof), Cls::Spoof);
        let b = total_reward(&perfect, Cls::Spoof, &cfg);
        assert!((b.total - 0.76).abs() < 1e-12);
        assert_eq!(b.per_tool_counts[&ToolId::Fft], 1);
        assert!(b.fast_fmt_ok && b.rsn_fmt_ok);

        let mut broken = Trajectory::new("r", Cls::Spoof);
        broken.fast = Some(FastRecord::from_raw("nope"));
        broken.turns.push(Turn::from_raw("nope"));
        let b = total_reward(&broken, Cls::Spoof, &cfg);
        assert!((b.total + 0.6).abs() < 1e-12);
        assert!(!b.fast_fmt_ok && !b.rsn_fmt_ok);

        let tool_free = rollout(SPOOF_FAST, &[], Some(Cls::Spoof), Cls::Spoof);
        assert!((total_reward(&tool_free, Cls::Spoof, &cfg).total - 0.6).abs() < 1e-12);
    }

    #[test]
    fn st_grpo() {
        let cfg = RewardConfig::default();
        let zoom = rollout(SPOOF_FAST, &[ToolId::ZoomIn], Some(Cls::Spoof), Cls::Spoof);
        assert_eq!(st_grpo_reward(&zoom, Cls::Spoof, &cfg), 2.0);
        let plain = rollout(SPOOF_FAST, &[], Some(Cls::Spoof), Cls::Spoof);
        assert_eq!(st_grpo_reward(&plain, Cls::Spoof, &cfg), 1.0);
        let fft = rollout(SPOOF_FAST, &[ToolId::Fft], Some(Cls::Spoof), Cls::Spoof);
        assert_eq!(st_grpo_reward(&fft, Cls::Spoof, &cfg), 0.0);
        assert_eq!(st_grpo_reward(&fft, Cls::Real, &cfg), -1.0);
        let wrong_zoom = rollout(SPOOF_FAST, &[ToolId::ZoomIn], Some(Cls::Real), Cls::Spoof);
        assert_eq!(st_grpo_reward(&wrong_zoom, Cls::Spoof, &cfg), 0.0);
    }

    #[test]
    fn advantages() {
        assert_eq!(group_advantages(&[1.0; 4], 1e-8).unwrap(), vec![0.0; 4]);
        assert_eq!(group_advantages(&[0.0, 2.0], 1e-8).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(group_advantages(&[1.0], 1e-8), Err(RewardError::GroupTooSmall(1)));
        assert_eq!(
            batch_advantages(&[0.0, 2.0, 5.0, 5.0], 2, 1e-8).unwrap(),
            vec![-1.0, 1.0, 0.0, 0.0]
        );
        assert!(matches!(
            batch_advantages(&[0.0; 5], 2, 1e-8),
            Err(RewardError::RaggedGroups { .. })
        ));
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: RewardConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RewardConfig::default());
        assert_eq!(cfg.gamma, [0.2; 6]);
        assert_eq!(cfg.group_size, 8);
        assert!(cfg.validate().is_ok());
        let bad = RewardConfig {
            beta_tool: -0.1,
            ..RewardConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<RewardConfig>(r#"{"beta":1}"#).is_err());
    }
}
