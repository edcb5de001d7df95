//! Automated checks on a finished annotation: correctness, format, and
//! leakage of the hint or the expert's confidence into the reasoning text.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{AnnotateError, Sample, DEFAULT_L_MAX};
use crate::imaging::Raster;
use crate::reward::valid_flags;
use crate::trajectory::{Trajectory, TrajectoryStatus};
use crate::vistools::dispatch;

const SHIPPED_SYNONYMS: &str = include_str!("hint_synonyms.json");
/// Key whose terms apply to every spoof sample.
const ANY_TYPE: &str = "*";

/// Leak terms per spoof type, keyed by lower-case type name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HintSynonyms(pub BTreeMap<String, Vec<String>>);

impl HintSynonyms {
    pub fn shipped() -> Self {
        Self::from_json(SHIPPED_SYNONYMS).expect("shipped synonym list parses")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok(Self(
            raw.into_iter()
                .map(|(k, v)| (k.to_lowercase(), v))
                .collect(),
        ))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, AnnotateError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AnnotateError::io(path, e))?;
        Self::from_json(&text).map_err(|e| AnnotateError::io(path, e))
    }

    /// The spoof type itself, its listed synonyms, and the terms that apply
    /// to every type.
    pub fn terms_for(&self, spoof_type: &str) -> Vec<String> {
        let key = spoof_type.trim().to_lowercase();
        let mut terms = vec![key.clone()];
        for k in [key.as_str(), ANY_TYPE] {
            if let Some(list) = self.0.get(k) {
                terms.extend(list.iter().map(|t| t.to_lowercase()));
            }
        }
        terms.retain(|t| !t.trim().is_empty());
        terms.sort();
        terms.dedup();
        terms
    }
}

#[derive(Debug, Clone)]
pub struct VerifyRules {
    pub synonyms: HintSynonyms,
    /// Route automatically accepted samples to manual review.
    pub manual_gate: bool,
    pub l_max: usize,
}

impl Default for VerifyRules {
    fn default() -> Self {
        Self {
            synonyms: HintSynonyms::shipped(),
            manual_gate: false,
            l_max: DEFAULT_L_MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeakRule {
    /// The spoof type or one of its synonyms.
    Hint,
    /// "expert" within 40 characters of a percentage.
    ExpertPercent,
    /// The guidance phrasing "predicts N% …".
    ConfidencePhrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakMatch {
    /// Reasoning turn, or `None` for the fast answer.
    pub turn: Option<usize>,
    pub rule: LeakRule,
    pub span: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Disposition {
    Accepted,
    NeedsReannotation,
    BadCase,
    NeedsManualReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub sample_id: String,
    pub correctness: bool,
    /// Parse validity, schema validity and a clean leakage scan together.
    pub format: bool,
    pub violations: Vec<String>,
    pub leakage: bool,
    pub leaks: Vec<LeakMatch>,
    pub disposition: Disposition,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.correctness && self.format && self.leakage
    }

    /// A failure on the last permitted attempt becomes a bad case.
    pub fn on_final_attempt(mut self) -> Self {
        if self.disposition == Disposition::NeedsReannotation {
            self.disposition = Disposition::BadCase;
        }
        self
    }
}

fn expert_percent() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?is)\bexperts?\b.{0,40}?\d+(?:\.\d+)?\s*(?:%|percent)|\d+(?:\.\d+)?\s*(?:%|percent).{0,40}?\bexperts?\b")
            .expect("valid regex")
    })
}

fn confidence_phrase() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\bpredicts?\s+(?:about\s+|around\s+|roughly\s+)?\d+(?:\.\d+)?\s*(?:%|percent)(?:\s+there'?s\s+spoof\s+traces?)?")
            .expect("valid regex")
    })
}

/// Whole-phrase, case-insensitive pattern; runs of spaces, hyphens and
/// underscores in the term match each other.
fn term_regex(terms: &[String]) -> Option<Regex> {
    if terms.is_empty() {
        return None;
    }
    let alts: Vec<String> = terms
        .iter()
        .map(|t| {
            let words: Vec<String> = t
                .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
                .filter(|w| !w.is_empty())
                .map(regex::escape)
                .collect();
            words.join(r"[\s_-]+")
        })
        .collect();
    Regex::new(&format!(r"(?i)(?:^|\W)({})(?:$|\W)", alts.join("|"))).ok()
}

/// Every leak found in the reasoning text of `traj`. Hint terms are only
/// scanned when the sample names a spoof type.
pub fn scan_leaks(traj: &Trajectory, spoof_type: Option<&str>, synonyms: &HintSynonyms) -> Vec<LeakMatch> {
    let hint_re = spoof_type.and_then(|t| term_regex(&synonyms.terms_for(t)));
    let mut texts: Vec<(Option<usize>, &str)> = Vec::new();
    if let Some(fast) = &traj.fast {
        match &fast.parsed {
            Ok(f) => texts.push((None, &f.reason)),
            Err(_) => texts.push((None, &fast.raw)),
        }
    }
    for (i, turn) in traj.turns.iter().enumerate() {
        match &turn.parsed {
            Ok(sub) => texts.push((Some(i), &sub.think)),
            Err(_) => texts.push((Some(i), &turn.raw)),
        }
    }
    let mut out = Vec::new();
    for (turn, text) in texts {
        if let Some(re) = &hint_re {
            out.extend(re.captures_iter(text).map(|c| LeakMatch {
                turn,
                rule: LeakRule::Hint,
                span: c[1].to_string(),
            }));
        }
        for (rule, re) in [
            (LeakRule::ExpertPercent, expert_percent()),
            (LeakRule::ConfidencePhrase, confidence_phrase()),
        ] {
            out.extend(re.find_iter(text).map(|m| LeakMatch {
                turn,
                rule,
                span: m.as_str().to_string(),
            }));
        }
    }
    out
}

pub fn verify(traj: &Trajectory, sample: &Sample, rules: &VerifyRules) -> VerificationReport {
    let mut violations = Vec::new();
    if traj.sample_id != sample.id {
        violations.push(format!("trajectory is for sample {:?}", traj.sample_id));
    }
    if let Err(e) = traj.validate(Some(rules.l_max)) {
        violations.push(e.to_string());
    }
    for (i, turn) in traj.turns.iter().enumerate() {
        if let Err(v) = &turn.parsed {
            violations.push(format!("turn {i}: {:?}: {}", v.kind, v.detail));
        }
    }
    for (i, (turn, ok)) in traj.turns.iter().zip(valid_flags(traj)).enumerate() {
        if let (Some(call), false) = (turn.tool_call(), ok) {
            violations.push(format!("turn {i}: invalid {} call", call.tool.wire_name()));
        }
    }
    match traj.status() {
        TrajectoryStatus::Answered | TrajectoryStatus::FormatFailure => {}
        TrajectoryStatus::Unterminated => {
            violations.push(format!("no answer after {} turns", traj.turns.len()))
        }
    }

    let leaks = scan_leaks(traj, sample.spoof_type.as_deref(), &rules.synonyms);
    let leakage = leaks.is_empty();
    let format = violations.is_empty() && leakage;
    let correctness = traj.final_cls == Some(sample.label) && traj.parsed_final() == Some(sample.label);
    let disposition = match (correctness && format, rules.manual_gate) {
        (false, _) => Disposition::NeedsReannotation,
        (true, false) => Disposition::Accepted,
        (true, true) => Disposition::NeedsManualReview,
    };
    VerificationReport {
        sample_id: sample.id.clone(),
        correctness,
        format,
        violations,
        leakage,
        leaks,
        disposition,
    }
}

/// Re-executes every tool call against `image` and compares the result with
/// what the trajectory recorded.
pub fn check_provenance(traj: &Trajectory, image: &Raster) -> Result<(), String> {
    for (i, turn) in traj.turns.iter().enumerate() {
        let Some(call) = turn.tool_call() else { continue };
        let recorded = traj
            .tool_result(i)
            .ok_or_else(|| format!("turn {i}: no tool result"))?;
        match dispatch(call, image) {
            Ok(render) => {
                let hash = render.sha256_hex();
                if !recorded.ok || recorded.sha256.as_deref() != Some(hash.as_str()) {
                    return Err(format!("turn {i}: render hash differs from recomputation"));
                }
            }
            Err(_) if !recorded.ok => {}
            Err(e) => return Err(format!("turn {i}: recorded success but recomputation fails: {e}")),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Action, Cls, SubAnnotation, Turn};

    fn spoof_sample() -> Sample {
        Sample {
            id: "x".into(),
            image: "x.png".into(),
            label: Cls::Spoof,
            spoof_type: Some("photo attack".into()),
        }
    }

    fn answered(think: &str, cls: Cls) -> Trajectory {
        let mut t = Trajectory::new("x", Cls::Spoof);
        t.turns.push(Turn::from_sub(SubAnnotation {
            think: think.into(),
            action: Action::Answer(cls),
        }));
        t.final_cls = Some(cls);
        t
    }

    #[test]
    fn clean_trajectory_is_accepted() {
        let t = answered("Paper texture and flat shading on the cheeks.", Cls::Spoof);
        let r = verify(&t, &spoof_sample(), &VerifyRules::default());
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.disposition, Disposition::Accepted);
        let gated = VerifyRules {
            manual_gate: true,
            ..VerifyRules::default()
        };
        assert_eq!(verify(&t, &spoof_sample(), &gated).disposition, Disposition::NeedsManualReview);
    }

    #[test]
    fn wrong_answer_needs_reannotation() {
        let t = answered("Looks fine.", Cls::Real);
        let r = verify(&t, &spoof_sample(), &VerifyRules::default());
        assert!(!r.correctness);
        assert_eq!(r.disposition, Disposition::NeedsReannotation);
        assert_eq!(r.on_final_attempt().disposition, Disposition::BadCase);
    }

    #[test]
    fn hint_leaks() {
        for think in [
            "the hint says photo attack",
            "This is a PHOTO-ATTACK.",
            "Clearly a print attack here.",
            "According to the hint, spoof.",
        ] {
            let r = verify(&answered(think, Cls::Spoof), &spoof_sample(), &VerifyRules::default());
            assert!(!r.leakage, "missed leak in {think:?}");
            assert!(!r.format);
            assert_eq!(r.leaks[0].rule, LeakRule::Hint);
        }
        // the same words on a real sample are not a hint leak
        let mut real = spoof_sample();
        real.label = Cls::Real;
        real.spoof_type = None;
        let r = verify(&answered("no sign of a photo attack", Cls::Real), &real, &VerifyRules::default());
        assert!(r.leakage);
    }

    #[test]
    fn expert_leaks() {
        for (think, rule) in [
            ("the expert predicts 87% spoof", LeakRule::ExpertPercent),
            ("At 87 % the Expert agrees.", LeakRule::ExpertPercent),
            ("The model predicts 87% there's spoof trace", LeakRule::ConfidencePhrase),
        ] {
            let r = verify(&answered(think, Cls::Spoof), &spoof_sample(), &VerifyRules::default());
            assert!(r.leaks.iter().any(|l| l.rule == rule), "{think:?}: {:?}", r.leaks);
        }
        let far = format!("expert{}87%", " ".repeat(41));
        let r = verify(&answered(&far, Cls::Spoof), &spoof_sample(), &VerifyRules::default());
        assert!(r.leakage);
    }

    #[test]
    fn unterminated_fails_format() {
        let mut t = Trajectory::new("x", Cls::Spoof);
        t.turns.push(Turn::from_raw(
            "<think>Look.</think><tool_call>{\"name\":\"FFTTool\",\"arguments\":{}}</tool_call>",
        ));
        t.tool_results.push(crate::trajectory::ToolResult {
            turn: 0,
            tool: crate::vistools::ToolId::Fft,
            ok: true,
            sha256: None,
            path: None,
            expert_p: None,
            error: None,
        });
        let r = verify(&t, &spoof_sample(), &VerifyRules::default());
        assert!(!r.format);
        assert!(r.violations.iter().any(|v| v.contains("no answer")));
    }

    #[test]
    fn shipped_terms() {
        let s = HintSynonyms::shipped();
        let terms = s.terms_for("Photo Attack");
        assert!(terms.contains(&"photo attack".to_string()));
        assert!(terms.contains(&"the hint".to_string()));
        assert!(s.terms_for("unlisted type").contains(&"unlisted type".to_string()));
    }
}
