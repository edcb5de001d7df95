//! Multi-turn annotation of face crops with tool calls and expert guidance,
//! followed by automated verification and a single re-annotation pass.

mod pipeline;
mod verify;

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{guidance_text, ExpertError, ExpertSet};
use crate::imaging::{encode_png, load_image, resize_bilinear, ImagingError, Raster};
use crate::mllm_client::{ChatBackend, ClientError, Message, Part};
use crate::trajectory::prompts::{
    build_prompts, PromptContext, PromptError, PromptMode, PromptStage, ANNOTATION_SYSTEM_PROMPT,
};
use crate::trajectory::{parse_turn, Action, Cls, ToolResult, Trajectory, Turn};
use crate::vistools::dispatch;

pub use pipeline::{
    compute_stats, read_journal, run_pipeline, JournalEntry, JournalEvent, PipelineConfig, Stats,
    ACCEPTED_FILE, BADCASE_FILE, JOURNAL_FILE, MAX_ATTEMPTS, REPORTS_FILE, REVIEW_FILE, STATS_FILE,
};
pub use verify::{
    check_provenance, scan_leaks, verify, Disposition, HintSynonyms, LeakMatch, LeakRule, VerificationReport,
    VerifyRules,
};

/// Side length every sample is resized to before annotation.
pub const ANNOTATION_SIDE: u32 = 224;
pub const DEFAULT_L_MAX: usize = 6;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("client error on sample {}: {source}", partial.sample_id)]
    Client {
        #[source]
        source: ClientError,
        /// Turns completed before the failure.
        partial: Box<Trajectory>,
    },
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("expert set is missing a model for at least one tool")]
    IncompleteExperts,
}

impl AnnotateError {
    pub(crate) fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        AnnotateError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub image: PathBuf,
    pub label: Cls,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spoof_type: Option<String>,
}

impl Sample {
    /// Hint handed to the annotator: the spoof type when known, otherwise
    /// the bare label.
    pub fn hint(&self) -> String {
        match (&self.spoof_type, self.label) {
            (Some(t), _) => t.clone(),
            (None, Cls::Real) => "real".into(),
            (None, Cls::Spoof) => "spoof".into(),
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty sample id".into());
        }
        if self.label == Cls::Real && self.spoof_type.is_some() {
            return Err(format!("real sample {:?} carries a spoof_type", self.id));
        }
        Ok(())
    }
}

/// Parses a manifest, resolving relative image paths against `base`.
/// Duplicate ids are rejected.
pub fn read_manifest(reader: impl BufRead, base: &Path) -> Result<Vec<Sample>, AnnotateError> {
    let mut out: Vec<Sample> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let err = |message: String| AnnotateError::Manifest { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut s: Sample = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        s.check().map_err(err)?;
        if !seen.insert(s.id.clone()) {
            return Err(err(format!("duplicate sample id {:?}", s.id)));
        }
        if s.image.is_relative() {
            s.image = base.join(&s.image);
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>, AnnotateError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| AnnotateError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(std::io::BufReader::new(file), base)
}

/// Loads a sample image and resizes it to the annotation resolution.
pub fn prepare_image(path: &Path) -> Result<Arc<Raster>, AnnotateError> {
    let img = load_image(path)?;
    Ok(Arc::new(resize_bilinear(&img, ANNOTATION_SIDE, ANNOTATION_SIDE)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateConfig {
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    /// Resend a malformed reply once after the format declaration.
    #[serde(default = "default_true")]
    pub format_resend: bool,
    /// Where tool renders are written; renders are hashed either way.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render_dir: Option<PathBuf>,
}

fn default_l_max() -> usize {
    DEFAULT_L_MAX
}
fn default_true() -> bool {
    true
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            l_max: DEFAULT_L_MAX,
            format_resend: true,
            render_dir: None,
        }
    }
}

fn file_stem_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Runs one annotation session for `sample` on an already prepared image.
///
/// The session ends on the first answer, on a reply that stays malformed
/// after the format resend, or after `cfg.l_max` reasoning turns. Tool
/// failures are recorded and reported back to the model as a text notice.
pub fn annotate_sample(
    sample: &Sample,
    image: Arc<Raster>,
    backend: &dyn ChatBackend,
    experts: &ExpertSet,
    cfg: &AnnotateConfig,
    attempt: u32,
) -> Result<Trajectory, AnnotateError> {
    let mut traj = Trajectory::new(sample.id.clone(), sample.label);
    traj.hint = Some(sample.hint());

    let first = PromptContext::new(PromptMode::Annotation)
        .with_image(image.clone())
        .with_hint(sample.hint());
    let mut history = vec![
        Message::system(ANNOTATION_SYSTEM_PROMPT),
        Message::user(build_prompts(PromptStage::FirstQuery, &first)?),
    ];

    macro_rules! ask {
        () => {
            match backend.chat(&history) {
                Ok(reply) => reply,
                Err(source) => {
                    return Err(AnnotateError::Client {
                        source,
                        partial: Box::new(traj),
                    })
                }
            }
        };
    }

    for idx in 0..cfg.l_max {
        let mut reply = ask!();
        let mut parsed = parse_turn(&reply);
        if parsed.is_err() && cfg.format_resend {
            history.push(Message::assistant(reply.clone()));
            let decl = PromptContext::new(PromptMode::Annotation);
            history.push(Message::user(build_prompts(PromptStage::FormatDecl, &decl)?));
            reply = ask!();
            parsed = parse_turn(&reply);
            // keep the dataset conversation free of the rejected exchange
            history.truncate(history.len() - 2);
        }
        history.push(Message::assistant(reply.clone()));
        let sub = match parsed {
            Ok(sub) => sub,
            Err(violation) => {
                log::debug!("{}: turn {idx} malformed: {}", sample.id, violation.detail);
                traj.turns.push(Turn {
                    raw: reply,
                    parsed: Err(violation),
                });
                break;
            }
        };
        let action = sub.action.clone();
        traj.turns.push(Turn {
            raw: reply,
            parsed: Ok(sub),
        });
        let call = match action {
            Action::Answer(cls) => {
                traj.final_cls = Some(cls);
                break;
            }
            Action::ToolCall(call) => call,
        };
        // executed even on the last turn so every call has a tool result
        let next_user = match dispatch(&call, &image) {
            Ok(render) => {
                let expert_p = if call.tool.has_expert() {
                    Some(experts.predict(call.tool, &render)?)
                } else {
                    None
                };
                let path = match &cfg.render_dir {
                    Some(dir) => {
                        let name = format!(
                            "{}.a{attempt}.t{idx}.{}.png",
                            file_stem_safe(&sample.id),
                            call.tool.wire_name()
                        );
                        let path = dir.join(name);
                        encode_png(&render, &path)?;
                        Some(path.display().to_string())
                    }
                    None => None,
                };
                traj.tool_results.push(ToolResult {
                    turn: idx,
                    tool: call.tool,
                    ok: true,
                    sha256: Some(render.sha256_hex()),
                    path,
                    expert_p,
                    error: None,
                });
                let mut ctx = PromptContext::new(PromptMode::Annotation).with_image(Arc::new(render));
                if let Some(p) = expert_p {
                    ctx = ctx.with_guidance(guidance_text(call.tool, p)?);
                }
                build_prompts(PromptStage::ToolResult, &ctx)?
            }
            Err(err) => {
                traj.tool_results.push(ToolResult {
                    turn: idx,
                    tool: call.tool,
                    ok: false,
                    sha256: None,
                    path: None,
                    expert_p: None,
                    error: Some(err.to_string()),
                });
                vec![Part::text(format!(
                    "The call to {} failed: {err}. Fix the call or continue without it.",
                    call.tool.wire_name()
                ))]
            }
        };
        history.push(Message::user(next_user));
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mllm_client::ScriptedMock;
    use crate::trajectory::TrajectoryStatus;

    fn sample() -> Sample {
        Sample {
            id: "s1".into(),
            image: "unused.png".into(),
            label: Cls::Spoof,
            spoof_type: Some("photo attack".into()),
        }
    }

    fn image() -> Arc<Raster> {
        Arc::new(Raster::from_fn(32, 32, |x, y| ((x * 7 + y * 13) % 256) as u8).unwrap())
    }

    const FFT_CALL: &str =
        "<think>Look for moire.</think><tool_call>{\"name\":\"FFTTool\",\"arguments\":{}}</tool_call>";
    const ANSWER: &str = "<think>Periodic peaks confirm a screen.</think><answer><Spoof></answer>";

    #[test]
    fn tool_then_answer() {
        let mock = ScriptedMock::new([FFT_CALL, ANSWER]);
        let t = annotate_sample(&sample(), image(), &mock, &ExpertSet::neutral(), &AnnotateConfig::default(), 1)
            .unwrap();
        assert_eq!(t.turns.len(), 2);
        assert_eq!(t.final_cls, Some(Cls::Spoof));
        assert_eq!(t.tool_results.len(), 1);
        assert_eq!(t.tool_results[0].expert_p, Some(0.5));
        assert!(mock.is_drained());
        let reqs = mock.requests();
        let second = reqs[1].last().unwrap();
        assert_eq!(second.images().count(), 1);
        assert_eq!(
            second.text(),
            "This is the result of FFTTool. The expert predicts 50% there's spoof trace"
        );
        let first_text = reqs[0][1].text();
        assert!(first_text.ends_with("Hint: photo attack"));
        t.validate(Some(6)).unwrap();
    }

    #[test]
    fn zoom_has_no_guidance() {
        let zoom = "<think>Check the eyes.</think><tool_call>{\"name\":\"ZoomInTool\",\"arguments\":{\"bbox\":[0.1,0.1,0.6,0.6]}}</tool_call>";
        let mock = ScriptedMock::new([zoom, ANSWER]);
        let t = annotate_sample(&sample(), image(), &mock, &ExpertSet::neutral(), &AnnotateConfig::default(), 1)
            .unwrap();
        assert_eq!(t.tool_results[0].expert_p, None);
        let last = mock.requests()[1].last().unwrap().clone();
        assert_eq!(last.parts.len(), 1);
        assert!(last.parts[0].as_image().is_some());
    }

    #[test]
    fn budget_exhausted_is_unterminated() {
        let mock = ScriptedMock::new(vec![FFT_CALL; 6]);
        let t = annotate_sample(&sample(), image(), &mock, &ExpertSet::neutral(), &AnnotateConfig::default(), 1)
            .unwrap();
        assert_eq!(t.turns.len(), 6);
        assert_eq!(t.status(), TrajectoryStatus::Unterminated);
        assert!(mock.is_drained());
    }

    #[test]
    fn format_resend_recovers_once() {
        let mock = ScriptedMock::new(["garbage", ANSWER]);
        let t = annotate_sample(&sample(), image(), &mock, &ExpertSet::neutral(), &AnnotateConfig::default(), 1)
            .unwrap();
        assert_eq!(t.turns.len(), 1);
        assert_eq!(t.status(), TrajectoryStatus::Answered);
        let resend = &mock.requests()[1];
        assert!(resend.last().unwrap().text().starts_with("Think first"));

        let mock = ScriptedMock::new(["garbage", "still garbage"]);
        let t = annotate_sample(&sample(), image(), &mock, &ExpertSet::neutral(), &AnnotateConfig::default(), 1)
            .unwrap();
        assert_eq!(t.status(), TrajectoryStatus::FormatFailure);
        assert_eq!(t.turns[0].raw, "still garbage");
    }

    #[test]
    fn tool_failure_is_reported_and_loop_continues() {
        let bad_zoom = "<think>Zoom.</think><tool_call>{\"name\":\"ZoomInTool\",\"arguments\":{}}</tool_call>";
        let mock = ScriptedMock::new([bad_zoom, ANSWER]);
        let t = annotate_sample(&sample(), image(), &mock, &ExpertSet::neutral(), &AnnotateConfig::default(), 1)
            .unwrap();
        assert!(!t.tool_results[0].ok);
        assert!(mock.requests()[1].last().unwrap().text().contains("failed"));
        assert_eq!(t.final_cls, Some(Cls::Spoof));
    }

    #[test]
    fn script_exhaustion_surfaces_with_partial() {
        let mock = ScriptedMock::new([FFT_CALL]);
        let err = annotate_sample(&sample(), image(), &mock, &ExpertSet::neutral(), &AnnotateConfig::default(), 1)
            .unwrap_err();
        match err {
            AnnotateError::Client { source, partial } => {
                assert!(matches!(source, ClientError::ScriptExhausted { calls: 1 }));
                assert_eq!(partial.turns.len(), 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn manifest_parsing() {
        let text = "{\"id\":\"a\",\"image\":\"a.png\",\"label\":\"Spoof\",\"spoof_type\":\"print\"}\n\n{\"id\":\"b\",\"image\":\"/abs/b.png\",\"label\":\"Real\"}\n";
        let m = read_manifest(text.as_bytes(), Path::new("/data")).unwrap();
        assert_eq!(m[0].image, PathBuf::from("/data/a.png"));
        assert_eq!(m[1].image, PathBuf::from("/abs/b.png"));
        assert_eq!(m[1].hint(), "real");

        let bad = "{\"id\":\"a\",\"image\":\"a.png\",\"label\":\"Real\",\"spoof_type\":\"print\"}\n";
        assert!(matches!(
            read_manifest(bad.as_bytes(), Path::new(".")),
            Err(AnnotateError::Manifest { line: 1, .. })
        ));
        let dup = "{\"id\":\"a\",\"image\":\"a.png\",\"label\":\"Real\"}\n{\"id\":\"a\",\"image\":\"b.png\",\"label\":\"Real\"}\n";
        assert!(matches!(
            read_manifest(dup.as_bytes(), Path::new(".")),
            Err(AnnotateError::Manifest { line: 2, .. })
        ));
    }
}
