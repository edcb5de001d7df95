//! Prompt text for annotation and rollouts.

use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use crate::imaging::Raster;
use crate::mllm_client::Part;
use crate::vistools::ToolId;

/// Tool-free first question asked of the policy model.
pub const FIRST_ROUND_QUERY: &str = "Is this photo of a real person? (Do not use any tools)";

/// First-turn query used while annotating, followed by the hint.
pub const ANNOTATION_QUERY: &str = "This is the image you need to investigate.";

pub const TOOL_GUIDANCE: &str =
    "Wait, you should re-examine the image and give the final answer (use tools if needed).";

pub const FORMAT_DECLARATION: &str = "Think first, call tools if needed, then answer. Format strictly as: <think> ... </think> <tool_call> ... </tool_call> (if tools needed) <answer>(<Spoof>/<Real>)</answer>";

pub const ANNOTATION_SYSTEM_PROMPT: &str = "## Role & Mission
You are a face forensics expert. Your mission is to classify an image as either 'real' or 'spoof' by analyzing evidence strictly within the **facial region**, focusing **only on physical presentation attacks** (e.g., printed photos, screen displays).
You will be given a hint early in the conversation. Do not mention the hint when making your decision. Your final classification must match the hint, and be supported by image evidence and tool-based analysis.

## Core Principle
Concentrate solely on **physical attack artifacts**. These include:
- **Semantic clues**: unnatural flatness, rigid expressions, lack of 3D structure, unnatural reflections.
- **Pixel-level clues**: print texture, Moiré patterns, screen glare, paper/screen surface noise.
Since input images are cropped and aligned, **do not consider black borders and compression artifacts as spoof clues**.

## Workflow & Behavioral Rules
1. Begin with a brief visual scan of the **facial region**. **Ignore black borders and all context outside the face.**
2. If needed, call **ONE tool at a time** to test a specific hypothesis, either to look for signs of physical attack, or to confirm their absence.
- Each tool request must include a clear expectation (what you're testing for).
3. When you receive tool results, you may receive an **Expert Judgment** on the result.
- You may consider the expert's interpretation as a reference, but **must perform your own independent analysis**.
- Your reasoning should not blindly follow the expert; only adopt it when it aligns with your observations.
4. When you are confident, provide your conclusion.

## Available Tools
- **ZoomInTool**: Inspect local details for physical (print/screen) or digital (blending) artifacts.
- **FFTTool (Fast Fourier Transform):** Visualizes the image's frequency domain. Used to detect periodic patterns like screen Moiré effects or subtle artifacts from digital generation.
- **EdgeDetectionTool**: Find inconsistent edges from cutouts or digital blending.
- **LBPTool**: Analyze skin texture for unnatural or synthetic patterns.
- **WaveletTransformTool**: Find subtle digital tampering or noise mismatches via multi-scale analysis.
- **HOGTool**: Check facial structure gradients, which are often disrupted in physical attacks.

## Final Conclusion
Your conclusion must be 'Real' or 'Spoof'.";

const ROLLOUT_ROLE: &str = "## Role & Mission
You are a face forensics expert. Your mission is to classify an image as either 'Real' or 'Spoof' by analyzing evidence strictly within the **facial region**, focusing only on physical presentation attack.";

fn tool_description(tool: ToolId) -> &'static str {
    match tool {
        ToolId::ZoomIn => "Inspect local details for physical (print/screen) or digital (blending) artifacts.",
        ToolId::Fft => "Visualizes the image's frequency domain. Used to detect periodic patterns like screen Moire effects.",
        ToolId::EdgeDetection => "Find inconsistent edges from cutouts or digital blending.",
        ToolId::Lbp => "Analyze skin texture for unnatural or synthetic patterns.",
        ToolId::Wavelet => "Find subtle tampering or noise mismatches via multi-scale analysis.",
        ToolId::Hog => "Check facial structure gradients, which are often disrupted in physical attacks.",
    }
}

/// JSON-schema function descriptions, one per tool in `tools`.
pub fn tool_schemas(tools: &[ToolId]) -> Vec<serde_json::Value> {
    tools
        .iter()
        .map(|&t| {
            let parameters = if t == ToolId::ZoomIn {
                json!({
                    "type": "object",
                    "properties": {
                        "bbox": {
                            "type": "array",
                            "items": {"type": "number", "minimum": 0, "maximum": 1},
                            "minItems": 4,
                            "maxItems": 4,
                            "description": "Normalized [x0, y0, x1, y1] region to inspect."
                        }
                    },
                    "required": ["bbox"],
                    "additionalProperties": false
                })
            } else {
                json!({"type": "object", "properties": {}, "additionalProperties": false})
            };
            json!({
                "type": "function",
                "function": {
                    "name": t.wire_name(),
                    "description": tool_description(t),
                    "parameters": parameters
                }
            })
        })
        .collect()
}

/// Policy system prompt: role description followed by the Hermes-style tool
/// block listing `tools`.
pub fn rollout_system_prompt(tools: &[ToolId]) -> String {
    let lines: Vec<String> = tool_schemas(tools).iter().map(|s| s.to_string()).collect();
    format!(
        "{ROLLOUT_ROLE}\n\n# Tools\n\nYou may call one or more functions to assist with the user query.\n\n\
         You are provided with function signatures within <tools></tools> XML tags:\n<tools>\n{}\n</tools>\n\n\
         For each function call, return a json object with function name and arguments within <tool_call></tool_call> XML tags:\n\
         <tool_call>\n{{\"name\": <function-name>, \"arguments\": <args-json-object>}}\n</tool_call>",
        lines.join("\n")
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptStage {
    FirstQuery,
    ToolResult,
    FormatDecl,
    ToolGuidance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Dataset construction: the first prompt carries the hint.
    Annotation,
    /// Training and inference: no hint.
    Rollout,
}

#[derive(Debug, Clone)]
pub struct PromptContext {
    pub mode: PromptMode,
    pub image: Option<Arc<Raster>>,
    pub hint: Option<String>,
    pub guidance: Option<String>,
}

impl PromptContext {
    pub fn new(mode: PromptMode) -> Self {
        Self {
            mode,
            image: None,
            hint: None,
            guidance: None,
        }
    }

    pub fn with_image(mut self, image: Arc<Raster>) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }

    pub fn with_guidance(mut self, guidance: impl Into<String>) -> Self {
        self.guidance = Some(guidance.into());
        self
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt stage {stage:?} needs {missing}")]
    MissingContext {
        stage: PromptStage,
        missing: &'static str,
    },
}

/// Hint sentence appended to the annotation query.
pub fn hint_text(hint: &str) -> String {
    format!("Hint: {hint}")
}

/// Ordered user-message parts for `stage`.
pub fn build_prompts(stage: PromptStage, ctx: &PromptContext) -> Result<Vec<Part>, PromptError> {
    let image = || {
        ctx.image
            .clone()
            .map(Part::Image)
            .ok_or(PromptError::MissingContext {
                stage,
                missing: "an image",
            })
    };
    Ok(match stage {
        PromptStage::FirstQuery => match ctx.mode {
            PromptMode::Rollout => vec![image()?, Part::text(FIRST_ROUND_QUERY)],
            PromptMode::Annotation => {
                let mut parts = vec![image()?, Part::text(ANNOTATION_QUERY)];
                if let Some(h) = &ctx.hint {
                    parts.push(Part::text(hint_text(h)));
                }
                parts
            }
        },
        PromptStage::ToolResult => {
            let mut parts = vec![image()?];
            if let Some(g) = &ctx.guidance {
                parts.push(Part::text(g.clone()));
            }
            parts
        }
        PromptStage::FormatDecl => vec![Part::text(FORMAT_DECLARATION)],
        PromptStage::ToolGuidance => vec![Part::text(TOOL_GUIDANCE)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Arc<Raster> {
        Arc::new(Raster::filled(4, 4, 3, 10).unwrap())
    }

    #[test]
    fn first_query_rollout() {
        let ctx = PromptContext::new(PromptMode::Rollout).with_image(img());
        let parts = build_prompts(PromptStage::FirstQuery, &ctx).unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts[0].as_image().is_some());
        assert_eq!(
            parts[1].as_text(),
            Some("Is this photo of a real person? (Do not use any tools)")
        );
        // the hint never reaches the policy
        let ctx = ctx.with_hint("photo attack");
        assert_eq!(build_prompts(PromptStage::FirstQuery, &ctx).unwrap().len(), 2);
    }

    #[test]
    fn first_query_annotation_appends_hint() {
        let ctx = PromptContext::new(PromptMode::Annotation)
            .with_image(img())
            .with_hint("photo attack");
        let parts = build_prompts(PromptStage::FirstQuery, &ctx).unwrap();
        let texts: Vec<_> = parts.iter().filter_map(Part::as_text).collect();
        assert_eq!(texts, [ANNOTATION_QUERY, "Hint: photo attack"]);
    }

    #[test]
    fn tool_result_carries_guidance() {
        let g = "This is the result of FFTTool. The expert predicts 87% there's spoof trace";
        let ctx = PromptContext::new(PromptMode::Annotation)
            .with_image(img())
            .with_guidance(g);
        let parts = build_prompts(PromptStage::ToolResult, &ctx).unwrap();
        assert!(parts[0].as_image().is_some());
        assert_eq!(parts[1].as_text(), Some(g));
    }

    #[test]
    fn fixed_strings() {
        let ctx = PromptContext::new(PromptMode::Rollout);
        assert_eq!(
            build_prompts(PromptStage::FormatDecl, &ctx).unwrap(),
            vec![Part::text(
                "Think first, call tools if needed, then answer. Format strictly as: <think> ... </think> <tool_call> ... </tool_call> (if tools needed) <answer>(<Spoof>/<Real>)</answer>"
            )]
        );
        assert_eq!(
            build_prompts(PromptStage::ToolGuidance, &ctx).unwrap()[0].as_text(),
            Some("Wait, you should re-examine the image and give the final answer (use tools if needed).")
        );
        assert_eq!(
            build_prompts(PromptStage::ToolResult, &ctx),
            Err(PromptError::MissingContext {
                stage: PromptStage::ToolResult,
                missing: "an image"
            })
        );
    }

    #[test]
    fn system_prompt_lists_every_tool() {
        let s = rollout_system_prompt(&ToolId::ALL);
        for t in ToolId::ALL {
            assert!(s.contains(&format!("\"name\":\"{}\"", t.wire_name())));
        }
        for t in ToolId::ALL {
            assert!(ANNOTATION_SYSTEM_PROMPT.contains(t.wire_name()));
        }
    }
}
