//! Building blocks for tool-augmented face anti-spoofing: image operators,
//! the multi-turn trajectory format, reward and advantage computation,
//! expert scorers, an annotation pipeline and biometric metrics.

pub mod imaging;
pub mod vistools;
pub mod mllm_client;
pub mod trajectory;
pub mod reward;
pub mod expert;
pub mod metrics;
pub mod annotator;
