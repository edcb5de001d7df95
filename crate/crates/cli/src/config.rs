use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use spoofscope_core::annotator::DEFAULT_L_MAX;
use spoofscope_core::mllm_client::ClientConfig;
use spoofscope_core::reward::RewardConfig;

/// Optional JSON configuration shared by every subcommand. Command-line
/// flags take precedence over anything set here.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub client: Option<ClientConfig>,
    #[serde(default)]
    pub annotate: AnnotateSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateSection {
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub manual_gate: bool,
    #[serde(default)]
    pub hint_synonyms: Option<PathBuf>,
}

fn default_l_max() -> usize {
    DEFAULT_L_MAX
}

fn default_workers() -> usize {
    4
}

impl Default for AnnotateSection {
    fn default() -> Self {
        Self {
            l_max: default_l_max(),
            workers: default_workers(),
            manual_gate: false,
            hint_synonyms: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Default output root for `annotate run`.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Default expert model directory.
    #[serde(default)]
    pub experts: Option<PathBuf>,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.reward.validate()?;
        if let Some(c) = &self.client {
            c.validate()?;
        }
        if self.annotate.l_max == 0 {
            bail!("annotate.l_max must be positive");
        }
        if self.annotate.workers == 0 {
            bail!("annotate.workers must be positive");
        }
        Ok(())
    }
}
