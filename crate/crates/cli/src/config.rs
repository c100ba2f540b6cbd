use std::path::Path;

use serde::{Deserialize, Serialize};
use vapp_core::dialoguesim::{default_style_library, NamedStyle};
use vapp_core::promptgen::llm::DEFAULT_TIMEOUT;
use vapp_core::traineval::{ShiftHoldParams, SimulationParams, TrainConfig};
use vapp_core::{Result, VapError};

pub const CONFIG_ECHO: &str = "config.toml";

/// Settings for every pipeline stage. Each subcommand reads the sections it
/// needs; command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSettings,
    pub prompts: PromptSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub simulate: SimulateSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub sessions: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub styles: Vec<NamedStyle>,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            sessions: 100,
            duration_s: 120.0,
            seed: 0,
            styles: default_style_library(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    Template,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSettings {
    pub mode: PromptMode,
    pub llm_url: String,
    pub llm_model: String,
    pub llm_timeout_s: f64,
    pub embed_dim: usize,
    pub embed_seed: u64,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            mode: PromptMode::Template,
            llm_url: "https://api.openai.com/v1/chat/completions".into(),
            llm_model: "gpt-4o".into(),
            llm_timeout_s: DEFAULT_TIMEOUT.as_secs_f64(),
            embed_dim: TrainConfig::default().model.embed_dim,
            embed_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Vap,
    ShiftHold,
}

impl Metric {
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(|m| match m.trim() {
                "vap" => Ok(Self::Vap),
                "shift_hold" => Ok(Self::ShiftHold),
                other => Err(VapError::Config(format!(
                    "--metrics: unknown metric '{other}', expected vap or shift_hold"
                ))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub metrics: Vec<Metric>,
    pub shift_hold: ShiftHoldParams,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Vap, Metric::ShiftHold],
            shift_hold: ShiftHoldParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    pub threshold: f64,
    pub max_wait_s: f64,
    pub hop_s: f64,
    /// Amplitude above which a user frame counts as speech.
    pub vad_threshold: f32,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        let p = SimulationParams::default();
        Self {
            threshold: p.threshold,
            max_wait_s: p.max_wait_s,
            hop_s: p.hop_s,
            vad_threshold: 1e-4,
        }
    }
}

impl SimulateSettings {
    pub fn params(&self) -> SimulationParams {
        SimulationParams {
            threshold: self.threshold,
            max_wait_s: self.max_wait_s,
            hop_s: self.hop_s,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VapError::io(path, e))?;
        Self::from_text(&text).map_err(|e| VapError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Canonical text; paths chosen on the command line are not part of it.
    pub fn to_text(&self) -> String {
        let mut echo = self.clone();
        echo.train.checkpoint_path = None;
        toml::to_string(&echo).expect("config serializes")
    }

    pub fn echo(&self, out: &Path) -> Result<()> {
        let path = out.join(CONFIG_ECHO);
        std::fs::write(&path, self.to_text()).map_err(|e| VapError::io(&path, e))
    }
}
