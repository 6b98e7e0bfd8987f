//! Run configuration: one TOML file, overridable by flags.

use std::path::Path;

use charcoref::llm::EndpointConfig;
use charcoref::metrics::{FkglCoefficients, MentionMatchPolicy};
use charcoref::visual::{Aggregation, FilterPolicy};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    /// Cosine similarity of detection embeddings.
    #[default]
    Embedding,
    /// Scores from each sequence's pairwise.doc.
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualConfig {
    pub tau: f64,
    pub similarity: SimilarityKind,
    pub aggregation: Aggregation,
    pub policy: FilterPolicy,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            similarity: SimilarityKind::Embedding,
            aggregation: Aggregation::Mean,
            policy: FilterPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Fewest shared slots for a cluster and a chain to be fused.
    pub min_overlap: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { min_overlap: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub matching: MentionMatchPolicy,
    pub fkgl: FkglCoefficients,
    pub fkgl_clamp: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Worker threads for per-sequence work; 0 means one per CPU.
    pub workers: usize,
    pub visual: VisualConfig,
    pub align: AlignConfig,
    pub eval: EvalConfig,
    pub llm: EndpointConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Input(format!("invalid config: {m}")));
        if !self.visual.tau.is_finite() {
            return bad("visual.tau must be finite");
        }
        if !self.visual.policy.is_valid() {
            return bad("visual.policy thresholds must be in [0, 1]");
        }
        if self.eval.matching.validate().is_err() {
            return bad("eval.matching.iou_threshold must be in (0, 1]");
        }
        self.llm
            .validate()
            .map_err(|e| CliError::Input(format!("invalid config: {e}")))
    }

    /// JSON form embedded in reports. Secrets are never stored here, only
    /// the name of the variable that holds them. `workers` is left out since
    /// it cannot change any result.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("workers");
        v
    }
}
