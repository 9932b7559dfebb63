//! The JSON run configuration shared by every command.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SynthConfig;
use crate::distill::DistillConfig;
use crate::fewshot::FewShotConfig;
use crate::retrieval::RetrievalConfig;
use crate::vit::ViTConfig;

/// Every section and field is optional; omitted values take their defaults.
/// Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub vit: ViTConfig,
    pub distill: DistillConfig,
    pub fewshot: FewShotConfig,
    pub retrieval: RetrievalConfig,
    pub data: SynthConfig,
    pub seed: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config line {line}, column {column}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            // serde_json appends its own position; it is reported separately
            let message = match message.rfind(" at line ") {
                Some(i) => message[..i].to_string(),
                None => message,
            };
            ConfigError {
                line: e.line(),
                column: e.column(),
                message,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let cfg = RunConfig::from_json(r#"{"seed": 4, "fewshot": {"way": 3}}"#).unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.fewshot.way, 3);
        assert_eq!(cfg.fewshot.shot, 1);
    }

    #[test]
    fn typos_are_reported_with_position() {
        let err = RunConfig::from_json("{\n  \"vit\": {\"dpeth\": 2}\n}").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.message.contains("dpeth"), "{}", err.message);
        let err = RunConfig::from_json("{\"seed\": }").unwrap_err();
        assert_eq!(err.line, 1);
    }
}
