use std::fs;
use std::path::{Path, PathBuf};

use mixsp::mixsp::{HeadConfig, Variant};
use mixsp::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Where sentence representations come from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    /// Bag-of-embeddings encoder, updated with the head.
    Toy,
    /// Same encoder, parameters held at their initial values.
    ToyFrozen,
    /// Ground-truth directions from the generator (needs `synth.meta`).
    Synthetic,
}

/// Everything a training run depends on. File values override defaults and
/// command-line flags override file values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub variant: Variant,
    /// Explicit head settings; the variant preset when absent.
    pub head: Option<HeadConfig>,
    pub train: TrainConfig,
    pub encoder: EncoderChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            out: None,
            seeds: vec![1],
            variant: Variant::Mixsp,
            head: None,
            train: TrainConfig::default(),
            encoder: EncoderChoice::Toy,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }

    /// Fill `head` from the variant preset if the file did not set it.
    pub fn resolve(mut self) -> Result<Self, Failure> {
        let head = self
            .head
            .take()
            .unwrap_or_else(|| HeadConfig::variant(self.variant));
        head.validate().map_err(Failure::from_load)?;
        self.train.validate().map_err(Failure::from_load)?;
        if self.seeds.is_empty() {
            return Err(Failure::usage("at least one seed is required"));
        }
        self.head = Some(head);
        Ok(self)
    }

    pub fn head(&self) -> HeadConfig {
        self.head
            .clone()
            .unwrap_or_else(|| HeadConfig::variant(self.variant))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seeds": [4, 5], "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(
            cfg.train.learning_rate,
            TrainConfig::default().learning_rate
        );
        assert_eq!(cfg.variant, Variant::Mixsp);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sedes": [1]}"#).is_err());
    }

    #[test]
    fn resolve_fills_the_preset() {
        let cfg = RunConfig {
            variant: Variant::Moe,
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(cfg.head, Some(HeadConfig::variant(Variant::Moe)));
    }
}
