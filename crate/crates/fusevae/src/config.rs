//! Run configuration: a single JSON document that reproduces a run.
//!
//! The file carries everything the CLI needs: the dataset recipe, the
//! architecture, the training schedule and the evaluation knobs. Parsing
//! rejects unknown keys and [`RunConfig::validate`] cross-checks the parts
//! against each other before any work starts, so a typo fails fast instead
//! of producing a half-configured run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::TrainConfig;
use crate::synthdata::DatasetConfig;

/// Evaluation knobs shared by `evaluate` and the post-training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Sampling temperature for grid scoring; zero is deterministic.
    pub temperature: f64,
    /// Radial cutoff for spectral-energy summaries.
    pub spectral_cutoff: f64,
    /// Test samples rendered into qualitative montages.
    pub montage_samples: usize,
    /// Test samples pooled for the latent PCA and alignment score.
    pub pca_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            temperature: 0.0,
            spectral_cutoff: 0.5,
            montage_samples: 2,
            pca_samples: 2,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::config(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if !self.spectral_cutoff.is_finite() || !(0.0..=1.0).contains(&self.spectral_cutoff) {
            return Err(Error::config(format!(
                "spectral_cutoff must lie in [0, 1], got {}",
                self.spectral_cutoff
            )));
        }
        if self.montage_samples == 0 || self.pca_samples == 0 {
            return Err(Error::config("montage_samples and pca_samples must be positive"));
        }
        Ok(())
    }
}

/// Everything one run needs, in one document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    /// Epochs between periodic checkpoints; the final checkpoint is always
    /// written regardless.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Default output directory; the `--out` flag overrides it.
    pub output_dir: PathBuf,
}

fn default_checkpoint_every() -> usize {
    10
}

/// Prefixes config errors with the field path they came from.
fn at(path: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(msg) => Error::config(format!("{path}: {msg}")),
        other => other,
    })
}

impl RunConfig {
    /// Desk-scale default, the config `generate-data` and `train` are
    /// expected to run with out of the box.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            dataset: DatasetConfig::desk(seed),
            model: ModelConfig::desk(4),
            train: TrainConfig { seed, ..TrainConfig::default() },
            eval: EvalOptions::default(),
            checkpoint_every: default_checkpoint_every(),
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        at("dataset", self.dataset.validate())?;
        at("model", self.model.validate())?;
        at("train", self.train.validate())?;
        at("eval", self.eval.validate())?;
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every: must be positive"));
        }
        if self.model.modalities != self.dataset.modalities {
            return Err(Error::config(format!(
                "model: covers {} modalities but dataset has {}",
                self.model.modalities, self.dataset.modalities
            )));
        }
        if self.model.hier.side != self.dataset.side {
            return Err(Error::config(format!(
                "model: image side {} does not match dataset side {}",
                self.model.hier.side, self.dataset.side
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir: must not be empty"));
        }
        Ok(())
    }

    /// Parses and validates a config document.
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&json)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_round_trips_through_json() {
        let cfg = RunConfig::desk(3);
        cfg.validate().unwrap();
        let json = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(back.dataset.seed, 3);
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.eval, cfg.eval);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let base = RunConfig::desk(1).to_json().unwrap();
        for (needle, extra) in [
            ("\"dataset\": {", "\"dataset\": {\"surprise\": 1,"),
            ("\"model\": {", "\"model\": {\"surprise\": 1,"),
            ("\"train\": {", "\"train\": {\"surprise\": 1,"),
            ("{", "{\"surprise\": 1,"),
        ] {
            let broken = base.replacen(needle, extra, 1);
            assert!(
                RunConfig::from_json(&broken).is_err(),
                "unknown key slipped through near {needle}"
            );
        }
    }

    #[test]
    fn validation_errors_carry_a_field_path() {
        let mut cfg = RunConfig::desk(1);
        cfg.dataset.missingness[0].1 += 0.5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("dataset"), "path missing in {msg}");
        assert!(msg.contains("missingness_table"), "field name missing in {msg}");

        let mut cfg = RunConfig::desk(1);
        cfg.model.hier.side = 16;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("model"), "path missing in {msg}");

        let mut cfg = RunConfig::desk(1);
        cfg.train.lr = -1.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("train"), "path missing in {msg}");
    }

    #[test]
    fn cross_field_consistency_is_checked() {
        let mut cfg = RunConfig::desk(1);
        cfg.dataset.modalities = 3;
        cfg.dataset.missingness = vec![("111".parse().unwrap(), 1.0)];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk(1);
        cfg.checkpoint_every = 0;
        assert!(cfg.validate().is_err());
    }
}
