//! JSON experiment configuration. Unknown keys are hard errors so typos
//! surface at load time; scheme-specific blocks are validated for presence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel_kb::PpoConfig;
use crate::codec::CodecConfig;
use crate::entropy::RateSet;

use super::HarnessError;

/// Transmission scheme identifiers, also used in report rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    AkbJscc,
    AkbJsccNoCkb,
    FixedRateJscc,
    JpegLdpc,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::AkbJscc => "akb_jscc",
            Scheme::AkbJsccNoCkb => "akb_jscc_no_ckb",
            Scheme::FixedRateJscc => "fixed_rate_jscc",
            Scheme::JpegLdpc => "jpeg_ldpc",
        }
    }

    /// Stable id for deriving per-image random streams.
    pub fn stream_id(&self) -> u64 {
        match self {
            Scheme::AkbJscc => 0,
            Scheme::AkbJsccNoCkb => 1,
            Scheme::FixedRateJscc => 2,
            Scheme::JpegLdpc => 3,
        }
    }

    pub fn is_learned(&self) -> bool {
        !matches!(self, Scheme::JpegLdpc)
    }

    /// Learned schemes trained with the variable (entropy-preset) rate policy
    /// share one checkpoint; the fixed-rate comparison scheme has its own.
    pub fn checkpoint_name(&self) -> &'static str {
        match self {
            Scheme::FixedRateJscc => "codec_fixed.ckpt",
            _ => "codec.ckpt",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub dir: PathBuf,
    #[serde(default = "default_crop")]
    pub crop: usize,
    /// Either fractions or absolute counts; counts win when both are set.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub train_count: Option<usize>,
    #[serde(default)]
    pub test_count: Option<usize>,
}

fn default_crop() -> usize {
    64
}

fn default_train_fraction() -> f64 {
    0.9
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    pub rate_set: RateSet,
    pub eta: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            rate_set: RateSet::default(),
            eta: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub lambda_rd: f64,
    /// Steps over which lambda_rd ramps linearly from 0. Protects against
    /// early rate collapse: once every token quantizes to rate 0 the payload
    /// path carries no gradient and training stalls at prior quality.
    pub lambda_warmup_steps: usize,
    pub snr_db: f64,
    /// Step at which the learning rate is multiplied by `lr_decay_factor`;
    /// 0 disables the decay.
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    /// Progress print interval in steps; 0 disables.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 4,
            learning_rate: 1e-3,
            lambda_rd: 5e-5,
            lambda_warmup_steps: 4000,
            snr_db: 10.0,
            lr_decay_step: 14_000,
            lr_decay_factor: 0.3,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Effective rate weight at a given step.
    pub fn lambda_at(&self, step: usize) -> f64 {
        if self.lambda_warmup_steps == 0 || step >= self.lambda_warmup_steps {
            self.lambda_rd
        } else {
            self.lambda_rd * step as f64 / self.lambda_warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub ppo: PpoConfig,
    pub episodes: usize,
    /// Training SNR range; each episode samples uniformly from the grid
    /// {snr_min, snr_min+2, ..., snr_max}.
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            episodes: 2000,
            snr_min_db: 0.0,
            snr_max_db: 14.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbProviderKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbFallback {
    Stub,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KbConfig {
    pub dim: usize,
    pub provider: KbProviderKind,
    pub provider_url: Option<String>,
    pub fallback: KbFallback,
    pub prompt: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for KbConfig {
    fn default() -> Self {
        Self {
            dim: crate::source_kb::DEFAULT_KB_DIM,
            provider: KbProviderKind::Stub,
            provider_url: None,
            fallback: KbFallback::Stub,
            prompt: "describe the scene in one short sentence".to_string(),
            timeout_ms: 5000,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Schemes evaluated by `akb eval`; empty means the top-level scheme.
    pub schemes: Vec<Scheme>,
    pub snr_list: Vec<f64>,
    pub cbr_targets: Vec<f64>,
    /// SNR at which the CBR sweep runs.
    pub sweep_snr_db: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            schemes: vec![],
            snr_list: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0],
            cbr_targets: vec![0.01, 0.02, 0.03, 0.04, 0.05],
            sweep_snr_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub quality: u8,
    pub ldpc_fixture: PathBuf,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            quality: 85,
            ldpc_fixture: crate::baseline::shipped_fixture_path(),
        }
    }
}

/// Top-level experiment configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scheme: Scheme,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub entropy: EntropyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub kb: KbConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config {
                reason: format!("{}: {e}", path.display()),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !self.dataset.dir.exists() {
            return Err(HarnessError::Config {
                reason: format!("dataset dir {} does not exist", self.dataset.dir.display()),
            });
        }
        if self.schemes_to_eval().contains(&Scheme::JpegLdpc)
            && !self.baseline.ldpc_fixture.exists()
        {
            return Err(HarnessError::Config {
                reason: format!(
                    "ldpc fixture {} does not exist",
                    self.baseline.ldpc_fixture.display()
                ),
            });
        }
        if self.kb.provider == KbProviderKind::Http && self.kb.provider_url.is_none() {
            return Err(HarnessError::Config {
                reason: "kb.provider = http requires kb.provider_url".to_string(),
            });
        }
        self.codec
            .validate(&self.entropy.rate_set)
            .map_err(|e| HarnessError::Config {
                reason: e.to_string(),
            })?;
        self.agent.ppo.validate().map_err(|reason| HarnessError::Config { reason })?;
        if self.dataset.crop % self.codec.reduction != 0 {
            return Err(HarnessError::Config {
                reason: format!(
                    "crop {} not divisible by codec reduction {}",
                    self.dataset.crop, self.codec.reduction
                ),
            });
        }
        Ok(())
    }

    pub fn schemes_to_eval(&self) -> Vec<Scheme> {
        if self.eval.schemes.is_empty() {
            vec![self.scheme]
        } else {
            self.eval.schemes.clone()
        }
    }

    // Artifact path conventions under output_dir.

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir.join("manifest.json")
    }

    pub fn kb_path(&self) -> PathBuf {
        self.output_dir.join("kb.akb")
    }

    pub fn codec_checkpoint(&self, scheme: Scheme) -> PathBuf {
        self.output_dir.join(scheme.checkpoint_name())
    }

    pub fn agent_checkpoint(&self) -> PathBuf {
        self.output_dir.join("agent.ckpt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json(dir: &Path) -> String {
        format!(
            r#"{{
  "seed": 7,
  "output_dir": "{}",
  "scheme": "akb_jscc",
  "dataset": {{ "dir": "{}" }}
}}"#,
            dir.join("out").display(),
            dir.display()
        )
    }

    #[test]
    fn loads_minimal_config_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, minimal_json(dir.path())).unwrap();
        let cfg = ExperimentConfig::from_path(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.crop, 64);
        assert_eq!(cfg.train.steps, 20_000);
        assert_eq!(cfg.entropy.eta, 0.5);
        assert_eq!(cfg.schemes_to_eval(), vec![Scheme::AkbJscc]);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut json = minimal_json(dir.path());
        json = json.replace("\"seed\": 7,", "\"seed\": 7, \"sede\": 9,");
        std::fs::write(&path, json).unwrap();
        let err = ExperimentConfig::from_path(&path).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
    }

    #[test]
    fn missing_dataset_dir_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let json = minimal_json(&dir.path().join("nonexistent"));
        std::fs::write(&path, json).unwrap();
        assert!(ExperimentConfig::from_path(&path).is_err());
    }

    #[test]
    fn http_provider_requires_url() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let json = minimal_json(dir.path()).replace(
            "\"dataset\"",
            "\"kb\": { \"provider\": \"http\" }, \"dataset\"",
        );
        std::fs::write(&path, json).unwrap();
        let err = ExperimentConfig::from_path(&path).unwrap_err();
        assert!(err.to_string().contains("provider_url"));
    }
}
