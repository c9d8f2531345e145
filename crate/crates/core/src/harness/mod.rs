//! Experiment orchestration: configuration, dataset ingestion, training and
//! evaluation runs, CSV reports and plot-data emission.

pub mod config;
pub mod data;
pub mod report;
pub mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{ExperimentConfig, Scheme};
pub use data::{generate_dataset, ingest, load_split, synth_image, Split, SplitManifest};
pub use report::{emit_plotdata, write_ablate_csv, write_eval_csv, write_sweep_csv};
pub use run::{
    ablate, ensure_kb, ensure_manifest, eval_cell, eval_randomized_snr, run_eval, run_sweep_cbr,
    train_agent, train_codec, transmit_one, EvalArtifacts, EvalRow, Provider,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {reason}")]
    Config { reason: String },
    #[error("dataset error: {reason}")]
    Dataset { reason: String },
    #[error("missing checkpoint for scheme {scheme}: {path}")]
    MissingCheckpoint { scheme: String, path: PathBuf },
    #[error("report error in {path} line {line}: {reason}")]
    Report {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Agent(#[from] crate::channel_kb::AgentError),
    #[error(transparent)]
    Kb(#[from] crate::source_kb::KbError),
    #[error(transparent)]
    Baseline(#[from] crate::baseline::BaselineError),
    #[error(transparent)]
    Ldpc(#[from] crate::baseline::LdpcError),
    #[error(transparent)]
    Jpeg(#[from] crate::baseline::JpegError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Machine-readable error JSON for the CLI's stderr contract.
    pub fn to_json(&self) -> String {
        let kind = match self {
            HarnessError::Config { .. } => "config",
            HarnessError::Dataset { .. } => "dataset",
            HarnessError::MissingCheckpoint { .. } => "missing_checkpoint",
            HarnessError::Report { .. } => "report",
            HarnessError::Codec(_) => "codec",
            HarnessError::Agent(_) => "agent",
            HarnessError::Kb(_) => "kb",
            HarnessError::Baseline(_) => "baseline",
            HarnessError::Ldpc(_) => "ldpc",
            HarnessError::Jpeg(_) => "jpeg",
            HarnessError::Io(_) => "io",
        };
        serde_json::json!({ "kind": kind, "error": self.to_string() }).to_string()
    }
}
