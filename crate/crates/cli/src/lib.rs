//! Experiment orchestration for the study recommender.
//!
//! Stages run one at a time against a stage directory: `generate` writes a
//! synthetic cohort, `preprocess` splits and tokenizes it, `train` fits a
//! model, `eval` ranks every test event, `report` aggregates event logs into
//! metric and slice CSVs, and `ablate` runs one of the comparative studies.
//! Every artifact is written atomically and recorded with its checksum in
//! `manifest.jsonl`; a stage whose inputs are unchanged is skipped.

mod ablation;
mod config;
pub mod experiment;
mod manifest;
mod stages;

pub use ablation::{run_ablation_in_memory, AblationKind, AblationRun};
pub use config::{AblationConfig, EvalSettings, ExperimentConfig, Paths, VocabConfig};
pub use experiment::{DecoderVariant, ModelKind, Prepared};
pub use manifest::{file_sha256, read_manifests, sha256_hex, write_atomic, RunManifest, MANIFEST_FILE};
pub use stages::{StageDir, StageOutcome};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing upstream artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("stage failed: {0}")]
    Stage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] study_core::corpus::CorpusError),
    #[error(transparent)]
    Synth(#[from] study_core::synthgen::SynthError),
    #[error(transparent)]
    Pipeline(#[from] study_core::pipeline::PipelineError),
    #[error(transparent)]
    Model(#[from] study_core::model::ModelError),
    #[error(transparent)]
    Knn(#[from] study_core::knnrec::KnnError),
    #[error(transparent)]
    Eval(#[from] study_core::evalharness::EvalError),
}
