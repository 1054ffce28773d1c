//! Crate-wide error type.

use crate::dataset::Modality;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by dataset handling, modelling, training and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // Dataset ingest and protocol construction.
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate sample_id {sample_id:?}")]
    DuplicateSampleId { sample_id: String },
    #[error("identity {identity:?} has no {modality} samples in a training split")]
    MissingModality { identity: String, modality: Modality },
    #[error("protocol retains {retained} identities, need at least 2")]
    TooFewIdentities { retained: usize },

    // Text pipeline.
    #[error("text corpus is empty")]
    EmptyCorpus,
    #[error("sample {sample_id:?} has an empty sentence")]
    EmptySentence { sample_id: String },
    #[error("sentence is empty after tokenization")]
    EmptyTokenization,
    #[error("vocabulary of {actual} words cannot hold {required} required words")]
    VocabTooSmall { required: usize, actual: usize },
    #[error("token index {index} outside embedding table with {rows} rows")]
    TokenIndexOutOfRange { index: u32, rows: usize },
    #[error("token sequence is all padding")]
    AllPadding,

    // Network construction and execution.
    #[error("invalid architecture: {reason}")]
    InvalidArchitecture { reason: String },
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("forward trace does not fit these parameters: {reason}")]
    TraceMismatch { reason: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    // Training.
    #[error("label {label} outside classifier range of {classes} identities")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("hyperparameter {name} invalid: {reason}")]
    InvalidHyperparameter { name: String, reason: String },
    #[error("unknown initialization strategy {id}, expected 1..=5")]
    UnknownStrategy { id: u32 },
    #[error("strategy requires a pretrained checkpoint for {group}")]
    MissingInitCheckpoint { group: String },
    #[error("frozen parameter group {group} changed during training")]
    FrozenGroupViolation { group: String },

    // Linear algebra and CCA.
    #[error("need at least 2 paired observations, got {m}")]
    NotEnoughSamples { m: usize },
    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("{routine} did not converge within {sweeps} sweeps")]
    NoConvergence { routine: String, sweeps: usize },

    // Evaluation.
    #[error("unknown retrieval scenario {name:?}")]
    UnknownScenario { name: String },
    #[error("scenario {scenario} needs a fitted CCA model")]
    MissingCcaModel { scenario: String },
    #[error("sample {sample_id:?} has no {modality} feature")]
    MissingFeature { sample_id: String, modality: Modality },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query {query_id:?} has no relevant gallery item")]
    NoRelevantItems { query_id: String },
    #[error("feature of {id:?} has zero norm, cosine similarity undefined")]
    ZeroNormFeature { id: String },
    #[error("requested {requested} attribute flips, identity has only {available} attributes")]
    TooManyFlips { requested: usize, available: usize },
    #[error("no attribute vector for identity {identity:?}")]
    MissingAttributes { identity: String },

    // Checkpoint container.
    #[error("checkpoint magic bytes do not match")]
    BadMagic,
    #[error("unsupported checkpoint version {version}")]
    UnsupportedVersion { version: u32 },
    #[error("corrupt checkpoint: {reason}")]
    CorruptCheckpoint { reason: String },

    // Configuration.
    #[error("invalid configuration: {reason}")]
    Config { reason: String },
    #[error("failed to parse TOML configuration: {0}")]
    TomlParse(#[from] toml::de::Error),

    // Plumbing.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
