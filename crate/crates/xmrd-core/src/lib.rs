//! Cross-modal person retrieval core.
//!
//! Implements dual modality encoders trained with identity cross-entropy
//! through one shared classifier, regularized canonical correlation analysis
//! for joint-space alignment, retrieval protocols and metrics, and the
//! persistence layer used by the `xmrd` command-line tool. All numeric code
//! is generic over the scalar type; see the aliases at the crate root.

pub mod cca;
pub mod ckpt;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod text;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases; the default throughout the CLI.
pub type Encoder64 = nn::Encoder<f64>;
pub type EmbeddingTable64 = text::EmbeddingTable<f64>;
pub type JointClassifier64 = train::JointClassifier<f64>;
pub type JointModel64 = train::JointModel<f64>;
pub type TrainingSet64 = train::TrainingSet<f64>;
pub type CcaModel64 = cca::CcaModel<f64>;
pub type FeatureStore64 = eval::FeatureStore<f64>;

/// Single-precision aliases.
pub type Encoder32 = nn::Encoder<f32>;
pub type EmbeddingTable32 = text::EmbeddingTable<f32>;
pub type JointClassifier32 = train::JointClassifier<f32>;
pub type JointModel32 = train::JointModel<f32>;
pub type TrainingSet32 = train::TrainingSet<f32>;
pub type CcaModel32 = cca::CcaModel<f32>;
pub type FeatureStore32 = eval::FeatureStore<f32>;
