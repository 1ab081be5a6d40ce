//! A deliberately small speaker recognition stack: log mel features, a
//! seeded affine embedder, cosine scoring, and the three task decision rules.
//! Small enough that input gradients are exact and fast, which is what the
//! attack modules need.

mod database;
mod embedder;
mod features;

pub use database::{
    argmax, decide, enroll, score, score_embedding, tune_threshold_eer, Decision, Enrollment,
    SpeakerDatabase, TaskKind,
};
pub use embedder::{embed, embed_input_grad, Activation, Embedder, EmbedderSpec};
pub use features::{extract_features, FeatureConfig, FeatureMatrix, FeaturePlan};

#[derive(Debug, thiserror::Error)]
pub enum SrsError {
    #[error("voice too short: {len} samples, need at least {needed}")]
    VoiceTooShort { len: usize, needed: usize },
    #[error("bad configuration: {0}")]
    BadConfig(&'static str),
    #[error("decision threshold required but not set")]
    ThresholdUnset,
    #[error("embedding collapsed to zero norm")]
    DegenerateEmbedding,
    #[error("speaker {0} has no enrollment voices")]
    EmptyEnrollment(String),
    #[error("score lists must be non-empty")]
    EmptyScoreList,
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
