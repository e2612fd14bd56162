//! Crate-wide error type. Every failure mode carries a stable short code that
//! tests and the CLI match on; the message carries the offending values.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("codec-shape: {0}")]
    CodecShape(String),

    #[error("tau-stride: {0}")]
    TauStride(String),

    #[error("audio-shape: {0}")]
    AudioShape(String),

    #[error("nan-input: {0}")]
    NanInput(String),

    #[error("t-singularity: t={0} is too close to 1")]
    TSingularity(f64),

    #[error("frozen-params: {0}")]
    FrozenParams(String),

    #[error("teacher-diverged: non-finite loss at step {step}")]
    TeacherDiverged { step: usize },

    #[error("distill-diverged: non-finite loss at step {step}")]
    DistillDiverged { step: usize },

    #[error("teacher-not-frozen: distillation requires a frozen teacher")]
    TeacherNotFrozen,

    #[error("checkpoint-corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("config-invalid: {0}")]
    ConfigInvalid(String),

    #[error("chunk {chunk}: {source}")]
    InChunk {
        chunk: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, the first token of the display form.
    pub fn code(&self) -> &'static str {
        match self {
            Error::CodecShape(_) => "codec-shape",
            Error::TauStride(_) => "tau-stride",
            Error::AudioShape(_) => "audio-shape",
            Error::NanInput(_) => "nan-input",
            Error::TSingularity(_) => "t-singularity",
            Error::FrozenParams(_) => "frozen-params",
            Error::TeacherDiverged { .. } => "teacher-diverged",
            Error::DistillDiverged { .. } => "distill-diverged",
            Error::TeacherNotFrozen => "teacher-not-frozen",
            Error::CheckpointCorrupt(_) => "checkpoint-corrupt",
            Error::ConfigInvalid(_) => "config-invalid",
            Error::InChunk { source, .. } => source.code(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Wrap an error with the chunk index it occurred in.
    pub fn in_chunk(self, chunk: usize) -> Error {
        Error::InChunk {
            chunk,
            source: Box::new(self),
        }
    }
}
