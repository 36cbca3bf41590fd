//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sample rate {sample_rate} is not divisible by fps {fps}")]
    NonDivisibleRate { sample_rate: u32, fps: u32 },
    #[error("empty audio window")]
    EmptyWindow,
    #[error("invalid quantization range: lo {lo} >= hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("unsupported audio: {0}")]
    BadAudio(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing conditioning source: {0}")]
    MissingSource(String),
    #[error("ECA kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("unknown synthetic scene: {0}")]
    UnknownScene(String),
    #[error("feature structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("no feature extractor configured")]
    ExtractorMissing,
    #[error("no frame embedder configured")]
    EmbedderMissing,
    #[error("sequence length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("degenerate eye: zero horizontal extent")]
    DegenerateEye,
    #[error("image height {0} is odd; lower-half split needs an even height")]
    OddHeight(usize),
    #[error("clip duration {video_frames} frames does not match audio ({audio_frames} frames)")]
    DurationMismatch {
        video_frames: usize,
        audio_frames: usize,
    },
    #[error("frame index {index} out of range (clip has {len} frames)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint not found: {0}")]
    CheckpointMissing(String),
    #[error("missing report: {0}")]
    MissingReport(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
