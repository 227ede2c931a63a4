use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point ({x}, {y}) lies outside the box")]
    PointOutsideBox { x: f64, y: f64 },

    #[error("prediction set is empty")]
    EmptyPredictionSet,

    #[error("candidate set is empty")]
    EmptyCandidates,

    #[error("score matrices differ in shape: {left} rows vs {right} rows")]
    ShapeMismatch { left: usize, right: usize },

    #[error("selected box for prediction {index} has zero overlap with the target")]
    NonFiniteGradient { index: usize },

    #[error("{n} predictions exceed the exhaustive search limit of {limit}")]
    TooManyPredictions { n: usize, limit: usize },

    #[error("invalid ratios: need 0 < positive ({pos}) < ignore ({ign}) <= 1")]
    InvalidRatios { pos: f64, ign: f64 },

    #[error("prediction has zero overlap with the target")]
    ZeroOverlap,

    #[error("probability {0} is outside (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("no positive pixels were assigned")]
    NoPositives,

    #[error("invalid scene spec: {0}")]
    SpecInvalid(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
