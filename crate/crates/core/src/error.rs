use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: no data rows")]
    EmptyFile { path: PathBuf },

    #[error("point references unknown match id `{0}`")]
    UnknownMatchId(String),

    #[error("location entropy of an empty count table")]
    EmptyCounts,

    #[error("need at least {needed} rows to standardize, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("no points left for serve type {0} after restricting to modelled servers")]
    NoPoints(u8),

    #[error("need at least {needed} {what}, got {got}")]
    TooFewLevels {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("fixed-effect design is rank deficient (column `{0}` is collinear with earlier columns)")]
    RankDeficientX(String),

    #[error("penalized system is not positive definite")]
    NotPositiveDefinite,

    #[error("server `{0}` has no random-effect estimate")]
    UnknownServer(String),

    #[error("match results out of order: {got} after {previous}")]
    OutOfOrder { previous: i64, got: i64 },

    #[error("complete separation in grouped binomial regression")]
    Separation,

    #[error("predictor is constant")]
    ConstantPredictor,

    #[error("input is constant")]
    ConstantInput,

    #[error("{0} did not converge")]
    NotConverged(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
