use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{kind:?} does not support {op}")]
    UnsupportedModel {
        kind: crate::model::ModelKind,
        op: &'static str,
    },
    #[error("no point-match pairs survive filtering")]
    EmptySystem,
    #[error("no tiles remain after removing orphans")]
    NoConnectedTiles,
    #[error("tile graph has {components} connected components; a single component is required")]
    Disconnected { components: usize },
    #[error("all tiles are fixed; nothing to solve")]
    AllTilesFixed,
    #[error("unknown tile `{0}`")]
    UnknownTile(String),
    #[error("unknown section z={0}")]
    UnknownSection(i64),
    #[error("singular system: {0} (increase lambda or fix a tile)")]
    SingularSystem(String),
    #[error("matrix is not positive definite at block {block} (increase lambda or fix a tile)")]
    NotPositiveDefinite { block: usize },
    #[error("degenerate linear block for tile `{tile}` (|det| = {det:e})")]
    DegenerateBlock { tile: String, det: f64 },
    #[error("synthetic overlap between `{0}` and `{1}` is empty")]
    OverlapEmpty(String, String),
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: record {index}: {message}")]
    InvalidRecord {
        path: PathBuf,
        index: usize,
        message: String,
    },
    #[error("match record {index} references unknown tile `{tile}`")]
    DanglingReference { index: usize, tile: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures raised by the linear solve rather than by the data.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem(_) | Error::NotPositiveDefinite { .. } | Error::AllTilesFixed
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
