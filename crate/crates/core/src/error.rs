use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The projective denominator vanished: the point maps to infinity.
    #[error("point ({x}, {y}) maps to infinity under this homography")]
    DegenerateDenominator { x: f64, y: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("under-constrained system: {links} effective links, need at least 4")]
    Underconstrained { links: usize },

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("empty keypoint set")]
    EmptyKeypoints,

    #[error("canvas of {width}x{height} exceeds the cap of {cap} pixels (while adding frame {frame})")]
    CanvasTooLarge {
        frame: usize,
        width: usize,
        height: usize,
        cap: usize,
    },

    #[error("BRE undefined: {0}")]
    UndefinedBre(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("solver aborted: {0}")]
    SolverAbort(String),

    #[error("missing {what}: expected {}", path.display())]
    Missing { what: String, path: PathBuf },

    #[error("{}: line {line}: {message}", path.display())]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateDenominator { .. } => "degenerate-denominator",
            Error::Singular(_) => "singular",
            Error::Underconstrained { .. } => "underconstrained",
            Error::DegenerateConfiguration(_) => "degenerate-configuration",
            Error::EmptyKeypoints => "empty-keypoints",
            Error::CanvasTooLarge { .. } => "canvas-too-large",
            Error::UndefinedBre(_) => "undefined-bre",
            Error::InvalidInput(_) => "invalid-input",
            Error::SolverAbort(_) => "solver-abort",
            Error::Missing { .. } => "missing-input",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json { .. } => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
