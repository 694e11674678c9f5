use std::path::PathBuf;

/// Errors raised by the detector library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("box center ({cx:.3}, {cy:.3}) lies outside cell (row {row}, col {col}) at stride {stride}")]
    CenterOutsideCell {
        cx: f64,
        cy: f64,
        row: usize,
        col: usize,
        stride: usize,
    },

    #[error("unknown tap layer `{0}`")]
    UnknownTap(String),

    #[error("border cell (row {row}, col {col}) excluded from grid of size {grid}")]
    BorderCell { row: usize, col: usize, grid: usize },

    #[error("no qualifying images for class {class_id} at the requested cell")]
    NoQualifyingImages { class_id: usize },

    #[error("all-zero saliency map has no concentration")]
    ZeroMap,

    #[error("scene rejected: {0}")]
    Scene(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
