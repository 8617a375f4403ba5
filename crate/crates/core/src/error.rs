use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("landmarks are collinear (triangle area {area:.3e} mm^2)")]
    CollinearLandmarks { area: f64 },

    #[error("slice plan is empty: no SAX slices and no LAX views requested")]
    EmptyPlan,

    #[error("slice {index} has no intersections with the rest of the stack")]
    NoIntersections { index: usize },

    #[error("grid too small for the Laplacian stencil: {0:?} (need >= 3 per axis)")]
    GridTooSmall([usize; 3]),

    #[error("sparse registration requires a coverage mask")]
    MissingMask,

    #[error("iso-surface is empty")]
    EmptySurface,

    #[error("label {label} is empty in at least one volume")]
    EmptySet { label: usize },

    #[error("phantom chambers conflict: {0}")]
    OverlapConflict(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("NIfTI: {0}")]
    Nifti(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
