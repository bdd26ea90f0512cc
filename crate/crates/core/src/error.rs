use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sensing agent {id} is inactive")]
    UnavailableSensor { id: u32 },

    #[error("degenerate geometry: predicted range {range:.3e} m to anchor {anchor_id} is below the linearization floor")]
    DegenerateGeometry { anchor_id: u32, range: f64 },

    #[error("empty schedule: no observation rows to stack")]
    EmptySchedule,

    #[error("numerical failure in {what} (condition number {condition:.3e})")]
    Numerical { what: &'static str, condition: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("graph construction error: {0}")]
    Graph(String),

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("at QI {qi}: {source}")]
    AtQi {
        qi: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_qi(self, qi: usize) -> Self {
        match self {
            e @ Error::AtQi { .. } => e,
            e => Error::AtQi {
                qi,
                source: Box::new(e),
            },
        }
    }

    /// Strips any QI context and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtQi { source, .. } => source.root(),
            e => e,
        }
    }
}
