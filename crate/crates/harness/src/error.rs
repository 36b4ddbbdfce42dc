use crate::config::Cell;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing baseline: {0}")]
    MissingBaseline(String),

    #[error("{cell}: {source}")]
    InCell {
        cell: Cell,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Core(#[from] biastrial_core::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Core(biastrial_core::Error::Config(msg.into()))
    }

    pub fn root(&self) -> &Error {
        match self {
            Error::InCell { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit status: 2 configuration, 3 numeric, 4 missing baseline,
    /// 1 anything else (I/O, corrupt artifacts).
    pub fn exit_code(&self) -> i32 {
        use biastrial_core::Error as E;
        match self.root() {
            Error::MissingBaseline(_) => 4,
            Error::Core(E::Numeric(_)) => 3,
            Error::Core(E::Config(_) | E::Shape { .. } | E::UnknownLabel(_) | E::Arity { .. } | E::Cardinality { .. } | E::Rank(_)) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Core(e.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Core(e.into())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Core(biastrial_core::Error::Format(e.to_string()))
    }
}

pub trait Context<T> {
    fn in_cell(self, cell: Cell) -> Result<T>;
}

impl<T, E: Into<Error>> Context<T> for std::result::Result<T, E> {
    fn in_cell(self, cell: Cell) -> Result<T> {
        self.map_err(|e| match e.into() {
            e @ Error::InCell { .. } => e,
            e => Error::InCell { cell, source: Box::new(e) },
        })
    }
}
