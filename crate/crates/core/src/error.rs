use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Phase clocks that cannot come from a two-phase controller.
    #[error("invalid signal state: {0}")]
    InvalidState(String),

    /// A rate, length or content outside its physical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The queue tail reached the upstream intersection (L_n - x*l <= 0).
    #[error("blocking violation at t={time}: queue content {content} fills the road{}", link.map(|k| format!(" of link {}", k + 1)).unwrap_or_default())]
    Blocking {
        link: Option<usize>,
        time: f64,
        content: f64,
    },

    /// A modelling assumption (burst FIFO, horizon, ...) did not hold.
    #[error("assumption violated: {0}")]
    Assumption(String),

    /// An event-time derivative with a vanishing denominator.
    #[error("degenerate {event} event at t={time}: denominator {denominator:e}")]
    Degenerate {
        event: &'static str,
        time: f64,
        denominator: f64,
    },

    #[error("malformed data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A replication failed; carries the seed so the path can be replayed.
    #[error("sample path with seed {seed} failed: {source}")]
    Path {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: line {line}, column {column}: {message}")]
    Schema {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: invariant `{invariant}` violated: {detail}")]
    Invariant {
        path: String,
        invariant: &'static str,
        detail: String,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
