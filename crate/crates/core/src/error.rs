use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("parties are not row-aligned: {0}")]
    Alignment(String),

    #[error("feature sets overlap: {0}")]
    Overlap(String),

    #[error("{parties} data parties exceed the limit of {limit} for this method; use permutation sampling")]
    Scale { parties: usize, limit: usize },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("server misbehavior detected on query {query_id}: {detail}")]
    Misbehavior { query_id: u64, detail: String },

    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),
}
