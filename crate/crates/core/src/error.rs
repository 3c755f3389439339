use thiserror::Error;

use crate::netlist::{ElaborationError, ParseError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Elaboration(#[from] ElaborationError),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("query text is empty")]
    EmptyQuery,
    #[error("code has too few tokens")]
    EmptyCode,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("pipeline configuration: {0}")]
    PipelineConfig(String),
    #[error("checker unavailable: {0}")]
    CheckerUnavailable(String),
    #[error("no benchmark tasks found in {0}")]
    NoTasks(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
