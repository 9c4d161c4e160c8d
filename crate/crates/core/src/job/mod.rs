//! Job-level orchestration: configuration, the sequential run driver, and
//! the error type shared by both.

pub mod config;
pub mod run;

pub use config::JobConfig;
pub use run::{run_job, JobReport, JobStatus, RunOptions};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum JobError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] crate::template::TemplateError),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
    #[error(transparent)]
    Dialogue(#[from] crate::dialogue::DialogueError),
    #[error(transparent)]
    Assemble(#[from] crate::assemble::AssembleError),
    #[error(transparent)]
    Schema(#[from] crate::schema::SchemaError),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
