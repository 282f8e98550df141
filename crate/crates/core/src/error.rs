use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the fusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("pixel value {value} at ({row}, {col}) outside [0, 1]")]
    Range { row: usize, col: usize, value: f64 },

    #[error("label {label} at ({row}, {col}) is not below class count {class_count}{}", file_suffix(.file))]
    Label {
        row: usize,
        col: usize,
        label: u32,
        class_count: usize,
        file: Option<PathBuf>,
    },

    #[error("every pixel is excluded by the class mask")]
    Mask,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss in {phase} phase at epoch {epoch}, batch {batch} (ids: {ids})")]
    NonFiniteLoss {
        phase: String,
        epoch: usize,
        batch: usize,
        ids: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("phase ordering: {0}")]
    PhaseOrder(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn file_suffix(file: &Option<PathBuf>) -> String {
    match file {
        Some(p) => format!(" in {}", p.display()),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
