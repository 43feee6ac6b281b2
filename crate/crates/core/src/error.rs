use thiserror::Error;

use crate::synthdata::TileId;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] gradkit::GradError),
    #[error("invalid corpus spec: {0}")]
    CorpusSpec(String),
    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(u8),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown transform `{0}`")]
    UnknownTransform(String),
    #[error("not enough {class} tiles: need {needed}, have {available}")]
    InsufficientTiles {
        class: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("tile {0} has no mask")]
    MissingMask(TileId),
    #[error("duplicate tile id {0}")]
    DuplicateTile(TileId),
    #[error("tile {0} appears in both the pool and the test set")]
    PoolTestOverlap(TileId),
    #[error("invalid model config: {0}")]
    ModelConfig(String),
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("acquisition: {0}")]
    Acquisition(String),
    #[error("AUC undefined: {0}")]
    AucUndefined(String),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("invalid experiment config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("corpus format: {0}")]
    CorpusFormat(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
