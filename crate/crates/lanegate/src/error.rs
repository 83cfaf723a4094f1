//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("position ({x:.3}, {y:.3}) is off the map (perpendicular distance {dist:.3} m)")]
    OffMap { x: f64, y: f64, dist: f64 },

    #[error("map cannot host {requested} vehicles (capacity ~{capacity})")]
    Capacity { requested: usize, capacity: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("reference path has {got} points, need at least {need}")]
    InsufficientReferencePath { got: usize, need: usize },

    #[error("invalid lane decision {decision} (n_lanes = {n_lanes})")]
    InvalidDecision { decision: usize, n_lanes: usize },

    #[error("checkpoint was trained against observation schema {stored}, current schema is {current}")]
    SchemaMismatch { stored: String, current: String },

    #[error("malformed trace at line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },

    #[error("no manifest for threshold {0}")]
    MissingManifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;
