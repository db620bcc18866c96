use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({x}, {y}) lies outside the closed unit disk")]
    OutsideDisk { x: f64, y: f64 },

    #[error("trapped geodesic: no exit within max flow time {max_time} (system is not simple)")]
    Trapped { max_time: f64 },

    #[error("conjugate point: no c <= 2^20 makes the Jacobi combination nonvanishing ({0})")]
    ConjugatePoint(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("expression parse error at column {column}: {message}")]
    Parse { column: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    NotSimple(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
