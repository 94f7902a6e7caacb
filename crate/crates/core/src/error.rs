use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate margin: {0}")]
    Degenerate(String),
    #[error("value {value} at index {index} lies outside the margin grid [{lo}, {hi}]")]
    Extrapolation { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
