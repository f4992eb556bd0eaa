//! Error type shared by all core modules.

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Input signal shorter than the minimum an operation can process.
    #[error("input too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    /// Configuration violates a documented invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An operation received no usable data (empty input, zero valid
    /// frames, all targets ignored, ...).
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A value is outside its documented domain (bad label id,
    /// nonpositive class weight, ...).
    #[error("invalid value: {0}")]
    InvalidValue(String),
}
