use thiserror::Error;

/// Errors shared by every probe in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {value} lies outside the domain {domain}")]
    Domain { value: String, domain: String },

    #[error("orbit reached the critical set at step {index} (distance {distance:e})")]
    Singularity { index: usize, distance: f64 },

    #[error("observable returned a non-finite value at orbit index {index}")]
    Evaluation { index: usize },

    #[error("map `{map}` does not support {capability}")]
    Capability { map: String, capability: &'static str },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("cannot cover mass {target} with balls centred at samples (covered {covered})")]
    ImpossibleCover { target: f64, covered: f64 },

    #[error("no hyperbolic time at or beyond {n} within horizon {horizon}")]
    Horizon { n: usize, horizon: usize },

    #[error("range error: {0}")]
    Range(String),
}

pub type Result<T> = std::result::Result<T, Error>;
