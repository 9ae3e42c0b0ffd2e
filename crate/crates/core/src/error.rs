use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: String, reason: String },

    #[error("step size {dt} too large: dt * {rate} = {product} exceeds {limit}")]
    StepTooLarge { dt: f64, rate: f64, product: f64, limit: f64 },

    #[error("integrator blow-up (trace before repair {trace:e})")]
    Blowup { trace: f64 },

    #[error("{aborted} of {total} trajectories aborted, above the 1% limit")]
    TooManyAborts { aborted: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub(crate) fn param(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::InvalidParameter { key: key.into(), reason: reason.into() }
    }
}
