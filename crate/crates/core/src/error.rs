use thiserror::Error;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SimError {
    /// Invalid user-supplied configuration. The string names the offending key where known.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// An internal protocol invariant broke (window advanced before drain, wrong-version push, ...).
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// The event queue ran dry before the stop condition held.
    #[error("deadlock at t={time:.3}s: {diagnostic}")]
    Deadlock { time: f64, diagnostic: String },

    /// Orchestrator could not give every live version at least one DP group.
    #[error("starvation: {versions} versions with work but only {groups} DP groups")]
    Starvation { versions: usize, groups: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SimError::Config(msg.into())
    }

    pub(crate) fn pre(msg: impl Into<String>) -> Self {
        SimError::Precondition(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        SimError::Protocol(msg.into())
    }
}
