use thiserror::Error;

/// Errors raised by the inference routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SmcError {
    /// Every particle ended up with zero weight.
    #[error("degenerate weights at step {step}: every particle has zero weight")]
    DegenerateWeights { step: usize },

    /// The algorithm needs a transition density the model does not provide.
    #[error("{algorithm} requires a transition density, but the model's state evolution has none")]
    MissingTransitionDensity { algorithm: &'static str },

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    /// Backward smoothing found a particle with smoothing mass that no
    /// filter particle at the previous step can reach.
    #[error("degenerate bridge at step {step}: particle {particle} of step {next} is unreachable", next = step + 1)]
    DegenerateBridge { step: usize, particle: usize },

    /// Exact recursion hit an observation that no state can emit.
    #[error("degenerate model at step {step}: observation has zero probability under every state")]
    DegenerateModel { step: usize },

    #[error("all particles have zero weight at tempering exponent {phi}")]
    TemperingDegenerate { phi: f64 },

    #[error("weight vector is not normalized")]
    NotNormalized,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T, E = SmcError> = std::result::Result<T, E>;
