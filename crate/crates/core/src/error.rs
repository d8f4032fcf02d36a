use alloc::string::String;

/// Errors shared across the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// Two objects that must agree in dimension do not.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An argument fell outside the function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input is degenerate for the requested operation (e.g. a zero vector
    /// where a direction is required).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The operation is not defined for this variant (e.g. accuracy of a
    /// regression model).
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A gradient step size left a negative self-attention weight in strict
    /// mode.
    #[error("step size too large: self-weight {diagonal} < 0 in row {row}")]
    StepSizeTooLarge { row: usize, diagonal: f64 },

    /// A local solve produced a non-finite iterate.
    #[error("numerical divergence{}", divergence_site(.client, .round))]
    NumericalDivergence {
        client: Option<usize>,
        round: Option<usize>,
    },

    /// Not enough data to run a statistical test.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// An experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A byte stream does not follow the expected file format.
    #[error("format error: {0}")]
    Format(String),
}

fn divergence_site(client: &Option<usize>, round: &Option<usize>) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    if let Some(c) = client {
        let _ = write!(s, " in client {c}");
    }
    if let Some(r) = round {
        let _ = write!(s, " at round {r}");
    }
    s
}

impl Error {
    /// Attach client/round context to a divergence error; other errors pass
    /// through unchanged.
    pub(crate) fn at_client_round(self, client: usize, round: usize) -> Self {
        match self {
            Error::NumericalDivergence { .. } => Error::NumericalDivergence {
                client: Some(client),
                round: Some(round),
            },
            other => other,
        }
    }
}
