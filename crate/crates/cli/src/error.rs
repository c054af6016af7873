use thiserror::Error;

/// Failure classes with stable process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration, arguments or incompatible inputs (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// Divergence, non-finite gradients or a failed verification (exit 3).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Anything else, typically I/O (exit 1).
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<comp_attn::Error> for CliError {
    fn from(e: comp_attn::Error) -> Self {
        use comp_attn::Error as E;
        match e {
            E::Dimension { .. } | E::Contract(_) | E::Incompatible(_) | E::Json(_) => CliError::Config(e.to_string()),
            E::DegenerateSlice { .. } | E::NonFiniteGradient { .. } | E::Diverged { .. } => {
                CliError::Numeric(e.to_string())
            }
            E::Io(io) => CliError::Other(io.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}
