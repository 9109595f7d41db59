use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("bath generator has a degenerate zero mode (second singular value ratio {ratio:.3e}); the bath is disconnected")]
    DegenerateBath { ratio: f64 },

    #[error("imaginary residue {residue:.3e} in {quantity} exceeds tolerance {tolerance:.1e}")]
    ImaginaryResidue {
        quantity: &'static str,
        residue: f64,
        tolerance: f64,
    },

    #[error("eigen decomposition failed: {0}")]
    Eigen(String),

    #[error("root search failed: {reason} (bracket [{lo:.6e}, {hi:.6e}])")]
    RootNotFound { reason: String, lo: f64, hi: f64 },

    #[error("finite-difference step h = {h:.1e} is below the noise floor; try h >= {suggested:.1e}")]
    StepTooSmall { h: f64, suggested: f64 },

    #[error("integrator failed at t = {t_reached:.6e}: {reason}")]
    Integrator { t_reached: f64, reason: String },

    #[error("count truncation cap {n_max} reached with tail mass {tail_mass:.3e}")]
    TruncationCap { n_max: usize, tail_mass: f64 },

    #[error("degenerate phases: the two bath states have equal intensity ({intensity:.6e})")]
    DegeneratePhases { intensity: f64 },

    #[error("quadrature did not converge; try a horizon of at least {suggested_horizon:.3e}")]
    Quadrature { suggested_horizon: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty record set")]
    EmptyRecords,

    #[error("config: {0}")]
    Config(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::DegenerateBath { .. } => "degenerate_bath",
            Error::ImaginaryResidue { .. } => "imaginary_residue",
            Error::Eigen(_) => "eigen",
            Error::RootNotFound { .. } => "root_not_found",
            Error::StepTooSmall { .. } => "step_too_small",
            Error::Integrator { .. } => "integrator",
            Error::TruncationCap { .. } => "truncation_cap",
            Error::DegeneratePhases { .. } => "degenerate_phases",
            Error::Quadrature { .. } => "quadrature",
            Error::Unsupported(_) => "unsupported",
            Error::EmptyRecords => "empty_records",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}
