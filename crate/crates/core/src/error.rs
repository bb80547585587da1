use thiserror::Error;

/// Errors raised anywhere in the laboratory.
///
/// The CLI maps [`LabError::is_validation`] to exit code 2 and every other
/// variant to exit code 3.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("not Fano-anticanonical: {0}")]
    NotFano(String),
    #[error("representation mismatch: {0}")]
    RepresentationMismatch(String),
    #[error("box too small: {0}")]
    BoxTooSmall(String),
    #[error("box too small for gauge: {0}")]
    GaugeEscape(String),
    #[error("convexity lost at node {node} (x = {x:?}): {detail}")]
    ConvexityLost {
        node: usize,
        x: Vec<f64>,
        detail: String,
    },
    #[error("resolution insufficient: {0}")]
    ResolutionInsufficient(String),
    #[error("operator convention broken: {0}")]
    OperatorConvention(String),
    #[error("normalization inconsistency: {0}")]
    NormalizationInconsistency(String),
    #[error("normalization: {0}")]
    Normalization(String),
    #[error("Futaki residual or operator calibration broken: {0}")]
    IdentityBroken(String),
    #[error("Newton did not converge after {iterations} iterations (residual {residual:.3e}, last iterate {last:?})")]
    NewtonFailed {
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },
    #[error("entropy minimization did not converge after {iterations} iterations (residual {residual:.3e}, best lambda {lambda})")]
    MinimizerNotConverged {
        iterations: usize,
        residual: f64,
        lambda: f64,
    },
    #[error("minimizer degeneracy: {0}")]
    MinimizerDegeneracy(String),
    #[error("flow step collapse at t = {t}: {detail}")]
    StepCollapse { t: f64, detail: String },
    #[error("insufficient cadence: {0}")]
    InsufficientCadence(String),
    #[error("flow not converged: {0}")]
    NotConverged(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl LabError {
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LabError::Invalid(_)
                | LabError::NotFano(_)
                | LabError::RepresentationMismatch(_)
                | LabError::BoxTooSmall(_)
                | LabError::GaugeEscape(_)
                | LabError::Parse(_)
                | LabError::Io(_)
        )
    }

    /// Short machine-readable tag used in the CLI error tail.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Invalid(_) => "invalid",
            LabError::NotFano(_) => "not_fano",
            LabError::RepresentationMismatch(_) => "representation_mismatch",
            LabError::BoxTooSmall(_) => "box_too_small",
            LabError::GaugeEscape(_) => "gauge_escape",
            LabError::ConvexityLost { .. } => "convexity_lost",
            LabError::ResolutionInsufficient(_) => "resolution_insufficient",
            LabError::OperatorConvention(_) => "operator_convention",
            LabError::NormalizationInconsistency(_) => "normalization_inconsistency",
            LabError::Normalization(_) => "normalization",
            LabError::IdentityBroken(_) => "identity_broken",
            LabError::NewtonFailed { .. } => "newton_failed",
            LabError::MinimizerNotConverged { .. } => "minimizer_not_converged",
            LabError::MinimizerDegeneracy(_) => "minimizer_degeneracy",
            LabError::StepCollapse { .. } => "step_collapse",
            LabError::InsufficientCadence(_) => "insufficient_cadence",
            LabError::NotConverged(_) => "not_converged",
            LabError::MissingData(_) => "missing_data",
            LabError::Singular(_) => "singular",
            LabError::Io(_) => "io",
            LabError::Parse(_) => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
