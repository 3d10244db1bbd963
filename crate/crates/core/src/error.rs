use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes surfaced by the synthesis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid plant: {0}")]
    InvalidPlant(String),

    /// Channel index is 1-based in the message.
    #[error("C_{} is zero", .0 + 1)]
    ZeroChannel(usize),

    #[error("hypotheses violated: {0}")]
    HypothesesViolated(String),

    #[error("source component {{{}}} is not jointly observable", labels(.0))]
    SourceNotObservable(Vec<usize>),

    #[error("gain search exhausted after {attempts} attempts")]
    AttemptsExhausted { attempts: usize },

    #[error("pair is not controllable")]
    NotControllable,

    #[error("single-input reduction failed after {0} retries")]
    ReductionFailed(usize),

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("missing gain entry for pair ({}, {})", .0 + 1, .1 + 1)]
    MissingGain(usize, usize),

    #[error("uncertified input: {0}")]
    Uncertified(String),

    #[error("compensator design did not converge after {restarts} restarts (best pairing error {best_error:.3e})")]
    CompensatorNonConvergence {
        restarts: usize,
        best_error: f64,
        best_spectrum: Vec<(f64, f64)>,
    },

    #[error("eigenvalue computation did not converge")]
    EigenFailure,

    #[error("step size guard violated: dt * spectral radius = {0:.3} (must be < 1)")]
    StepSizeGuard(f64),

    #[error("all samples at floor")]
    AllSamplesAtFloor,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn labels(v: &[usize]) -> String {
    v.iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join(",")
}
