use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    /// A track whose bearings cannot pin down its 3D point (fewer than two
    /// observations, or parallel bearings). `track` is the track id, or the
    /// position in the input slice where no id is attached.
    #[error("degenerate track {track}: {reason}")]
    DegenerateTrack { track: u64, reason: String },

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("ambiguous sign: {positive} positive vs {negative} negative depths")]
    AmbiguousSign { positive: usize, negative: usize },

    #[error("underconstrained: {equations} equations for {unknowns} unknowns ({tracks} tracks, {observations} observations)")]
    Underconstrained {
        equations: usize,
        unknowns: usize,
        tracks: usize,
        observations: usize,
    },

    #[error("metric scale is unobservable with zero acceleration")]
    ScaleUnobservable,

    #[error("singular system: relative pivot {pivot:e}")]
    SingularSystem { pivot: f64 },

    #[error("insufficient data: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("dense reference too large: {entries} entries")]
    OracleTooLarge { entries: usize },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("experiment failed: {failures} of {trials} trials failed")]
    Experiment { failures: usize, trials: usize },
}
