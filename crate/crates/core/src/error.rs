use thiserror::Error;

/// Errors surfaced by the simulation and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("operation requires a smooth block but the model is elliptic (d_S = 0)")]
    EllipticModel,

    #[error("hypoellipticity violated: a_S is not positive definite ({0})")]
    HypoellipticityViolation(String),

    #[error("degenerate covariance at particle {particle}, step {step}: {detail}")]
    DegenerateCovariance {
        particle: usize,
        step: usize,
        detail: String,
    },

    #[error("non-finite value in dataset: {0}")]
    Data(String),

    #[error("state blow-up at time {time} for particle {particle} (|x| > {guard})")]
    Blowup {
        time: f64,
        particle: usize,
        guard: f64,
    },

    #[error("objective non-finite at the initial point: {0}")]
    Initialization(String),

    #[error("one-step map is not affine in hidden coordinate {coord}: {detail}")]
    NotConditionallyLinear { coord: usize, detail: String },

    #[error("innovation covariance not positive definite at step {step}, particle {particle}")]
    FilterDegeneracy { step: usize, particle: usize },

    #[error("dense oracle size limit exceeded: n = {n} (max {max_n}), N = {n_particles} (max {max_particles})")]
    OracleSize {
        n: usize,
        max_n: usize,
        n_particles: usize,
        max_particles: usize,
    },

    #[error("model structure unsupported by this objective: {0}")]
    Structure(String),

    #[error("too few replicates: got {got}, need at least {need}")]
    InsufficientReplicates { got: usize, need: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
