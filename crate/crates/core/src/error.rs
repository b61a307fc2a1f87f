use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("particle density {particle} kg/m^3 does not exceed fluid density {fluid} kg/m^3")]
    NeutralBuoyancy { particle: f64, fluid: f64 },

    #[error("particle radius {radius} m does not fit in a channel of spacing {spacing} m")]
    SizeOutOfChannel { radius: f64, spacing: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid size grid: {0}")]
    InvalidGrid(String),

    #[error("invalid bag schedule: {0}")]
    InvalidSchedule(String),

    #[error("elutriated fraction {fraction} not reached before t = {horizon} s")]
    NoBracket { fraction: f64, horizon: f64 },

    #[error("equality and bound constraints admit no feasible point")]
    Infeasible,

    #[error("active-set loop exceeded {limit} iterations")]
    MaxIterations { limit: usize },

    #[error("ill-posed problem: {0}")]
    IllPosed(String),

    #[error("problems cannot be combined: {0}")]
    GridMismatch(String),

    #[error("reference distribution has zero L2 norm")]
    DegenerateReference,

    #[error("empty regularization grid")]
    EmptyGrid,
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
