use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across model loading, integration, shooting,
/// certification and Monte Carlo validation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed model config: {0}")]
    Config(String),

    #[error("unknown builtin model `{0}`")]
    UnknownBuiltin(String),

    #[error("unknown parameter `{name}` for builtin `{builtin}`")]
    UnknownParameter { builtin: String, name: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("field index {index} out of range (system has {m} diffusion fields)")]
    FieldIndex { index: usize, m: usize },

    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("step count {0} is invalid: need an even count of at least 16")]
    BadStepCount(usize),

    #[error("Simpson rule needs an even panel count, got {0} panels")]
    OddSimpsonGrid(usize),

    #[error("flow diverged at t = {t:.6}: state norm {norm:.3e} exceeds guard")]
    FlowDiverged { t: f64, norm: f64 },

    #[error(
        "Hamiltonian drifted by {defect:.3e} along the flow (budget {budget:.3e}); \
         the integrator step is too coarse for this trajectory"
    )]
    EnergyDrift { defect: f64, budget: f64 },

    #[error("no admissible control found: {converged} of {attempted} starts converged")]
    NoAdmissibleControl { attempted: usize, converged: usize },

    #[error(
        "degenerate target: the zero control reaches `a` exactly and the deterministic \
         Malliavin covariance C(0) is singular, so no expansion exists at this point"
    )]
    DegenerateTarget,

    #[error(
        "branch switch while differentiating the energy: perturbing coordinate {coord} \
         of the target jumped the energy by {jump:.3e} (threshold {threshold:.3e})"
    )]
    BranchSwitch {
        coord: usize,
        jump: f64,
        threshold: f64,
    },

    #[error("rank-deficient {what}: rank {rank} < {needed}")]
    RankDeficient {
        what: &'static str,
        rank: usize,
        needed: usize,
    },

    #[error("matrix passed to {0} is not symmetric")]
    Asymmetric(&'static str),

    #[error("bracket depth {0} exceeds the supported maximum")]
    BracketDepth(usize),

    #[error(
        "density not estimable at the target: every kernel weight underflowed \
         (nearest sample at distance {nearest:.3e})"
    )]
    TargetUnreached { nearest: f64 },

    #[error("Monte Carlo config invalid: {0}")]
    McConfig(String),

    #[error("eigendecomposition failed in {0}")]
    EigenFailure(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
