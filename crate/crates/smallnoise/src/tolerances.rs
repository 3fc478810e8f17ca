//! Tolerances and guard thresholds used throughout the crate.
//!
//! Every numerical cutoff that downstream code or the acceptance tests depend
//! on lives here as a named constant, so changing one is a single-line diff
//! and the rationale sits next to the value.

/// Relative Hamiltonian-conservation budget for one flow: the drift
/// max_t |H(x(t),p(t)) - C| must stay below `TOL_CONSERVE * (1 + |C|)`.
/// The conserved value doubles as an integrator accuracy monitor.
pub const TOL_CONSERVE: f64 = 1e-8;

/// A conservation defect beyond `CONSERVE_HARD_FACTOR * TOL_CONSERVE * (1+|C|)`
/// aborts the flow with an accuracy error instead of returning a path.
pub const CONSERVE_HARD_FACTOR: f64 = 100.0;

/// State sup-norm at which a flow is declared divergent.
pub const FLOW_BLOWUP_GUARD: f64 = 1e12;

/// Minimum admissible RK4 step count; also forced even so the Simpson energy
/// quadrature is always applicable.
pub const MIN_STEPS: usize = 16;

/// Boundary-residual convergence threshold for the shooting Newton iteration
/// (sup norm over the l endpoint equations and d-l transversality equations).
pub const TOL_BVP: f64 = 1e-9;

/// Maximum damped-Newton iterations per start before the start is abandoned.
pub const MAX_NEWTON_ITERS: usize = 60;

/// Converged covectors closer than `TOL_DEDUP * (1 + |p0|)` in sup norm are
/// the same solution; the representative with the smaller residual is kept.
pub const TOL_DEDUP: f64 = 1e-5;

/// Energy tie band: solutions within `TOL_ENERGY_TIE * (1 + min)` of the
/// minimal energy count as minimizers.
pub const TOL_ENERGY_TIE: f64 = 1e-6;

/// More distinct minimizers than this marks a continuum candidate (a
/// rotationally invariant family, say) rather than a finite set.
pub const CONTINUUM_THRESHOLD: usize = 8;

/// Singular-value cutoff for invertibility of the deterministic Malliavin
/// covariance: invertible iff `sigma_min > TOL_SV * sigma_max`.
pub const TOL_SV: f64 = 1e-7;

/// Focality cutoff on the Hadamard-normalized determinant |det M| / prod(row
/// norms). Below this the endpoint is focal. A root that sits exactly on a
/// focal boundary but is only solved to the 1e-9 shooting residual leaves a
/// normalized determinant of a few 1e-5 behind once the flow Jacobian
/// amplifies the covector error, so the cutoff must sit above that floor;
/// genuinely non-focal catalogue cases stay above 1e-1.
pub const TOL_FOCAL: f64 = 1e-4;

/// Normalized determinants within `UNDECIDED_FACTOR * TOL_FOCAL` of the focal
/// cutoff yield verdict UNDECIDED rather than a guess either way.
pub const UNDECIDED_FACTOR: f64 = 100.0;

/// Smallest tangent-space eigenvalue of the discretized second variation that
/// still counts as degenerate (after normalization by the discrete H-norm).
pub const TOL_HESS_EIG: f64 = 1e-3;

/// Minimum control-grid resolution for the Hessian oracle.
pub const MIN_ORACLE_GRID: usize = 16;

/// Maximum nested Lie-bracket depth explored by the Hormander rank check.
pub const MAX_BRACKET_DEPTH: usize = 4;

/// Relative rank cutoff for pointwise span computations (ellipticity witness,
/// bracket spans): directions below `TOL_RANK * sigma_max` do not count.
pub const TOL_RANK: f64 = 1e-8;

/// Central-difference step for Jacobian cross-checks of hand-coded and
/// polynomial field derivatives.
pub const FD_JACOBIAN_STEP: f64 = 1e-5;

/// Relative agreement required between analytic and finite-difference field
/// Jacobians.
pub const FD_JACOBIAN_RTOL: f64 = 1e-6;

/// Relative agreement required between the variational-equation flow Jacobian
/// and its finite-difference counterpart.
pub const TOL_FLOW_JAC_FD: f64 = 1e-4;

/// Double-entry bookkeeping band for the two energy computations:
/// |direct - invariant| <= TOL_ENERGY_PAIR * (1 + energy).
pub const TOL_ENERGY_PAIR: f64 = 1e-8;

/// Componentwise agreement required between the transversality-multiplier
/// energy gradient and its finite-difference cross-check, relative to
/// `1 + |q(a)|`.
pub const TOL_GRAD_AGREE: f64 = 1e-4;

/// Target perturbation used by the finite-difference energy gradient:
/// `delta = FD_TARGET_STEP * (1 + |a|)`.
pub const FD_TARGET_STEP: f64 = 1e-4;

/// A perturbed boundary value problem whose energy jumps by more than
/// `BRANCH_SWITCH_FACTOR * delta * |q(a)|` (plus a second-order slack) has
/// converged to a different branch; differentiating across it is meaningless.
pub const BRANCH_SWITCH_FACTOR: f64 = 10.0;

/// Consistency band for re-checking a converged boundary residual on a grid
/// with doubled step count; beyond `RECHECK_FACTOR * TOL_BVP` the root is an
/// artifact of the discretization and is discarded.
pub const RECHECK_FACTOR: f64 = 100.0;

/// Minimum Monte Carlo path count.
pub const MC_MIN_PATHS: usize = 1000;

/// A censored-path fraction above this invalidates a Monte Carlo run: mass is
/// escaping to infinity faster than the localization assumption allows.
pub const MC_MAX_CENSOR_FRACTION: f64 = 1e-3;

/// Bootstrap resamples used for the kernel density standard error.
pub const BOOTSTRAP_RESAMPLES: usize = 100;
