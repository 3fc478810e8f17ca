//! Two-point boundary value problem for energy-minimizing controls.
//!
//! A minimizing control steering the limiting ODE from x0 into the fiber
//! {P x = a} lifts to an extremal of the Hamiltonian flow with boundary
//! conditions
//!
//! ```text
//!   x(0) = x0,   P x(T) = a,   p(T) = (q, 0)   (transversality),
//! ```
//!
//! i.e. the last d - l covector components vanish at the terminal time. The
//! shooting map sends an initial covector p0 to the defect
//!
//! ```text
//!   F(p0) = ( P x(T) - a,  p(T)[l..] )  in R^d,
//! ```
//!
//! a square system solved by damped Newton iteration on many starts. Distinct
//! converged roots are deduplicated, ranked by energy, and the global minima
//! (up to a tie tolerance) are reported as minimizers. A surplus of tied
//! minimizers signals a continuum of minimizing controls, which already
//! violates the non-degeneracy assumptions downstream.
//!
//! Grid discipline: Newton runs on `steps` RK4 steps, converged roots are
//! re-polished on a doubled grid, and the polished root is re-evaluated on a
//! quadrupled grid. A root whose refined residual collapses is a genuine
//! extremal; one that does not is a discretization artifact and is dropped.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{
    energy_invariant, flow, flow_jacobian, seed_p0, CotangentPoint, Direction, PhasePath,
};
use crate::model::VectorFieldSystem;
use crate::numeric::{halton, svd_solve, HALTON_BASES};
use crate::tolerances::{
    CONTINUUM_THRESHOLD, MAX_NEWTON_ITERS, MIN_STEPS, RECHECK_FACTOR, TOL_BVP, TOL_DEDUP,
    TOL_ENERGY_TIE,
};

/// Where the projected diffusion should end up: `a[i]` prescribes the
/// coordinate `mask[i]` of the state at time `horizon`.
#[derive(Clone, Debug)]
pub struct TargetSpec {
    pub a: DVector<f64>,
    pub horizon: f64,
}

impl TargetSpec {
    pub fn new(a: DVector<f64>, horizon: f64) -> Self {
        TargetSpec { a, horizon }
    }
}

#[derive(Clone, Debug)]
pub struct MultistartConfig {
    /// Number of low-discrepancy starts in the search box.
    pub n_lowdisc: usize,
    /// Number of Gaussian starts around the origin.
    pub n_normal: usize,
    pub seed: u64,
    /// Half-width of the low-discrepancy box; scaled from the target distance
    /// when absent.
    pub box_halfwidth: Option<f64>,
    /// RK4 steps for the Newton stage (polish doubles, recheck quadruples).
    pub steps: usize,
    pub max_iters: usize,
}

impl Default for MultistartConfig {
    fn default() -> Self {
        MultistartConfig {
            n_lowdisc: 64,
            n_normal: 64,
            seed: 0,
            box_halfwidth: None,
            steps: 1024,
            max_iters: MAX_NEWTON_ITERS,
        }
    }
}

/// A converged extremal satisfying both boundary conditions.
#[derive(Clone, Debug)]
pub struct Minimizer {
    /// Initial covector (internal coordinate order).
    pub p0: DVector<f64>,
    /// Polished path on the doubled grid.
    pub path: PhasePath,
    /// (1/2) integral |hdot|^2 dt.
    pub energy: f64,
    /// The same energy through the conserved Hamiltonian; the pair must agree.
    pub energy_invariant: f64,
    /// Shooting defect of the polished root (sup norm).
    pub residual_norm: f64,
    /// Defect of the same root re-evaluated on the quadrupled grid.
    pub residual_doubled: f64,
    /// Terminal covector head p(T)[..l]; the Lagrange multiplier of the
    /// target constraint, hence the gradient of the minimal energy in a.
    pub q_terminal: DVector<f64>,
    pub x_terminal: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct MinimizerSet {
    /// Global minimizers (ties within the energy tolerance), sorted by
    /// (energy, lexicographic p0).
    pub minimizers: Vec<Minimizer>,
    /// Every distinct converged extremal, minimizing or not.
    pub solutions: Vec<Minimizer>,
    /// More tied minimizers than [`CONTINUUM_THRESHOLD`]: the minimizing set
    /// is (numerically) a positive-dimensional family.
    pub continuum_flag: bool,
    /// The zero control already steers to the target (Lambda = 0), so the
    /// density does not decay exponentially and the expansion degenerates.
    pub degenerate_zero_control: bool,
    /// Minimal energy Lambda(a).
    pub lambda: f64,
    pub attempted: usize,
    pub converged: usize,
}

fn validate_target(sys: &VectorFieldSystem, target: &TargetSpec, steps: usize) -> Result<()> {
    if target.a.len() != sys.l() {
        return Err(Error::Dimension {
            what: "target point",
            expected: sys.l(),
            got: target.a.len(),
        });
    }
    if target.a.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("target point"));
    }
    if !target.horizon.is_finite() || target.horizon <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "horizon must be positive and finite, got {}",
            target.horizon
        )));
    }
    if steps < MIN_STEPS || steps % 2 != 0 {
        return Err(Error::BadStepCount(steps));
    }
    Ok(())
}

/// Shooting defect of an initial covector: (P x(T) - a, p(T)[l..]).
pub fn shoot_residual(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    p0: &DVector<f64>,
    steps: usize,
) -> Result<(DVector<f64>, PhasePath)> {
    let start = CotangentPoint::new(sys.x0().clone(), p0.clone());
    let path = flow(sys, &start, target.horizon, steps, Direction::Forward)?;
    Ok((residual_of(sys, target, &path), path))
}

fn residual_of(sys: &VectorFieldSystem, target: &TargetSpec, path: &PhasePath) -> DVector<f64> {
    let (d, l) = (sys.d(), sys.l());
    let end = path.terminal();
    let mut f = DVector::zeros(d);
    for i in 0..l {
        f[i] = end.x[i] - target.a[i];
    }
    for j in l..d {
        f[j] = end.p[j];
    }
    f
}

/// Rows of the terminal-state Jacobian that the residual actually reads.
fn residual_jacobian(d: usize, l: usize, jac: &DMatrix<f64>) -> DMatrix<f64> {
    let mut jr = DMatrix::zeros(d, d);
    jr.view_mut((0, 0), (l, d)).copy_from(&jac.view((0, 0), (l, d)));
    jr.view_mut((l, 0), (d - l, d))
        .copy_from(&jac.view((d + l, 0), (d - l, d)));
    jr
}

/// Damped Newton iteration on the shooting map from one start. Returns the
/// converged covector with its defect and path, or None when the start stalls
/// or its flow blows up.
fn newton_from(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    start: &DVector<f64>,
    steps: usize,
    max_iters: usize,
) -> Option<(DVector<f64>, f64, PhasePath)> {
    let (d, l) = (sys.d(), sys.l());
    let seed = seed_p0(d);
    let mut p0 = start.clone();

    for _ in 0..max_iters {
        let origin = CotangentPoint::new(sys.x0().clone(), p0.clone());
        let (path, jac) =
            flow_jacobian(sys, &origin, target.horizon, steps, Direction::Forward, &seed).ok()?;
        let f = residual_of(sys, target, &path);
        if f.amax() <= TOL_BVP {
            return Some((p0, f.amax(), path));
        }

        let jr = residual_jacobian(d, l, &jac);
        let step = svd_solve(&jr, &(-&f), 1e-12).ok()?;
        if step.iter().any(|c| !c.is_finite()) {
            return None;
        }

        // Backtracking line search: accept the first damping factor with a
        // sufficient decrease of the defect.
        let fnorm = f.norm();
        let mut accepted = None;
        for k in 0..=10 {
            let lam = 0.5_f64.powi(k);
            let cand = &p0 + &step * lam;
            let Ok((fc, _)) = shoot_residual(sys, target, &cand, steps) else {
                continue;
            };
            if fc.norm() <= (1.0 - 1e-4 * lam) * fnorm {
                accepted = Some(cand);
                break;
            }
        }
        p0 = accepted?;
    }
    None
}

/// Full pipeline for one start: Newton on the base grid, polish on the
/// doubled grid, recheck on the quadrupled grid.
fn refine_start(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    start: &DVector<f64>,
    cfg: &MultistartConfig,
) -> Option<Minimizer> {
    let (coarse, _, _) = newton_from(sys, target, start, cfg.steps, cfg.max_iters)?;
    let (p0, residual_norm, path) = newton_from(sys, target, &coarse, 2 * cfg.steps, 15)?;
    let (f4, _) = shoot_residual(sys, target, &p0, 4 * cfg.steps).ok()?;
    let residual_doubled = f4.amax();
    if residual_doubled > RECHECK_FACTOR * TOL_BVP {
        // The root does not survive grid refinement: discretization artifact.
        return None;
    }
    let l = sys.l();
    let end = path.terminal();
    let energy_pair = energy_invariant(sys, &path).ok()?;
    Some(Minimizer {
        p0,
        energy: path.energy_direct,
        energy_invariant: energy_pair,
        residual_norm,
        residual_doubled,
        q_terminal: end.p.rows(0, l).into_owned(),
        x_terminal: end.x.clone(),
        path,
    })
}

fn build_starts(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    cfg: &MultistartConfig,
    guesses: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let d = sys.d();
    let dist = (&target.a - sys.project(sys.x0())).amax();
    let scale = (dist / target.horizon).max(1.0);
    let halfwidth = cfg.box_halfwidth.unwrap_or(8.0 * scale);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts: Vec<DVector<f64>> = Vec::new();
    starts.extend_from_slice(guesses);
    // The zero covector is always worth a try: it is the exact root whenever
    // the deterministic flow already hits the target.
    starts.push(DVector::zeros(d));

    // Low-discrepancy starts with a random shift (one shift for the whole
    // point set); only the first 8 dimensions have Halton bases, beyond that
    // the budget goes to the Gaussian starts.
    let mut n_normal = cfg.n_normal;
    if d <= HALTON_BASES.len() {
        let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        for k in 0..cfg.n_lowdisc {
            let mut p = DVector::zeros(d);
            for j in 0..d {
                let u = (halton(k as u64 + 1, HALTON_BASES[j]) + shift[j]).fract();
                p[j] = (2.0 * u - 1.0) * halfwidth;
            }
            starts.push(p);
        }
    } else {
        n_normal += cfg.n_lowdisc;
    }

    for _ in 0..n_normal {
        let mut p = DVector::zeros(d);
        for j in 0..d {
            p[j] = scale * rng.sample::<f64, _>(StandardNormal);
        }
        starts.push(p);
    }
    starts
}

fn lex_less(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// Enumerate extremals by multi-start shooting, with caller-provided warm
/// starts tried first.
pub fn enumerate_with_guesses(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    cfg: &MultistartConfig,
    guesses: &[DVector<f64>],
) -> Result<MinimizerSet> {
    validate_target(sys, target, cfg.steps)?;
    for g in guesses {
        if g.len() != sys.d() {
            return Err(Error::Dimension {
                what: "warm start covector",
                expected: sys.d(),
                got: g.len(),
            });
        }
    }

    let starts = build_starts(sys, target, cfg, guesses);
    let attempted = starts.len();
    let mut candidates: Vec<Minimizer> = starts
        .par_iter()
        .map(|s| refine_start(sys, target, s, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let converged = candidates.len();
    if candidates.is_empty() {
        return Err(Error::NoAdmissibleControl {
            attempted,
            converged,
        });
    }

    // Deduplicate roots: best defect first, then keep one representative per
    // cluster in p0.
    candidates.sort_by(|a, b| a.residual_norm.partial_cmp(&b.residual_norm).unwrap());
    let mut solutions: Vec<Minimizer> = Vec::new();
    for cand in candidates {
        let dup = solutions.iter().any(|kept| {
            (&cand.p0 - &kept.p0).amax() <= TOL_DEDUP * (1.0 + kept.p0.amax())
        });
        if !dup {
            solutions.push(cand);
        }
    }
    solutions.sort_by(|a, b| {
        a.energy
            .partial_cmp(&b.energy)
            .unwrap()
            .then_with(|| {
                if lex_less(&a.p0, &b.p0) {
                    std::cmp::Ordering::Less
                } else if lex_less(&b.p0, &a.p0) {
                    std::cmp::Ordering::Greater
                } else {
                    std::cmp::Ordering::Equal
                }
            })
    });

    let lambda = solutions[0].energy;
    let tie = lambda + TOL_ENERGY_TIE * (1.0 + lambda.abs());
    let minimizers: Vec<Minimizer> = solutions
        .iter()
        .filter(|s| s.energy <= tie)
        .cloned()
        .collect();
    let continuum_flag = minimizers.len() > CONTINUUM_THRESHOLD;
    let degenerate_zero_control = lambda <= TOL_ENERGY_TIE;

    Ok(MinimizerSet {
        minimizers,
        solutions,
        continuum_flag,
        degenerate_zero_control,
        lambda,
        attempted,
        converged,
    })
}

pub fn enumerate_minimizers(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    cfg: &MultistartConfig,
) -> Result<MinimizerSet> {
    enumerate_with_guesses(sys, target, cfg, &[])
}

/// Polish a single warm start without any multistart search. Used to track
/// one solution branch under small target perturbations; a derivative taken
/// across branches of the minimal energy would be meaningless.
pub fn solve_from(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    guess: &DVector<f64>,
    cfg: &MultistartConfig,
) -> Result<Option<Minimizer>> {
    validate_target(sys, target, cfg.steps)?;
    if guess.len() != sys.d() {
        return Err(Error::Dimension {
            what: "warm start covector",
            expected: sys.d(),
            got: guess.len(),
        });
    }
    Ok(refine_start(sys, target, guess, cfg))
}
