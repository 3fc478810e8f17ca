//! Assembly of the density expansion exponents.
//!
//! At a non-degenerate target the marginal density of the projected diffusion
//! behaves like
//!
//! ```text
//!   f(eps) = exp(-c1/eps^2) exp(c2/eps) eps^{-l} (c0 + O(eps)),
//! ```
//!
//! where
//!
//! - c1 = Lambda(a), the minimal steering energy, and
//! - c2 = max over minimizers of <Lambda'(a), P Y_T>, with Y the first-order
//!   response of the limiting flow to the eps-perturbations of the problem:
//!
//!   ```text
//!     Y' = B(t) Y + d/d_eps b(0, x_t),   Y(0) = x0_hat,
//!     B(t) = D sigma_0(x_t) + sum_i D sigma_i(x_t) hdot_i(t).
//!   ```
//!
//! The gradient Lambda'(a) is read off the converged extremal as the terminal
//! multiplier q = p(T)[..l]; an optional finite-difference cross-check
//! re-solves the boundary value problem at perturbed targets while tracking
//! the solution branch through warm starts.
//!
//! The short-time problem (density of X_t itself as t -> 0) is the special
//! case with frozen start, drift suppressed to order eps^2, and unit horizon;
//! there c2 = 0 and c1 = d(x0, N_a)^2 / 2 in the control distance.

use nalgebra::DVector;

use crate::bvp::{
    enumerate_minimizers, solve_from, Minimizer, MinimizerSet, MultistartConfig, TargetSpec,
};
use crate::error::{Error, Result};
use crate::hamiltonian::hamiltonian_rhs;
use crate::model::VectorFieldSystem;
use crate::nondegeneracy::{assemble_nd_report, NdOptions, NdReport, NdVerdict};
use crate::tolerances::{BRANCH_SWITCH_FACTOR, FD_TARGET_STEP, FLOW_BLOWUP_GUARD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpansionMode {
    /// Fixed horizon, vanishing noise.
    SmallNoise,
    /// Vanishing time, rescaled to eps = sqrt(t).
    ShortTime,
}

#[derive(Clone, Debug)]
pub struct MinimizerContribution {
    /// Terminal value of the first-order response Y.
    pub yhat_terminal: DVector<f64>,
    /// <q, P Y_T> for this minimizer.
    pub c2_term: f64,
    /// Finite-difference gradient of the branch energy, when requested.
    pub gradient_fd: Option<DVector<f64>>,
    /// Sup-norm gap between the multiplier and the FD gradient.
    pub gradient_gap: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExpansionResult {
    pub mode: ExpansionMode,
    /// Leading exponent: the minimal steering energy Lambda(a).
    pub c1: f64,
    /// Subleading exponent from the eps-perturbations of drift and start.
    pub c2: f64,
    /// Number of observed coordinates; the power of the eps^{-l} prefactor.
    pub ell: usize,
    /// sqrt(2 Lambda): the control distance to the fiber (short-time mode).
    pub distance: Option<f64>,
    pub contributions: Vec<MinimizerContribution>,
    pub nd: NdReport,
    pub set: MinimizerSet,
    /// All non-degeneracy checks passed; the exponents are trustworthy.
    pub certified: bool,
}

#[derive(Clone, Debug)]
pub struct ExpansionOptions {
    pub nd: NdOptions,
    /// Cross-check each multiplier against a finite-difference gradient of
    /// its branch energy (2 l extra solves per minimizer).
    pub check_gradient: bool,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        ExpansionOptions {
            nd: NdOptions::default(),
            check_gradient: false,
        }
    }
}

/// Terminal value of the first-order response Y along a minimizer, by a
/// joint RK4 pass over (x, p, Y).
pub fn yhat_terminal(
    sys: &VectorFieldSystem,
    minimizer: &Minimizer,
    horizon: f64,
    steps: usize,
) -> Result<DVector<f64>> {
    let m = sys.m();
    let h = horizon / steps as f64;
    let mut x = sys.x0().clone();
    let mut p = minimizer.p0.clone();
    let mut y = sys.x0_hat();

    type Stage = (DVector<f64>, DVector<f64>, DVector<f64>);
    let deriv = |x: &DVector<f64>, p: &DVector<f64>, y: &DVector<f64>| -> Result<Stage> {
        let (xd, pd) = hamiltonian_rhs(sys, x, p)?;
        let mut b_y = sys.sigma_jacobian(0, x)? * y;
        for i in 1..=m {
            let ci = p.dot(&sys.sigma(i, x)?);
            b_y += sys.sigma_jacobian(i, x)? * y * ci;
        }
        b_y += sys.drift_eps_deriv(x)?;
        Ok((xd, pd, b_y))
    };

    for k in 0..steps {
        let (x1, p1, y1) = deriv(&x, &p, &y)?;
        let (x2, p2, y2) = deriv(&(&x + &x1 * (h / 2.0)), &(&p + &p1 * (h / 2.0)), &(&y + &y1 * (h / 2.0)))?;
        let (x3, p3, y3) = deriv(&(&x + &x2 * (h / 2.0)), &(&p + &p2 * (h / 2.0)), &(&y + &y2 * (h / 2.0)))?;
        let (x4, p4, y4) = deriv(&(&x + &x3 * h), &(&p + &p3 * h), &(&y + &y3 * h))?;
        x += (x1 + x2 * 2.0 + x3 * 2.0 + x4) * (h / 6.0);
        p += (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (h / 6.0);
        y += (y1 + y2 * 2.0 + y3 * 2.0 + y4) * (h / 6.0);
        let norm = x.amax().max(p.amax()).max(y.amax());
        if !norm.is_finite() || norm > FLOW_BLOWUP_GUARD {
            return Err(Error::FlowDiverged {
                t: (k + 1) as f64 * h,
                norm,
            });
        }
    }
    Ok(y)
}

/// Central-difference gradient of the branch energy at the target, each
/// perturbed problem warm-started from the branch's covector. A solve that
/// jumps far from the warm start has slid onto a different solution branch
/// and invalidates the difference quotient.
pub fn lambda_gradient_fd(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    minimizer: &Minimizer,
    cfg: &MultistartConfig,
) -> Result<DVector<f64>> {
    let l = sys.l();
    let delta = FD_TARGET_STEP * (1.0 + target.a.amax());
    let jump_budget = BRANCH_SWITCH_FACTOR * delta * (1.0 + minimizer.p0.amax());
    let mut grad = DVector::zeros(l);

    for j in 0..l {
        let mut energies = [0.0; 2];
        for (slot, sign) in [(0usize, 1.0), (1usize, -1.0)] {
            let mut a = target.a.clone();
            a[j] += sign * delta;
            let shifted = TargetSpec::new(a, target.horizon);
            let sol = solve_from(sys, &shifted, &minimizer.p0, cfg)?.ok_or(
                Error::NoAdmissibleControl {
                    attempted: 1,
                    converged: 0,
                },
            )?;
            let jump = (&sol.p0 - &minimizer.p0).amax();
            if jump > jump_budget {
                return Err(Error::BranchSwitch {
                    coord: j,
                    jump,
                    threshold: jump_budget,
                });
            }
            energies[slot] = sol.energy;
        }
        grad[j] = (energies[0] - energies[1]) / (2.0 * delta);
    }
    Ok(grad)
}

fn assemble(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    cfg: &MultistartConfig,
    opts: &ExpansionOptions,
    mode: ExpansionMode,
) -> Result<ExpansionResult> {
    let set = enumerate_minimizers(sys, target, cfg)?;
    if set.degenerate_zero_control {
        return Err(Error::DegenerateTarget);
    }
    let nd = assemble_nd_report(sys, target, &set, &opts.nd)?;

    let l = sys.l();
    let steps = 2 * cfg.steps;
    let mut contributions = Vec::with_capacity(set.minimizers.len());
    for min in &set.minimizers {
        let y_t = yhat_terminal(sys, min, target.horizon, steps)?;
        let mut c2_term = 0.0;
        for i in 0..l {
            c2_term += min.q_terminal[i] * y_t[i];
        }
        let (gradient_fd, gradient_gap) = if opts.check_gradient {
            let fd = lambda_gradient_fd(sys, target, min, cfg)?;
            let gap = (&fd - &min.q_terminal).amax();
            (Some(fd), Some(gap))
        } else {
            (None, None)
        };
        contributions.push(MinimizerContribution {
            yhat_terminal: y_t,
            c2_term,
            gradient_fd,
            gradient_gap,
        });
    }

    let c1 = set.lambda;
    let c2 = contributions
        .iter()
        .map(|c| c.c2_term)
        .fold(f64::NEG_INFINITY, f64::max);
    let certified = nd.verdict == NdVerdict::NdHolds;
    let distance = match mode {
        ExpansionMode::ShortTime => Some((2.0 * c1).sqrt()),
        ExpansionMode::SmallNoise => None,
    };

    Ok(ExpansionResult {
        mode,
        c1,
        c2,
        ell: l,
        distance,
        contributions,
        nd,
        set,
        certified,
    })
}

/// Full small-noise pipeline: minimizers, non-degeneracy certificates, and
/// the exponent pair (c1, c2).
pub fn expand(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    cfg: &MultistartConfig,
    opts: &ExpansionOptions,
) -> Result<ExpansionResult> {
    assemble(sys, target, cfg, opts, ExpansionMode::SmallNoise)
}

/// Short-time density expansion of X_t at a target fiber: the problem is
/// rescaled to unit horizon with frozen start and eps^2 drift, which forces
/// c2 = 0, and c1 becomes half the squared control distance.
pub fn short_time(
    sys: &VectorFieldSystem,
    a: &DVector<f64>,
    cfg: &MultistartConfig,
    opts: &ExpansionOptions,
) -> Result<ExpansionResult> {
    let variant = sys.short_time_variant();
    let target = TargetSpec::new(a.clone(), 1.0);
    assemble(&variant, &target, cfg, opts, ExpansionMode::ShortTime)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn builtin(name: &str, params: &[(&str, f64)]) -> VectorFieldSystem {
        let map: BTreeMap<String, f64> =
            params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        VectorFieldSystem::builtin(name, &map, None).unwrap()
    }

    fn cfg(seed: u64) -> MultistartConfig {
        MultistartConfig {
            n_lowdisc: 16,
            n_normal: 16,
            seed,
            steps: 256,
            ..MultistartConfig::default()
        }
    }

    #[test]
    fn ou1d_exponents_match_the_gaussian_marginal() {
        // The marginal is Gaussian with variance eps^2 s2 and mean eps mu,
        // s2 = (e^{2 beta T} - 1) gamma^2 / (2 beta),
        // mu = y0_hat e^{beta T} + alpha (e^{beta T} - 1) / beta,
        // so c1 = a^2/(2 s2) and c2 = mu a / s2.
        let (alpha, beta, gamma, y0_hat, a) = (1.0, 0.5, 1.0, 0.3, 2.0);
        let sys = builtin(
            "ou1d",
            &[("alpha", alpha), ("beta", beta), ("gamma", gamma), ("yhat0", y0_hat)],
        );
        let target = TargetSpec::new(DVector::from_vec(vec![a]), 1.0);
        let res = expand(&sys, &target, &cfg(1), &ExpansionOptions::default()).unwrap();

        let s2 = gamma * gamma * ((2.0 * beta).exp() - 1.0) / (2.0 * beta);
        let mu = y0_hat * beta.exp() + alpha * (beta.exp() - 1.0) / beta;
        assert_relative_eq!(res.c1, a * a / (2.0 * s2), epsilon = 1e-9);
        assert_relative_eq!(res.c2, mu * a / s2, epsilon = 1e-8);
        assert_eq!(res.ell, 1);
        assert!(res.certified);
        assert_eq!(res.mode, ExpansionMode::SmallNoise);
        assert!(res.distance.is_none());
    }

    #[test]
    fn langevin_c2_combines_both_start_offsets() {
        // Y flows by the drift semigroup alone: Y(T) = (y0 + T z0, z0), and
        // the multiplier is 3a/T^3, so c2 = 3 (y0 + z0) at a = T = 1.
        let (y0, z0) = (0.4, 0.7);
        let sys = builtin("langevin", &[("yhat0", y0), ("zhat0", z0)]);
        let target = TargetSpec::new(DVector::from_vec(vec![1.0]), 1.0);
        let res = expand(&sys, &target, &cfg(2), &ExpansionOptions::default()).unwrap();
        assert_relative_eq!(res.c1, 1.5, epsilon = 1e-9);
        assert_relative_eq!(res.c2, 3.0 * (y0 + z0), epsilon = 1e-8);
        let contrib = &res.contributions[0];
        assert_relative_eq!(contrib.yhat_terminal[0], y0 + z0, epsilon = 1e-10);
        assert_relative_eq!(contrib.yhat_terminal[1], z0, epsilon = 1e-10);
    }

    #[test]
    fn multiplier_agrees_with_finite_difference_gradient() {
        let opts = ExpansionOptions {
            check_gradient: true,
            ..ExpansionOptions::default()
        };
        let sys = builtin("langevin", &[]);
        let target = TargetSpec::new(DVector::from_vec(vec![1.0]), 1.0);
        let res = expand(&sys, &target, &cfg(3), &opts).unwrap();
        let gap = res.contributions[0].gradient_gap.unwrap();
        assert!(gap <= 1e-6, "multiplier vs FD gradient gap {gap}");

        let sys = builtin("heisenberg", &[("yhat0", 0.2), ("zhat0", 0.1)]);
        let a = DVector::from_vec(vec![1.0, 0.0, (PI / 2.0 - 1.0) / 4.0]);
        let target = TargetSpec::new(a, 1.0);
        let res = expand(&sys, &target, &cfg(3), &opts).unwrap();
        let gap = res.contributions[0].gradient_gap.unwrap();
        assert!(gap <= 1e-4, "multiplier vs FD gradient gap {gap}");
    }

    #[test]
    fn heisenberg_c2_reflects_the_start_perturbation() {
        // For the quarter-turn target the multiplier is q = (pi/4, -pi/4,
        // pi/2) evolved to T; c2 = <q_T, P Y_T> with Y constant in time for
        // the driftless group (B Y sourced only by the control rotation).
        // Sanity: zero offsets give c2 = 0.
        let sys = builtin("heisenberg", &[]);
        let a = DVector::from_vec(vec![1.0, 0.0, (PI / 2.0 - 1.0) / 4.0]);
        let target = TargetSpec::new(a, 1.0);
        let res = expand(&sys, &target, &cfg(4), &ExpansionOptions::default()).unwrap();
        assert_relative_eq!(res.c2, 0.0, epsilon = 1e-12);
        assert_relative_eq!(res.c1, PI * PI / 16.0, epsilon = 1e-8);
    }

    #[test]
    fn deterministic_targets_are_rejected() {
        let sys = builtin("heisenberg", &[]);
        let target = TargetSpec::new(DVector::zeros(3), 1.0);
        let res = expand(&sys, &target, &cfg(5), &ExpansionOptions::default());
        assert!(matches!(res, Err(Error::DegenerateTarget)));
    }

    #[test]
    fn short_time_distance_on_the_group_is_euclidean_off_the_center() {
        // (0.6, 0.8, 0) lies in the horizontal plane: the geodesic is the
        // straight segment, d = 1, and the eps-corrections vanish identically.
        let sys = builtin("heisenberg", &[("yhat0", 0.5), ("zhat0", -0.3)]);
        let a = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let res = short_time(&sys, &a, &cfg(6), &ExpansionOptions::default()).unwrap();
        assert_eq!(res.mode, ExpansionMode::ShortTime);
        assert_relative_eq!(res.c1, 0.5, epsilon = 1e-9);
        assert_relative_eq!(res.distance.unwrap(), 1.0, epsilon = 1e-9);
        assert_eq!(res.c2, 0.0); // exactly: frozen start, eps^2 drift
        assert!(res.certified);
    }

    #[test]
    fn short_time_ignores_the_original_drift_and_offsets() {
        // ou1d has a strong drift, but the short-time problem suppresses it:
        // the distance is the flat one |a| / gamma.
        let sys = builtin("ou1d", &[("alpha", 3.0), ("beta", 2.0), ("gamma", 1.0), ("yhat0", 0.9)]);
        let a = DVector::from_vec(vec![1.4]);
        let res = short_time(&sys, &a, &cfg(7), &ExpansionOptions::default()).unwrap();
        assert_relative_eq!(res.c1, 1.4 * 1.4 / 2.0, epsilon = 1e-9);
        assert_eq!(res.c2, 0.0);
        assert_relative_eq!(res.distance.unwrap(), 1.4, epsilon = 1e-9);
    }
}
