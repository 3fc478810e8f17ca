//! Non-degeneracy certificates for minimizing controls.
//!
//! The density expansion is valid at a target only when the minimizing
//! controls are non-degenerate. Three properties are checked per minimizer h:
//!
//! 1. finitely many minimizers (a surplus of energy ties flags a continuum);
//! 2. the deterministic Malliavin covariance
//!
//!    ```text
//!      C(h) = int_0^T Phi_{T<-t} S(x_t) Phi_{T<-t}^T dt,
//!      S(x) = sum_i sigma_i(x) sigma_i(x)^T,
//!    ```
//!
//!    is invertible, where Phi is the linearization of the controlled ODE
//!    x' = sigma_0(x) + sum_i sigma_i(x) hdot_i(t) along x_t (note: this is
//!    not the variational flow of the Hamiltonian system, which linearizes a
//!    different dynamic);
//! 3. the target is not focal for x0: perturbing the terminal data
//!    (z_T, q_T) = (unobserved positions, observed covector head) and flowing
//!    the Hamiltonian system backwards yields a d x d sensitivity matrix
//!    M = d x(0) / d (z_T, q_T) that must be invertible. det M = 0 is exactly
//!    the degeneration of the second variation at the boundary.
//!
//! An independent Hessian oracle discretizes the constrained energy
//! functional on a coarse control grid and checks the spectrum of the
//! projected Hessian directly; it validates the focality test on hard cases.
//!
//! Bracket diagnostics report the Hormander rank of the driving fields at a
//! point, with the drift participating only inside brackets (weak form) or
//! excluded entirely (strong form). Full rank supports, but does not replace,
//! the covariance check along the actual minimizer.

use nalgebra::{DMatrix, DVector};

use crate::bvp::{Minimizer, MinimizerSet, TargetSpec};
use crate::error::{Error, Result};
use crate::hamiltonian::{
    flow, flow_jacobian, hamiltonian_rhs, seed_focal, CotangentPoint, Direction,
};
use crate::model::VectorFieldSystem;
use crate::poly::{bracket, PolyField};
use crate::numeric::svd_rank;
use crate::tolerances::{
    FLOW_BLOWUP_GUARD, MAX_BRACKET_DEPTH, MIN_ORACLE_GRID, MIN_STEPS, TOL_FOCAL, TOL_RANK,
    TOL_SV, UNDECIDED_FACTOR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FocalityVerdict {
    NonFocal,
    Focal,
    Undecided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NdVerdict {
    /// Every minimizer certified: the expansion coefficients are meaningful.
    NdHolds,
    /// The minimizing set looks positive-dimensional.
    Continuum,
    /// Some minimizer has a singular deterministic Malliavin covariance.
    SingularMalliavin,
    /// Some minimizer hits a focal point at the terminal time.
    Focal,
    /// A focality determinant sits in the numerical gray zone.
    Undecided,
}

#[derive(Clone, Debug)]
pub struct MinimizerCertificate {
    pub covariance_invertible: bool,
    pub covariance_sigma_min: f64,
    pub covariance_sigma_max: f64,
    /// First grid time at which the diffusion fields alone span the state
    /// space along this path, if any. A cheap sufficient witness for the
    /// covariance rank.
    pub ellipticity_time: Option<f64>,
    pub focality: FocalityVerdict,
    pub focality_det: f64,
    /// |det M| scaled by the product of row norms of M.
    pub focality_ratio: f64,
    pub hessian: Option<HessianOracle>,
}

#[derive(Clone, Debug)]
pub struct BracketDiagnostics {
    /// Dimension of the evaluated bracket span at the probe point.
    pub rank: usize,
    pub full_rank: bool,
    /// Bracket length at which the rank stopped growing or reached d.
    pub depth_used: usize,
    /// Span dimension after each bracket level.
    pub ranks_by_depth: Vec<usize>,
    pub include_drift: bool,
}

#[derive(Clone, Debug)]
pub struct NdReport {
    pub verdict: NdVerdict,
    pub certificates: Vec<MinimizerCertificate>,
    pub weak_bracket: BracketDiagnostics,
    pub strong_bracket: BracketDiagnostics,
}

#[derive(Clone, Debug)]
pub struct NdOptions {
    pub run_hessian_oracle: bool,
    /// Control intervals of the oracle discretization.
    pub oracle_grid: usize,
    /// RK4 steps for the covariance and non-focality flows.
    pub steps: usize,
}

impl Default for NdOptions {
    fn default() -> Self {
        NdOptions {
            run_hessian_oracle: false,
            oracle_grid: 32,
            steps: 2048,
        }
    }
}

fn controlled_linearization(
    sys: &VectorFieldSystem,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let mut b = sys.sigma_jacobian(0, x)?;
    for i in 1..=sys.m() {
        let ci = p.dot(&sys.sigma(i, x)?);
        b += sys.sigma_jacobian(i, x)? * ci;
    }
    Ok(b)
}

fn diffusion_gram(sys: &VectorFieldSystem, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = sys.d();
    let mut s = DMatrix::zeros(d, d);
    for i in 1..=sys.m() {
        let si = sys.sigma(i, x)?;
        s += &si * si.transpose();
    }
    Ok(s)
}

/// Deterministic Malliavin covariance of the controlled flow started at
/// (x0, p0). Rather than accumulating per-interval transition matrices, C is
/// integrated directly through its Lyapunov equation
///
/// ```text
///   C' = B C + C B^T + S,   C(0) = 0,   B(t) = D sigma_0 + sum_i D sigma_i hdot_i,
/// ```
///
/// jointly with the extremal (x, p), which keeps the RK4 stages consistent
/// and the result fourth-order accurate.
pub fn malliavin_covariance(
    sys: &VectorFieldSystem,
    p0: &DVector<f64>,
    horizon: f64,
    steps: usize,
) -> Result<DMatrix<f64>> {
    if steps < MIN_STEPS || steps % 2 != 0 {
        return Err(Error::BadStepCount(steps));
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    let d = sys.d();
    let h = horizon / steps as f64;
    let mut x = sys.x0().clone();
    let mut p = p0.clone();
    let mut c = DMatrix::<f64>::zeros(d, d);

    type Stage = (DVector<f64>, DVector<f64>, DMatrix<f64>);
    let deriv = |x: &DVector<f64>, p: &DVector<f64>, c: &DMatrix<f64>| -> Result<Stage> {
        let (xd, pd) = hamiltonian_rhs(sys, x, p)?;
        let b = controlled_linearization(sys, x, p)?;
        let cd = &b * c + c * b.transpose() + diffusion_gram(sys, x)?;
        Ok((xd, pd, cd))
    };

    for k in 0..steps {
        let (x1, p1, c1) = deriv(&x, &p, &c)?;
        let (x2, p2, c2) = deriv(&(&x + &x1 * (h / 2.0)), &(&p + &p1 * (h / 2.0)), &(&c + &c1 * (h / 2.0)))?;
        let (x3, p3, c3) = deriv(&(&x + &x2 * (h / 2.0)), &(&p + &p2 * (h / 2.0)), &(&c + &c2 * (h / 2.0)))?;
        let (x4, p4, c4) = deriv(&(&x + &x3 * h), &(&p + &p3 * h), &(&c + &c3 * h))?;
        x += (x1 + x2 * 2.0 + x3 * 2.0 + x4) * (h / 6.0);
        p += (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (h / 6.0);
        c += (c1 + c2 * 2.0 + c3 * 2.0 + c4) * (h / 6.0);
        let norm = x.amax().max(p.amax());
        if !norm.is_finite() || norm > FLOW_BLOWUP_GUARD {
            return Err(Error::FlowDiverged {
                t: (k + 1) as f64 * h,
                norm,
            });
        }
    }

    // exact symmetry can drift in the last bits
    let sym = (&c + c.transpose()) * 0.5;
    Ok(sym)
}

/// Singular-value test of the covariance: invertible when the spectrum does
/// not collapse relative to its largest value.
pub fn covariance_spectrum(c: &DMatrix<f64>) -> (bool, f64, f64) {
    let svals = c.clone().svd(false, false).singular_values;
    let smax = svals.iter().cloned().fold(0.0, f64::max);
    let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    (smax > 0.0 && smin > TOL_SV * smax, smin, smax)
}

/// First grid time at which sigma_1..sigma_m alone span the state space.
pub fn ellipticity_witness(
    sys: &VectorFieldSystem,
    path: &crate::hamiltonian::PhasePath,
) -> Result<Option<f64>> {
    let d = sys.d();
    let m = sys.m();
    for (k, st) in path.states.iter().enumerate() {
        let mut cols = DMatrix::zeros(d, m);
        for i in 1..=m {
            cols.set_column(i - 1, &sys.sigma(i, &st.x)?);
        }
        if svd_rank(&cols, TOL_RANK) == d {
            return Ok(Some(path.t[k]));
        }
    }
    Ok(None)
}

/// Hormander bracket rank at a point, by exact polynomial bracket
/// calculus. Level 1 is sigma_1..sigma_m; level k+1 consists of the
/// left-normed brackets [g, w] with w of level k and g ranging over the
/// diffusion fields, plus the drift when `include_drift` is set (the drift
/// itself is never added to the spanning set).
pub fn hormander_rank(
    sys: &VectorFieldSystem,
    x: &DVector<f64>,
    max_depth: usize,
    include_drift: bool,
) -> Result<BracketDiagnostics> {
    if max_depth == 0 || max_depth > MAX_BRACKET_DEPTH {
        return Err(Error::BracketDepth(max_depth));
    }
    let d = sys.d();
    if x.len() != d {
        return Err(Error::Dimension {
            what: "bracket probe point",
            expected: d,
            got: x.len(),
        });
    }
    let fields = sys.poly_fields();
    let mut partners: Vec<&PolyField> = fields[1..].iter().collect();
    if include_drift && !fields[0].is_zero() {
        partners.push(&fields[0]);
    }

    let mut level: Vec<PolyField> = fields[1..].to_vec();
    let mut span: Vec<DVector<f64>> = level.iter().map(|f| f.eval(x)).collect();
    let mut ranks_by_depth = Vec::new();
    let mut rank = rank_of(&span, d);
    ranks_by_depth.push(rank);
    let mut depth_used = 1;

    for depth in 2..=max_depth {
        if rank == d {
            break;
        }
        let mut next: Vec<PolyField> = Vec::new();
        for w in &level {
            for g in &partners {
                let b = bracket(g, w);
                if !b.is_zero() {
                    next.push(b);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        span.extend(next.iter().map(|f| f.eval(x)));
        rank = rank_of(&span, d);
        ranks_by_depth.push(rank);
        depth_used = depth;
        level = next;
    }

    Ok(BracketDiagnostics {
        rank,
        full_rank: rank == d,
        depth_used,
        ranks_by_depth,
        include_drift,
    })
}

fn rank_of(cols: &[DVector<f64>], d: usize) -> usize {
    let mut mat = DMatrix::zeros(d, cols.len());
    for (j, c) in cols.iter().enumerate() {
        mat.set_column(j, c);
    }
    svd_rank(&mat, TOL_RANK)
}

/// Focality matrix of a converged minimizer: flow the variational equations
/// backwards from the terminal point (x_T, (q_T, 0)), perturbing first the
/// unobserved terminal positions, then the observed terminal covector
/// components, and read off the initial-position block
/// M = d x(0) / d (z_T, q_T).
pub fn nonfocality_matrix(
    sys: &VectorFieldSystem,
    minimizer: &Minimizer,
    horizon: f64,
    steps: usize,
) -> Result<DMatrix<f64>> {
    let (d, l) = (sys.d(), sys.l());
    let mut p_t = DVector::zeros(d);
    // transversality is exact by construction here, not up to the residual
    p_t.rows_mut(0, l).copy_from(&minimizer.q_terminal);
    let terminal = CotangentPoint::new(minimizer.x_terminal.clone(), p_t);
    let (_, jac) = flow_jacobian(
        sys,
        &terminal,
        horizon,
        steps,
        Direction::Backward,
        &seed_focal(d, l),
    )?;
    Ok(jac.view((0, 0), (d, d)).into_owned())
}

/// Scale-free focality decision: |det M| is compared against the product of
/// the row norms of M (the Hadamard bound), so the verdict does not depend on
/// the units of the coordinates.
pub fn focality_verdict(m: &DMatrix<f64>) -> (FocalityVerdict, f64, f64) {
    let det = m.determinant();
    let mut scale = 1.0;
    for i in 0..m.nrows() {
        scale *= m.row(i).norm();
    }
    if scale == 0.0 {
        return (FocalityVerdict::Focal, det, 0.0);
    }
    let ratio = det.abs() / scale;
    let verdict = if ratio < TOL_FOCAL {
        FocalityVerdict::Focal
    } else if ratio < UNDECIDED_FACTOR * TOL_FOCAL {
        FocalityVerdict::Undecided
    } else {
        FocalityVerdict::NonFocal
    };
    (verdict, det, ratio)
}

#[derive(Clone, Debug)]
pub struct HessianOracle {
    /// Spectrum of the projected Hessian, ascending, in the continuum scale
    /// (the discrete quadratic form is divided by the interval length).
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    /// Control-space direction attaining lambda_min.
    pub null_direction: DVector<f64>,
    pub grid: usize,
}

/// Independent second-order check: discretize controls as piecewise
/// constants on `grid` intervals, form the Lagrangian
///
/// ```text
///   L(u) = (1/2) dt |u|^2 - q^T (P phi_T(u) - a),
/// ```
///
/// with q the converged multiplier, difference its Hessian at the minimizing
/// control, and diagonalize the restriction to the tangent space of the
/// constraint {P phi_T(u) = a}. A minimizer of a well-posed problem shows a
/// strictly positive spectrum; a focal target shows an eigenvalue at zero.
pub fn hessian_oracle(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    minimizer: &Minimizer,
    grid: usize,
) -> Result<HessianOracle> {
    if grid < MIN_ORACLE_GRID {
        return Err(Error::Config(format!(
            "hessian oracle needs at least {MIN_ORACLE_GRID} control intervals, got {grid}"
        )));
    }
    let (l, m) = (sys.l(), sys.m());
    let n = grid;
    let dt = target.horizon / n as f64;

    // Midpoint samples of the minimizing control: a fresh flow with 2n steps
    // puts its odd nodes exactly at the interval midpoints.
    let start = CotangentPoint::new(sys.x0().clone(), minimizer.p0.clone());
    let fine = flow(sys, &start, target.horizon, 2 * n, Direction::Forward)?;
    let mut u_star = DVector::zeros(n * m);
    for k in 0..n {
        for i in 0..m {
            u_star[k * m + i] = fine.hdot[2 * k + 1][i];
        }
    }

    // Endpoint of the controlled ODE under a piecewise-constant control, four
    // RK4 substeps per control interval.
    let endpoint = |u: &DVector<f64>| -> Result<DVector<f64>> {
        let mut x = sys.x0().clone();
        let sub = dt / 4.0;
        for k in 0..n {
            let uk = u.rows(k * m, m);
            let f = |x: &DVector<f64>| -> Result<DVector<f64>> {
                let mut v = sys.sigma(0, x)?;
                for i in 1..=m {
                    v += sys.sigma(i, x)? * uk[i - 1];
                }
                Ok(v)
            };
            for _ in 0..4 {
                let k1 = f(&x)?;
                let k2 = f(&(&x + &k1 * (sub / 2.0)))?;
                let k3 = f(&(&x + &k2 * (sub / 2.0)))?;
                let k4 = f(&(&x + &k3 * sub))?;
                x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (sub / 6.0);
            }
        }
        Ok(x)
    };

    let q = &minimizer.q_terminal;
    let lagrangian = |u: &DVector<f64>| -> Result<f64> {
        let x_t = endpoint(u)?;
        let mut val = 0.5 * dt * u.norm_squared();
        for i in 0..l {
            val -= q[i] * (x_t[i] - target.a[i]);
        }
        Ok(val)
    };

    let nm = n * m;
    let scale = 1.0 + u_star.amax();

    // Constraint Jacobian dg = d(P phi_T)/du by central differences.
    let dj = 1e-5 * scale;
    let mut dg = DMatrix::zeros(l, nm);
    for j in 0..nm {
        let mut up = u_star.clone();
        let mut dn = u_star.clone();
        up[j] += dj;
        dn[j] -= dj;
        let fp = endpoint(&up)?;
        let fm = endpoint(&dn)?;
        for i in 0..l {
            dg[(i, j)] = (fp[i] - fm[i]) / (2.0 * dj);
        }
    }
    let rank = svd_rank(&dg, TOL_RANK);
    if rank < l {
        return Err(Error::RankDeficient {
            what: "constraint Jacobian of the control discretization",
            rank,
            needed: l,
        });
    }

    // Orthonormal basis of ker dg from the spectral decomposition of dg^T dg.
    let gram = dg.transpose() * &dg;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let lam_max = eig.eigenvalues.amax();
    let thresh = TOL_RANK * TOL_RANK * (1.0 + lam_max);
    let mut kernel_cols: Vec<usize> = (0..nm)
        .filter(|&j| eig.eigenvalues[j].abs() <= thresh)
        .collect();
    kernel_cols.sort_unstable();
    let kdim = kernel_cols.len();
    if kdim != nm - rank {
        return Err(Error::EigenFailure(
            "kernel dimension of the constraint Jacobian is ambiguous",
        ));
    }
    let mut v = DMatrix::zeros(nm, kdim);
    for (c, &j) in kernel_cols.iter().enumerate() {
        v.set_column(c, &eig.eigenvectors.column(j));
    }

    // Four-point second differences of the Lagrangian.
    let dh = 1e-4 * scale;
    let mut hess = DMatrix::zeros(nm, nm);
    for i in 0..nm {
        for j in i..nm {
            let mut upp = u_star.clone();
            let mut umm = u_star.clone();
            let mut upm = u_star.clone();
            let mut ump = u_star.clone();
            upp[i] += dh;
            upp[j] += dh;
            umm[i] -= dh;
            umm[j] -= dh;
            upm[i] += dh;
            upm[j] -= dh;
            ump[i] -= dh;
            ump[j] += dh;
            let val = (lagrangian(&upp)? + lagrangian(&umm)?
                - lagrangian(&upm)?
                - lagrangian(&ump)?)
                / (4.0 * dh * dh);
            hess[(i, j)] = val;
            hess[(j, i)] = val;
        }
    }

    // Restrict, symmetrize, and rescale to the continuum quadratic form.
    let proj = v.transpose() * &hess * &v;
    let proj = (&proj + proj.transpose()) * (0.5 / dt);
    let eig = nalgebra::SymmetricEigen::new(proj);
    let mut order: Vec<usize> = (0..kdim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let lambda_min = eigenvalues[0];
    let null_direction = &v * eig.eigenvectors.column(order[0]);

    Ok(HessianOracle {
        eigenvalues,
        lambda_min,
        null_direction,
        grid: n,
    })
}

/// Run every check on every minimizer and fold the results into a verdict.
/// Precedence: a continuum beats a singular covariance beats focality beats
/// an undecided determinant; only a fully clean slate certifies.
pub fn assemble_nd_report(
    sys: &VectorFieldSystem,
    target: &TargetSpec,
    set: &MinimizerSet,
    opts: &NdOptions,
) -> Result<NdReport> {
    let mut certificates = Vec::with_capacity(set.minimizers.len());
    for min in &set.minimizers {
        let cov = malliavin_covariance(sys, &min.p0, target.horizon, opts.steps)?;
        let (covariance_invertible, covariance_sigma_min, covariance_sigma_max) =
            covariance_spectrum(&cov);
        let ellipticity_time = ellipticity_witness(sys, &min.path)?;
        let mfoc = nonfocality_matrix(sys, min, target.horizon, opts.steps)?;
        let (focality, focality_det, focality_ratio) = focality_verdict(&mfoc);
        let hessian = if opts.run_hessian_oracle && !set.continuum_flag {
            Some(hessian_oracle(sys, target, min, opts.oracle_grid)?)
        } else {
            None
        };
        certificates.push(MinimizerCertificate {
            covariance_invertible,
            covariance_sigma_min,
            covariance_sigma_max,
            ellipticity_time,
            focality,
            focality_det,
            focality_ratio,
            hessian,
        });
    }

    let weak_bracket = hormander_rank(sys, sys.x0(), MAX_BRACKET_DEPTH, true)?;
    let strong_bracket = hormander_rank(sys, sys.x0(), MAX_BRACKET_DEPTH, false)?;

    let verdict = if set.continuum_flag {
        NdVerdict::Continuum
    } else if certificates.iter().any(|c| !c.covariance_invertible) {
        NdVerdict::SingularMalliavin
    } else if certificates
        .iter()
        .any(|c| c.focality == FocalityVerdict::Focal)
    {
        NdVerdict::Focal
    } else if certificates
        .iter()
        .any(|c| c.focality == FocalityVerdict::Undecided)
    {
        NdVerdict::Undecided
    } else {
        NdVerdict::NdHolds
    };

    Ok(NdReport {
        verdict,
        certificates,
        weak_bracket,
        strong_bracket,
    })
}
