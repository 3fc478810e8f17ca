//! Hamiltonian flow of the optimal-control problem.
//!
//! The energy-minimizing controls steering
//!
//! ```text
//!   x' = sigma_0(x) + sum_i sigma_i(x) hdot_i(t)
//! ```
//!
//! are extremals of the Hamiltonian
//!
//! ```text
//!   H(x, p) = <p, sigma_0(x)> + 1/2 sum_{i=1..m} <p, sigma_i(x)>^2,
//! ```
//!
//! flowing along x' = dH/dp, p' = -dH/dx. Along an extremal the minimizing
//! control is read off as hdot_i(t) = <p(t), sigma_i(x(t))>, and H is constant;
//! the realized conservation defect doubles as an integrator accuracy monitor.
//!
//! Flows run on a fixed uniform RK4 grid (step count even, so the Simpson
//! energy quadrature applies directly). The variational equations propagate
//! Jacobians of the flow map for Newton shooting and focal-point detection.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::VectorFieldSystem;
use crate::numeric::simpson_uniform;
use crate::tolerances::{
    CONSERVE_HARD_FACTOR, FLOW_BLOWUP_GUARD, MIN_STEPS, TOL_CONSERVE,
};

#[derive(Clone, Debug)]
pub struct CotangentPoint {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
}

impl CotangentPoint {
    pub fn new(x: DVector<f64>, p: DVector<f64>) -> Self {
        CotangentPoint { x, p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// A discretized extremal on [0, T]: grid times increase regardless of the
/// integration direction.
#[derive(Clone, Debug)]
pub struct PhasePath {
    pub t: Vec<f64>,
    pub states: Vec<CotangentPoint>,
    /// Minimizing control samples hdot(t_k), one m-vector per node.
    pub hdot: Vec<DVector<f64>>,
    /// The conserved Hamiltonian value C, evaluated at the seeded endpoint.
    pub hamiltonian_value: f64,
    /// max_k |H(x_k, p_k) - C|.
    pub conservation_defect: f64,
    /// (1/2) integral |hdot|^2 dt by composite Simpson.
    pub energy_direct: f64,
}

impl PhasePath {
    pub fn horizon(&self) -> f64 {
        *self.t.last().unwrap()
    }

    pub fn initial(&self) -> &CotangentPoint {
        &self.states[0]
    }

    pub fn terminal(&self) -> &CotangentPoint {
        self.states.last().unwrap()
    }

    /// CSV rows t, x_*, p_*, hdot_1.. with coordinate names in internal order.
    pub fn write_csv<W: Write>(&self, names: &[String], w: &mut W) -> std::io::Result<()> {
        let m = self.hdot.first().map_or(0, |h| h.len());
        write!(w, "t")?;
        for n in names {
            write!(w, ",x_{n}")?;
        }
        for n in names {
            write!(w, ",p_{n}")?;
        }
        for i in 1..=m {
            write!(w, ",hdot{i}")?;
        }
        writeln!(w)?;
        for (k, t) in self.t.iter().enumerate() {
            write!(w, "{t:.12e}")?;
            for v in self.states[k].x.iter() {
                write!(w, ",{v:.12e}")?;
            }
            for v in self.states[k].p.iter() {
                write!(w, ",{v:.12e}")?;
            }
            for v in self.hdot[k].iter() {
                write!(w, ",{v:.12e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn eval_hamiltonian(sys: &VectorFieldSystem, x: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
    if p.len() != sys.d() {
        return Err(Error::Dimension {
            what: "covector",
            expected: sys.d(),
            got: p.len(),
        });
    }
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("covector"));
    }
    let mut h = p.dot(&sys.sigma(0, x)?);
    for i in 1..=sys.m() {
        let c = p.dot(&sys.sigma(i, x)?);
        h += 0.5 * c * c;
    }
    Ok(h)
}

/// Right-hand side (dH/dp, -dH/dx) at the packed phase point (x, p).
pub fn hamiltonian_rhs(
    sys: &VectorFieldSystem,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut xdot = sys.sigma(0, x)?;
    let mut pdot = -(sys.sigma_jacobian(0, x)?.transpose() * p);
    for i in 1..=sys.m() {
        let si = sys.sigma(i, x)?;
        let ci = p.dot(&si);
        let ji = sys.sigma_jacobian(i, x)?;
        xdot += &si * ci;
        pdot -= (ji.transpose() * p) * ci;
    }
    Ok((xdot, pdot))
}

fn rhs_packed(sys: &VectorFieldSystem, y: &DVector<f64>) -> Result<DVector<f64>> {
    let d = sys.d();
    let x = y.rows(0, d).into_owned();
    let p = y.rows(d, d).into_owned();
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("covector"));
    }
    let (xdot, pdot) = hamiltonian_rhs(sys, &x, &p)?;
    let mut out = DVector::zeros(2 * d);
    out.rows_mut(0, d).copy_from(&xdot);
    out.rows_mut(d, d).copy_from(&pdot);
    Ok(out)
}

/// Linearization of the Hamiltonian vector field at (x, p):
///
/// ```text
///   A = [  d2H/dxdp   d2H/dpdp ]
///       [ -d2H/dxdx  -d2H/dpdx ]
/// ```
///
/// Second derivatives of H are assembled from the field Jacobians and, for
/// nonlinear fields, their exact second derivatives.
fn linearization(sys: &VectorFieldSystem, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = sys.d();
    let x = y.rows(0, d).into_owned();
    let p = y.rows(d, d).into_owned();

    let j0 = sys.sigma_jacobian(0, &x)?;
    let mut a11 = j0.clone(); // d(dH/dp)/dx
    let mut a12 = DMatrix::zeros(d, d); // d(dH/dp)/dp
    let mut a21 = DMatrix::zeros(d, d); // d2H/dxdx, negated below

    let needs_hess = sys.needs_hessians();
    if needs_hess {
        for a in 0..d {
            if p[a] != 0.0 {
                a21 += sys.sigma_hessian(0, a, &x)? * p[a];
            }
        }
    }
    for i in 1..=sys.m() {
        let si = sys.sigma(i, &x)?;
        let ci = p.dot(&si);
        let ji = sys.sigma_jacobian(i, &x)?;
        let wi = ji.transpose() * &p;
        a11 += &si * wi.transpose() + &ji * ci;
        a12 += &si * si.transpose();
        a21 += &wi * wi.transpose();
        if needs_hess && ci != 0.0 {
            for a in 0..d {
                if p[a] != 0.0 {
                    a21 += sys.sigma_hessian(i, a, &x)? * (ci * p[a]);
                }
            }
        }
    }

    let mut amat = DMatrix::zeros(2 * d, 2 * d);
    amat.view_mut((0, 0), (d, d)).copy_from(&a11);
    amat.view_mut((0, d), (d, d)).copy_from(&a12);
    amat.view_mut((d, 0), (d, d)).copy_from(&(-&a21));
    amat.view_mut((d, d), (d, d)).copy_from(&(-a11.transpose()));
    Ok(amat)
}

fn validate_flow_args(
    sys: &VectorFieldSystem,
    endpoint: &CotangentPoint,
    horizon: f64,
    steps: usize,
) -> Result<()> {
    if steps < MIN_STEPS || steps % 2 != 0 {
        return Err(Error::BadStepCount(steps));
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    let d = sys.d();
    if endpoint.x.len() != d || endpoint.p.len() != d {
        return Err(Error::Dimension {
            what: "phase point",
            expected: d,
            got: endpoint.x.len().max(endpoint.p.len()),
        });
    }
    if endpoint.x.iter().chain(endpoint.p.iter()).any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("phase point"));
    }
    Ok(())
}

/// Integrate the Hamiltonian flow over [0, T] with `steps` RK4 steps,
/// optionally propagating a variational seed. `Forward` treats `endpoint` as
/// the state at t = 0; `Backward` treats it as the state at t = T. The
/// returned Jacobian is the sensitivity of the state at the far end of the
/// integration with respect to perturbations of `endpoint` along the seed
/// columns (a 2d x k matrix whose columns are (dx, dp) perturbations).
fn integrate(
    sys: &VectorFieldSystem,
    endpoint: &CotangentPoint,
    horizon: f64,
    steps: usize,
    direction: Direction,
    seed: Option<&DMatrix<f64>>,
) -> Result<(PhasePath, Option<DMatrix<f64>>)> {
    validate_flow_args(sys, endpoint, horizon, steps)?;
    let d = sys.d();
    if let Some(s) = seed {
        if s.nrows() != 2 * d {
            return Err(Error::Dimension {
                what: "variational seed rows",
                expected: 2 * d,
                got: s.nrows(),
            });
        }
    }

    let h = horizon / steps as f64;
    // Backward integration flips the vector field; nodes are stored in
    // increasing time order afterwards.
    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };

    let mut y = DVector::zeros(2 * d);
    y.rows_mut(0, d).copy_from(&endpoint.x);
    y.rows_mut(d, d).copy_from(&endpoint.p);
    let mut jac = seed.cloned();

    let mut nodes = Vec::with_capacity(steps + 1);
    nodes.push(y.clone());

    for k in 0..steps {
        let t = k as f64 * h;
        let f = |yy: &DVector<f64>| -> Result<DVector<f64>> {
            Ok(rhs_packed(sys, yy)? * sign)
        };
        let k1 = f(&y)?;
        let y2 = &y + &k1 * (h / 2.0);
        let k2 = f(&y2)?;
        let y3 = &y + &k2 * (h / 2.0);
        let k3 = f(&y3)?;
        let y4 = &y + &k3 * h;
        let k4 = f(&y4)?;

        if let Some(j) = jac.as_mut() {
            let a1 = linearization(sys, &y)? * sign;
            let a2 = linearization(sys, &y2)? * sign;
            let a3 = linearization(sys, &y3)? * sign;
            let a4 = linearization(sys, &y4)? * sign;
            let m1 = &a1 * &*j;
            let m2 = &a2 * &(&*j + &m1 * (h / 2.0));
            let m3 = &a3 * &(&*j + &m2 * (h / 2.0));
            let m4 = &a4 * &(&*j + &m3 * h);
            *j += (m1 + m2 * 2.0 + m3 * 2.0 + m4) * (h / 6.0);
        }

        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

        let norm = y.amax();
        if !norm.is_finite() || norm > FLOW_BLOWUP_GUARD {
            return Err(Error::FlowDiverged { t: t + h, norm });
        }
        nodes.push(y.clone());
    }

    if direction == Direction::Backward {
        nodes.reverse();
    }

    let mut states = Vec::with_capacity(nodes.len());
    let mut hdot = Vec::with_capacity(nodes.len());
    let mut hvals = Vec::with_capacity(nodes.len());
    for node in &nodes {
        let x = node.rows(0, d).into_owned();
        let p = node.rows(d, d).into_owned();
        let mut hd = DVector::zeros(sys.m());
        for i in 1..=sys.m() {
            hd[i - 1] = p.dot(&sys.sigma(i, &x)?);
        }
        hvals.push(eval_hamiltonian(sys, &x, &p)?);
        hdot.push(hd);
        states.push(CotangentPoint::new(x, p));
    }

    let cvalue = match direction {
        Direction::Forward => hvals[0],
        Direction::Backward => *hvals.last().unwrap(),
    };
    let defect = hvals
        .iter()
        .map(|v| (v - cvalue).abs())
        .fold(0.0, f64::max);
    let budget = TOL_CONSERVE * (1.0 + cvalue.abs());
    if defect > CONSERVE_HARD_FACTOR * budget {
        return Err(Error::EnergyDrift { defect, budget });
    }

    let speed_sq: Vec<f64> = hdot.iter().map(|v| v.norm_squared()).collect();
    let energy_direct = 0.5 * simpson_uniform(&speed_sq, h)?;
    let t: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();

    let path = PhasePath {
        t,
        states,
        hdot,
        hamiltonian_value: cvalue,
        conservation_defect: defect,
        energy_direct,
    };
    Ok((path, jac))
}

pub fn flow(
    sys: &VectorFieldSystem,
    endpoint: &CotangentPoint,
    horizon: f64,
    steps: usize,
    direction: Direction,
) -> Result<PhasePath> {
    integrate(sys, endpoint, horizon, steps, direction, None).map(|(p, _)| p)
}

pub fn flow_jacobian(
    sys: &VectorFieldSystem,
    endpoint: &CotangentPoint,
    horizon: f64,
    steps: usize,
    direction: Direction,
    seed: &DMatrix<f64>,
) -> Result<(PhasePath, DMatrix<f64>)> {
    integrate(sys, endpoint, horizon, steps, direction, Some(seed))
        .map(|(p, j)| (p, j.unwrap()))
}

/// Seed columns for sensitivities with respect to the initial covector.
pub fn seed_p0(d: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(2 * d, d);
    for j in 0..d {
        s[(d + j, j)] = 1.0;
    }
    s
}

/// Seed columns for sensitivities with respect to the initial position.
pub fn seed_x0(d: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(2 * d, d);
    for j in 0..d {
        s[(j, j)] = 1.0;
    }
    s
}

pub fn seed_full(d: usize) -> DMatrix<f64> {
    DMatrix::identity(2 * d, 2 * d)
}

/// Seeds for the non-focality matrix: perturb the terminal point by the d-l
/// unobserved position directions, then the terminal covector by the l
/// observed directions. Column order matches the (z-block, q-block)
/// convention of the non-focality determinant.
pub fn seed_focal(d: usize, l: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(2 * d, d);
    for j in 0..(d - l) {
        s[(l + j, j)] = 1.0;
    }
    for j in 0..l {
        s[(d + j, d - l + j)] = 1.0;
    }
    s
}

/// Second entry of the energy double bookkeeping: pointwise along an extremal
/// (1/2)|hdot|^2 = H - <p, sigma_0(x)>, so integrating with conserved H = C,
///
/// ```text
///   Lambda = T C - integral <sigma_0(x), p> dt.
/// ```
///
/// Agreement with the direct quadrature is a strong consistency check on the
/// flow.
pub fn energy_invariant(sys: &VectorFieldSystem, path: &PhasePath) -> Result<f64> {
    let n = path.t.len() - 1;
    let h = path.horizon() / n as f64;
    let mut vals = Vec::with_capacity(n + 1);
    for st in &path.states {
        vals.push(sys.sigma(0, &st.x)?.dot(&st.p));
    }
    let drift_part = simpson_uniform(&vals, h)?;
    Ok(path.horizon() * path.hamiltonian_value - drift_part)
}
