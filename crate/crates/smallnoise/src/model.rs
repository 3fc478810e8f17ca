//! Model layer: the diffusion data everything else consumes.
//!
//! A system packages
//!
//! ```text
//!   dX = b(eps, X) dt + eps * sum_{i=1..m} sigma_i(X) dW^i,   X_0 = start(eps),
//! ```
//!
//! observed through the projection onto `l` of the `d` coordinates. The
//! limiting drift `sigma_0 = b(0, .)` joins the diffusion fields in the
//! Hamiltonian; `d/d_eps b(0, .)` and `d/d_eps start(0)` feed the first-order
//! expansion term. Builtin models carry hand-coded analytic Jacobians; models
//! loaded from config files are polynomial with exact symbolic derivatives.
//! Both expose polynomial mirrors of the fields so Lie brackets stay exact.
//!
//! The projection may be any strictly increasing coordinate subset. The state
//! is permuted once at construction so the projected coordinates form the
//! leading block; every downstream quantity (targets, covectors, reports)
//! lives in this internal order.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::poly::{Poly, PolyField};

// ---------------------------------------------------------------------------
// Builtin models, in natural coordinates.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Builtin {
    /// dY = (alpha eps + beta Y) dt + eps gamma dW, Y_0 = eps yhat0.
    Ou1d { alpha: f64, beta: f64, gamma: f64, yhat0: f64 },
    /// Kinetic pair: dY = Z dt, dZ = eps dW, start eps (yhat0, zhat0).
    Langevin { yhat0: f64, zhat0: f64 },
    /// Driftless frame on R^2: sigma_1 = (1, 0), sigma_2 = (theta z, 1).
    Flatmetric { theta: f64 },
    /// Heisenberg frame on R^3: sigma_1 = (1, 0, -y/2), sigma_2 = (0, 1, x/2),
    /// start eps (0, yhat0, zhat0).
    Heisenberg { yhat0: f64, zhat0: f64 },
}

impl Builtin {
    fn new(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let allow = |keys: &[&str]| -> Result<()> {
            for k in params.keys() {
                if !keys.contains(&k.as_str()) {
                    return Err(Error::UnknownParameter {
                        builtin: name.to_string(),
                        name: k.clone(),
                    });
                }
            }
            Ok(())
        };
        let get = |key: &str, default: f64| *params.get(key).unwrap_or(&default);
        match name {
            "ou1d" => {
                allow(&["alpha", "beta", "gamma", "yhat0"])?;
                let gamma = get("gamma", 1.0);
                if gamma <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "ou1d needs gamma > 0, got {gamma}"
                    )));
                }
                Ok(Builtin::Ou1d {
                    alpha: get("alpha", 0.0),
                    beta: get("beta", 0.0),
                    gamma,
                    yhat0: get("yhat0", 0.0),
                })
            }
            "langevin" => {
                allow(&["yhat0", "zhat0"])?;
                Ok(Builtin::Langevin {
                    yhat0: get("yhat0", 0.0),
                    zhat0: get("zhat0", 0.0),
                })
            }
            "flatmetric" => {
                allow(&["theta"])?;
                let theta = get("theta", 1.0);
                if !(0.0..=1.0).contains(&theta) {
                    return Err(Error::InvalidParameter(format!(
                        "flatmetric needs theta in [0, 1], got {theta}"
                    )));
                }
                Ok(Builtin::Flatmetric { theta })
            }
            "heisenberg" => {
                allow(&["yhat0", "zhat0"])?;
                Ok(Builtin::Heisenberg {
                    yhat0: get("yhat0", 0.0),
                    zhat0: get("zhat0", 0.0),
                })
            }
            other => Err(Error::UnknownBuiltin(other.to_string())),
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            Builtin::Ou1d { .. } => (1, 1),
            Builtin::Langevin { .. } => (2, 1),
            Builtin::Flatmetric { .. } => (2, 2),
            Builtin::Heisenberg { .. } => (3, 2),
        }
    }

    fn default_mask(&self) -> Vec<usize> {
        match self {
            Builtin::Ou1d { .. } | Builtin::Langevin { .. } | Builtin::Flatmetric { .. } => {
                vec![0]
            }
            Builtin::Heisenberg { .. } => vec![0, 1, 2],
        }
    }

    fn coord_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            Builtin::Ou1d { .. } => &["y"],
            Builtin::Langevin { .. } | Builtin::Flatmetric { .. } => &["y", "z"],
            Builtin::Heisenberg { .. } => &["x", "y", "z"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    fn sigma(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Builtin::Ou1d { beta, gamma, .. } => match i {
                0 => DVector::from_vec(vec![beta * x[0]]),
                _ => DVector::from_vec(vec![*gamma]),
            },
            Builtin::Langevin { .. } => match i {
                0 => DVector::from_vec(vec![x[1], 0.0]),
                _ => DVector::from_vec(vec![0.0, 1.0]),
            },
            Builtin::Flatmetric { theta } => match i {
                0 => DVector::zeros(2),
                1 => DVector::from_vec(vec![1.0, 0.0]),
                _ => DVector::from_vec(vec![theta * x[1], 1.0]),
            },
            Builtin::Heisenberg { .. } => match i {
                0 => DVector::zeros(3),
                1 => DVector::from_vec(vec![1.0, 0.0, -0.5 * x[1]]),
                _ => DVector::from_vec(vec![0.0, 1.0, 0.5 * x[0]]),
            },
        }
    }

    fn sigma_jacobian(&self, i: usize) -> DMatrix<f64> {
        // Every builtin field is affine, so the Jacobian is state-free.
        match self {
            Builtin::Ou1d { beta, .. } => match i {
                0 => DMatrix::from_row_slice(1, 1, &[*beta]),
                _ => DMatrix::zeros(1, 1),
            },
            Builtin::Langevin { .. } => match i {
                0 => DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
                _ => DMatrix::zeros(2, 2),
            },
            Builtin::Flatmetric { theta } => match i {
                2 => DMatrix::from_row_slice(2, 2, &[0.0, *theta, 0.0, 0.0]),
                _ => DMatrix::zeros(2, 2),
            },
            Builtin::Heisenberg { .. } => match i {
                1 => {
                    let mut j = DMatrix::zeros(3, 3);
                    j[(2, 1)] = -0.5;
                    j
                }
                2 => {
                    let mut j = DMatrix::zeros(3, 3);
                    j[(2, 0)] = 0.5;
                    j
                }
                _ => DMatrix::zeros(3, 3),
            },
        }
    }

    fn drift(&self, eps: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Builtin::Ou1d { alpha, beta, .. } => {
                DVector::from_vec(vec![alpha * eps + beta * x[0]])
            }
            _ => self.sigma(0, x),
        }
    }

    fn drift_eps_deriv(&self, d: usize) -> DVector<f64> {
        match self {
            Builtin::Ou1d { alpha, .. } => DVector::from_vec(vec![*alpha]),
            _ => DVector::zeros(d),
        }
    }

    fn x0_hat(&self) -> DVector<f64> {
        match self {
            Builtin::Ou1d { yhat0, .. } => DVector::from_vec(vec![*yhat0]),
            Builtin::Langevin { yhat0, zhat0 } => DVector::from_vec(vec![*yhat0, *zhat0]),
            Builtin::Flatmetric { .. } => DVector::zeros(2),
            Builtin::Heisenberg { yhat0, zhat0 } => {
                DVector::from_vec(vec![0.0, *yhat0, *zhat0])
            }
        }
    }

    /// Polynomial mirrors of sigma_0..sigma_m, natural coordinates.
    fn poly_fields(&self) -> Vec<PolyField> {
        match self {
            Builtin::Ou1d { beta, gamma, .. } => vec![
                PolyField::new(vec![Poly::var(1, 0).scale(*beta)]),
                PolyField::new(vec![Poly::constant(1, *gamma)]),
            ],
            Builtin::Langevin { .. } => vec![
                PolyField::new(vec![Poly::var(2, 1), Poly::zero(2)]),
                PolyField::new(vec![Poly::zero(2), Poly::constant(2, 1.0)]),
            ],
            Builtin::Flatmetric { theta } => vec![
                PolyField::zero(2),
                PolyField::new(vec![Poly::constant(2, 1.0), Poly::zero(2)]),
                PolyField::new(vec![Poly::var(2, 1).scale(*theta), Poly::constant(2, 1.0)]),
            ],
            Builtin::Heisenberg { .. } => vec![
                PolyField::zero(3),
                PolyField::new(vec![
                    Poly::constant(3, 1.0),
                    Poly::zero(3),
                    Poly::var(3, 1).scale(-0.5),
                ]),
                PolyField::new(vec![
                    Poly::zero(3),
                    Poly::constant(3, 1.0),
                    Poly::var(3, 0).scale(0.5),
                ]),
            ],
        }
    }
}

// ---------------------------------------------------------------------------
// Polynomial backend (config DSL), stored in internal coordinates with
// precomputed derivative polynomials.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct PolyFieldOps {
    field: PolyField,
    jac: Vec<Vec<Poly>>,       // [component][variable]
    hess: Vec<Vec<Vec<Poly>>>, // [component][variable][variable]
}

impl PolyFieldOps {
    fn new(field: PolyField) -> Self {
        let d = field.dim();
        let n = field.components[0].nvars();
        let jac: Vec<Vec<Poly>> = (0..d)
            .map(|i| (0..n).map(|j| field.components[i].partial(j)).collect())
            .collect();
        let hess = (0..d)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| jac[i][j].partial(k)).collect())
                    .collect()
            })
            .collect();
        PolyFieldOps { field, jac, hess }
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.field.eval(x)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.jac.len();
        let n = self.jac[0].len();
        DMatrix::from_fn(d, n, |i, j| self.jac[i][j].eval(x))
    }

    fn hessian(&self, comp: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.hess[comp].len();
        DMatrix::from_fn(n, n, |j, k| self.hess[comp][j][k].eval(x))
    }
}

#[derive(Clone, Debug)]
struct PolySystem {
    fields: Vec<PolyFieldOps>, // m+1 entries, sigma_0 first
    drift_eps: PolyFieldOps,
}

// ---------------------------------------------------------------------------
// Config documents.
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: Option<String>,
    /// Either a builtin reference ...
    pub builtin: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// ... or an explicit polynomial system.
    pub dims: Option<DimsConfig>,
    pub projection_mask: Option<Vec<usize>>,
    pub coords: Option<Vec<String>>,
    pub fields: Option<Vec<FieldConfig>>,
    pub drift_eps: Option<FieldConfig>,
    pub start: Option<StartConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    pub d: usize,
    pub m: usize,
    pub l: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// One entry per coordinate; each entry is a list of monomial terms.
    pub components: Vec<Vec<TermConfig>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub coeff: f64,
    /// Exponent of each state variable, length d.
    pub exps: Vec<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    pub x0: Vec<f64>,
    pub x0_hat: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// The assembled system.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Backend {
    Builtin(Builtin),
    Poly(PolySystem),
}

#[derive(Clone, Debug)]
pub struct VectorFieldSystem {
    name: String,
    d: usize,
    m: usize,
    l: usize,
    mask: Vec<usize>,
    perm: Vec<usize>,     // internal index -> natural index
    inv_perm: Vec<usize>, // natural index -> internal index
    identity_perm: bool,
    coord_names: Vec<String>, // natural order
    backend: Backend,
    bracket_fields: Vec<PolyField>, // m+1 polynomial mirrors, internal coords
    x0: DVector<f64>,               // internal coords
    x0_hat: DVector<f64>,           // internal coords
    short_time: bool,
    nonlinear: bool,
}

impl VectorFieldSystem {
    /// Construct a builtin model, optionally overriding the projection mask
    /// (natural coordinate indices, strictly increasing).
    pub fn builtin(
        name: &str,
        params: &BTreeMap<String, f64>,
        mask: Option<Vec<usize>>,
    ) -> Result<Self> {
        let b = Builtin::new(name, params)?;
        let (d, m) = b.dims();
        let mask = mask.unwrap_or_else(|| b.default_mask());
        let (perm, inv_perm) = validate_mask(&mask, d)?;
        let x0_nat = DVector::zeros(d);
        let x0_hat_nat = b.x0_hat();
        let bracket_fields = b
            .poly_fields()
            .into_iter()
            .map(|f| f.permute(&perm))
            .collect();
        let identity_perm = perm.iter().enumerate().all(|(k, &v)| k == v);
        Ok(VectorFieldSystem {
            name: name.to_string(),
            d,
            m,
            l: mask.len(),
            x0: permute_vec(&x0_nat, &perm),
            x0_hat: permute_vec(&x0_hat_nat, &perm),
            coord_names: b.coord_names(),
            backend: Backend::Builtin(b),
            bracket_fields,
            mask,
            perm,
            inv_perm,
            identity_perm,
            short_time: false,
            nonlinear: false, // every builtin field is affine
        })
    }

    pub fn from_config(cfg: ModelConfig) -> Result<Self> {
        if let Some(builtin_name) = &cfg.builtin {
            if cfg.dims.is_some() || cfg.fields.is_some() || cfg.start.is_some() {
                return Err(Error::Config(
                    "a builtin reference cannot also define dims/fields/start".into(),
                ));
            }
            let mut sys =
                VectorFieldSystem::builtin(builtin_name, &cfg.params, cfg.projection_mask)?;
            if let Some(n) = cfg.name {
                sys.name = n;
            }
            return Ok(sys);
        }

        let dims = cfg
            .dims
            .ok_or_else(|| Error::Config("missing `dims` for a polynomial model".into()))?;
        let (d, m, l) = (dims.d, dims.m, dims.l);
        if d == 0 || m == 0 {
            return Err(Error::Config("need d >= 1 and m >= 1".into()));
        }
        if l == 0 || l > d {
            return Err(Error::Config(format!(
                "projection dimension l = {l} must satisfy 1 <= l <= d = {d}"
            )));
        }
        if !cfg.params.is_empty() {
            return Err(Error::Config(
                "`params` only applies to builtin models".into(),
            ));
        }
        let mask = cfg.projection_mask.unwrap_or_else(|| (0..l).collect());
        if mask.len() != l {
            return Err(Error::Config(format!(
                "projection_mask has {} entries but l = {l}",
                mask.len()
            )));
        }
        let (perm, inv_perm) = validate_mask(&mask, d)?;

        let field_cfgs = cfg
            .fields
            .ok_or_else(|| Error::Config("missing `fields` for a polynomial model".into()))?;
        if field_cfgs.len() != m + 1 {
            return Err(Error::Config(format!(
                "expected {} field tables (sigma_0 .. sigma_{m}), got {}",
                m + 1,
                field_cfgs.len()
            )));
        }
        let parse_field = |fc: &FieldConfig, what: &str| -> Result<PolyField> {
            if fc.components.len() != d {
                return Err(Error::Config(format!(
                    "{what} has {} components, expected d = {d}",
                    fc.components.len()
                )));
            }
            let comps = fc
                .components
                .iter()
                .map(|terms| {
                    let mut acc = Vec::with_capacity(terms.len());
                    for t in terms {
                        if t.exps.len() != d {
                            return Err(Error::Config(format!(
                                "{what}: exponent vector length {} != d = {d}",
                                t.exps.len()
                            )));
                        }
                        if !t.coeff.is_finite() {
                            return Err(Error::Config(format!(
                                "{what}: non-finite coefficient"
                            )));
                        }
                        acc.push((t.exps.clone(), t.coeff));
                    }
                    Ok(Poly::from_terms(d, acc))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PolyField::new(comps))
        };

        let mut fields_nat = Vec::with_capacity(m + 1);
        for (i, fc) in field_cfgs.iter().enumerate() {
            fields_nat.push(parse_field(fc, &format!("fields[{i}]"))?);
        }
        let drift_eps_nat = match &cfg.drift_eps {
            Some(fc) => parse_field(fc, "drift_eps")?,
            None => PolyField::zero(d),
        };

        let start = cfg.start.unwrap_or(StartConfig {
            x0: vec![0.0; d],
            x0_hat: None,
        });
        let check_vec = |v: &[f64], what: &'static str| -> Result<DVector<f64>> {
            if v.len() != d {
                return Err(Error::Dimension {
                    what,
                    expected: d,
                    got: v.len(),
                });
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(what));
            }
            Ok(DVector::from_column_slice(v))
        };
        let x0_nat = check_vec(&start.x0, "start.x0")?;
        let x0_hat_nat = match &start.x0_hat {
            Some(v) => check_vec(v, "start.x0_hat")?,
            None => DVector::zeros(d),
        };

        let coord_names = match cfg.coords {
            Some(names) => {
                if names.len() != d {
                    return Err(Error::Config(format!(
                        "coords has {} names, expected d = {d}",
                        names.len()
                    )));
                }
                names
            }
            None => (1..=d).map(|k| format!("x{k}")).collect(),
        };

        // Move the polynomial data into internal (permuted) coordinates once.
        let fields_int: Vec<PolyField> =
            fields_nat.iter().map(|f| f.permute(&perm)).collect();
        let drift_eps_int = drift_eps_nat.permute(&perm);
        let identity_perm = perm.iter().enumerate().all(|(k, &v)| k == v);
        let nonlinear = fields_int
            .iter()
            .any(|f| f.components.iter().any(|p| p.total_degree() >= 2));

        Ok(VectorFieldSystem {
            name: cfg.name.unwrap_or_else(|| "polynomial".to_string()),
            d,
            m,
            l,
            x0: permute_vec(&x0_nat, &perm),
            x0_hat: permute_vec(&x0_hat_nat, &perm),
            coord_names,
            backend: Backend::Poly(PolySystem {
                fields: fields_int.iter().cloned().map(PolyFieldOps::new).collect(),
                drift_eps: PolyFieldOps::new(drift_eps_int),
            }),
            bracket_fields: fields_int,
            mask,
            perm,
            inv_perm,
            identity_perm,
            short_time: false,
            nonlinear,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("json: {e}")))?;
        VectorFieldSystem::from_config(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("toml: {e}")))?;
        VectorFieldSystem::from_config(cfg)
    }

    /// Load a model from a `.json` or `.toml` document.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => VectorFieldSystem::from_json(&text),
            Some(e) if e.eq_ignore_ascii_case("toml") => VectorFieldSystem::from_toml(&text),
            _ => Err(Error::Config(format!(
                "cannot infer config format from path {}",
                path.display()
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// Natural indices of the projected coordinates (strictly increasing).
    pub fn mask(&self) -> &[usize] {
        &self.mask
    }

    /// Internal-to-natural coordinate permutation.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Coordinate names in internal order.
    pub fn internal_coord_names(&self) -> Vec<String> {
        self.perm
            .iter()
            .map(|&nat| self.coord_names[nat].clone())
            .collect()
    }

    pub fn is_short_time(&self) -> bool {
        self.short_time
    }

    /// True when some field has degree >= 2, i.e. the variational equations
    /// need the second-derivative terms of the Hamiltonian.
    pub fn needs_hessians(&self) -> bool {
        self.nonlinear
    }

    fn check_state(&self, x: &DVector<f64>, what: &'static str) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Dimension {
                what,
                expected: self.d,
                got: x.len(),
            });
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }

    fn check_field_index(&self, i: usize) -> Result<()> {
        if i > self.m {
            return Err(Error::FieldIndex { index: i, m: self.m });
        }
        Ok(())
    }

    pub fn natural_to_internal(&self, v: &DVector<f64>) -> DVector<f64> {
        permute_vec(v, &self.perm)
    }

    pub fn internal_to_natural(&self, v: &DVector<f64>) -> DVector<f64> {
        permute_vec(v, &self.inv_perm)
    }

    /// sigma_i in internal coordinates; i = 0 is the limiting drift.
    pub fn sigma(&self, i: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_field_index(i)?;
        self.check_state(x, "sigma input")?;
        if i == 0 && self.short_time {
            return Ok(DVector::zeros(self.d));
        }
        Ok(match &self.backend {
            Backend::Poly(p) => p.fields[i].eval(x),
            Backend::Builtin(b) => {
                if self.identity_perm {
                    b.sigma(i, x)
                } else {
                    let nat = self.internal_to_natural(x);
                    permute_vec(&b.sigma(i, &nat), &self.perm)
                }
            }
        })
    }

    pub fn sigma_jacobian(&self, i: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_field_index(i)?;
        self.check_state(x, "sigma_jacobian input")?;
        if i == 0 && self.short_time {
            return Ok(DMatrix::zeros(self.d, self.d));
        }
        Ok(match &self.backend {
            Backend::Poly(p) => p.fields[i].jacobian(x),
            Backend::Builtin(b) => {
                let j = b.sigma_jacobian(i);
                if self.identity_perm {
                    j
                } else {
                    permute_mat(&j, &self.perm)
                }
            }
        })
    }

    /// Second derivative matrix of component `comp` of sigma_i.
    pub fn sigma_hessian(&self, i: usize, comp: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_field_index(i)?;
        self.check_state(x, "sigma_hessian input")?;
        if comp >= self.d {
            return Err(Error::Dimension {
                what: "sigma_hessian component",
                expected: self.d,
                got: comp,
            });
        }
        if i == 0 && self.short_time {
            return Ok(DMatrix::zeros(self.d, self.d));
        }
        Ok(match &self.backend {
            Backend::Poly(p) => p.fields[i].hessian(comp, x),
            // All builtin fields are affine.
            Backend::Builtin(_) => DMatrix::zeros(self.d, self.d),
        })
    }

    /// Full drift b(eps, x). In short-time mode the original limiting drift is
    /// pushed to order eps^2, which is what makes the rescaled picture work.
    pub fn drift(&self, eps: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x, "drift input")?;
        if self.short_time {
            return Ok(self.backend_sigma0(x) * (eps * eps));
        }
        Ok(match &self.backend {
            // Polynomial models are affine in eps by construction.
            Backend::Poly(p) => p.fields[0].eval(x) + p.drift_eps.eval(x) * eps,
            Backend::Builtin(b) => {
                if self.identity_perm {
                    b.drift(eps, x)
                } else {
                    let nat = self.internal_to_natural(x);
                    permute_vec(&b.drift(eps, &nat), &self.perm)
                }
            }
        })
    }

    /// d/d_eps b(eps, x) at eps = 0.
    pub fn drift_eps_deriv(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x, "drift_eps input")?;
        if self.short_time {
            return Ok(DVector::zeros(self.d));
        }
        Ok(match &self.backend {
            Backend::Poly(p) => p.drift_eps.eval(x),
            Backend::Builtin(b) => {
                let v = b.drift_eps_deriv(self.d);
                if self.identity_perm {
                    v
                } else {
                    permute_vec(&v, &self.perm)
                }
            }
        })
    }

    /// The original limiting drift, bypassing the short-time zeroing.
    fn backend_sigma0(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.backend {
            Backend::Poly(p) => p.fields[0].eval(x),
            Backend::Builtin(b) => {
                if self.identity_perm {
                    b.sigma(0, x)
                } else {
                    let nat = self.internal_to_natural(x);
                    permute_vec(&b.sigma(0, &nat), &self.perm)
                }
            }
        }
    }

    /// start(eps) = x0 + eps x0_hat (constant x0 in short-time mode).
    pub fn start(&self, eps: f64) -> DVector<f64> {
        if self.short_time {
            self.x0.clone()
        } else {
            &self.x0 + &self.x0_hat * eps
        }
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn x0_hat(&self) -> DVector<f64> {
        if self.short_time {
            DVector::zeros(self.d)
        } else {
            self.x0_hat.clone()
        }
    }

    /// Leading-block projection onto the observed coordinates.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.l).into_owned()
    }

    /// Polynomial mirrors of sigma_0..sigma_m in internal coordinates, for
    /// exact Lie bracket computations.
    pub fn poly_fields(&self) -> Vec<PolyField> {
        if self.short_time {
            let mut fs = self.bracket_fields.clone();
            fs[0] = PolyField::zero(self.d);
            fs
        } else {
            self.bracket_fields.clone()
        }
    }

    /// Rebuild for the short-time problem: the drift is pushed to eps^2 b(.),
    /// the start point is frozen at x0, and the horizon convention is T = 1.
    pub fn short_time_variant(&self) -> VectorFieldSystem {
        let mut v = self.clone();
        v.short_time = true;
        v.name = format!("{}-short-time", self.name);
        v
    }
}

fn validate_mask(mask: &[usize], d: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if mask.is_empty() {
        return Err(Error::Config("projection mask is empty".into()));
    }
    for w in mask.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Config(format!(
                "projection mask must be strictly increasing, got {mask:?}"
            )));
        }
    }
    if *mask.last().unwrap() >= d {
        return Err(Error::Config(format!(
            "projection mask index {} out of range for d = {d}",
            mask.last().unwrap()
        )));
    }
    let mut perm: Vec<usize> = mask.to_vec();
    perm.extend((0..d).filter(|k| !mask.contains(k)));
    let mut inv = vec![0; d];
    for (k, &nat) in perm.iter().enumerate() {
        inv[nat] = k;
    }
    Ok((perm, inv))
}

fn permute_vec(v: &DVector<f64>, perm: &[usize]) -> DVector<f64> {
    DVector::from_iterator(perm.len(), perm.iter().map(|&nat| v[nat]))
}

fn permute_mat(a: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    let n = perm.len();
    DMatrix::from_fn(n, n, |i, j| a[(perm[i], perm[j])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::fd_jacobian;
    use crate::tolerances::{FD_JACOBIAN_RTOL, FD_JACOBIAN_STEP};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn builtin(name: &str, params: &[(&str, f64)]) -> VectorFieldSystem {
        let map: BTreeMap<String, f64> =
            params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        VectorFieldSystem::builtin(name, &map, None).unwrap()
    }

    pub(crate) const HEISENBERG_POLY_TOML: &str = r#"
name = "heisenberg-poly"
dims = { d = 3, m = 2, l = 2 }
projection_mask = [0, 2]
coords = ["x", "y", "z"]

[start]
x0 = [0.0, 0.0, 0.0]
x0_hat = [0.0, 0.3, 0.1]

[[fields]] # sigma_0
components = [[], [], []]

[[fields]] # sigma_1 = (1, 0, -y/2)
components = [
  [{ coeff = 1.0, exps = [0, 0, 0] }],
  [],
  [{ coeff = -0.5, exps = [0, 1, 0] }],
]

[[fields]] # sigma_2 = (0, 1, x/2)
components = [
  [],
  [{ coeff = 1.0, exps = [0, 0, 0] }],
  [{ coeff = 0.5, exps = [1, 0, 0] }],
]
"#;

    #[test]
    fn builtin_dimensions() {
        let sys = builtin("heisenberg", &[]);
        assert_eq!((sys.d(), sys.m(), sys.l()), (3, 2, 3));
        let sys = builtin("langevin", &[]);
        assert_eq!((sys.d(), sys.m(), sys.l()), (2, 1, 1));
        let sys = builtin("ou1d", &[("beta", 0.5)]);
        assert_eq!((sys.d(), sys.m(), sys.l()), (1, 1, 1));
        let sys = builtin("flatmetric", &[("theta", 0.25)]);
        assert_eq!((sys.d(), sys.m(), sys.l()), (2, 2, 1));
    }

    #[test]
    fn heisenberg_fields_at_probes() {
        let sys = builtin("heisenberg", &[]);
        let x = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let s2 = sys.sigma(2, &x).unwrap();
        assert_relative_eq!(s2[0], 0.0);
        assert_relative_eq!(s2[1], 1.0);
        assert_relative_eq!(s2[2], 1.0);
        let s1 = sys.sigma(1, &DVector::zeros(3)).unwrap();
        assert_eq!(s1.as_slice(), &[1.0, 0.0, 0.0]);
        assert!(sys.sigma(0, &x).unwrap().norm() == 0.0);
    }

    #[test]
    fn masked_heisenberg_permutes_state_and_fields() {
        let map = BTreeMap::new();
        let sys = VectorFieldSystem::builtin("heisenberg", &map, Some(vec![0, 2])).unwrap();
        assert_eq!(sys.l(), 2);
        assert_eq!(sys.perm(), &[0, 2, 1]);
        assert_eq!(sys.internal_coord_names(), vec!["x", "z", "y"]);
        // internal (x, z, y) = (2, 5, 3) is natural (2, 3, 5)
        let xi = DVector::from_vec(vec![2.0, 5.0, 3.0]);
        let s1 = sys.sigma(1, &xi).unwrap(); // natural (1, 0, -1.5) -> internal (1, -1.5, 0)
        assert_relative_eq!(s1[0], 1.0);
        assert_relative_eq!(s1[1], -1.5);
        assert_relative_eq!(s1[2], 0.0);
        let proj = sys.project(&xi);
        assert_eq!(proj.as_slice(), &[2.0, 5.0]);
        let nat = sys.internal_to_natural(&xi);
        assert_eq!(nat.as_slice(), &[2.0, 3.0, 5.0]);
    }

    #[test]
    fn langevin_drift_jacobian_and_start() {
        let sys = builtin("langevin", &[("yhat0", 0.4), ("zhat0", -0.2)]);
        let x = DVector::from_vec(vec![1.0, 3.0]);
        assert_eq!(sys.sigma(0, &x).unwrap().as_slice(), &[3.0, 0.0]);
        let j = sys.sigma_jacobian(0, &x).unwrap();
        assert_eq!(j[(0, 1)], 1.0);
        assert_eq!(j[(0, 0)] + j[(1, 0)] + j[(1, 1)], 0.0);
        let s = sys.start(0.5);
        assert_relative_eq!(s[0], 0.2);
        assert_relative_eq!(s[1], -0.1);
    }

    #[test]
    fn ou1d_drift_is_affine_in_eps() {
        let sys = builtin("ou1d", &[("alpha", 1.0), ("beta", 0.5), ("yhat0", 0.3)]);
        let x = DVector::from_vec(vec![2.0]);
        assert_relative_eq!(sys.drift(0.0, &x).unwrap()[0], 1.0);
        assert_relative_eq!(sys.drift(0.1, &x).unwrap()[0], 1.1);
        assert_relative_eq!(sys.drift_eps_deriv(&x).unwrap()[0], 1.0);
        // sigma_0 agrees with the zero-noise drift
        assert_relative_eq!(sys.sigma(0, &x).unwrap()[0], sys.drift(0.0, &x).unwrap()[0]);
    }

    #[test]
    fn start_expansion_residual_vanishes_to_first_order() {
        let sys = builtin("heisenberg", &[("yhat0", 0.3), ("zhat0", 0.1)]);
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-3, 1e-4] {
            let resid = (sys.start(eps) - sys.x0() - sys.x0_hat() * eps).norm() / eps;
            assert!(resid <= prev + 1e-15);
            prev = resid;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in ["ou1d", "langevin", "flatmetric", "heisenberg"] {
            let sys = match name {
                "ou1d" => builtin(name, &[("alpha", 1.0), ("beta", 0.7)]),
                "flatmetric" => builtin(name, &[("theta", 0.6)]),
                _ => builtin(name, &[]),
            };
            for _ in 0..50 {
                let x = DVector::from_fn(sys.d(), |_, _| rng.random_range(-2.0..2.0));
                for i in 0..=sys.m() {
                    let analytic = sys.sigma_jacobian(i, &x).unwrap();
                    let fd = fd_jacobian(
                        |p| sys.sigma(i, p).unwrap(),
                        &x,
                        FD_JACOBIAN_STEP,
                    );
                    let scale = 1.0 + analytic.amax();
                    assert!(
                        (&analytic - &fd).amax() <= FD_JACOBIAN_RTOL * scale,
                        "{name} sigma_{i} Jacobian mismatch at {x:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn poly_heisenberg_matches_builtin_to_machine_precision() {
        let sys_poly = VectorFieldSystem::from_toml(HEISENBERG_POLY_TOML).unwrap();
        let map: BTreeMap<String, f64> =
            [("yhat0".to_string(), 0.3), ("zhat0".to_string(), 0.1)].into();
        let sys_b = VectorFieldSystem::builtin("heisenberg", &map, Some(vec![0, 2])).unwrap();
        assert_eq!(sys_poly.perm(), sys_b.perm());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let eps = rng.random_range(0.0..0.5);
            for i in 0..=2 {
                let a = sys_poly.sigma(i, &x).unwrap();
                let b = sys_b.sigma(i, &x).unwrap();
                assert!((a - b).amax() < 1e-12);
                let ja = sys_poly.sigma_jacobian(i, &x).unwrap();
                let jb = sys_b.sigma_jacobian(i, &x).unwrap();
                assert!((ja - jb).amax() < 1e-12);
            }
            let da = sys_poly.drift(eps, &x).unwrap();
            let db = sys_b.drift(eps, &x).unwrap();
            assert!((da - db).amax() < 1e-12);
        }
        assert_eq!(sys_poly.start(0.2).as_slice(), sys_b.start(0.2).as_slice());
    }

    #[test]
    fn poly_hessians_are_exact_on_quadratic_fields() {
        // sigma_1 = (x^2, x y): D^2 of component 0 is [[2,0],[0,0]],
        // of component 1 is [[0,1],[1,0]].
        let cfg = r#"
        {
          "dims": {"d": 2, "m": 1, "l": 1},
          "fields": [
            {"components": [[], []]},
            {"components": [
              [{"coeff": 1.0, "exps": [2, 0]}],
              [{"coeff": 1.0, "exps": [1, 1]}]
            ]}
          ]
        }"#;
        let sys = VectorFieldSystem::from_json(cfg).unwrap();
        let x = DVector::from_vec(vec![1.3, -0.4]);
        let h0 = sys.sigma_hessian(1, 0, &x).unwrap();
        assert_relative_eq!(h0[(0, 0)], 2.0);
        assert_relative_eq!(h0[(0, 1)], 0.0);
        let h1 = sys.sigma_hessian(1, 1, &x).unwrap();
        assert_relative_eq!(h1[(0, 1)], 1.0);
        assert_relative_eq!(h1[(1, 0)], 1.0);
        let j = sys.sigma_jacobian(1, &x).unwrap();
        assert_relative_eq!(j[(0, 0)], 2.6);
        assert_relative_eq!(j[(1, 0)], -0.4);
        assert_relative_eq!(j[(1, 1)], 1.3);
    }

    #[test]
    fn config_validation_errors() {
        // l > d
        let bad = r#"{"dims": {"d": 2, "m": 1, "l": 3},
            "fields": [{"components": [[], []]}, {"components": [[], []]}]}"#;
        assert!(VectorFieldSystem::from_json(bad).is_err());
        // wrong field count
        let bad = r#"{"dims": {"d": 2, "m": 2, "l": 1},
            "fields": [{"components": [[], []]}, {"components": [[], []]}]}"#;
        assert!(VectorFieldSystem::from_json(bad).is_err());
        // malformed exponent length
        let bad = r#"{"dims": {"d": 2, "m": 1, "l": 1},
            "fields": [{"components": [[], []]},
                       {"components": [[{"coeff": 1.0, "exps": [1]}], []]}]}"#;
        assert!(VectorFieldSystem::from_json(bad).is_err());
        // non-increasing mask
        let bad = r#"{"dims": {"d": 3, "m": 1, "l": 2}, "projection_mask": [2, 0],
            "fields": [{"components": [[], [], []]}, {"components": [[], [], []]}]}"#;
        assert!(VectorFieldSystem::from_json(bad).is_err());
        // unknown builtin and unknown parameter
        assert!(matches!(
            VectorFieldSystem::builtin("nosuch", &BTreeMap::new(), None),
            Err(Error::UnknownBuiltin(_))
        ));
        let params: BTreeMap<String, f64> = [("q".to_string(), 1.0)].into();
        assert!(VectorFieldSystem::builtin("ou1d", &params, None).is_err());
        // out-of-range theta
        let params: BTreeMap<String, f64> = [("theta".to_string(), 1.5)].into();
        assert!(VectorFieldSystem::builtin("flatmetric", &params, None).is_err());
    }

    #[test]
    fn field_index_and_state_validation() {
        let sys = builtin("langevin", &[]);
        assert!(matches!(
            sys.sigma(5, &DVector::zeros(2)),
            Err(Error::FieldIndex { .. })
        ));
        assert!(sys.sigma(1, &DVector::zeros(3)).is_err());
        assert!(sys
            .sigma(1, &DVector::from_vec(vec![f64::NAN, 0.0]))
            .is_err());
    }

    #[test]
    fn short_time_variant_rescales_drift() {
        let sys = builtin("langevin", &[("yhat0", 0.5)]);
        let st = sys.short_time_variant();
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(st.sigma(0, &x).unwrap().norm(), 0.0);
        assert_eq!(st.sigma_jacobian(0, &x).unwrap().norm(), 0.0);
        // drift(eps) = eps^2 * original sigma_0
        let d = st.drift(0.5, &x).unwrap();
        assert_relative_eq!(d[0], 0.25 * 2.0);
        assert_relative_eq!(d[1], 0.0);
        assert_eq!(st.drift_eps_deriv(&x).unwrap().norm(), 0.0);
        // start is frozen
        assert_eq!(st.start(0.3).as_slice(), st.x0().as_slice());
        assert_eq!(st.x0_hat().norm(), 0.0);
        // the diffusion fields are untouched
        assert_eq!(
            st.sigma(1, &x).unwrap().as_slice(),
            sys.sigma(1, &x).unwrap().as_slice()
        );
    }
}
