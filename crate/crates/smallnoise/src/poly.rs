//! Exact multivariate polynomial algebra.
//!
//! Vector fields entered through the config DSL are polynomial in the state,
//! and the builtin models expose polynomial mirrors of their hand-coded
//! fields. Keeping the algebra exact means Lie brackets, Jacobians and second
//! derivatives carry no truncation error: the Hormander rank checks below are
//! decided by floating-point evaluation of exact coefficient arithmetic only.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

/// A polynomial in `nvars` variables, stored as a sorted, deduplicated term
/// list. The empty list is the zero polynomial.
#[derive(Clone, Debug, PartialEq)]
pub struct Poly {
    nvars: usize,
    terms: Vec<(Vec<u32>, f64)>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly { nvars, terms: Vec::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Poly::from_terms(nvars, vec![(vec![0; nvars], c)])
    }

    /// The coordinate monomial x_j.
    pub fn var(nvars: usize, j: usize) -> Self {
        assert!(j < nvars);
        let mut exps = vec![0; nvars];
        exps[j] = 1;
        Poly::from_terms(nvars, vec![(exps, 1.0)])
    }

    /// Build from raw terms, merging duplicates and dropping zeros.
    pub fn from_terms(nvars: usize, terms: Vec<(Vec<u32>, f64)>) -> Self {
        let mut map: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (exps, c) in terms {
            assert_eq!(exps.len(), nvars, "exponent vector length must equal nvars");
            *map.entry(exps).or_insert(0.0) += c;
        }
        let terms = map.into_iter().filter(|(_, c)| *c != 0.0).collect();
        Poly { nvars, terms }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[(Vec<u32>, f64)] {
        &self.terms
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.nvars);
        let mut acc = 0.0;
        for (exps, c) in &self.terms {
            let mut t = *c;
            for (j, &e) in exps.iter().enumerate() {
                if e > 0 {
                    t *= x[j].powi(e as i32);
                }
            }
            acc += t;
        }
        acc
    }

    /// Exact partial derivative with respect to x_j.
    pub fn partial(&self, j: usize) -> Poly {
        assert!(j < self.nvars);
        let terms = self
            .terms
            .iter()
            .filter(|(exps, _)| exps[j] > 0)
            .map(|(exps, c)| {
                let mut e = exps.clone();
                let k = e[j];
                e[j] -= 1;
                (e, c * k as f64)
            })
            .collect();
        Poly::from_terms(self.nvars, terms)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        assert_eq!(self.nvars, other.nvars);
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Poly::from_terms(self.nvars, terms)
    }

    pub fn scale(&self, s: f64) -> Poly {
        Poly::from_terms(
            self.nvars,
            self.terms.iter().map(|(e, c)| (e.clone(), c * s)).collect(),
        )
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        assert_eq!(self.nvars, other.nvars);
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let exps = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                terms.push((exps, ca * cb));
            }
        }
        Poly::from_terms(self.nvars, terms)
    }

    /// Rename variables: the new polynomial satisfies
    /// `out(y) = self(x)` with `x[perm[k]] = y[k]`, i.e. new variable k is old
    /// variable perm[k].
    pub fn permute_vars(&self, perm: &[usize]) -> Poly {
        assert_eq!(perm.len(), self.nvars);
        let mut inv = vec![0; perm.len()];
        for (k, &nat) in perm.iter().enumerate() {
            inv[nat] = k;
        }
        let terms = self
            .terms
            .iter()
            .map(|(exps, c)| {
                let mut e = vec![0; exps.len()];
                for (nat, &p) in exps.iter().enumerate() {
                    e[inv[nat]] = p;
                }
                (e, *c)
            })
            .collect();
        Poly::from_terms(self.nvars, terms)
    }

    pub fn total_degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|(e, _)| e.iter().sum())
            .max()
            .unwrap_or(0)
    }
}

/// A polynomial vector field on R^d: one component per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyField {
    pub components: Vec<Poly>,
}

impl PolyField {
    pub fn new(components: Vec<Poly>) -> Self {
        assert!(!components.is_empty());
        let n = components[0].nvars();
        assert!(components.iter().all(|p| p.nvars() == n));
        PolyField { components }
    }

    pub fn zero(d: usize) -> Self {
        PolyField::new(vec![Poly::zero(d); d])
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|p| p.is_zero())
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.components.iter().map(|p| p.eval(x)))
    }

    /// Jacobian matrix with entries d(component_i)/d(x_j), evaluated exactly.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let n = self.components[0].nvars();
        DMatrix::from_fn(d, n, |i, j| self.components[i].partial(j).eval(x))
    }

    pub fn permute(&self, perm: &[usize]) -> PolyField {
        // Reorder both the components and the variables so the field lives in
        // the permuted coordinate system.
        let comps = perm
            .iter()
            .map(|&nat| self.components[nat].permute_vars(perm))
            .collect();
        PolyField::new(comps)
    }

    pub fn add(&self, other: &PolyField) -> PolyField {
        assert_eq!(self.dim(), other.dim());
        let comps = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.add(b))
            .collect();
        PolyField::new(comps)
    }
}

/// Lie bracket [u, v] = Dv u - Du v, computed on exact coefficients.
pub fn bracket(u: &PolyField, v: &PolyField) -> PolyField {
    assert_eq!(u.dim(), v.dim());
    let d = u.dim();
    let comps = (0..d)
        .map(|k| {
            let mut acc = Poly::zero(u.components[0].nvars());
            for j in 0..d {
                acc = acc.add(&v.components[k].partial(j).mul(&u.components[j]));
                acc = acc.add(&u.components[k].partial(j).mul(&v.components[j]).scale(-1.0));
            }
            acc
        })
        .collect();
    PolyField::new(comps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn xy_poly(terms: Vec<(Vec<u32>, f64)>) -> Poly {
        Poly::from_terms(2, terms)
    }

    #[test]
    fn eval_and_partial() {
        // p = 3 x^2 y - 2 y + 1
        let p = xy_poly(vec![
            (vec![2, 1], 3.0),
            (vec![0, 1], -2.0),
            (vec![0, 0], 1.0),
        ]);
        let at = DVector::from_vec(vec![2.0, -1.0]);
        assert_relative_eq!(p.eval(&at), -9.0);
        let px = p.partial(0); // 6 x y
        assert_relative_eq!(px.eval(&at), -12.0);
        let py = p.partial(1); // 3 x^2 - 2
        assert_relative_eq!(py.eval(&at), 10.0);
    }

    #[test]
    fn terms_merge_and_cancel() {
        let p = xy_poly(vec![(vec![1, 0], 1.0), (vec![1, 0], -1.0)]);
        assert!(p.is_zero());
        let q = xy_poly(vec![(vec![1, 1], 2.0), (vec![1, 1], 3.0)]);
        assert_eq!(q.terms().len(), 1);
        assert_relative_eq!(q.terms()[0].1, 5.0);
    }

    #[test]
    fn heisenberg_bracket_is_vertical() {
        // s1 = (1, 0, -y/2), s2 = (0, 1, x/2) generate d/dz at every point.
        let d = 3;
        let s1 = PolyField::new(vec![
            Poly::constant(d, 1.0),
            Poly::zero(d),
            Poly::var(d, 1).scale(-0.5),
        ]);
        let s2 = PolyField::new(vec![
            Poly::zero(d),
            Poly::constant(d, 1.0),
            Poly::var(d, 0).scale(0.5),
        ]);
        let b = bracket(&s1, &s2);
        let x = DVector::from_vec(vec![0.7, -1.3, 4.2]);
        let v = b.eval(&x);
        assert_relative_eq!(v[0], 0.0);
        assert_relative_eq!(v[1], 0.0);
        assert_relative_eq!(v[2], 1.0);
    }

    #[test]
    fn permute_vars_relabels_consistently() {
        // p(x, y, z) = x z^2; permuted order (x, z, y) means new vars
        // (u0, u1, u2) = (x, z, y), so the permuted poly is u0 u1^2.
        let p = Poly::from_terms(3, vec![(vec![1, 0, 2], 1.0)]);
        let q = p.permute_vars(&[0, 2, 1]);
        let u = DVector::from_vec(vec![3.0, 5.0, 7.0]); // x=3, z=5, y=7
        let x = DVector::from_vec(vec![3.0, 7.0, 5.0]);
        assert_relative_eq!(q.eval(&u), p.eval(&x));
    }

    fn arb_poly(nvars: usize) -> impl Strategy<Value = Poly> {
        let term = (
            proptest::collection::vec(0u32..3, nvars),
            -2.0f64..2.0,
        );
        proptest::collection::vec(term, 0..5)
            .prop_map(move |ts| Poly::from_terms(nvars, ts))
    }

    fn arb_field(d: usize) -> impl Strategy<Value = PolyField> {
        proptest::collection::vec(arb_poly(d), d..=d).prop_map(PolyField::new)
    }

    proptest! {
        #[test]
        fn bracket_is_antisymmetric(u in arb_field(2), v in arb_field(2)) {
            let uv = bracket(&u, &v);
            let vu = bracket(&v, &u);
            let x = DVector::from_vec(vec![0.3, -0.7]);
            let a = uv.eval(&x);
            let b = vu.eval(&x);
            for k in 0..2 {
                prop_assert!((a[k] + b[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn jacobi_identity(u in arb_field(2), v in arb_field(2), w in arb_field(2)) {
            // [u,[v,w]] = [[u,v],w] + [v,[u,w]]
            let at = DVector::from_vec(vec![0.4, 0.9]);
            let lhs = bracket(&u, &bracket(&v, &w)).eval(&at);
            let rhs = bracket(&bracket(&u, &v), &w)
                .add(&bracket(&v, &bracket(&u, &w)))
                .eval(&at);
            for k in 0..2 {
                prop_assert!((lhs[k] - rhs[k]).abs() < 1e-7 * (1.0 + lhs[k].abs()));
            }
        }

        #[test]
        fn product_rule_for_partials(p in arb_poly(2), q in arb_poly(2)) {
            let x = DVector::from_vec(vec![1.1, -0.4]);
            let lhs = p.mul(&q).partial(0).eval(&x);
            let rhs = p.partial(0).eval(&x) * q.eval(&x) + p.eval(&x) * q.partial(0).eval(&x);
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
