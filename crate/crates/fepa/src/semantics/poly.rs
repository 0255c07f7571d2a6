//! Sparse polynomials over population variables and rate parameters.
//!
//! Under product synchronisation the drift of every state is a polynomial in
//! the populations and the rate occurrences jointly. Keeping that form exact
//! (a coefficient map keyed by sorted monomials) gives deterministic output
//! and lets the sensitivity analysis take partial derivatives symbolically.

use std::collections::BTreeMap;

/// A polynomial variable: a state population or a rate occurrence (indexed in
/// the model's canonical rate-vector order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Var {
    State(usize),
    Rate(usize),
}

/// A product of variables with positive integer exponents, sorted by
/// variable. The empty monomial is the constant 1.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Monomial(pub Vec<(Var, u32)>);

impl Monomial {
    pub fn var(v: Var) -> Self {
        Monomial(vec![(v, 1)])
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut exps: BTreeMap<Var, u32> = self.0.iter().copied().collect();
        for (v, e) in &other.0 {
            *exps.entry(*v).or_insert(0) += e;
        }
        Monomial(exps.into_iter().collect())
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|(_, e)| e).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly {
    pub terms: BTreeMap<Monomial, f64>,
}

impl Poly {
    pub fn zero() -> Self {
        Poly::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Poly::zero();
        if c != 0.0 {
            p.terms.insert(Monomial::default(), c);
        }
        p
    }

    pub fn var(v: Var) -> Self {
        let mut p = Poly::zero();
        p.terms.insert(Monomial::var(v), 1.0);
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(m) {
            Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
            Entry::Vacant(e) => {
                e.insert(c);
            }
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), *c);
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), -*c);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Poly {
        let mut out = Poly::zero();
        for (m, v) in &self.terms {
            out.add_term(m.clone(), v * c);
        }
        out
    }

    /// Partial derivative with respect to `v`.
    pub fn partial(&self, v: Var) -> Poly {
        let mut out = Poly::zero();
        for (m, c) in &self.terms {
            if let Some(pos) = m.0.iter().position(|(w, _)| *w == v) {
                let e = m.0[pos].1;
                let mut reduced = m.0.clone();
                if e == 1 {
                    reduced.remove(pos);
                } else {
                    reduced[pos].1 = e - 1;
                }
                out.add_term(Monomial(reduced), c * e as f64);
            }
        }
        out
    }

    /// Replace every rate variable with its numeric value, leaving a
    /// polynomial over state variables only.
    pub fn substitute_rates(&self, xi: &[f64]) -> Poly {
        let mut out = Poly::zero();
        for (m, c) in &self.terms {
            let mut coeff = *c;
            let mut kept = Vec::new();
            for (v, e) in &m.0 {
                match v {
                    Var::Rate(i) => coeff *= xi[*i].powi(*e as i32),
                    Var::State(_) => kept.push((*v, *e)),
                }
            }
            out.add_term(Monomial(kept), coeff);
        }
        out
    }

    pub fn eval(&self, states: &[f64], rates: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            let mut term = *c;
            for (v, e) in &m.0 {
                let x = match v {
                    Var::State(i) => states[*i],
                    Var::Rate(i) => rates[*i],
                };
                term *= x.powi(*e as i32);
            }
            acc += term;
        }
        acc
    }

    /// Upper bound on |p| over the box [0, state_hi] x [rate_lo, rate_hi]
    /// (componentwise): sum of |coefficient| times the monomial at the upper
    /// corner. Exact for polynomials with nonnegative coefficients.
    pub fn bound_abs(&self, state_hi: &[f64], rate_hi: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            let mut term = c.abs();
            for (v, e) in &m.0 {
                let x = match v {
                    Var::State(i) => state_hi[*i],
                    Var::Rate(i) => rate_hi[*i],
                };
                term *= x.powi(*e as i32);
            }
            acc += term;
        }
        acc
    }

    /// Flatten to an evaluation-friendly form.
    pub fn compile(&self) -> FlatPoly {
        FlatPoly {
            terms: self.terms.iter().map(|(m, c)| (*c, m.0.clone())).collect(),
        }
    }

    /// Render over state names; rate variables print as `r<i>`. Terms appear
    /// in canonical monomial order with signs folded into the separators.
    pub fn render(&self, names: &[&str]) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut out = String::new();
        for (i, (m, c)) in self.terms.iter().enumerate() {
            let neg = *c < 0.0;
            if i == 0 {
                if neg {
                    out.push('-');
                }
            } else {
                out.push_str(if neg { " - " } else { " + " });
            }
            let mag = c.abs();
            let mut factors = Vec::new();
            if mag != 1.0 || m.0.is_empty() {
                factors.push(format!("{mag}"));
            }
            for (v, e) in &m.0 {
                let base = match v {
                    Var::State(i) => names[*i].to_string(),
                    Var::Rate(i) => format!("r{i}"),
                };
                if *e == 1 {
                    factors.push(base);
                } else {
                    factors.push(format!("{base}^{e}"));
                }
            }
            out.push_str(&factors.join("*"));
        }
        out
    }
}

/// A polynomial compiled for evaluation over state variables only.
#[derive(Debug, Clone)]
pub struct FlatPoly {
    terms: Vec<(f64, Vec<(Var, u32)>)>,
}

impl FlatPoly {
    pub fn eval(&self, states: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (c, vars) in &self.terms {
            let mut term = *c;
            for (v, e) in vars {
                let x = match v {
                    Var::State(i) => states[*i],
                    Var::Rate(_) => unreachable!("rates substituted before compile"),
                };
                if *e == 1 {
                    term *= x;
                } else {
                    term *= x.powi(*e as i32);
                }
            }
            acc += term;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vs(i: usize) -> Poly {
        Poly::var(Var::State(i))
    }
    fn vr(i: usize) -> Poly {
        Poly::var(Var::Rate(i))
    }

    #[test]
    fn mul_collects_exponents() {
        let p = vs(0).mul(&vs(0)).mul(&vr(1)).scale(3.0);
        assert_eq!(p.terms.len(), 1);
        let (m, c) = p.terms.iter().next().unwrap();
        assert_eq!(*c, 3.0);
        assert_eq!(m.0, vec![(Var::State(0), 2), (Var::Rate(1), 1)]);
    }

    #[test]
    fn add_cancels_to_zero() {
        let p = vs(0).sub(&vs(0));
        assert!(p.is_zero());
    }

    #[test]
    fn eval_matches_hand_value() {
        // 2*x0^2*r0 + 3*x1 - 1
        let p = vs(0)
            .mul(&vs(0))
            .mul(&vr(0))
            .scale(2.0)
            .add(&vs(1).scale(3.0))
            .add(&Poly::constant(-1.0));
        let v = p.eval(&[2.0, 5.0], &[10.0]);
        assert_eq!(v, 2.0 * 4.0 * 10.0 + 15.0 - 1.0);
        let concrete = p.substitute_rates(&[10.0]);
        assert_eq!(concrete.compile().eval(&[2.0, 5.0]), v);
    }

    #[test]
    fn partial_derivative() {
        // d/dx0 (2*x0^2*r0 + x0*x1) = 4*x0*r0 + x1
        let p = vs(0)
            .mul(&vs(0))
            .mul(&vr(0))
            .scale(2.0)
            .add(&vs(0).mul(&vs(1)));
        let d = p.partial(Var::State(0));
        assert_eq!(d.eval(&[3.0, 7.0], &[2.0]), 4.0 * 3.0 * 2.0 + 7.0);
    }

    #[test]
    fn substitute_rates_folds_coefficients() {
        let p = vs(0).mul(&vr(0)).mul(&vr(0)).scale(5.0);
        let q = p.substitute_rates(&[3.0]);
        assert_eq!(q.eval(&[2.0], &[]), 5.0 * 9.0 * 2.0);
        assert!(q
            .terms
            .keys()
            .all(|m| m.0.iter().all(|(v, _)| matches!(v, Var::State(_)))));
    }

    #[test]
    fn bound_abs_at_corner() {
        let p = vs(0).scale(-2.0).add(&vs(0).mul(&vr(0)));
        // |−2x0 + x0 r0| ≤ 2*hi + hi*rhi
        assert_eq!(p.bound_abs(&[3.0], &[4.0]), 2.0 * 3.0 + 3.0 * 4.0);
    }

    #[test]
    fn render_is_canonical() {
        let p = vs(1)
            .scale(-1.5)
            .add(&vs(0).mul(&vs(0)))
            .add(&Poly::constant(2.0));
        assert_eq!(p.render(&["x", "y"]), "2 + x^2 - 1.5*y");
    }
}
