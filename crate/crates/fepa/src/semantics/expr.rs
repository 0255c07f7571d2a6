//! Expression trees for drift right-hand sides.
//!
//! Min synchronisation produces genuinely piecewise expressions (`min` and a
//! guarded ratio), so the right-hand side is kept as a tree. Construction
//! folds constants but never reorders sums or products, so a model compiles
//! to the same expression text on every run.
//!
//! `ratio0(a, b)` denotes a/b with the convention that the value is 0 when
//! b = 0. Folding assumes populations are nonnegative, which holds on the
//! domain of the fluid semantics.

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// A state population, by state id.
    Var(usize),
    Add(Vec<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Vec<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Ratio0(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn add(terms: Vec<Expr>) -> Expr {
        let mut kept: Vec<Expr> = Vec::new();
        for t in terms {
            if !t.is_zero() {
                kept.push(t);
            }
        }
        match kept.len() {
            0 => Expr::zero(),
            1 => kept.pop().unwrap(),
            _ => Expr::Add(kept),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        if b.is_zero() {
            a
        } else {
            Expr::Sub(Box::new(a), Box::new(b))
        }
    }

    pub fn mul(factors: Vec<Expr>) -> Expr {
        let mut constant = 1.0;
        let mut kept: Vec<Expr> = Vec::new();
        for f in factors {
            match f {
                Expr::Const(c) if c == 0.0 => return Expr::zero(),
                Expr::Const(c) => constant *= c,
                other => kept.push(other),
            }
        }
        if constant != 1.0 || kept.is_empty() {
            kept.insert(0, Expr::Const(constant));
        }
        match kept.len() {
            1 => kept.pop().unwrap(),
            _ => Expr::Mul(kept),
        }
    }

    /// min of two nonnegative expressions.
    pub fn min(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x.min(*y)),
            (Expr::Const(x), _) if *x == 0.0 => Expr::zero(),
            (_, Expr::Const(y)) if *y == 0.0 => Expr::zero(),
            _ => Expr::Min(Box::new(a), Box::new(b)),
        }
    }

    pub fn ratio0(num: Expr, den: Expr) -> Expr {
        if num.is_zero() || den.is_zero() {
            return Expr::zero();
        }
        if let (Expr::Const(n), Expr::Const(d)) = (&num, &den) {
            return Expr::Const(n / d);
        }
        Expr::Ratio0(Box::new(num), Box::new(den))
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => v[*i],
            Expr::Add(ts) => ts.iter().map(|t| t.eval(v)).sum(),
            Expr::Sub(a, b) => a.eval(v) - b.eval(v),
            Expr::Mul(fs) => fs.iter().map(|f| f.eval(v)).product(),
            Expr::Min(a, b) => a.eval(v).min(b.eval(v)),
            Expr::Ratio0(n, d) => {
                let den = d.eval(v);
                if den == 0.0 {
                    0.0
                } else {
                    n.eval(v) / den
                }
            }
        }
    }

    /// Render with state names. Precedence: sums loosest, products tighter,
    /// min/ratio0 as calls.
    pub fn render(&self, names: &[&str]) -> String {
        fn go(e: &Expr, names: &[&str], need_tight: bool) -> String {
            let (s, loose) = match e {
                Expr::Const(c) => (format!("{c}"), *c < 0.0),
                Expr::Var(i) => (names[*i].to_string(), false),
                Expr::Add(ts) => (
                    ts.iter()
                        .map(|t| go(t, names, false))
                        .collect::<Vec<_>>()
                        .join(" + "),
                    true,
                ),
                Expr::Sub(a, b) => (
                    format!("{} - {}", go(a, names, false), go(b, names, true)),
                    true,
                ),
                Expr::Mul(fs) => (
                    fs.iter()
                        .map(|f| go(f, names, true))
                        .collect::<Vec<_>>()
                        .join("*"),
                    false,
                ),
                Expr::Min(a, b) => (
                    format!("min({}, {})", go(a, names, false), go(b, names, false)),
                    false,
                ),
                Expr::Ratio0(n, d) => (
                    format!("ratio0({}, {})", go(n, names, false), go(d, names, false)),
                    false,
                ),
            };
            if need_tight && loose {
                format!("({s})")
            } else {
                s
            }
        }
        go(self, names, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_fold() {
        assert_eq!(Expr::add(vec![]), Expr::Const(0.0));
        assert_eq!(Expr::add(vec![Expr::Var(0), Expr::zero()]), Expr::Var(0));
        assert_eq!(
            Expr::mul(vec![Expr::Const(2.0), Expr::Const(3.0)]),
            Expr::Const(6.0)
        );
        assert_eq!(
            Expr::mul(vec![Expr::zero(), Expr::Var(1)]),
            Expr::Const(0.0)
        );
        assert_eq!(
            Expr::mul(vec![Expr::Const(1.0), Expr::Var(1)]),
            Expr::Var(1)
        );
        assert_eq!(Expr::min(Expr::zero(), Expr::Var(0)), Expr::Const(0.0));
        assert_eq!(Expr::ratio0(Expr::Var(0), Expr::zero()), Expr::Const(0.0));
    }

    #[test]
    fn eval_ratio0_guard() {
        let e = Expr::Ratio0(Box::new(Expr::Var(0)), Box::new(Expr::Var(1)));
        assert_eq!(e.eval(&[3.0, 2.0]), 1.5);
        assert_eq!(e.eval(&[3.0, 0.0]), 0.0);
    }

    #[test]
    fn render_precedence() {
        let e = Expr::mul(vec![
            Expr::Const(2.0),
            Expr::add(vec![Expr::Var(0), Expr::Var(1)]),
        ]);
        assert_eq!(e.render(&["x", "y"]), "2*(x + y)");
        let s = Expr::sub(Expr::Var(0), Expr::sub(Expr::Var(1), Expr::Var(0)));
        assert_eq!(s.render(&["x", "y"]), "x - (y - x)");
        let m = Expr::min(
            Expr::mul(vec![Expr::Const(2.0), Expr::Var(0)]),
            Expr::Var(1),
        );
        assert_eq!(m.render(&["x", "y"]), "min(2*x, y)");
    }
}
