use std::collections::BTreeSet;
use std::fmt;

/// Synchronisation semantics for shared actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rho {
    Min,
    Product,
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rho::Min => write!(f, "min"),
            Rho::Product => write!(f, "product"),
        }
    }
}

impl std::str::FromStr for Rho {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(Rho::Min),
            "product" => Ok(Rho::Product),
            other => Err(format!(
                "unknown semantics `{other}` (expected `min` or `product`)"
            )),
        }
    }
}

/// Sequential process term.
///
/// Every prefix carries `occ`, a parse-order occurrence id for its rate
/// literal. Occurrence ids identify rate positions across rewrites and are
/// the subject of rate-vector extraction and homogenisation.
#[derive(Debug, Clone)]
pub enum SeqTerm {
    Prefix {
        action: String,
        rate: f64,
        occ: usize,
        cont: Box<SeqTerm>,
    },
    Choice(Box<SeqTerm>, Box<SeqTerm>),
    Constant(String),
}

impl SeqTerm {
    /// Structural equality ignoring occurrence ids.
    pub fn structurally_eq(&self, other: &SeqTerm) -> bool {
        match (self, other) {
            (
                SeqTerm::Prefix {
                    action: a1,
                    rate: r1,
                    cont: c1,
                    ..
                },
                SeqTerm::Prefix {
                    action: a2,
                    rate: r2,
                    cont: c2,
                    ..
                },
            ) => a1 == a2 && r1 == r2 && c1.structurally_eq(c2),
            (SeqTerm::Choice(l1, r1), SeqTerm::Choice(l2, r2)) => {
                l1.structurally_eq(l2) && r1.structurally_eq(r2)
            }
            (SeqTerm::Constant(n1), SeqTerm::Constant(n2)) => n1 == n2,
            _ => false,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, in_choice_operand: bool) -> fmt::Result {
        match self {
            SeqTerm::Prefix {
                action, rate, cont, ..
            } => {
                write!(f, "({action}, {rate}).")?;
                match cont.as_ref() {
                    SeqTerm::Choice(..) => {
                        write!(f, "(")?;
                        cont.fmt_prec(f, false)?;
                        write!(f, ")")
                    }
                    _ => cont.fmt_prec(f, true),
                }
            }
            SeqTerm::Choice(l, r) => {
                if in_choice_operand {
                    write!(f, "(")?;
                    l.fmt_prec(f, false)?;
                    write!(f, " + ")?;
                    r.fmt_prec(f, false)?;
                    write!(f, ")")
                } else {
                    l.fmt_prec(f, false)?;
                    write!(f, " + ")?;
                    r.fmt_prec(f, false)
                }
            }
            SeqTerm::Constant(n) => write!(f, "{n}"),
        }
    }
}

impl fmt::Display for SeqTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, false)
    }
}

/// One `Name = body;` definition, with the source offset of each rate literal
/// recorded in `occ_spans` keyed by occurrence id.
#[derive(Debug, Clone)]
pub struct AtomDef {
    pub name: String,
    pub body: SeqTerm,
    /// Byte offset of the definition in the source (for diagnostics and the
    /// canonical rate-occurrence order).
    pub offset: usize,
}

/// Composition tree of the `system = ...;` line.
#[derive(Debug, Clone)]
pub enum CompTree {
    Leaf(String),
    Par {
        left: Box<CompTree>,
        right: Box<CompTree>,
        sync: BTreeSet<String>,
    },
}

impl CompTree {
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            CompTree::Leaf(n) => out.push(n),
            CompTree::Par { left, right, .. } => {
                left.collect_leaves(out);
                right.collect_leaves(out);
            }
        }
    }
}

impl fmt::Display for CompTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompTree::Leaf(n) => write!(f, "{n}"),
            CompTree::Par { left, right, sync } => {
                let paren = |t: &CompTree, f: &mut fmt::Formatter<'_>| -> fmt::Result {
                    match t {
                        CompTree::Leaf(n) => write!(f, "{n}"),
                        par => write!(f, "({par})"),
                    }
                };
                paren(left, f)?;
                let acts: Vec<&str> = sync.iter().map(|s| s.as_str()).collect();
                write!(f, " <{}> ", acts.join(","))?;
                paren(right, f)
            }
        }
    }
}

/// Parsed model file: definitions, composition, initial populations and the
/// optional semantics selector.
#[derive(Debug, Clone)]
pub struct ModelSource {
    pub defs: Vec<AtomDef>,
    pub system: CompTree,
    pub inits: Vec<(String, f64)>,
    pub rho: Option<Rho>,
    /// Source byte offset of each rate occurrence, indexed by occurrence id.
    pub occ_offsets: Vec<usize>,
}

impl ModelSource {
    pub fn def(&self, name: &str) -> Option<&AtomDef> {
        self.defs.iter().find(|d| d.name == name)
    }
}

impl fmt::Display for ModelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.defs {
            writeln!(f, "{} = {};", d.name, d.body)?;
        }
        writeln!(f, "system = {};", self.system)?;
        for (name, v) in &self.inits {
            writeln!(f, "init {name} = {v};")?;
        }
        if let Some(rho) = self.rho {
            writeln!(f, "semantics = {rho};")?;
        }
        Ok(())
    }
}
