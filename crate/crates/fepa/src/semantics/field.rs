//! Assembly of the drift vector field from a compiled model.
//!
//! Under min synchronisation the field is kept as expression trees plus a
//! slot program that shares apparent-rate subterms across states. Under
//! product synchronisation the field is canonicalised to polynomials in the
//! populations and rate occurrences jointly; this is exact because the ratio
//! guard cancels against the synchronisation product on the nonnegative
//! domain.

use std::collections::BTreeMap;

use crate::model::{CompiledModel, Node};
use crate::syntax::Rho;

use super::expr::Expr;
use super::poly::{FlatPoly, Monomial, Poly, Var};

/// Linearised composition tree: nodes in postorder, root last.
struct Lin {
    kinds: Vec<LinKind>,
    parent: Vec<Option<usize>>,
    atom_leaf: Vec<usize>,
}

enum LinKind {
    Leaf(usize),
    Par {
        left: usize,
        right: usize,
        sync: Vec<bool>,
    },
}

fn linearise(model: &CompiledModel) -> Lin {
    fn go(
        node: &Node,
        n_actions: usize,
        kinds: &mut Vec<LinKind>,
        parent: &mut Vec<Option<usize>>,
        atom_leaf: &mut Vec<usize>,
    ) -> usize {
        match node {
            Node::Leaf(a) => {
                kinds.push(LinKind::Leaf(*a));
                parent.push(None);
                atom_leaf[*a] = kinds.len() - 1;
                kinds.len() - 1
            }
            Node::Par { left, right, sync } => {
                let l = go(left, n_actions, kinds, parent, atom_leaf);
                let r = go(right, n_actions, kinds, parent, atom_leaf);
                let mut synced = vec![false; n_actions];
                for a in sync {
                    synced[*a] = true;
                }
                kinds.push(LinKind::Par {
                    left: l,
                    right: r,
                    sync: synced,
                });
                parent.push(None);
                let id = kinds.len() - 1;
                parent[l] = Some(id);
                parent[r] = Some(id);
                id
            }
        }
    }
    let mut kinds = Vec::new();
    let mut parent = Vec::new();
    let mut atom_leaf = vec![usize::MAX; model.atoms.len()];
    go(
        &model.tree,
        model.actions.len(),
        &mut kinds,
        &mut parent,
        &mut atom_leaf,
    );
    Lin {
        kinds,
        parent,
        atom_leaf,
    }
}

impl Lin {
    /// Synchronised ancestors of an atom's leaf for an action, innermost
    /// first: (child containing the atom, the par node itself, the sibling).
    fn sync_chain(&self, atom: usize, action: usize) -> Vec<(usize, usize, usize)> {
        let mut chain = Vec::new();
        let mut node = self.atom_leaf[atom];
        while let Some(p) = self.parent[node] {
            if let LinKind::Par { left, right, sync } = &self.kinds[p] {
                if sync[action] {
                    let sibling = if *left == node { *right } else { *left };
                    chain.push((node, p, sibling));
                }
            }
            node = p;
        }
        chain
    }
}

/// Slot program for min-semantics evaluation: apparent rates are computed
/// once per (tree node, action) and every state's throughput is obtained by
/// walking its ratio chain over those slots.
#[derive(Debug, Clone)]
struct MinProgram {
    n_actions: usize,
    /// Per node: leaf apparent-rate summands or par combination rule.
    nodes: Vec<ProgNode>,
    /// Per (state, action): r_syn and the (sub slot, par slot) ratio chain.
    chains: Vec<(f64, Vec<(usize, usize)>)>,
    /// Per state: inflows (source state, action, jump probability).
    gains: Vec<Vec<(usize, usize, f64)>>,
    n_states: usize,
}

#[derive(Debug, Clone)]
enum ProgNode {
    /// Per action: (state, rate) summands.
    Leaf(Vec<Vec<(usize, f64)>>),
    Par {
        left: usize,
        right: usize,
        synced: Vec<bool>,
    },
}

impl MinProgram {
    fn build(model: &CompiledModel, lin: &Lin) -> MinProgram {
        let n_actions = model.actions.len();
        let nodes = lin
            .kinds
            .iter()
            .map(|k| match k {
                LinKind::Leaf(a) => {
                    let per_action = (0..n_actions)
                        .map(|act| {
                            model.atoms[*a]
                                .states
                                .iter()
                                .filter_map(|s| {
                                    let r = model.atom_apparent_rate(*s, act);
                                    (r > 0.0).then_some((*s, r))
                                })
                                .collect()
                        })
                        .collect();
                    ProgNode::Leaf(per_action)
                }
                LinKind::Par { left, right, sync } => ProgNode::Par {
                    left: *left,
                    right: *right,
                    synced: sync.clone(),
                },
            })
            .collect();
        let mut chains = Vec::with_capacity(model.states.len() * n_actions);
        for s in 0..model.states.len() {
            let atom = model.states[s].atom;
            for act in 0..n_actions {
                let chain = lin
                    .sync_chain(atom, act)
                    .into_iter()
                    .map(|(sub, par, _)| (sub, par))
                    .collect();
                chains.push((model.atom_apparent_rate(s, act), chain));
            }
        }
        let mut gains = vec![Vec::new(); model.states.len()];
        for p in 0..model.states.len() {
            let atom = model.states[p].atom;
            for act in 0..n_actions {
                for q in model.atoms[atom].states.iter().copied() {
                    let prob = model.jump_probability(q, act, p);
                    if prob > 0.0 {
                        gains[p].push((q, act, prob));
                    }
                }
            }
        }
        MinProgram {
            n_actions,
            nodes,
            chains,
            gains,
            n_states: model.states.len(),
        }
    }

    fn eval_into(&self, v: &[f64], out: &mut [f64]) {
        let na = self.n_actions;
        // Apparent rates per (node, action), postorder so children are ready.
        let mut app = vec![0.0; self.nodes.len() * na];
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                ProgNode::Leaf(per_action) => {
                    for (act, pairs) in per_action.iter().enumerate() {
                        let mut acc = 0.0;
                        for (s, r) in pairs {
                            acc += v[*s] * r;
                        }
                        app[i * na + act] = acc;
                    }
                }
                ProgNode::Par {
                    left,
                    right,
                    synced,
                } => {
                    for act in 0..na {
                        let l = app[left * na + act];
                        let r = app[right * na + act];
                        app[i * na + act] = if synced[act] { l.min(r) } else { l + r };
                    }
                }
            }
        }
        // Throughput of each (state, action) via its ratio chain.
        let mut rval = vec![0.0; self.n_states * na];
        for s in 0..self.n_states {
            for act in 0..na {
                let (r_syn, chain) = &self.chains[s * na + act];
                if *r_syn == 0.0 {
                    continue;
                }
                let mut val = v[s] * r_syn;
                for (sub, par) in chain {
                    let a_sub = app[sub * na + act];
                    if a_sub == 0.0 {
                        val = 0.0;
                        break;
                    }
                    val = val / a_sub * app[par * na + act];
                }
                rval[s * na + act] = val;
            }
        }
        for p in 0..self.n_states {
            let mut acc = 0.0;
            for (q, act, prob) in &self.gains[p] {
                acc += prob * rval[q * na + act];
            }
            for act in 0..na {
                acc -= rval[p * na + act];
            }
            out[p] = acc;
        }
    }
}

#[derive(Debug, Clone)]
enum Repr {
    Tree {
        exprs: Vec<Expr>,
        prog: MinProgram,
    },
    Poly {
        param: Vec<Poly>,
        concrete: Vec<Poly>,
        flat: Vec<FlatPoly>,
    },
}

/// The drift of a compiled model: one right-hand side per state.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub rho: Rho,
    pub n: usize,
    repr: Repr,
}

impl VectorField {
    pub fn eval_into(&self, v: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Tree { prog, .. } => prog.eval_into(v, out),
            Repr::Poly { flat, .. } => {
                for (i, p) in flat.iter().enumerate() {
                    out[i] = p.eval(v);
                }
            }
        }
    }

    pub fn eval(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.eval_into(v, &mut out);
        out
    }

    /// The field as polynomials in populations and rate occurrences jointly;
    /// only available under product semantics.
    pub fn parametric_polys(&self) -> Option<&[Poly]> {
        match &self.repr {
            Repr::Poly { param, .. } => Some(param),
            Repr::Tree { .. } => None,
        }
    }

    /// Right-hand side of one state as text.
    pub fn rhs_text(&self, state: usize, names: &[&str]) -> String {
        match &self.repr {
            Repr::Tree { exprs, .. } => exprs[state].render(names),
            Repr::Poly { concrete, .. } => concrete[state].render(names),
        }
    }
}

fn side_contains(node: &Node, atom: usize) -> bool {
    match node {
        Node::Leaf(a) => *a == atom,
        Node::Par { left, right, .. } => side_contains(left, atom) || side_contains(right, atom),
    }
}

fn apparent_expr(model: &CompiledModel, node: &Node, action: usize) -> Expr {
    match node {
        Node::Leaf(a) => Expr::add(
            model.atoms[*a]
                .states
                .iter()
                .map(|s| {
                    Expr::mul(vec![
                        Expr::Const(model.atom_apparent_rate(*s, action)),
                        Expr::Var(*s),
                    ])
                })
                .collect(),
        ),
        Node::Par { left, right, sync } => {
            let l = apparent_expr(model, left, action);
            let r = apparent_expr(model, right, action);
            if sync.contains(&action) {
                match model.rho {
                    Rho::Min => Expr::min(l, r),
                    Rho::Product => Expr::mul(vec![l, r]),
                }
            } else {
                Expr::add(vec![l, r])
            }
        }
    }
}

fn component_expr(model: &CompiledModel, node: &Node, action: usize, state: usize) -> Expr {
    let atom = model.states[state].atom;
    match node {
        Node::Leaf(a) => {
            if *a == atom {
                Expr::mul(vec![
                    Expr::Const(model.atom_apparent_rate(state, action)),
                    Expr::Var(state),
                ])
            } else {
                Expr::zero()
            }
        }
        Node::Par { left, right, sync } => {
            let sub: &Node = if side_contains(left, atom) {
                left
            } else {
                right
            };
            let inner = component_expr(model, sub, action, state);
            if sync.contains(&action) {
                let a_sub = apparent_expr(model, sub, action);
                let whole = apparent_expr(model, node, action);
                Expr::mul(vec![Expr::ratio0(inner, a_sub), whole])
            } else {
                inner
            }
        }
    }
}

fn field_exprs(model: &CompiledModel) -> Vec<Expr> {
    let n = model.states.len();
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let atom = model.states[p].atom;
        let mut gains = Vec::new();
        let mut losses = Vec::new();
        for action in 0..model.actions.len() {
            for q in model.atoms[atom].states.iter().copied() {
                let prob = model.jump_probability(q, action, p);
                if prob > 0.0 {
                    gains.push(Expr::mul(vec![
                        Expr::Const(prob),
                        component_expr(model, &model.tree, action, q),
                    ]));
                }
            }
            if model.atom_apparent_rate(p, action) > 0.0 {
                losses.push(component_expr(model, &model.tree, action, p));
            }
        }
        out.push(Expr::sub(Expr::add(gains), Expr::add(losses)));
    }
    out
}

/// Apparent-rate polynomials per (node, action), postorder.
fn apparent_polys(
    model: &CompiledModel,
    lin: &Lin,
    occ_idx: &BTreeMap<usize, usize>,
) -> Vec<Vec<Poly>> {
    let na = model.actions.len();
    let mut out: Vec<Vec<Poly>> = Vec::with_capacity(lin.kinds.len());
    for kind in &lin.kinds {
        let per_action = match kind {
            LinKind::Leaf(a) => {
                let mut per: Vec<Poly> = vec![Poly::zero(); na];
                for t in &model.transitions {
                    if model.states[t.src].atom == *a {
                        let m = Monomial::var(Var::State(t.src))
                            .mul(&Monomial::var(Var::Rate(occ_idx[&t.occ])));
                        per[t.action].add_term(m, 1.0);
                    }
                }
                per
            }
            LinKind::Par { left, right, sync } => (0..na)
                .map(|act| {
                    let l = &out[*left][act];
                    let r = &out[*right][act];
                    if sync[act] {
                        l.mul(r)
                    } else {
                        l.add(r)
                    }
                })
                .collect(),
        };
        out.push(per_action);
    }
    out
}

fn field_polys(model: &CompiledModel) -> Vec<Poly> {
    let lin = linearise(model);
    let occ_idx: BTreeMap<usize, usize> = model
        .rate_vector
        .iter()
        .enumerate()
        .map(|(i, r)| (r.occ, i))
        .collect();
    let app = apparent_polys(model, &lin, &occ_idx);
    let na = model.actions.len();
    // Scaling factor per (atom, action): product of sibling apparent rates
    // over the synchronised ancestors.
    let mut scale = vec![vec![Poly::constant(1.0); na]; model.atoms.len()];
    for atom in 0..model.atoms.len() {
        for act in 0..na {
            let mut s = Poly::constant(1.0);
            for (_, _, sibling) in lin.sync_chain(atom, act) {
                s = s.mul(&app[sibling][act]);
            }
            scale[atom][act] = s;
        }
    }
    let n = model.states.len();
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let atom = model.states[p].atom;
        let mut poly = Poly::zero();
        for act in 0..na {
            let mut flow = Poly::zero();
            for t in &model.transitions {
                if t.action != act {
                    continue;
                }
                let xi = Var::Rate(occ_idx[&t.occ]);
                if t.tgt == p && model.states[t.src].atom == atom {
                    flow.add_term(
                        Monomial::var(Var::State(t.src)).mul(&Monomial::var(xi)),
                        1.0,
                    );
                }
                if t.src == p {
                    flow.add_term(Monomial::var(Var::State(p)).mul(&Monomial::var(xi)), -1.0);
                }
            }
            if !flow.is_zero() {
                poly = poly.add(&flow.mul(&scale[atom][act]));
            }
        }
        out.push(poly);
    }
    out
}

/// Build the drift field of a compiled model.
pub fn vector_field(model: &CompiledModel) -> VectorField {
    let n = model.states.len();
    match model.rho {
        Rho::Min => {
            let lin = linearise(model);
            VectorField {
                rho: model.rho,
                n,
                repr: Repr::Tree {
                    exprs: field_exprs(model),
                    prog: MinProgram::build(model, &lin),
                },
            }
        }
        Rho::Product => {
            let param = field_polys(model);
            let rates = model.rate_values();
            let concrete: Vec<Poly> = param.iter().map(|p| p.substitute_rates(&rates)).collect();
            let flat = concrete.iter().map(|p| p.compile()).collect();
            VectorField {
                rho: model.rho,
                n,
                repr: Repr::Poly {
                    param,
                    concrete,
                    flat,
                },
            }
        }
    }
}

/// Plain-text listing of the ODE system.
pub fn ode_text(model: &CompiledModel, field: &VectorField) -> String {
    let names = model.state_names();
    let mut out = String::new();
    out.push_str(&format!("# semantics: {}\n", model.rho));
    out.push_str(&format!(
        "# {} states, {} actions\n",
        model.states.len(),
        model.actions.len()
    ));
    for (i, s) in model.states.iter().enumerate() {
        out.push_str(&format!(
            "d[{}]/dt = {}\n",
            s.name,
            field.rhs_text(i, &names)
        ));
    }
    out.push_str("\n# initial populations\n");
    for (i, s) in model.states.iter().enumerate() {
        out.push_str(&format!("{} = {}\n", s.name, model.init[i]));
    }
    out
}

/// JSON listing of the ODE system; equation order follows the state table.
pub fn ode_json(model: &CompiledModel, field: &VectorField) -> serde_json::Value {
    let names = model.state_names();
    let equations: Vec<serde_json::Value> = model
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            serde_json::json!({
                "state": s.name,
                "atom": model.atoms[s.atom].name,
                "init": model.init[i],
                "rhs": field.rhs_text(i, &names),
            })
        })
        .collect();
    serde_json::json!({
        "semantics": model.rho.to_string(),
        "states": names,
        "actions": model.actions,
        "equations": equations,
    })
}
