//! Numeric evaluation of apparent rates, component rates, and the drift,
//! straight from their defining recursions over the composition tree.
//!
//! These are deliberately simple; the optimised [`super::VectorField`] is
//! checked against them.

use crate::model::{CompiledModel, Node};
use crate::syntax::Rho;

/// Apparent rate of a subtree for `action` at populations `v`: the leaf case
/// sums population-weighted state rates; a synchronised action combines the
/// operands with the chosen semantics (`min` or product); an unsynchronised
/// action adds them.
pub fn apparent_rate_at(model: &CompiledModel, node: &Node, action: usize, v: &[f64]) -> f64 {
    match node {
        Node::Leaf(a) => model.atoms[*a]
            .states
            .iter()
            .map(|s| v[*s] * model.atom_apparent_rate(*s, action))
            .sum(),
        Node::Par { left, right, sync } => {
            let l = apparent_rate_at(model, left, action, v);
            let r = apparent_rate_at(model, right, action, v);
            if sync.contains(&action) {
                match model.rho {
                    Rho::Min => l.min(r),
                    Rho::Product => l * r,
                }
            } else {
                l + r
            }
        }
    }
}

/// Apparent rate of the whole system.
pub fn system_apparent_rate(model: &CompiledModel, action: usize, v: &[f64]) -> f64 {
    apparent_rate_at(model, &model.tree, action, v)
}

/// Share of a subtree's apparent rate attributable to one state: scales the
/// state's own throughput by the ratio of the whole to the owning operand at
/// each synchronisation above it, with the convention that a 0 operand rate
/// contributes 0.
pub fn component_rate_at(
    model: &CompiledModel,
    node: &Node,
    action: usize,
    state: usize,
    v: &[f64],
) -> f64 {
    let atom = model.states[state].atom;
    match node {
        Node::Leaf(a) => {
            if *a == atom {
                v[state] * model.atom_apparent_rate(state, action)
            } else {
                0.0
            }
        }
        Node::Par { left, right, sync } => {
            let sub: &Node = if left.atoms().contains(&atom) {
                left
            } else {
                right
            };
            let inner = component_rate_at(model, sub, action, state, v);
            if sync.contains(&action) {
                let a_sub = apparent_rate_at(model, sub, action, v);
                if a_sub == 0.0 {
                    0.0
                } else {
                    inner / a_sub * apparent_rate_at(model, node, action, v)
                }
            } else {
                inner
            }
        }
    }
}

/// Component rate of a state against the whole system.
pub fn system_component_rate(model: &CompiledModel, action: usize, state: usize, v: &[f64]) -> f64 {
    component_rate_at(model, &model.tree, action, state, v)
}

/// The drift evaluated directly from the definitions: for every state, jumps
/// into it (jump probability times the source's component rate) minus its own
/// component rate, summed over actions.
pub fn direct_field(model: &CompiledModel, v: &[f64]) -> Vec<f64> {
    let n = model.states.len();
    let mut out = vec![0.0; n];
    for p in 0..n {
        let atom = model.states[p].atom;
        let mut acc = 0.0;
        for action in 0..model.actions.len() {
            for q in model.atoms[atom].states.iter().copied() {
                let prob = model.jump_probability(q, action, p);
                if prob > 0.0 {
                    acc += prob * system_component_rate(model, action, q, v);
                }
            }
            if model.atom_apparent_rate(p, action) > 0.0 {
                acc -= system_component_rate(model, action, p, v);
            }
        }
        out[p] = acc;
    }
    out
}
