//! Conservative gain bounds for the drift field.
//!
//! Two quantities are bounded: the Lipschitz constant of the field in the
//! populations over a box, and the sensitivity of the field to the rate
//! vector at a fixed population. Product semantics differentiates the
//! polynomial field exactly and bounds every partial derivative at the upper
//! corner of the box. Min semantics has no polynomial form; instead each
//! state throughput is written as
//!
//! ```text
//! R = base * min(1, S_1/T_1) * ... * min(1, S_k/T_k)
//! ```
//!
//! where `base` is the state's own population-weighted rate, `T_j` is the
//! capacity of the synchronised subtree containing the state, and `S_j` the
//! sibling capacity. With `base <= T_1`, partial products below `T_{j+1}`,
//! and every factor in [0, 1], any change of inputs obeys
//!
//! ```text
//! |dR| <= |d base| + sum_j (|d S_j| + |d T_j|)
//! ```
//!
//! and each capacity is a sum or min of linear forms over disjoint supports,
//! so its per-coordinate variation is bounded by the coordinate's largest
//! rate. Jump weights are rational in the rates and are bounded over the
//! rate box. Summing the weighted increments entrywise gives a dominating
//! matrix whose induced norm bounds the gain; the bound is valid for finite
//! differences, not just infinitesimal ones, as long as populations stay
//! nonnegative and rates stay inside the box.

use std::collections::BTreeMap;

use crate::model::Node;
use crate::semantics::{vector_field, Poly, Var};
use crate::solve::Norm;
use crate::syntax::Rho;
use crate::CompiledModel;

use super::PerturbError;

/// Precomputed gain analysis for one model over a fixed rate box.
pub struct Sensitivity {
    n: usize,
    m: usize,
    rate_hi: Vec<f64>,
    inner: Inner,
}

enum Inner {
    Product {
        /// Partial derivatives of the field in the populations, n x n.
        by_state: Vec<Vec<Poly>>,
        /// Partial derivatives of the field in the rate vector, n x m.
        by_rate: Vec<Vec<Poly>>,
    },
    Min(MinSens),
}

/// One synchronised ancestor of an atom: the states under the child subtree
/// on the atom's side and under the sibling subtree.
struct Step {
    own: Vec<usize>,
    sib: Vec<usize>,
}

struct Inflow {
    src: usize,
    /// Rate occurrences feeding this edge, with multiplicity.
    num: Vec<(usize, f64)>,
    /// Upper bound on the jump weight over the rate box.
    p_hi: f64,
}

struct MinSens {
    n_actions: usize,
    atom_of: Vec<usize>,
    /// Rate occurrences per (state, action): canonical index, multiplicity.
    occs: Vec<Vec<Vec<(usize, f64)>>>,
    /// Upper bound on each state's action rate over the rate box.
    r_hi: Vec<Vec<f64>>,
    /// Lower bound on the same; jump weight denominators.
    r_lo: Vec<Vec<f64>>,
    /// Synchronised ancestors per (atom, action).
    steps: Vec<Vec<Vec<Step>>>,
    /// Incoming transitions per (target, action).
    inflows: Vec<Vec<Vec<Inflow>>>,
}

impl Sensitivity {
    /// Build the analysis for `model` with every rate occurrence confined to
    /// `[rate_lo[i], rate_hi[i]]`. Bounds produced later hold for any rate
    /// vector inside that box.
    pub fn new(
        model: &CompiledModel,
        rate_lo: &[f64],
        rate_hi: &[f64],
    ) -> Result<Sensitivity, PerturbError> {
        let n = model.states.len();
        let m = model.rate_vector.len();
        if rate_lo.len() != m || rate_hi.len() != m {
            return Err(PerturbError::Mismatch(format!(
                "rate box has {} x {} entries for {} occurrences",
                rate_lo.len(),
                rate_hi.len(),
                m
            )));
        }
        for (i, (lo, hi)) in rate_lo.iter().zip(rate_hi).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo <= hi) {
                return Err(PerturbError::Mismatch(format!(
                    "rate box entry {i} is [{lo}, {hi}]; need 0 < lo <= hi"
                )));
            }
        }
        let inner = match model.rho {
            Rho::Product => {
                let field = vector_field(model);
                let polys = field
                    .parametric_polys()
                    .expect("product semantics always has a polynomial field");
                let by_state = polys
                    .iter()
                    .map(|p| (0..n).map(|q| p.partial(Var::State(q))).collect())
                    .collect();
                let by_rate = polys
                    .iter()
                    .map(|p| (0..m).map(|o| p.partial(Var::Rate(o))).collect())
                    .collect();
                Inner::Product { by_state, by_rate }
            }
            Rho::Min => Inner::Min(MinSens::build(model, rate_lo, rate_hi)),
        };
        Ok(Sensitivity {
            n,
            m,
            rate_hi: rate_hi.to_vec(),
            inner,
        })
    }

    /// Upper bound on the Lipschitz constant of the drift with respect to
    /// the populations, valid on `[0, state_hi]` under product semantics and
    /// on the whole nonnegative orthant under min semantics.
    pub fn lipschitz(&self, state_hi: &[f64], norm: Norm) -> Result<f64, PerturbError> {
        if state_hi.len() != self.n {
            return Err(PerturbError::Mismatch(format!(
                "box has {} entries for {} states",
                state_hi.len(),
                self.n
            )));
        }
        for (i, v) in state_hi.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(PerturbError::Mismatch(format!(
                    "box entry {i} must be finite and nonnegative, got {v}"
                )));
            }
        }
        let mat = match &self.inner {
            Inner::Product { by_state, .. } => by_state
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|p| p.bound_abs(state_hi, &self.rate_hi))
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>(),
            Inner::Min(ms) => ms.state_matrix(),
        };
        Ok(induced(&mat, norm))
    }

    /// A gain `g` such that two drifts whose rate vectors both lie in the
    /// rate box differ at population `x` by at most `g` times the norm of
    /// the rate difference.
    pub fn rate_gain_at(&self, x: &[f64], norm: Norm) -> f64 {
        assert_eq!(x.len(), self.n, "population vector length");
        let xabs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        let mat = match &self.inner {
            Inner::Product { by_rate, .. } => by_rate
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|p| p.bound_abs(&xabs, &self.rate_hi))
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>(),
            Inner::Min(ms) => ms.rate_matrix(&xabs, self.m),
        };
        induced(&mat, norm)
    }
}

impl MinSens {
    fn build(model: &CompiledModel, rate_lo: &[f64], rate_hi: &[f64]) -> MinSens {
        let n = model.states.len();
        let n_actions = model.actions.len();
        let occ_idx: BTreeMap<usize, usize> = model
            .rate_vector
            .iter()
            .enumerate()
            .map(|(i, r)| (r.occ, i))
            .collect();

        let mut occ_mult = vec![vec![BTreeMap::<usize, f64>::new(); n_actions]; n];
        for t in &model.transitions {
            *occ_mult[t.src][t.action]
                .entry(occ_idx[&t.occ])
                .or_insert(0.0) += 1.0;
        }
        let occs: Vec<Vec<Vec<(usize, f64)>>> = occ_mult
            .into_iter()
            .map(|per_state| {
                per_state
                    .into_iter()
                    .map(|m| m.into_iter().collect())
                    .collect()
            })
            .collect();
        let weight = |list: &[(usize, f64)], box_side: &[f64]| -> f64 {
            list.iter().map(|(o, mult)| mult * box_side[*o]).sum()
        };
        let r_hi: Vec<Vec<f64>> = occs
            .iter()
            .map(|per_state| per_state.iter().map(|l| weight(l, rate_hi)).collect())
            .collect();
        let r_lo: Vec<Vec<f64>> = occs
            .iter()
            .map(|per_state| per_state.iter().map(|l| weight(l, rate_lo)).collect())
            .collect();

        let mut edges: BTreeMap<(usize, usize, usize), BTreeMap<usize, f64>> = BTreeMap::new();
        for t in &model.transitions {
            *edges
                .entry((t.tgt, t.action, t.src))
                .or_default()
                .entry(occ_idx[&t.occ])
                .or_insert(0.0) += 1.0;
        }
        let mut inflows: Vec<Vec<Vec<Inflow>>> = (0..n)
            .map(|_| (0..n_actions).map(|_| Vec::new()).collect())
            .collect();
        for ((tgt, action, src), num) in edges {
            let num: Vec<(usize, f64)> = num.into_iter().collect();
            let num_hi = weight(&num, rate_hi);
            let p_hi = (num_hi / r_lo[src][action]).min(1.0);
            inflows[tgt][action].push(Inflow { src, num, p_hi });
        }

        let mut steps: Vec<Vec<Vec<Step>>> = (0..model.atoms.len())
            .map(|_| (0..n_actions).map(|_| Vec::new()).collect())
            .collect();
        collect_steps(model, &model.tree, &mut steps);

        MinSens {
            n_actions,
            atom_of: model.states.iter().map(|s| s.atom).collect(),
            occs,
            r_hi,
            r_lo,
            steps,
            inflows,
        }
    }

    /// Per-coordinate variation bound of state `p`'s throughput for action
    /// `a`; None when the throughput is identically zero.
    fn state_coeff(&self, p: usize, a: usize) -> Option<Vec<f64>> {
        if self.r_hi[p][a] == 0.0 {
            return None;
        }
        let mut c = vec![0.0; self.atom_of.len()];
        c[p] += self.r_hi[p][a];
        for step in &self.steps[self.atom_of[p]][a] {
            for &q in step.own.iter().chain(&step.sib) {
                c[q] += self.r_hi[q][a];
            }
        }
        Some(c)
    }

    /// Like `state_coeff` but against the rate occurrences, at population
    /// `xabs`.
    fn rate_coeff(&self, p: usize, a: usize, xabs: &[f64], m: usize) -> Option<Vec<f64>> {
        if self.r_hi[p][a] == 0.0 {
            return None;
        }
        let mut d = vec![0.0; m];
        for &(o, mult) in &self.occs[p][a] {
            d[o] += xabs[p] * mult;
        }
        for step in &self.steps[self.atom_of[p]][a] {
            for &q in step.own.iter().chain(&step.sib) {
                for &(o, mult) in &self.occs[q][a] {
                    d[o] += xabs[q] * mult;
                }
            }
        }
        Some(d)
    }

    fn state_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.atom_of.len();
        let cache: Vec<Vec<Option<Vec<f64>>>> = (0..n)
            .map(|p| {
                (0..self.n_actions)
                    .map(|a| self.state_coeff(p, a))
                    .collect()
            })
            .collect();
        let mut e = vec![vec![0.0; n]; n];
        for p in 0..n {
            for a in 0..self.n_actions {
                if let Some(c) = &cache[p][a] {
                    axpy(&mut e[p], 1.0, c);
                }
                for inf in &self.inflows[p][a] {
                    if let Some(c) = &cache[inf.src][a] {
                        axpy(&mut e[p], inf.p_hi, c);
                    }
                }
            }
        }
        e
    }

    fn rate_matrix(&self, xabs: &[f64], m: usize) -> Vec<Vec<f64>> {
        let n = self.atom_of.len();
        let cache: Vec<Vec<Option<Vec<f64>>>> = (0..n)
            .map(|p| {
                (0..self.n_actions)
                    .map(|a| self.rate_coeff(p, a, xabs, m))
                    .collect()
            })
            .collect();
        let mut e = vec![vec![0.0; m]; n];
        for p in 0..n {
            for a in 0..self.n_actions {
                if let Some(d) = &cache[p][a] {
                    axpy(&mut e[p], 1.0, d);
                }
                for inf in &self.inflows[p][a] {
                    if let Some(d) = &cache[inf.src][a] {
                        axpy(&mut e[p], inf.p_hi, d);
                    }
                    // The jump weight itself moves with the rates; its swing
                    // is scaled by the source throughput cap.
                    let r_cap = xabs[inf.src] * self.r_hi[inf.src][a];
                    if r_cap > 0.0 {
                        let den = self.r_lo[inf.src][a];
                        for &(o, mult) in &inf.num {
                            e[p][o] += r_cap * mult / den;
                        }
                        for &(o, mult) in &self.occs[inf.src][a] {
                            e[p][o] += r_cap * inf.p_hi * mult / den;
                        }
                    }
                }
            }
        }
        e
    }
}

/// Record, for every atom and every synchronised action above it, the states
/// on its side of the synchronisation and on the sibling side.
fn collect_steps(model: &CompiledModel, node: &Node, steps: &mut [Vec<Vec<Step>>]) -> Vec<usize> {
    match node {
        Node::Leaf(a) => vec![*a],
        Node::Par { left, right, sync } => {
            let la = collect_steps(model, left, steps);
            let ra = collect_steps(model, right, steps);
            let lstates = states_of(model, &la);
            let rstates = states_of(model, &ra);
            for &act in sync {
                for &a in &la {
                    steps[a][act].push(Step {
                        own: lstates.clone(),
                        sib: rstates.clone(),
                    });
                }
                for &a in &ra {
                    steps[a][act].push(Step {
                        own: rstates.clone(),
                        sib: lstates.clone(),
                    });
                }
            }
            let mut all = la;
            all.extend(ra);
            all
        }
    }
}

fn states_of(model: &CompiledModel, atoms: &[usize]) -> Vec<usize> {
    atoms
        .iter()
        .flat_map(|&a| model.atoms[a].states.iter().copied())
        .collect()
}

fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// Induced operator norm of an entrywise nonnegative matrix: max row sum for
/// the sup norm, max column sum for the 1-norm, and the geometric mean of
/// the two as a bound for the 2-norm.
fn induced(mat: &[Vec<f64>], norm: Norm) -> f64 {
    if mat.is_empty() || mat[0].is_empty() {
        return 0.0;
    }
    let inf = mat
        .iter()
        .map(|r| r.iter().sum::<f64>())
        .fold(0.0f64, f64::max);
    match norm {
        Norm::Inf => inf,
        Norm::One => col_max(mat),
        Norm::Two => (inf * col_max(mat)).sqrt(),
    }
}

fn col_max(mat: &[Vec<f64>]) -> f64 {
    let cols = mat[0].len();
    (0..cols)
        .map(|c| mat.iter().map(|r| r[c]).sum::<f64>())
        .fold(0.0f64, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::vector_field;
    use crate::solve::Norm;
    use crate::{compile, parse_model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn compiled(src: &str) -> CompiledModel {
        compile(&parse_model(src).unwrap(), None).unwrap()
    }

    fn sens(model: &CompiledModel) -> Sensitivity {
        let xi = model.rate_values();
        Sensitivity::new(model, &xi, &xi).unwrap()
    }

    #[test]
    fn linear_flip_flop_matches_hand_jacobian() {
        for semantics in ["min", "product"] {
            let m = compiled(&format!(
                "P = (go, 2.0).Q;\nQ = (back, 3.0).P;\nsystem = P;\ninit P = 1.0;\nsemantics = {semantics};\n"
            ));
            let s = sens(&m);
            let hi = vec![1.0, 1.0];
            assert_eq!(s.lipschitz(&hi, Norm::Inf).unwrap(), 5.0, "{semantics}");
            assert_eq!(s.lipschitz(&hi, Norm::One).unwrap(), 6.0, "{semantics}");
            let two = s.lipschitz(&hi, Norm::Two).unwrap();
            assert!((two - 30.0f64.sqrt()).abs() < 1e-12, "{semantics}: {two}");
        }
    }

    const SYNCED: &str = "P = (a, 2.0).P1;\nP1 = (b, 1.0).P;\nQ = (a, 1.0).Q1;\nQ1 = (c, 1.0).Q;\nsystem = P <a> Q;\ninit P = 3.0;\ninit Q = 5.0;\n";

    #[test]
    fn synchronised_pair_dominating_matrix_is_frozen() {
        let m = compiled(&format!("{SYNCED}semantics = min;\n"));
        let s = sens(&m);
        let hi = vec![3.0, 3.0, 5.0, 5.0];
        assert_eq!(s.lipschitz(&hi, Norm::Inf).unwrap(), 6.0);
        assert_eq!(s.lipschitz(&hi, Norm::One).unwrap(), 12.0);
    }

    #[test]
    fn bilinear_product_bound_is_corner_jacobian() {
        let m = compiled(&format!("{SYNCED}semantics = product;\n"));
        let s = sens(&m);
        // Each row of the field has partials bounded by 2*5, 1, and 2*3 on
        // the box [0,3]^2 x [0,5]^2.
        assert_eq!(s.lipschitz(&[3.0, 3.0, 5.0, 5.0], Norm::Inf).unwrap(), 17.0);
    }

    #[test]
    fn lipschitz_bound_dominates_sampled_increments() {
        for semantics in ["min", "product"] {
            let m = compiled(&format!("{SYNCED}semantics = {semantics};\n"));
            let s = sens(&m);
            let field = vector_field(&m);
            let hi = vec![3.0, 3.0, 5.0, 5.0];
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for norm in [Norm::Inf, Norm::One, Norm::Two] {
                let l = s.lipschitz(&hi, norm).unwrap();
                for _ in 0..200 {
                    let v: Vec<f64> = hi.iter().map(|h| rng.gen_range(0.0..=*h)).collect();
                    let w: Vec<f64> = hi.iter().map(|h| rng.gen_range(0.0..=*h)).collect();
                    let dv: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a - b).collect();
                    let df: Vec<f64> = field
                        .eval(&v)
                        .iter()
                        .zip(field.eval(&w))
                        .map(|(a, b)| a - b)
                        .collect();
                    assert!(
                        norm.of(&df) <= l * norm.of(&dv) + 1e-12,
                        "{semantics} {norm}: {} > {l} * {}",
                        norm.of(&df),
                        norm.of(&dv)
                    );
                }
            }
        }
    }

    #[test]
    fn rate_gain_dominates_sampled_field_gaps() {
        for semantics in ["min", "product"] {
            let m = compiled(&format!("{SYNCED}semantics = {semantics};\n"));
            let base = m.rate_values();
            let lo: Vec<f64> = base.iter().map(|v| v * 0.5).collect();
            let hi: Vec<f64> = base.iter().map(|v| v * 1.5).collect();
            let s = Sensitivity::new(&m, &lo, &hi).unwrap();
            let box_hi = [3.0, 3.0, 5.0, 5.0];
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..60 {
                let xi: Vec<f64> = lo
                    .iter()
                    .zip(&hi)
                    .map(|(a, b)| rng.gen_range(*a..=*b))
                    .collect();
                let zeta: Vec<f64> = lo
                    .iter()
                    .zip(&hi)
                    .map(|(a, b)| rng.gen_range(*a..=*b))
                    .collect();
                let fa = vector_field(&m.apply_rates(&xi).unwrap());
                let fb = vector_field(&m.apply_rates(&zeta).unwrap());
                let x: Vec<f64> = box_hi.iter().map(|h| rng.gen_range(0.0..=*h)).collect();
                let gap: Vec<f64> = fa
                    .eval(&x)
                    .iter()
                    .zip(fb.eval(&x))
                    .map(|(a, b)| a - b)
                    .collect();
                let dr: Vec<f64> = xi.iter().zip(&zeta).map(|(a, b)| a - b).collect();
                for norm in [Norm::Inf, Norm::One, Norm::Two] {
                    let g = s.rate_gain_at(&x, norm);
                    assert!(
                        norm.of(&gap) <= g * norm.of(&dr) + 1e-12,
                        "{semantics} {norm}: {} > {g} * {}",
                        norm.of(&gap),
                        norm.of(&dr)
                    );
                }
            }
        }
    }

    #[test]
    fn degenerate_rate_box_is_rejected() {
        let m = compiled("P = (go, 2.0).Q;\nQ = (back, 3.0).P;\nsystem = P;\ninit P = 1.0;\n");
        assert!(Sensitivity::new(&m, &[2.0, 3.0], &[1.0, 3.0]).is_err());
        assert!(Sensitivity::new(&m, &[0.0, 3.0], &[2.0, 3.0]).is_err());
        assert!(Sensitivity::new(&m, &[2.0], &[2.0]).is_err());
    }
}
