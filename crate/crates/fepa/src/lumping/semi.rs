//! Semi-isomorphism of derivation graphs.
//!
//! Two sequential processes are semi-isomorphic when a bijection between
//! their derivative sets matches, for every source/target pair and action,
//! the total rate across equally-labelled transitions. The relaxed variant
//! returns the bijection minimising the largest such mismatch.
//!
//! Rates are literals, so comparisons use a relative tolerance.

use std::collections::BTreeMap;

use crate::model::CompiledModel;

/// Aggregated local view of one atom's graph: per (source, target) local
/// index pair, the per-action rate sums. Actions are compared by name so
/// atoms from different models can be related.
struct LocalGraph<'m> {
    n: usize,
    edges: BTreeMap<(usize, usize), BTreeMap<&'m str, f64>>,
}

fn local_graph<'m>(model: &'m CompiledModel, atom: usize) -> LocalGraph<'m> {
    let states = &model.atoms[atom].states;
    let local: BTreeMap<usize, usize> = states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut edges: BTreeMap<(usize, usize), BTreeMap<&str, f64>> = BTreeMap::new();
    for t in &model.transitions {
        if let (Some(s), Some(d)) = (local.get(&t.src), local.get(&t.tgt)) {
            *edges
                .entry((*s, *d))
                .or_default()
                .entry(model.actions[t.action].as_str())
                .or_insert(0.0) += t.rate;
        }
    }
    LocalGraph {
        n: states.len(),
        edges,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Largest per-action |rate sum difference| between edge (i,j) of `a` and
/// edge (k,l) of `b`; a missing edge counts as all-zero.
fn pair_deviation(a: &LocalGraph, i: usize, j: usize, b: &LocalGraph, k: usize, l: usize) -> f64 {
    static EMPTY: BTreeMap<&str, f64> = BTreeMap::new();
    let ea = a.edges.get(&(i, j)).unwrap_or(&EMPTY);
    let eb = b.edges.get(&(k, l)).unwrap_or(&EMPTY);
    let mut worst = 0.0f64;
    for (act, ra) in ea {
        worst = worst.max((ra - eb.get(act).copied().unwrap_or(0.0)).abs());
    }
    for (act, rb) in eb {
        if !ea.contains_key(act) {
            worst = worst.max(rb.abs());
        }
    }
    worst
}

/// Per-state signature used to prune candidates: per action, (out total,
/// in total, self-loop total), plus the state count of nonzero out edges.
fn signature<'m>(g: &LocalGraph<'m>, s: usize) -> BTreeMap<&'m str, (f64, f64, f64)> {
    let mut sig: BTreeMap<&str, (f64, f64, f64)> = BTreeMap::new();
    for ((i, j), acts) in &g.edges {
        for (act, r) in acts {
            let e = sig.entry(act).or_insert((0.0, 0.0, 0.0));
            if *i == s {
                e.0 += r;
            }
            if *j == s {
                e.1 += r;
            }
            if *i == s && *j == s {
                e.2 += r;
            }
        }
    }
    sig.retain(|_, v| v.0 != 0.0 || v.1 != 0.0 || v.2 != 0.0);
    sig
}

fn signatures_compatible(
    sa: &BTreeMap<&str, (f64, f64, f64)>,
    sb: &BTreeMap<&str, (f64, f64, f64)>,
    tol: f64,
) -> bool {
    let zero = (0.0, 0.0, 0.0);
    for (act, va) in sa {
        let vb = sb.get(act).unwrap_or(&zero);
        if !(close(va.0, vb.0, tol) && close(va.1, vb.1, tol) && close(va.2, vb.2, tol)) {
            return false;
        }
    }
    for (act, vb) in sb {
        if !sa.contains_key(act) {
            if !(close(0.0, vb.0, tol) && close(0.0, vb.1, tol) && close(0.0, vb.2, tol)) {
                return false;
            }
        }
    }
    true
}

fn consistent(
    a: &LocalGraph,
    b: &LocalGraph,
    assigned: &[(usize, usize)],
    s: usize,
    t: usize,
    tol: f64,
) -> bool {
    if pair_deviation(a, s, s, b, t, t) > tol {
        return false;
    }
    for (s2, t2) in assigned {
        if pair_deviation(a, s, *s2, b, t, *t2) > tol {
            return false;
        }
        if pair_deviation(a, *s2, s, b, *t2, t) > tol {
            return false;
        }
    }
    true
}

/// Find a rate-sum-preserving bijection between the derivative sets of
/// `(ma, atom_a)` and `(mb, atom_b)`, as local-index images of atom_a's
/// states in atom_b's state order. `tol` is the relative rate tolerance.
pub fn semi_isomorphic(
    ma: &CompiledModel,
    atom_a: usize,
    mb: &CompiledModel,
    atom_b: usize,
    tol: f64,
) -> Option<Vec<usize>> {
    let a = local_graph(ma, atom_a);
    let b = local_graph(mb, atom_b);
    if a.n != b.n {
        return None;
    }
    let sig_a: Vec<_> = (0..a.n).map(|s| signature(&a, s)).collect();
    let sig_b: Vec<_> = (0..b.n).map(|s| signature(&b, s)).collect();
    let cands: Vec<Vec<usize>> = (0..a.n)
        .map(|s| {
            (0..b.n)
                .filter(|t| signatures_compatible(&sig_a[s], &sig_b[*t], tol))
                .collect()
        })
        .collect();
    // Assign scarcest states first.
    let mut order: Vec<usize> = (0..a.n).collect();
    order.sort_by_key(|s| cands[*s].len());

    fn go(
        pos: usize,
        order: &[usize],
        cands: &[Vec<usize>],
        a: &LocalGraph,
        b: &LocalGraph,
        used: &mut Vec<bool>,
        assigned: &mut Vec<(usize, usize)>,
        tol: f64,
    ) -> bool {
        if pos == order.len() {
            return true;
        }
        let s = order[pos];
        for t in &cands[s] {
            if used[*t] || !consistent(a, b, assigned, s, *t, tol) {
                continue;
            }
            used[*t] = true;
            assigned.push((s, *t));
            if go(pos + 1, order, cands, a, b, used, assigned, tol) {
                return true;
            }
            assigned.pop();
            used[*t] = false;
        }
        false
    }

    let mut used = vec![false; b.n];
    let mut assigned = Vec::new();
    if go(0, &order, &cands, &a, &b, &mut used, &mut assigned, tol) {
        let mut sigma = vec![0usize; a.n];
        for (s, t) in assigned {
            sigma[s] = t;
        }
        Some(sigma)
    } else {
        None
    }
}

/// Bijection minimising the largest per-(source, target, action) rate-sum
/// mismatch, with that minimum. `None` when the derivative sets have
/// different sizes. Branch-and-bound over all bijections.
pub fn eps_semi_isomorphism(
    ma: &CompiledModel,
    atom_a: usize,
    mb: &CompiledModel,
    atom_b: usize,
) -> Option<(Vec<usize>, f64)> {
    let a = local_graph(ma, atom_a);
    let b = local_graph(mb, atom_b);
    if a.n != b.n {
        return None;
    }
    let n = a.n;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut used = vec![false; n];
    let mut sigma = vec![0usize; n];

    fn deviation_with(
        a: &LocalGraph,
        b: &LocalGraph,
        sigma: &[usize],
        pos: usize,
        s: usize,
        t: usize,
    ) -> f64 {
        let mut worst = pair_deviation(a, s, s, b, t, t);
        for s2 in 0..pos {
            worst = worst.max(pair_deviation(a, s, s2, b, t, sigma[s2]));
            worst = worst.max(pair_deviation(a, s2, s, b, sigma[s2], t));
        }
        worst
    }

    fn go(
        pos: usize,
        n: usize,
        a: &LocalGraph,
        b: &LocalGraph,
        used: &mut Vec<bool>,
        sigma: &mut Vec<usize>,
        cur: f64,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if let Some((_, be)) = best {
            if cur >= *be {
                return;
            }
        }
        if pos == n {
            *best = Some((sigma.clone(), cur));
            return;
        }
        for t in 0..n {
            if used[t] {
                continue;
            }
            let d = deviation_with(a, b, sigma, pos, pos, t);
            let next = cur.max(d);
            if let Some((_, be)) = best {
                if next >= *be {
                    continue;
                }
            }
            used[t] = true;
            sigma[pos] = t;
            go(pos + 1, n, a, b, used, sigma, next, best);
            used[t] = false;
        }
    }

    go(0, n, &a, &b, &mut used, &mut sigma, 0.0, &mut best);
    best
}
