//! Compiled models: derivation graphs per leaf process, the global state
//! table, action table, initial populations, and the rate-occurrence vector.
//!
//! A state is a sequential term with top-level constants unfolded; two states
//! are the same iff the unfolded terms are structurally identical. Distinct
//! leaves of the composition must have pairwise disjoint state sets.

use std::collections::{BTreeMap, BTreeSet};

use crate::syntax::{CompTree, ModelSource, Rho, SeqTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model has errors:\n{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
    #[error("{0}")]
    BadInput(String),
}

/// One derivation: source state, action, rate literal (with its occurrence
/// id), target state. Equal transitions listed more than once represent
/// multiplicity.
#[derive(Debug, Clone)]
pub struct Transition {
    pub src: usize,
    pub action: usize,
    pub rate: f64,
    pub occ: usize,
    pub tgt: usize,
}

#[derive(Debug, Clone)]
pub struct AtomInfo {
    pub name: String,
    /// State ids of this atom's derivative set, root first, discovery order.
    pub states: Vec<usize>,
    /// Definitions reachable from this leaf (owners of its rate occurrences).
    pub defs: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct StateInfo {
    pub name: String,
    pub atom: usize,
    pub term: SeqTerm,
}

/// Composition tree over atom ids with sync sets resolved to action ids.
#[derive(Debug, Clone)]
pub enum Node {
    Leaf(usize),
    Par {
        left: Box<Node>,
        right: Box<Node>,
        sync: BTreeSet<usize>,
    },
}

impl Node {
    pub fn atoms(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }
    fn collect(&self, out: &mut Vec<usize>) {
        match self {
            Node::Leaf(a) => out.push(*a),
            Node::Par { left, right, .. } => {
                left.collect(out);
                right.collect(out);
            }
        }
    }
}

/// One rate occurrence of the model's rate vector.
#[derive(Debug, Clone)]
pub struct RateOcc {
    /// Parse-order occurrence id (index into `ModelSource::occ_offsets`).
    pub occ: usize,
    pub atom: usize,
    pub action: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct CompiledModel {
    pub source: ModelSource,
    pub rho: Rho,
    pub atoms: Vec<AtomInfo>,
    pub states: Vec<StateInfo>,
    /// Action names, sorted; indices are action ids.
    pub actions: Vec<String>,
    pub tree: Node,
    pub transitions: Vec<Transition>,
    pub init: Vec<f64>,
    /// Rate occurrences sorted by (owning atom name, source position).
    pub rate_vector: Vec<RateOcc>,
    pub warnings: Vec<Diagnostic>,
    /// True when some sync set demands an action one operand can never do.
    pub ill_posed: bool,
    /// r_syn[state][action]: total outgoing rate of the state for the action
    /// (with multiplicity); the action-apparent rate of the bare term.
    r_syn: Vec<Vec<f64>>,
    /// Aggregated rate per (src, action, tgt), with multiplicity count.
    agg: BTreeMap<(usize, usize, usize), (f64, u32)>,
}

/// Unfold top-level constants until the head is a prefix or a choice.
/// Terminates for guarded definitions.
fn head_resolve(term: &SeqTerm, defs: &BTreeMap<&str, &SeqTerm>) -> SeqTerm {
    let mut t = term.clone();
    loop {
        match t {
            SeqTerm::Constant(ref n) => {
                t = (*defs.get(n.as_str()).expect("resolved names")).clone();
            }
            other => return other,
        }
    }
}

/// Spine transitions of a state term: prefixes reachable through choices and
/// constant references without crossing a prefix.
fn spine<'a>(
    term: &'a SeqTerm,
    defs: &BTreeMap<&'a str, &'a SeqTerm>,
    out: &mut Vec<(&'a str, f64, usize, &'a SeqTerm)>,
) {
    match term {
        SeqTerm::Prefix {
            action,
            rate,
            occ,
            cont,
        } => out.push((action, *rate, *occ, cont)),
        SeqTerm::Choice(l, r) => {
            spine(l, defs, out);
            spine(r, defs, out);
        }
        SeqTerm::Constant(n) => spine(defs.get(n.as_str()).expect("resolved names"), defs, out),
    }
}

/// Constant names referenced at the choice spine (not under any prefix).
fn spine_refs(term: &SeqTerm, out: &mut Vec<String>) {
    match term {
        SeqTerm::Prefix { .. } => {}
        SeqTerm::Choice(l, r) => {
            spine_refs(l, out);
            spine_refs(r, out);
        }
        SeqTerm::Constant(n) => out.push(n.clone()),
    }
}

/// All constant names referenced anywhere in a term.
fn all_refs(term: &SeqTerm, out: &mut BTreeSet<String>) {
    match term {
        SeqTerm::Prefix { cont, .. } => all_refs(cont, out),
        SeqTerm::Choice(l, r) => {
            all_refs(l, out);
            all_refs(r, out);
        }
        SeqTerm::Constant(n) => {
            out.insert(n.clone());
        }
    }
}

/// Detect definition cycles that never pass through a prefix, e.g. `A = A;`
/// or `A = B + (a,1).A; B = A;`.
fn unguarded_cycle(source: &ModelSource) -> Option<Vec<String>> {
    let mut edges: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for d in &source.defs {
        let mut refs = Vec::new();
        spine_refs(&d.body, &mut refs);
        edges.insert(&d.name, refs);
    }
    // DFS cycle detection.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let mut marks: BTreeMap<&str, Mark> = source
        .defs
        .iter()
        .map(|d| (d.name.as_str(), Mark::White))
        .collect();
    fn dfs<'a>(
        n: &'a str,
        edges: &'a BTreeMap<&str, Vec<String>>,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<String>,
    ) -> Option<Vec<String>> {
        marks.insert(n, Mark::Grey);
        stack.push(n.to_string());
        if let Some(succ) = edges.get(n) {
            for s in succ {
                let key = edges.keys().find(|k| **k == s.as_str()).copied();
                let key = match key {
                    Some(k) => k,
                    None => continue,
                };
                match marks[key] {
                    Mark::Grey => {
                        let start = stack.iter().position(|x| x == s).unwrap_or(0);
                        let mut cyc = stack[start..].to_vec();
                        cyc.push(s.clone());
                        return Some(cyc);
                    }
                    Mark::White => {
                        if let Some(c) = dfs(key, edges, marks, stack) {
                            return Some(c);
                        }
                    }
                    Mark::Black => {}
                }
            }
        }
        stack.pop();
        marks.insert(n, Mark::Black);
        None
    }
    let names: Vec<&str> = source.defs.iter().map(|d| d.name.as_str()).collect();
    for n in names {
        if marks[n] == Mark::White {
            let mut stack = Vec::new();
            if let Some(c) = dfs(n, &edges, &mut marks, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

struct AtomGraph {
    terms: Vec<SeqTerm>,
    names: Vec<String>,
    defs: BTreeSet<String>,
    /// (src local idx, action name, rate, occ, tgt local idx)
    transitions: Vec<(usize, String, f64, usize, usize)>,
}

fn build_atom_graph(leaf: &str, source: &ModelSource) -> AtomGraph {
    let defs: BTreeMap<&str, &SeqTerm> = source
        .defs
        .iter()
        .map(|d| (d.name.as_str(), &d.body))
        .collect();
    let root = head_resolve(&SeqTerm::Constant(leaf.to_string()), &defs);
    let mut terms: Vec<SeqTerm> = vec![root];
    let mut transitions = Vec::new();
    let mut frontier = 0usize;
    while frontier < terms.len() {
        let state = terms[frontier].clone();
        let mut outs = Vec::new();
        spine(&state, &defs, &mut outs);
        for (action, rate, occ, cont) in outs {
            let tgt_term = head_resolve(cont, &defs);
            let tgt = match terms.iter().position(|t| t.structurally_eq(&tgt_term)) {
                Some(i) => i,
                None => {
                    terms.push(tgt_term);
                    terms.len() - 1
                }
            };
            transitions.push((frontier, action.to_string(), rate, occ, tgt));
        }
        frontier += 1;
    }
    // Display names: prefer the first definition whose unfolding equals the
    // state term, starting with the leaf's own name for the root.
    let mut names = Vec::with_capacity(terms.len());
    for (i, t) in terms.iter().enumerate() {
        let mut name = None;
        if i == 0 {
            name = Some(leaf.to_string());
        } else {
            for d in &source.defs {
                if head_resolve(&SeqTerm::Constant(d.name.clone()), &defs).structurally_eq(t) {
                    name = Some(d.name.clone());
                    break;
                }
            }
        }
        names.push(name.unwrap_or_else(|| t.to_string()));
    }
    // Definitions syntactically reachable from the leaf.
    let mut reach: BTreeSet<String> = BTreeSet::new();
    let mut todo = vec![leaf.to_string()];
    while let Some(n) = todo.pop() {
        if !reach.insert(n.clone()) {
            continue;
        }
        if let Some(body) = defs.get(n.as_str()) {
            let mut refs = BTreeSet::new();
            all_refs(body, &mut refs);
            for r in refs {
                if !reach.contains(&r) {
                    todo.push(r);
                }
            }
        }
    }
    AtomGraph {
        terms,
        names,
        defs: reach,
        transitions,
    }
}

fn well_posedness_warnings(
    tree: &CompTree,
    can: &dyn Fn(&str, &str) -> bool,
    out: &mut Vec<Diagnostic>,
) {
    fn can_do(tree: &CompTree, action: &str, can: &dyn Fn(&str, &str) -> bool) -> bool {
        match tree {
            CompTree::Leaf(n) => can(n, action),
            CompTree::Par { left, right, sync } => {
                if sync.contains(action) {
                    can_do(left, action, can) && can_do(right, action, can)
                } else {
                    can_do(left, action, can) || can_do(right, action, can)
                }
            }
        }
    }
    if let CompTree::Par { left, right, sync } = tree {
        for a in sync {
            for (side, name) in [(left, "left"), (right, "right")] {
                if !can_do(side, a, can) {
                    out.push(Diagnostic {
                        severity: Severity::Warning,
                        message: format!(
                            "model is ill-posed: the {name} operand of `{tree}` can never perform synchronised action `{a}`"
                        ),
                    });
                }
            }
        }
        well_posedness_warnings(left, can, out);
        well_posedness_warnings(right, can, out);
    }
}

fn analyze(source: &ModelSource) -> (Vec<Diagnostic>, Option<CompiledParts>) {
    let mut diags = Vec::new();

    if let Some(cycle) = unguarded_cycle(source) {
        diags.push(Diagnostic {
            severity: Severity::Error,
            message: format!(
                "unguarded recursion: {} (every definition cycle must pass through a prefix)",
                cycle.join(" -> ")
            ),
        });
        return (diags, None);
    }

    let leaves: Vec<&str> = source.system.leaves();
    let mut seen = BTreeSet::new();
    for l in &leaves {
        if !seen.insert(*l) {
            diags.push(Diagnostic {
                severity: Severity::Error,
                message: format!("process `{l}` appears more than once in the system line"),
            });
        }
    }
    if diags.iter().any(|d| d.severity == Severity::Error) {
        return (diags, None);
    }

    let graphs: Vec<AtomGraph> = leaves.iter().map(|l| build_atom_graph(l, source)).collect();

    // Disjointness of derivative sets across atoms.
    for i in 0..graphs.len() {
        for j in i + 1..graphs.len() {
            for (si, ti) in graphs[i].terms.iter().enumerate() {
                if let Some(sj) = graphs[j].terms.iter().position(|tj| tj.structurally_eq(ti)) {
                    diags.push(Diagnostic {
                        severity: Severity::Error,
                        message: format!(
                            "processes `{}` and `{}` have overlapping derivative sets: both reach state `{}`",
                            leaves[i], leaves[j], graphs[i].names[si].clone().max(graphs[j].names[sj].clone())
                        ),
                    });
                }
            }
        }
    }
    if diags.iter().any(|d| d.severity == Severity::Error) {
        return (diags, None);
    }

    // Init lines must name states of the system.
    let mut init_ok = true;
    for (name, _) in &source.inits {
        let found = graphs.iter().any(|g| g.names.iter().any(|n| n == name));
        if !found {
            diags.push(Diagnostic {
                severity: Severity::Error,
                message: format!("init line names `{name}`, which is not a state of the system"),
            });
            init_ok = false;
        }
    }
    if !init_ok {
        return (diags, None);
    }

    // Warnings: ill-posedness and unreachable definitions.
    let can = |leaf: &str, action: &str| -> bool {
        let idx = leaves.iter().position(|l| *l == leaf).unwrap();
        graphs[idx].transitions.iter().any(|(_, a, ..)| a == action)
    };
    let before = diags.len();
    well_posedness_warnings(&source.system, &can, &mut diags);
    let ill_posed = diags.len() > before;

    let reachable: BTreeSet<&String> = graphs.iter().flat_map(|g| g.defs.iter()).collect();
    for d in &source.defs {
        if !reachable.contains(&d.name) {
            diags.push(Diagnostic {
                severity: Severity::Warning,
                message: format!("definition `{}` is not reachable from the system", d.name),
            });
        }
    }

    (diags, Some(CompiledParts { graphs, ill_posed }))
}

struct CompiledParts {
    graphs: Vec<AtomGraph>,
    ill_posed: bool,
}

/// Semantic checks beyond parsing: unguarded recursion (error), duplicate
/// system leaves (error), overlapping derivative sets (error), init lines
/// naming non-states (error), ill-posed synchronisation (warning),
/// unreachable definitions (warning).
pub fn validate(source: &ModelSource) -> Vec<Diagnostic> {
    analyze(source).0
}

/// Compile a source model. `rho_override` takes precedence over the file's
/// `semantics` line; with neither present the default is `min`.
pub fn compile(
    source: &ModelSource,
    rho_override: Option<Rho>,
) -> Result<CompiledModel, ModelError> {
    let (diags, parts) = analyze(source);
    let errors: Vec<Diagnostic> = diags
        .iter()
        .filter(|d| d.severity == Severity::Error)
        .cloned()
        .collect();
    if !errors.is_empty() {
        return Err(ModelError::Invalid(errors));
    }
    let warnings: Vec<Diagnostic> = diags
        .into_iter()
        .filter(|d| d.severity == Severity::Warning)
        .collect();
    let parts = parts.expect("no errors implies graphs built");
    let leaves: Vec<&str> = source.system.leaves();

    // Action table: transition actions plus sync-set actions, sorted.
    let mut action_set: BTreeSet<String> = BTreeSet::new();
    for g in &parts.graphs {
        for (_, a, ..) in &g.transitions {
            action_set.insert(a.clone());
        }
    }
    fn sync_actions(tree: &CompTree, out: &mut BTreeSet<String>) {
        if let CompTree::Par { left, right, sync } = tree {
            out.extend(sync.iter().cloned());
            sync_actions(left, out);
            sync_actions(right, out);
        }
    }
    sync_actions(&source.system, &mut action_set);
    let actions: Vec<String> = action_set.into_iter().collect();
    let action_id = |name: &str| actions.iter().position(|a| a == name).unwrap();

    // Global state table: atoms in leaf order, discovery order within.
    let mut atoms = Vec::new();
    let mut states = Vec::new();
    let mut transitions = Vec::new();
    for (ai, g) in parts.graphs.iter().enumerate() {
        let base = states.len();
        let ids: Vec<usize> = (0..g.terms.len()).map(|k| base + k).collect();
        for (k, term) in g.terms.iter().enumerate() {
            states.push(StateInfo {
                name: g.names[k].clone(),
                atom: ai,
                term: term.clone(),
            });
        }
        for (src, action, rate, occ, tgt) in &g.transitions {
            transitions.push(Transition {
                src: base + src,
                action: action_id(action),
                rate: *rate,
                occ: *occ,
                tgt: base + tgt,
            });
        }
        atoms.push(AtomInfo {
            name: leaves[ai].to_string(),
            states: ids,
            defs: g.defs.clone(),
        });
    }

    // Composition tree over atom ids.
    fn to_node(tree: &CompTree, leaves: &[&str], action_id: &dyn Fn(&str) -> usize) -> Node {
        match tree {
            CompTree::Leaf(n) => Node::Leaf(leaves.iter().position(|l| l == n).unwrap()),
            CompTree::Par { left, right, sync } => Node::Par {
                left: Box::new(to_node(left, leaves, action_id)),
                right: Box::new(to_node(right, leaves, action_id)),
                sync: sync.iter().map(|a| action_id(a)).collect(),
            },
        }
    }
    let tree = to_node(&source.system, &leaves, &|n| action_id(n));

    // Initial populations (default 0).
    let mut init = vec![0.0; states.len()];
    for (name, v) in &source.inits {
        let idx = states
            .iter()
            .position(|s| &s.name == name)
            .expect("validated init");
        init[idx] = *v;
    }

    // Rate vector: all occurrences of definitions reachable from some atom,
    // ordered by (owning atom name, source position).
    fn occs_of(term: &SeqTerm, out: &mut Vec<(usize, String, f64)>) {
        match term {
            SeqTerm::Prefix {
                action,
                rate,
                occ,
                cont,
            } => {
                out.push((*occ, action.clone(), *rate));
                occs_of(cont, out);
            }
            SeqTerm::Choice(l, r) => {
                occs_of(l, out);
                occs_of(r, out);
            }
            SeqTerm::Constant(_) => {}
        }
    }
    let mut rate_vector = Vec::new();
    for (ai, atom) in atoms.iter().enumerate() {
        for def in source.defs.iter().filter(|d| atom.defs.contains(&d.name)) {
            let mut occs = Vec::new();
            occs_of(&def.body, &mut occs);
            for (occ, action, value) in occs {
                rate_vector.push(RateOcc {
                    occ,
                    atom: ai,
                    action: action_id(&action),
                    value,
                });
            }
        }
    }
    rate_vector.sort_by(|a, b| {
        let ka = (&atoms[a.atom].name, source.occ_offsets[a.occ]);
        let kb = (&atoms[b.atom].name, source.occ_offsets[b.occ]);
        ka.cmp(&kb)
    });

    let rho = rho_override.or(source.rho).unwrap_or(Rho::Min);

    let mut r_syn = vec![vec![0.0; actions.len()]; states.len()];
    let mut agg: BTreeMap<(usize, usize, usize), (f64, u32)> = BTreeMap::new();
    for t in &transitions {
        r_syn[t.src][t.action] += t.rate;
        let e = agg.entry((t.src, t.action, t.tgt)).or_insert((0.0, 0));
        e.0 += t.rate;
        e.1 += 1;
    }

    Ok(CompiledModel {
        source: source.clone(),
        rho,
        atoms,
        states,
        actions,
        tree,
        transitions,
        init,
        rate_vector,
        warnings,
        ill_posed: parts.ill_posed,
        r_syn,
        agg,
    })
}

impl CompiledModel {
    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s.name == name)
    }

    pub fn atom_index(&self, name: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a.name == name)
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == name)
    }

    pub fn state_names(&self) -> Vec<&str> {
        self.states.iter().map(|s| s.name.as_str()).collect()
    }

    /// Action-apparent rate of a state's bare term: total outgoing rate for
    /// the action, with multiplicity.
    pub fn atom_apparent_rate(&self, state: usize, action: usize) -> f64 {
        self.r_syn[state][action]
    }

    /// Aggregated transition rate from `src` to `tgt` for `action`.
    pub fn aggregated_rate(&self, src: usize, action: usize, tgt: usize) -> f64 {
        self.agg
            .get(&(src, action, tgt))
            .map(|e| e.0)
            .unwrap_or(0.0)
    }

    /// Number of distinct derivations from `src` to `tgt` labelled `action`.
    pub fn multiplicity(&self, src: usize, action: usize, tgt: usize) -> u32 {
        self.agg.get(&(src, action, tgt)).map(|e| e.1).unwrap_or(0)
    }

    /// Probability that an `action` move from `src` lands in `tgt`;
    /// 0 when the state has no `action` transitions.
    pub fn jump_probability(&self, src: usize, action: usize, tgt: usize) -> f64 {
        let total = self.r_syn[src][action];
        if total == 0.0 {
            0.0
        } else {
            self.aggregated_rate(src, action, tgt) / total
        }
    }

    /// The rate vector: current values of all rate occurrences, in canonical
    /// order (owning atom name, then source position).
    pub fn rate_values(&self) -> Vec<f64> {
        self.rate_vector.iter().map(|r| r.value).collect()
    }

    /// Rebuild the model with rate occurrence `i` (canonical order) set to
    /// `xi[i]`. The state space is re-derived from the rewritten definitions.
    pub fn apply_rates(&self, xi: &[f64]) -> Result<CompiledModel, ModelError> {
        if xi.len() != self.rate_vector.len() {
            return Err(ModelError::BadInput(format!(
                "rate vector has {} entries, got {}",
                self.rate_vector.len(),
                xi.len()
            )));
        }
        for (i, v) in xi.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0) {
                return Err(ModelError::BadInput(format!(
                    "rate vector entry {i} must be positive and finite, got {v}"
                )));
            }
        }
        let mut by_occ: BTreeMap<usize, f64> = BTreeMap::new();
        for (r, v) in self.rate_vector.iter().zip(xi) {
            by_occ.insert(r.occ, *v);
        }
        fn rewrite(term: &mut SeqTerm, by_occ: &BTreeMap<usize, f64>) {
            match term {
                SeqTerm::Prefix {
                    rate, occ, cont, ..
                } => {
                    if let Some(v) = by_occ.get(occ) {
                        *rate = *v;
                    }
                    rewrite(cont, by_occ);
                }
                SeqTerm::Choice(l, r) => {
                    rewrite(l, by_occ);
                    rewrite(r, by_occ);
                }
                SeqTerm::Constant(_) => {}
            }
        }
        let mut source = self.source.clone();
        for d in &mut source.defs {
            rewrite(&mut d.body, &by_occ);
        }
        compile(&source, Some(self.rho))
    }

    /// Rebuild the model with the initial populations replaced (state
    /// order). Zero entries are dropped from the source listing.
    pub fn with_inits(&self, init: &[f64]) -> Result<CompiledModel, ModelError> {
        if init.len() != self.states.len() {
            return Err(ModelError::BadInput(format!(
                "initial vector has {} entries for {} states",
                init.len(),
                self.states.len()
            )));
        }
        for (i, v) in init.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(ModelError::BadInput(format!(
                    "initial population {i} must be finite and nonnegative, got {v}"
                )));
            }
        }
        let mut m = self.clone();
        m.init = init.to_vec();
        m.source.inits = m
            .states
            .iter()
            .zip(init)
            .filter(|(_, v)| **v != 0.0)
            .map(|(s, v)| (s.name.clone(), *v))
            .collect();
        Ok(m)
    }

    /// Per-atom total of a population vector (the conserved quantities).
    pub fn atom_totals(&self, v: &[f64]) -> Vec<f64> {
        self.atoms
            .iter()
            .map(|a| a.states.iter().map(|s| v[*s]).sum())
            .collect()
    }
}

/// Compose two models in parallel over `sync`, keeping both init sections.
/// Definition names must be disjoint.
pub fn compose(
    a: &ModelSource,
    b: &ModelSource,
    sync: &BTreeSet<String>,
    rho: Option<Rho>,
) -> Result<ModelSource, ModelError> {
    for d in &a.defs {
        if b.defs.iter().any(|e| e.name == d.name) {
            return Err(ModelError::BadInput(format!(
                "cannot compose: both models define `{}`",
                d.name
            )));
        }
    }
    let mut text = String::new();
    for d in a.defs.iter().chain(&b.defs) {
        text.push_str(&format!("{} = {};\n", d.name, d.body));
    }
    let acts: Vec<&str> = sync.iter().map(|s| s.as_str()).collect();
    text.push_str(&format!(
        "system = ({}) <{}> ({});\n",
        a.system,
        acts.join(","),
        b.system
    ));
    for (n, v) in a.inits.iter().chain(&b.inits) {
        text.push_str(&format!("init {n} = {v};\n"));
    }
    if let Some(r) = rho.or(a.rho).or(b.rho) {
        text.push_str(&format!("semantics = {r};\n"));
    }
    crate::syntax::parse_model(&text).map_err(|e| ModelError::BadInput(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::parse_model;

    fn sys_model(d: usize) -> String {
        let mut s = String::new();
        for i in 1..=d {
            s.push_str(&format!(
                "P{i} = (alpha, 1.0).P{i}';\nP{i}' = (beta, 0.5).P{i};\n"
            ));
        }
        s.push_str("Q = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\n");
        let chain = (1..=d)
            .map(|i| format!("P{i}"))
            .collect::<Vec<_>>()
            .join(" <> ");
        if d > 1 {
            s.push_str(&format!("system = ({chain}) <alpha> Q;\n"));
        } else {
            s.push_str(&format!("system = {chain} <alpha> Q;\n"));
        }
        for i in 1..=d {
            s.push_str(&format!("init P{i} = {};\n", 200 + i - 1));
        }
        s.push_str("init Q = 400;\nsemantics = product;\n");
        s
    }

    #[test]
    fn compiles_replica_model() {
        let src = parse_model(&sys_model(3)).unwrap();
        let m = compile(&src, None).unwrap();
        assert_eq!(m.atoms.len(), 4);
        assert_eq!(m.states.len(), 8);
        assert_eq!(m.actions, vec!["alpha", "beta", "gamma"]);
        assert_eq!(m.rho, Rho::Product);
        assert!(m.warnings.is_empty());
        assert_eq!(
            m.state_names(),
            vec!["P1", "P1'", "P2", "P2'", "P3", "P3'", "Q", "Q'"]
        );
        assert_eq!(m.init[m.state_index("P2").unwrap()], 201.0);
        assert_eq!(m.init[m.state_index("P1'").unwrap()], 0.0);
        // Rate vector: (P1: alpha, beta), (P2: ...), (P3: ...), (Q: alpha, gamma)
        assert_eq!(
            m.rate_values(),
            vec![1.0, 0.5, 1.0, 0.5, 1.0, 0.5, 1.0, 15.0]
        );
    }

    #[test]
    fn self_loops_with_two_rates() {
        let src = parse_model("P = (a, 1.5).P + (a, 2.5).P;\nsystem = P;").unwrap();
        let m = compile(&src, None).unwrap();
        assert_eq!(m.states.len(), 1);
        assert_eq!(m.transitions.len(), 2);
        let a = m.action_index("a").unwrap();
        assert_eq!(m.aggregated_rate(0, a, 0), 4.0);
        assert_eq!(m.multiplicity(0, a, 0), 2);
    }

    #[test]
    fn multiplicity_of_equal_derivations() {
        let src =
            parse_model("C = (a, 2.0).A + (a, 2.0).A;\nA = (x, 1.0).A;\nsystem = C;").unwrap();
        let m = compile(&src, None).unwrap();
        let a = m.action_index("a").unwrap();
        let c = m.state_index("C").unwrap();
        let tgt = m.state_index("A").unwrap();
        assert_eq!(m.multiplicity(c, a, tgt), 2);
        assert_eq!(m.aggregated_rate(c, a, tgt), 4.0);
        assert_eq!(m.atom_apparent_rate(c, a), 4.0);
    }

    #[test]
    fn two_state_cycle() {
        let src = parse_model("P = (a, 1.0).P';\nP' = (b, 2.0).P;\nsystem = P;").unwrap();
        let m = compile(&src, None).unwrap();
        assert_eq!(m.states.len(), 2);
        assert_eq!(m.transitions.len(), 2);
    }

    #[test]
    fn anonymous_states_are_printed_terms() {
        let src = parse_model("A = (a, 1.0).(b, 2.0).A;\nsystem = A;").unwrap();
        let m = compile(&src, None).unwrap();
        assert_eq!(m.states.len(), 2);
        assert_eq!(m.states[1].name, "(b, 2).A");
    }

    #[test]
    fn rejects_unguarded_recursion() {
        let src = parse_model("A = A;\nsystem = A;").unwrap();
        match compile(&src, None) {
            Err(ModelError::Invalid(diags)) => {
                assert!(
                    diags[0].message.contains("unguarded recursion"),
                    "{:?}",
                    diags
                );
            }
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unguarded_choice_cycle() {
        let src = parse_model("A = B + (a, 1).A;\nB = A;\nsystem = A;").unwrap();
        assert!(matches!(compile(&src, None), Err(ModelError::Invalid(_))));
    }

    #[test]
    fn guarded_constant_chain_is_fine() {
        let src = parse_model("A = B;\nB = (a, 1).A;\nsystem = A;").unwrap();
        let m = compile(&src, None).unwrap();
        assert_eq!(m.states.len(), 1);
    }

    #[test]
    fn rejects_overlapping_derivative_sets() {
        let src =
            parse_model("A = (a, 1).Z;\nB = (b, 1).Z;\nZ = (z, 1).Z;\nsystem = A <> B;").unwrap();
        match compile(&src, None) {
            Err(ModelError::Invalid(diags)) => {
                assert!(
                    diags[0].message.contains("overlapping derivative sets"),
                    "{:?}",
                    diags
                );
            }
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_leaf() {
        let src = parse_model("A = (a, 1).A;\nsystem = A <> A;").unwrap();
        assert!(matches!(compile(&src, None), Err(ModelError::Invalid(_))));
    }

    #[test]
    fn warns_on_ill_posed_sync() {
        let src = parse_model(
            "P = (alpha, 1).P';\nP' = (beta, 1).P;\nQ = (alpha, 1).Q';\nQ' = (gamma, 1).Q;\nsystem = P <beta> Q;",
        )
        .unwrap();
        let m = compile(&src, None).unwrap();
        assert!(m.ill_posed);
        assert_eq!(m.warnings.len(), 1);
        assert!(m.warnings[0].message.contains("ill-posed"));
        assert!(m.warnings[0].message.contains("beta"));
    }

    #[test]
    fn well_posed_model_has_no_warnings() {
        let src = parse_model(&sys_model(2)).unwrap();
        let m = compile(&src, None).unwrap();
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn jump_probabilities() {
        let src =
            parse_model("P = (a, 1.0).A + (a, 3.0).B;\nA = (x, 1).A;\nB = (y, 1).B;\nsystem = P;")
                .unwrap();
        let m = compile(&src, None).unwrap();
        let a = m.action_index("a").unwrap();
        let p = m.state_index("P").unwrap();
        let sa = m.state_index("A").unwrap();
        let sb = m.state_index("B").unwrap();
        assert_eq!(m.jump_probability(p, a, sa), 0.25);
        assert_eq!(m.jump_probability(p, a, sb), 0.75);
        let x = m.action_index("x").unwrap();
        assert_eq!(m.jump_probability(p, x, sa), 0.0);
    }

    #[test]
    fn apply_rates_identity() {
        let src = parse_model(&sys_model(2)).unwrap();
        let m = compile(&src, None).unwrap();
        let m2 = m.apply_rates(&m.rate_values()).unwrap();
        assert_eq!(m.rate_values(), m2.rate_values());
        assert_eq!(m.state_names(), m2.state_names());
    }

    #[test]
    fn apply_rates_perturbs_one_occurrence() {
        let src = parse_model(&sys_model(2)).unwrap();
        let m = compile(&src, None).unwrap();
        let mut xi = m.rate_values();
        xi[0] = 1.2; // P1's alpha rate
        xi[1] = 0.7; // P1's beta rate
        let m2 = m.apply_rates(&xi).unwrap();
        assert_eq!(m2.rate_values(), xi);
        let a = m2.action_index("alpha").unwrap();
        let p1 = m2.state_index("P1").unwrap();
        assert_eq!(m2.atom_apparent_rate(p1, a), 1.2);
        // P2 untouched
        let p2 = m2.state_index("P2").unwrap();
        assert_eq!(m2.atom_apparent_rate(p2, a), 1.0);
    }

    #[test]
    fn apply_rates_rejects_nonpositive() {
        let src = parse_model(&sys_model(2)).unwrap();
        let m = compile(&src, None).unwrap();
        let mut xi = m.rate_values();
        xi[0] = 0.0;
        assert!(m.apply_rates(&xi).is_err());
    }

    #[test]
    fn warns_on_unreachable_definition() {
        let src = parse_model("A = (a, 1).A;\nZ = (z, 1).Z;\nsystem = A;").unwrap();
        let m = compile(&src, None).unwrap();
        assert!(m
            .warnings
            .iter()
            .any(|w| w.message.contains("not reachable")));
    }

    #[test]
    fn compose_disjoint_models() {
        let a = parse_model("A = (a, 1).A;\nsystem = A;\ninit A = 5;").unwrap();
        let b = parse_model("B = (a, 2).B;\nsystem = B;\ninit B = 7;").unwrap();
        let sync: BTreeSet<String> = ["a".to_string()].into();
        let c = compose(&a, &b, &sync, Some(Rho::Product)).unwrap();
        let m = compile(&c, None).unwrap();
        assert_eq!(m.atoms.len(), 2);
        assert_eq!(m.init, vec![5.0, 7.0]);
        assert_eq!(m.rho, Rho::Product);
    }

    #[test]
    fn compose_rejects_name_clash() {
        let a = parse_model("A = (a, 1).A;\nsystem = A;").unwrap();
        assert!(compose(&a, &a, &BTreeSet::new(), None).is_err());
    }
}
