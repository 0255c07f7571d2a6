//! Building and solving the reduced system induced by a verified partition.
//!
//! Both reductions keep one variable per state of each representative atom
//! and evaluate the *original* drift at a lifted population vector:
//!
//! * ordinary: the lifted vector holds the lumped value on the
//!   representative state and zero elsewhere; the lumped variable tracks
//!   the blockwise population sum.
//! * exact: the lifted vector copies the lumped value onto every related
//!   state; the lumped variable tracks the population of each member
//!   individually (they agree when the initial populations do).

use std::cell::RefCell;

use super::partition::{
    resolve_partition, resolve_tuple_partition_tol, Partition, PartitionError, TuplePartition,
};
use super::verify::{verify_efl, verify_ofl, VerifyOptions, VerifyReport};
use crate::model::CompiledModel;
use crate::semantics::{vector_field, VectorField};
use crate::solve::{solve_ode, SolveError, SolveOptions, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LumpKind {
    Exact,
    Ordinary,
}

#[derive(Debug, thiserror::Error)]
pub enum LumpError {
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("partition failed verification ({0}); build with force to proceed anyway")]
    NotLumpable(String),
}

/// The reduced ODE system. Variables are named after the representative
/// states; `members[i]` lists the global state ids variable `i` covers.
pub struct LumpedSystem {
    pub kind: LumpKind,
    pub names: Vec<String>,
    pub init: Vec<f64>,
    /// Global state id of each variable's representative state.
    pub var_state: Vec<usize>,
    /// All global states each variable stands for (representative first).
    pub members: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
    field: VectorField,
    n_full: usize,
    neg_scale: Vec<f64>,
}

impl LumpedSystem {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Lift a lumped vector to full dimension: ordinary lumping writes each
    /// value on the representative state only (zero elsewhere), exact
    /// lumping copies it onto every member state.
    pub fn lift(&self, w: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_full];
        self.lift_into(w, &mut full);
        full
    }

    fn lift_into(&self, w: &[f64], full: &mut [f64]) {
        for x in full.iter_mut() {
            *x = 0.0;
        }
        match self.kind {
            LumpKind::Ordinary => {
                for (i, s) in self.var_state.iter().enumerate() {
                    full[*s] = w[i];
                }
            }
            LumpKind::Exact => {
                for (i, states) in self.members.iter().enumerate() {
                    for s in states {
                        full[*s] = w[i];
                    }
                }
            }
        }
    }

    /// Project a full population row to lumped variables: the blockwise sum
    /// for ordinary lumping, the representative's value for exact lumping.
    pub fn project(&self, full: &[f64]) -> Vec<f64> {
        match self.kind {
            LumpKind::Ordinary => self
                .members
                .iter()
                .map(|states| states.iter().map(|s| full[*s]).sum())
                .collect(),
            LumpKind::Exact => self.var_state.iter().map(|s| full[*s]).collect(),
        }
    }

    /// Reduced drift: lift, evaluate the original field, read off the
    /// representative states.
    pub fn rhs(&self, w: &[f64], out: &mut [f64]) {
        let mut full = vec![0.0; self.n_full];
        let mut f = vec![0.0; self.n_full];
        self.rhs_with(&mut full, &mut f, w, out);
    }

    fn rhs_with(&self, full: &mut [f64], f: &mut [f64], w: &[f64], out: &mut [f64]) {
        self.lift_into(w, full);
        self.field.eval_into(full, f);
        for (o, s) in out.iter_mut().zip(&self.var_state) {
            *o = f[*s];
        }
    }

    pub fn solve(&self, opts: &SolveOptions) -> Result<Trajectory, SolveError> {
        let scratch = RefCell::new((vec![0.0; self.n_full], vec![0.0; self.n_full]));
        solve_ode(
            |w, out| {
                let (full, f) = &mut *scratch.borrow_mut();
                self.rhs_with(full, f, w, out);
            },
            &self.init,
            &self.names,
            &self.neg_scale,
            opts,
        )
    }

    /// Expand a lumped trajectory to full state space (exact lumping:
    /// every member behaves like its representative; ordinary lumping:
    /// the lift, i.e. block sums sit on the representatives).
    pub fn expand(&self, traj: &Trajectory, full_names: &[String]) -> Trajectory {
        Trajectory {
            names: full_names.to_vec(),
            times: traj.times.clone(),
            values: traj.values.iter().map(|row| self.lift(row)).collect(),
        }
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn assemble(
    model: &CompiledModel,
    kind: LumpKind,
    groups: Vec<(Vec<usize>, Vec<Vec<usize>>)>,
) -> LumpedSystem {
    // groups: per block/class-position, (member atoms, sigmas as
    // local-rep-index -> global state id, representative first).
    let mut names = Vec::new();
    let mut init = Vec::new();
    let mut var_state = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut neg_scale = Vec::new();
    let mut warnings = Vec::new();
    let totals = model.atom_totals(&model.init);
    for (atoms, sigmas) in &groups {
        let rep_states = &model.atoms[atoms[0]].states;
        let group_total: f64 = atoms.iter().map(|a| totals[*a]).sum();
        for (l, p) in rep_states.iter().enumerate() {
            names.push(model.states[*p].name.clone());
            var_state.push(*p);
            let covered: Vec<usize> = sigmas.iter().map(|s| s[l]).collect();
            let w0 = match kind {
                LumpKind::Ordinary => covered.iter().map(|s| model.init[*s]).sum(),
                LumpKind::Exact => {
                    let rep0 = model.init[*p];
                    for s in &covered {
                        if relative_gap(model.init[*s], rep0) > 1e-9 {
                            warnings.push(format!(
                                "initial populations of `{}` ({}) and `{}` ({}) differ; \
                                 the exact reduction assumes they agree",
                                model.states[*p].name, rep0, model.states[*s].name, model.init[*s],
                            ));
                        }
                    }
                    rep0
                }
            };
            init.push(w0);
            members.push(covered);
            neg_scale.push(match kind {
                LumpKind::Ordinary => group_total.max(1.0),
                LumpKind::Exact => totals[atoms[0]].max(1.0),
            });
        }
    }
    LumpedSystem {
        kind,
        names,
        init,
        var_state,
        members,
        warnings,
        field: vector_field(model),
        n_full: model.states.len(),
        neg_scale,
    }
}

/// Verify `partition` as an ordinary lumping and build the reduced system.
/// A failed verification is an error unless `force` is set; the report is
/// returned either way.
pub fn build_ofl_lump(
    model: &CompiledModel,
    partition: &Partition,
    opts: &VerifyOptions,
    force: bool,
) -> Result<(LumpedSystem, VerifyReport), LumpError> {
    let report = verify_ofl(model, partition, opts)?;
    if !report.passed() && !force {
        let what = report
            .witness
            .as_ref()
            .map(|w| format!("condition {} at action `{}`", w.condition, w.action))
            .unwrap_or_else(|| "no witness".to_string());
        return Err(LumpError::NotLumpable(what));
    }
    let blocks = resolve_partition(model, partition, opts.tol)?;
    let groups = blocks.into_iter().map(|b| (b.atoms, b.sigmas)).collect();
    let mut sys = assemble(model, LumpKind::Ordinary, groups);
    sys.warnings.extend(report.warnings.iter().cloned());
    Ok((sys, report))
}

/// Verify `partition` as an exact lumping and build the reduced system.
pub fn build_efl_lump(
    model: &CompiledModel,
    partition: &TuplePartition,
    opts: &VerifyOptions,
    force: bool,
) -> Result<(LumpedSystem, VerifyReport), LumpError> {
    let report = verify_efl(model, partition, opts)?;
    if !report.passed() && !force {
        let what = report
            .witness
            .as_ref()
            .map(|w| format!("condition {} at action `{}`", w.condition, w.action))
            .unwrap_or_else(|| "no witness".to_string());
        return Err(LumpError::NotLumpable(what));
    }
    let resolved = resolve_tuple_partition_tol(model, partition, opts.tol)?;
    let mut groups = Vec::new();
    for class in &resolved.classes {
        let width = class.tuples[0].len();
        for k in 0..width {
            let atoms: Vec<usize> = class.tuples.iter().map(|t| t[k]).collect();
            let sigmas: Vec<Vec<usize>> = class.sigmas.iter().map(|row| row[k].clone()).collect();
            groups.push((atoms, sigmas));
        }
    }
    let mut sys = assemble(model, LumpKind::Exact, groups);
    sys.warnings.extend(report.warnings.iter().cloned());
    Ok((sys, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lumping::partition::{Block, TupleClass};
    use crate::model::compile;
    use crate::solve::solve_field;
    use crate::syntax::parse_model;

    fn replicas(d: usize, rho: &str) -> CompiledModel {
        let mut text = String::new();
        for i in 1..=d {
            text.push_str(&format!(
                "P{i} = (alpha, 1.0).P{i}';\nP{i}' = (beta, 0.5).P{i};\n"
            ));
        }
        text.push_str("Q = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\n");
        let chain = (1..=d)
            .map(|i| format!("P{i}"))
            .collect::<Vec<_>>()
            .join(" <> ");
        text.push_str(&format!(
            "system = ({chain}) <alpha> Q;\nsemantics = {rho};\n"
        ));
        for i in 1..=d {
            text.push_str(&format!("init P{i} = 2.0;\n"));
        }
        text.push_str("init Q = 4.0;\n");
        compile(&parse_model(&text).unwrap(), None).unwrap()
    }

    fn blocks(d: usize) -> Partition {
        Partition {
            blocks: vec![
                Block {
                    atoms: (1..=d).map(|i| format!("P{i}")).collect(),
                    sigmas: None,
                },
                Block {
                    atoms: vec!["Q".into()],
                    sigmas: None,
                },
            ],
        }
    }

    fn tuples(d: usize) -> TuplePartition {
        TuplePartition {
            classes: vec![
                TupleClass {
                    tuples: (1..=d).map(|i| vec![format!("P{i}")]).collect(),
                    sigmas: None,
                },
                TupleClass {
                    tuples: vec![vec!["Q".into()]],
                    sigmas: None,
                },
            ],
        }
    }

    fn short() -> SolveOptions {
        SolveOptions {
            t_end: 5.0,
            grid: 0.5,
            ..SolveOptions::default()
        }
    }

    #[test]
    fn ordinary_reduction_tracks_block_sums() {
        for rho in ["product", "min"] {
            let m = replicas(3, rho);
            let (sys, report) =
                build_ofl_lump(&m, &blocks(3), &VerifyOptions::default(), false).unwrap();
            assert!(report.passed());
            assert_eq!(sys.dim(), 4);
            assert_eq!(sys.names, vec!["P1", "P1'", "Q", "Q'"]);
            assert_eq!(sys.init, vec![6.0, 0.0, 4.0, 0.0]);

            let field = crate::semantics::vector_field(&m);
            let full = solve_field(&m, &field, &short()).unwrap();
            let lumped = sys.solve(&short()).unwrap();
            for (row_f, row_l) in full.values.iter().zip(&lumped.values) {
                let projected = sys.project(row_f);
                for (a, b) in projected.iter().zip(row_l) {
                    assert!((a - b).abs() < 1e-6, "sum {a} vs lumped {b}");
                }
            }
        }
    }

    #[test]
    fn exact_reduction_matches_each_member() {
        for rho in ["product", "min"] {
            let m = replicas(3, rho);
            let (sys, report) =
                build_efl_lump(&m, &tuples(3), &VerifyOptions::default(), false).unwrap();
            assert!(report.passed());
            assert!(sys.warnings.is_empty(), "{:?}", sys.warnings);
            assert_eq!(sys.dim(), 4);
            assert_eq!(sys.init, vec![2.0, 0.0, 4.0, 0.0]);

            let field = crate::semantics::vector_field(&m);
            let full = solve_field(&m, &field, &short()).unwrap();
            let lumped = sys.solve(&short()).unwrap();
            // Every member of the class behaves exactly like the lumped var.
            for (row_f, row_l) in full.values.iter().zip(&lumped.values) {
                for (i, states) in sys.members.iter().enumerate() {
                    for s in states {
                        assert!(
                            (row_f[*s] - row_l[i]).abs() < 1e-6,
                            "{} vs lumped {}",
                            row_f[*s],
                            row_l[i]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn unverified_partition_is_rejected_without_force() {
        let mut text = String::new();
        text.push_str("P1 = (alpha, 1.0).P1';\nP1' = (beta, 0.5).P1;\n");
        text.push_str("P2 = (alpha, 1.25).P2';\nP2' = (beta, 0.5).P2;\n");
        text.push_str("Q = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\n");
        text.push_str("system = (P1 <> P2) <alpha> Q;\n");
        text.push_str("init P1 = 2.0;\ninit P2 = 2.0;\ninit Q = 4.0;\n");
        let m = compile(&parse_model(&text).unwrap(), None).unwrap();
        let err = build_ofl_lump(&m, &blocks(2), &VerifyOptions::default(), false);
        assert!(matches!(err, Err(LumpError::NotLumpable(_))));
        let (sys, report) =
            build_ofl_lump(&m, &blocks(2), &VerifyOptions::default(), true).unwrap();
        assert!(!report.passed());
        assert_eq!(sys.dim(), 4);
        // Forced build still produces a solvable system.
        let _ = sys.solve(&short()).unwrap();
    }

    #[test]
    fn asymmetric_inits_warn_for_exact_reduction() {
        let mut text = String::new();
        for i in 1..=2 {
            text.push_str(&format!(
                "P{i} = (alpha, 1.0).P{i}';\nP{i}' = (beta, 0.5).P{i};\n"
            ));
        }
        text.push_str("Q = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\n");
        text.push_str("system = (P1 <> P2) <alpha> Q;\n");
        text.push_str("init P1 = 2.0;\ninit P2 = 3.0;\ninit Q = 4.0;\n");
        let m = compile(&parse_model(&text).unwrap(), None).unwrap();
        let (sys, _) = build_efl_lump(&m, &tuples(2), &VerifyOptions::default(), false).unwrap();
        assert!(sys
            .warnings
            .iter()
            .any(|w| w.contains("initial populations")));
    }

    #[test]
    fn lift_and_project_are_consistent() {
        let m = replicas(2, "product");
        let (ofl, _) = build_ofl_lump(&m, &blocks(2), &VerifyOptions::default(), false).unwrap();
        let w = vec![5.0, 1.0, 3.0, 2.0];
        assert_eq!(ofl.project(&ofl.lift(&w)), w);
        let (efl, _) = build_efl_lump(&m, &tuples(2), &VerifyOptions::default(), false).unwrap();
        assert_eq!(efl.project(&efl.lift(&w)), w);
    }
}
