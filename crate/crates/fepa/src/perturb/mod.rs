//! Rate and initial-condition homogenisation with trajectory error bounds.
//!
//! A model whose replicated components carry slightly different rates is not
//! reducible, but a nearby model with the class means in place of the
//! individual values is. This module builds that nearby model, measures how
//! far it sits from the original (`epsilon` in the rates, `delta0` in the
//! initial populations), and turns conservative gain bounds of the drift
//! into a worst-case bound on the distance between the two solutions:
//!
//! ```text
//! |V(t) - W(t)| <= (eps*K/L + delta) * exp(L*t) - eps*K/L
//! ```
//!
//! where `L` is a Lipschitz constant of the homogenised drift and `K` caps
//! the sensitivity of the drift to the rate vector along the original
//! solution. The relative error metrics reproduce the percentages used when
//! comparing full against reduced solutions.

mod lipschitz;

pub use lipschitz::Sensitivity;

use serde::Serialize;
use thiserror::Error;

use crate::lumping::{
    resolve_partition, resolve_tuple_partition, Partition, PartitionError, TuplePartition,
};
use crate::model::ModelError;
use crate::semantics::vector_field;
use crate::solve::{solve_field, Norm, SolveError, SolveOptions, Trajectory};
use crate::CompiledModel;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    /// A class groups atoms whose rate listings cannot be aligned.
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    InvalidPlan(String),
    /// Inputs that do not belong to the same state or rate space.
    #[error("{0}")]
    Mismatch(String),
    /// The requested quantity is undefined for this input.
    #[error("{0}")]
    Degenerate(String),
}

/// Rate occurrences (canonical indices) forced to a common value. Without an
/// explicit target the class mean is used.
#[derive(Debug, Clone)]
pub struct RateClass {
    pub occurrences: Vec<usize>,
    pub target: Option<f64>,
}

/// States whose initial populations are forced to a common value.
#[derive(Debug, Clone)]
pub struct InitClass {
    pub states: Vec<usize>,
    pub target: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct HomogenizationPlan {
    pub rate_classes: Vec<RateClass>,
    pub init_classes: Vec<InitClass>,
}

/// The original model next to its homogenised counterpart.
#[derive(Debug, Clone)]
pub struct Homogenized {
    /// The homogenised model.
    pub model: CompiledModel,
    /// Original rate vector.
    pub xi: Vec<f64>,
    /// Homogenised rate vector.
    pub zeta: Vec<f64>,
    /// Original initial populations.
    pub init_xi: Vec<f64>,
    /// Homogenised initial populations.
    pub init_zeta: Vec<f64>,
}

impl Homogenized {
    /// Size of the rate perturbation.
    pub fn epsilon(&self, norm: Norm) -> f64 {
        let d: Vec<f64> = self.xi.iter().zip(&self.zeta).map(|(a, b)| a - b).collect();
        norm.of(&d)
    }

    /// Size of the initial-population perturbation.
    pub fn delta0(&self, norm: Norm) -> f64 {
        let d: Vec<f64> = self
            .init_xi
            .iter()
            .zip(&self.init_zeta)
            .map(|(a, b)| a - b)
            .collect();
        norm.of(&d)
    }
}

const RESOLVE_TOL: f64 = 1e-9;

/// Plan that aligns the rates inside every block of an ordinary reduction
/// partition. Initial populations are left alone: the reduced system tracks
/// block sums, which need no agreement between members.
pub fn plan_for_ofl(
    model: &CompiledModel,
    partition: &Partition,
) -> Result<HomogenizationPlan, PerturbError> {
    let blocks = resolve_partition(model, partition, RESOLVE_TOL)?;
    let mut plan = HomogenizationPlan::default();
    for b in &blocks {
        plan.rate_classes.extend(rate_classes_for(model, &b.atoms)?);
    }
    Ok(plan)
}

/// Plan that aligns both rates and initial populations inside every class of
/// an exact reduction partition, position by position. Initial classes
/// follow the state bijections of the resolved partition.
pub fn plan_for_efl(
    model: &CompiledModel,
    partition: &TuplePartition,
) -> Result<HomogenizationPlan, PerturbError> {
    let resolved = resolve_tuple_partition(model, partition)?;
    let mut plan = HomogenizationPlan::default();
    for c in &resolved.classes {
        if c.tuples.len() < 2 {
            continue;
        }
        for k in 0..c.tuples[0].len() {
            let atoms: Vec<usize> = c.tuples.iter().map(|t| t[k]).collect();
            plan.rate_classes.extend(rate_classes_for(model, &atoms)?);
            let rep_states = model.atoms[c.tuples[0][k]].states.len();
            for l in 0..rep_states {
                plan.init_classes.push(InitClass {
                    states: (0..c.tuples.len()).map(|j| c.sigmas[j][k][l]).collect(),
                    target: None,
                });
            }
        }
    }
    Ok(plan)
}

/// Positional rate classes across a group of atoms: occurrence lists must
/// have equal length and agree on the action at every position.
fn rate_classes_for(
    model: &CompiledModel,
    atoms: &[usize],
) -> Result<Vec<RateClass>, PerturbError> {
    if atoms.len() < 2 {
        return Ok(Vec::new());
    }
    let entries: Vec<Vec<usize>> = atoms
        .iter()
        .map(|&a| {
            model
                .rate_vector
                .iter()
                .enumerate()
                .filter(|(_, r)| r.atom == a)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    for (a, e) in atoms.iter().zip(&entries).skip(1) {
        if e.len() != entries[0].len() {
            return Err(PerturbError::Incompatible(format!(
                "cannot homogenise {} against {}: {} rate occurrences vs {}",
                model.atoms[*a].name,
                model.atoms[atoms[0]].name,
                e.len(),
                entries[0].len()
            )));
        }
        for (i, j) in entries[0].iter().zip(e) {
            let (ra, rb) = (&model.rate_vector[*i], &model.rate_vector[*j]);
            if ra.action != rb.action {
                return Err(PerturbError::Incompatible(format!(
                    "cannot homogenise {} against {}: rate positions carry actions {} vs {}",
                    model.atoms[*a].name,
                    model.atoms[atoms[0]].name,
                    model.actions[rb.action],
                    model.actions[ra.action]
                )));
            }
        }
    }
    Ok((0..entries[0].len())
        .map(|k| RateClass {
            occurrences: entries.iter().map(|e| e[k]).collect(),
            target: None,
        })
        .collect())
}

/// Mean that returns identical inputs unchanged, so applying a plan twice
/// moves nothing the second time.
fn class_value(values: &[f64]) -> f64 {
    if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
        values[0]
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Apply a plan: every class collapses to its target (or mean), each member
/// receiving the identical floating-point value.
pub fn homogenize(
    model: &CompiledModel,
    plan: &HomogenizationPlan,
) -> Result<Homogenized, PerturbError> {
    let xi = model.rate_values();
    let mut zeta = xi.clone();
    let mut seen = vec![false; xi.len()];
    for class in &plan.rate_classes {
        if class.occurrences.is_empty() {
            continue;
        }
        let mut values = Vec::with_capacity(class.occurrences.len());
        for &i in &class.occurrences {
            if i >= xi.len() {
                return Err(PerturbError::InvalidPlan(format!(
                    "rate occurrence {i} out of range (rate vector has {})",
                    xi.len()
                )));
            }
            if seen[i] {
                return Err(PerturbError::InvalidPlan(format!(
                    "rate occurrence {i} appears in two classes"
                )));
            }
            seen[i] = true;
            values.push(xi[i]);
        }
        let t = class.target.unwrap_or_else(|| class_value(&values));
        if !(t.is_finite() && t > 0.0) {
            return Err(PerturbError::InvalidPlan(format!(
                "class target rate must be positive and finite, got {t}"
            )));
        }
        for &i in &class.occurrences {
            zeta[i] = t;
        }
    }

    let init_xi = model.init.clone();
    let mut init_zeta = init_xi.clone();
    let mut seen = vec![false; init_xi.len()];
    for class in &plan.init_classes {
        if class.states.is_empty() {
            continue;
        }
        let mut values = Vec::with_capacity(class.states.len());
        for &s in &class.states {
            if s >= init_xi.len() {
                return Err(PerturbError::InvalidPlan(format!(
                    "state {s} out of range ({} states)",
                    init_xi.len()
                )));
            }
            if seen[s] {
                return Err(PerturbError::InvalidPlan(format!(
                    "state {s} appears in two initial-population classes"
                )));
            }
            seen[s] = true;
            values.push(init_xi[s]);
        }
        let t = class.target.unwrap_or_else(|| class_value(&values));
        if !(t.is_finite() && t >= 0.0) {
            return Err(PerturbError::InvalidPlan(format!(
                "class target population must be nonnegative and finite, got {t}"
            )));
        }
        for &s in &class.states {
            init_zeta[s] = t;
        }
    }

    let mut homog = if zeta != xi {
        model.apply_rates(&zeta)?
    } else {
        model.clone()
    };
    if init_zeta != init_xi {
        homog = homog.with_inits(&init_zeta)?;
    }
    if homog.states.len() != model.states.len()
        || homog
            .states
            .iter()
            .zip(&model.states)
            .any(|(a, b)| a.name != b.name)
    {
        return Err(PerturbError::Mismatch(
            "homogenised model derived a different state space".into(),
        ));
    }
    Ok(Homogenized {
        model: homog,
        xi,
        zeta,
        init_xi,
        init_zeta,
    })
}

/// Componentwise box containing every trajectory of every given model: each
/// state is capped by its atom's initial total, which the dynamics conserve.
/// All models must share one state listing.
pub fn conservation_box(models: &[&CompiledModel]) -> Result<Vec<f64>, PerturbError> {
    let first = models
        .first()
        .ok_or_else(|| PerturbError::Mismatch("no models given".into()))?;
    let mut hi = vec![0.0f64; first.states.len()];
    for m in models {
        if m.states.len() != first.states.len()
            || m.states
                .iter()
                .zip(&first.states)
                .any(|(a, b)| a.name != b.name)
        {
            return Err(PerturbError::Mismatch(
                "models do not share a state listing".into(),
            ));
        }
        let totals = m.atom_totals(&m.init);
        for (q, s) in m.states.iter().enumerate() {
            hi[q] = hi[q].max(totals[s.atom]);
        }
    }
    Ok(hi)
}

/// Worst-case distance at time `t` between solutions of two drifts that
/// differ by at most `epsilon * gain` pointwise and start `delta` apart,
/// when the second drift is `lipschitz`-Lipschitz.
pub fn error_bound(
    epsilon: f64,
    delta: f64,
    gain: f64,
    lipschitz: f64,
    t: f64,
) -> Result<f64, PerturbError> {
    for (name, v) in [
        ("epsilon", epsilon),
        ("delta", delta),
        ("gain", gain),
        ("horizon", t),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(PerturbError::Degenerate(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    if !(lipschitz.is_finite() && lipschitz > 0.0) {
        return Err(PerturbError::Degenerate(format!(
            "Lipschitz constant must be positive and finite, got {lipschitz}"
        )));
    }
    let a = epsilon * gain / lipschitz;
    Ok((a + delta) * (lipschitz * t).exp() - a)
}

/// Everything the error bound needs, measured over one solve horizon.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    pub norm: Norm,
    /// Rate perturbation size.
    pub epsilon: f64,
    /// Initial-population perturbation size.
    pub delta: f64,
    /// Lipschitz bound of the homogenised drift over the conservation box.
    pub lipschitz_l: f64,
    /// Rate-sensitivity cap along the original solution, with headroom.
    pub lipschitz_k: f64,
    pub horizon: f64,
    /// Guaranteed cap on the distance between the two solutions at the
    /// horizon (and a fortiori before it).
    pub bound: f64,
}

/// A report together with the two solutions it was measured on.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub report: PerturbationReport,
    pub original: Trajectory,
    pub homogenized: Trajectory,
}

/// Headroom applied to the sampled rate-sensitivity maximum, covering drift
/// between grid points.
const GAIN_HEADROOM: f64 = 1.1;

/// Solve the original and homogenised models on a common grid and assemble
/// the error bound.
pub fn perturbation_report(
    model: &CompiledModel,
    homog: &Homogenized,
    norm: Norm,
    opts: &SolveOptions,
) -> Result<ReportBundle, PerturbError> {
    let f_xi = vector_field(model);
    let f_zeta = vector_field(&homog.model);
    let original = solve_field(model, &f_xi, opts)?;
    let solved = solve_field(&homog.model, &f_zeta, opts)?;

    let state_hi = conservation_box(&[model, &homog.model])?;
    let lo: Vec<f64> = homog
        .xi
        .iter()
        .zip(&homog.zeta)
        .map(|(a, b)| a.min(*b))
        .collect();
    let hi: Vec<f64> = homog
        .xi
        .iter()
        .zip(&homog.zeta)
        .map(|(a, b)| a.max(*b))
        .collect();
    let sens = Sensitivity::new(&homog.model, &lo, &hi)?;
    let lipschitz_l = sens.lipschitz(&state_hi, norm)?;
    let mut gain = 0.0f64;
    for row in &original.values {
        gain = gain.max(sens.rate_gain_at(row, norm));
    }
    let lipschitz_k = GAIN_HEADROOM * gain;

    let epsilon = homog.epsilon(norm);
    let delta = homog.delta0(norm);
    let bound = error_bound(epsilon, delta, lipschitz_k, lipschitz_l, opts.t_end)?;
    Ok(ReportBundle {
        report: PerturbationReport {
            norm,
            epsilon,
            delta,
            lipschitz_l,
            lipschitz_k,
            horizon: opts.t_end,
            bound,
        },
        original,
        homogenized: solved,
    })
}

/// Largest pointwise deviation between two full solutions, as a percentage
/// of each state's initial population. States starting at zero are skipped;
/// at least one state must start positive.
pub fn efl_error(full: &Trajectory, perturbed: &Trajectory) -> Result<f64, PerturbError> {
    if full.names != perturbed.names || full.times.len() != perturbed.times.len() {
        return Err(PerturbError::Mismatch(
            "solutions do not share a grid and state listing".into(),
        ));
    }
    let init = &full.values[0];
    let tracked: Vec<usize> = (0..init.len()).filter(|&s| init[s] > 0.0).collect();
    if tracked.is_empty() {
        return Err(PerturbError::Degenerate(
            "no state starts with a positive population".into(),
        ));
    }
    let mut worst = 0.0f64;
    for (row_a, row_b) in full.values.iter().zip(&perturbed.values) {
        for &s in &tracked {
            worst = worst.max((row_a[s] - row_b[s]).abs() / init[s]);
        }
    }
    Ok(100.0 * worst)
}

/// Largest pointwise deviation between member sums of a full solution and
/// the corresponding reduced variables, as a percentage of each sum's
/// initial value. Variables whose members start at zero total are skipped;
/// at least one must start positive.
pub fn ofl_error(
    full: &Trajectory,
    lumped: &Trajectory,
    members: &[Vec<usize>],
) -> Result<f64, PerturbError> {
    if full.times.len() != lumped.times.len() {
        return Err(PerturbError::Mismatch(
            "solutions do not share a grid".into(),
        ));
    }
    if members.len() != lumped.names.len() {
        return Err(PerturbError::Mismatch(format!(
            "{} member lists for {} reduced variables",
            members.len(),
            lumped.names.len()
        )));
    }
    let n = full.names.len();
    if members.iter().flatten().any(|&s| s >= n) {
        return Err(PerturbError::Mismatch("member state out of range".into()));
    }
    let sum = |row: &[f64], states: &[usize]| states.iter().map(|&s| row[s]).sum::<f64>();
    let denom: Vec<f64> = members.iter().map(|ms| sum(&full.values[0], ms)).collect();
    if !denom.iter().any(|d| *d > 0.0) {
        return Err(PerturbError::Degenerate(
            "no reduced variable starts with a positive population".into(),
        ));
    }
    let mut worst = 0.0f64;
    for (row_full, row_lumped) in full.values.iter().zip(&lumped.values) {
        for (j, ms) in members.iter().enumerate() {
            if denom[j] > 0.0 {
                worst = worst.max((sum(row_full, ms) - row_lumped[j]).abs() / denom[j]);
            }
        }
    }
    Ok(100.0 * worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lumping::{Block, TupleClass};
    use crate::solve::{trajectory_distance, Method};
    use crate::{compile, parse_model};

    fn compiled(src: &str) -> CompiledModel {
        compile(&parse_model(src).unwrap(), None).unwrap()
    }

    /// D almost-identical clients sharing one server: rates 1, 1+d, 1+2d...
    fn replicas(d: usize, delta: f64, scale: f64, rho: &str) -> CompiledModel {
        let mut src = String::new();
        let mut par = Vec::new();
        for i in 1..=d {
            let r = 1.0 + (i - 1) as f64 * delta;
            src.push_str(&format!(
                "P{i} = (alpha, {r}).P{i}';\nP{i}' = (beta, 0.5).P{i};\n"
            ));
            src.push_str(&format!(
                "init P{i} = {};\n",
                scale + (i - 1) as f64 * 0.01 * scale
            ));
            par.push(format!("P{i}"));
        }
        src.push_str("Q = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\n");
        src.push_str(&format!("init Q = {};\n", 2.0 * scale));
        src.push_str(&format!("system = ({}) <alpha> Q;\n", par.join(" <> ")));
        src.push_str(&format!("semantics = {rho};\n"));
        compiled(&src)
    }

    fn client_partition(d: usize) -> Partition {
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

    fn client_tuples(d: usize) -> TuplePartition {
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

    #[test]
    fn block_rates_collapse_to_their_mean() {
        let m = replicas(3, 0.03, 200.0, "min");
        let plan = plan_for_ofl(&m, &client_partition(3)).unwrap();
        assert_eq!(plan.rate_classes.len(), 2);
        assert!(plan.init_classes.is_empty());
        let h = homogenize(&m, &plan).unwrap();
        let names: Vec<(&str, &str)> = m
            .rate_vector
            .iter()
            .map(|r| (m.atoms[r.atom].name.as_str(), m.actions[r.action].as_str()))
            .collect();
        for (i, (atom, action)) in names.iter().enumerate() {
            match (*atom, *action) {
                ("Q", _) => assert_eq!(h.zeta[i], h.xi[i], "server untouched"),
                (_, "alpha") => assert!((h.zeta[i] - 1.03).abs() < 1e-12),
                (_, "beta") => assert_eq!(h.zeta[i], 0.5, "identical values stay put"),
                other => panic!("unexpected occurrence {other:?}"),
            }
        }
        assert!((h.epsilon(Norm::Inf) - 0.03).abs() < 1e-12);
        assert!((h.epsilon(Norm::One) - 0.06).abs() < 1e-12);
        assert_eq!(h.delta0(Norm::Inf), 0.0);
        assert_eq!(h.init_zeta, h.init_xi);
    }

    #[test]
    fn tuple_plan_also_averages_initial_populations() {
        let m = replicas(3, 0.03, 200.0, "min");
        let plan = plan_for_efl(&m, &client_tuples(3)).unwrap();
        assert_eq!(plan.rate_classes.len(), 2);
        assert_eq!(plan.init_classes.len(), 2);
        let h = homogenize(&m, &plan).unwrap();
        // Initial populations 200, 202, 204 average to 202 on every client.
        for i in 1..=3 {
            let s = h.model.state_index(&format!("P{i}")).unwrap();
            assert_eq!(h.init_zeta[s], 202.0);
        }
        assert!((h.delta0(Norm::Inf) - 2.0).abs() < 1e-12);
        assert!((h.delta0(Norm::One) - 4.0).abs() < 1e-12);
        let q = h.model.state_index("Q").unwrap();
        assert_eq!(h.init_zeta[q], 400.0);
        // The rebuilt model really starts from the averaged populations.
        assert_eq!(h.model.init, h.init_zeta);
    }

    #[test]
    fn homogenising_twice_moves_nothing() {
        let m = replicas(4, 0.02, 200.0, "product");
        let plan = plan_for_efl(&m, &client_tuples(4)).unwrap();
        let h = homogenize(&m, &plan).unwrap();
        let plan2 = plan_for_efl(&h.model, &client_tuples(4)).unwrap();
        let h2 = homogenize(&h.model, &plan2).unwrap();
        assert_eq!(h2.epsilon(Norm::One), 0.0);
        assert_eq!(h2.delta0(Norm::One), 0.0);
        assert_eq!(h2.xi, h2.zeta);
    }

    #[test]
    fn structurally_different_atoms_cannot_share_a_class() {
        let m = replicas(2, 0.0, 10.0, "min");
        let mixed = Partition {
            blocks: vec![Block {
                atoms: vec!["P1".into(), "P2".into(), "Q".into()],
                sigmas: None,
            }],
        };
        let err = plan_for_ofl(&m, &mixed).unwrap_err();
        assert!(matches!(err, PerturbError::Incompatible(_)), "{err}");
    }

    #[test]
    fn overlapping_classes_are_rejected() {
        let m = replicas(2, 0.0, 10.0, "min");
        let plan = HomogenizationPlan {
            rate_classes: vec![
                RateClass {
                    occurrences: vec![0, 1],
                    target: None,
                },
                RateClass {
                    occurrences: vec![1, 2],
                    target: None,
                },
            ],
            init_classes: vec![],
        };
        assert!(matches!(
            homogenize(&m, &plan),
            Err(PerturbError::InvalidPlan(_))
        ));
    }

    #[test]
    fn bound_formula_matches_hand_values() {
        let b = error_bound(0.01, 0.0, 2.0, 1.0, 1.0).unwrap();
        assert!((b - 0.03436563656918090).abs() < 1e-15, "{b}");
        let b = error_bound(0.0, 0.5, 3.0, 2.0, 1.5).unwrap();
        assert!((b - 10.042768461593834).abs() < 1e-12, "{b}");
        assert_eq!(error_bound(0.0, 0.0, 5.0, 3.0, 10.0).unwrap(), 0.0);
        assert!(error_bound(0.1, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(error_bound(f64::NAN, 0.0, 1.0, 1.0, 1.0).is_err());
    }

    fn traj(names: &[&str], times: &[f64], values: &[&[f64]]) -> Trajectory {
        Trajectory {
            names: names.iter().map(|s| s.to_string()).collect(),
            times: times.to_vec(),
            values: values.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn full_solution_error_is_relative_to_initial_population() {
        let a = traj(&["X", "Y"], &[0.0, 1.0], &[&[200.0, 400.0], &[100.0, 50.0]]);
        let b = traj(&["X", "Y"], &[0.0, 1.0], &[&[200.0, 400.0], &[102.0, 50.0]]);
        assert_eq!(efl_error(&a, &b).unwrap(), 1.0);

        let a = traj(&["X", "Y"], &[0.0, 1.0], &[&[200.0, 0.0], &[100.0, 5.0]]);
        let b = traj(&["X", "Y"], &[0.0, 1.0], &[&[200.0, 0.0], &[100.0, 9.0]]);
        assert_eq!(
            efl_error(&a, &b).unwrap(),
            0.0,
            "zero-start states are skipped"
        );

        let a = traj(&["X"], &[0.0], &[&[0.0]]);
        assert!(matches!(
            efl_error(&a, &a),
            Err(PerturbError::Degenerate(_))
        ));
    }

    #[test]
    fn block_sum_error_is_relative_to_initial_sum() {
        let full = traj(
            &["A", "B"],
            &[0.0, 1.0],
            &[&[2000.0, 466.0], &[2010.0, 480.0]],
        );
        let lumped = traj(&["W"], &[0.0, 1.0], &[&[2466.0], &[2466.0]]);
        let e = ofl_error(&full, &lumped, &[vec![0, 1]]).unwrap();
        assert!((e - 2400.0 / 2466.0).abs() < 1e-12, "{e}");
    }

    #[test]
    fn reported_bound_dominates_the_measured_gap() {
        for rho in ["min", "product"] {
            let m = replicas(3, 0.01, 2.0, rho);
            let plan = plan_for_ofl(&m, &client_partition(3)).unwrap();
            let h = homogenize(&m, &plan).unwrap();
            let opts = SolveOptions {
                method: Method::Adaptive,
                t_end: 2.0,
                grid: 0.05,
                ..SolveOptions::default()
            };
            let bundle = perturbation_report(&m, &h, Norm::Inf, &opts).unwrap();
            let pairs: Vec<(usize, usize)> = (0..m.states.len()).map(|i| (i, i)).collect();
            let measured =
                trajectory_distance(&bundle.original, &bundle.homogenized, Norm::Inf, &pairs);
            let r = &bundle.report;
            assert!(r.bound.is_finite(), "{rho}: bound {}", r.bound);
            assert!(
                measured <= r.bound,
                "{rho}: measured {measured} exceeds bound {}",
                r.bound
            );
            assert!(measured > 0.0, "{rho}: perturbation should be visible");
            assert!(r.epsilon > 0.0 && r.delta == 0.0);
        }
    }

    #[test]
    fn conservation_box_caps_states_by_atom_totals() {
        let m = replicas(2, 0.0, 10.0, "min");
        let hi = conservation_box(&[&m]).unwrap();
        let p1 = m.state_index("P1").unwrap();
        let p1t = m.state_index("P1'").unwrap();
        let q = m.state_index("Q").unwrap();
        assert_eq!(hi[p1], 10.0);
        assert_eq!(hi[p1t], 10.0);
        assert_eq!(hi[q], 20.0);
    }
}
