//! Sampled verification of lumping conditions.
//!
//! Both lumping notions are characterised by rate equalities that must hold
//! for *every* population vector. The structural parts (state-level apparent
//! rates of the related atoms' initial states) are checked once; the
//! population-dependent parts are checked on a seeded batch of random
//! vectors, with every third sample having coordinates zeroed at random so
//! the boundary of the positive orthant is exercised too.
//!
//! A failure stops at the first violated equality and records a witness
//! with everything needed to re-evaluate it: the condition name, anchors
//! (group, member, position, state, action) and the exact sample.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::partition::{
    resolve_partition, resolve_tuple_partition_tol, Partition, PartitionError, ResolvedBlock,
    ResolvedClass, TuplePartition,
};
use crate::model::CompiledModel;
use crate::semantics::{system_apparent_rate, system_component_rate};

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Random population vectors to test.
    pub samples: usize,
    /// Relative tolerance on every equality.
    pub tol: f64,
    /// Seed for the sample generator.
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            samples: 50,
            tol: 1e-9,
            seed: 42,
        }
    }
}

/// One violated equality, re-evaluable via [`recheck`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Witness {
    /// Which condition failed: `"a"`..`"d"` for exact lumping,
    /// `"i"`..`"iii"` for ordinary, with a `" structural"` suffix for the
    /// population-independent checks.
    pub condition: String,
    /// Tuple-class or block index within the partition.
    pub group: usize,
    /// Tuple or atom index inside the group (0 is the representative).
    pub member: usize,
    /// Position inside the tuple (always 0 for atom partitions).
    pub position: usize,
    /// State the equality is anchored at; empty for whole-system checks.
    pub state: String,
    pub action: String,
    /// The sample populations, in model state order; empty for structural
    /// checks.
    pub populations: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    /// `"exact"` or `"ordinary"`.
    pub kind: String,
    pub verdict: String,
    /// Samples drawn before stopping.
    pub samples: usize,
    /// Individual equalities evaluated.
    pub checks: u64,
    pub worst_residual: f64,
    pub tol: f64,
    pub seed: u64,
    /// Upper bound of the sampling box.
    pub vmax: f64,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.verdict == "PASS"
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn residual(lhs: f64, rhs: f64) -> f64 {
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0)
}

fn sample_box(model: &CompiledModel) -> f64 {
    2.0 * model.init.iter().cloned().fold(0.0f64, f64::max) + 1.0
}

fn draw_samples(model: &CompiledModel, opts: &VerifyOptions) -> (f64, Vec<Vec<f64>>) {
    let vmax = sample_box(model);
    let n = model.states.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let samples = (0..opts.samples)
        .map(|i| {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=vmax)).collect();
            if i % 3 == 2 {
                for x in v.iter_mut() {
                    if rng.gen_bool(0.5) {
                        *x = 0.0;
                    }
                }
            }
            v
        })
        .collect();
    (vmax, samples)
}

struct Run<'m> {
    model: &'m CompiledModel,
    tol: f64,
    checks: u64,
    worst: f64,
    witness: Option<Witness>,
}

impl<'m> Run<'m> {
    fn new(model: &'m CompiledModel, tol: f64) -> Self {
        Run {
            model,
            tol,
            checks: 0,
            worst: 0.0,
            witness: None,
        }
    }

    /// Record one equality; false means stop (a witness was captured).
    #[allow(clippy::too_many_arguments)]
    fn check(
        &mut self,
        condition: &str,
        group: usize,
        member: usize,
        position: usize,
        state: Option<usize>,
        action: usize,
        populations: &[f64],
        lhs: f64,
        rhs: f64,
    ) -> bool {
        self.checks += 1;
        let r = residual(lhs, rhs);
        if r > self.worst {
            self.worst = r;
        }
        if r > self.tol {
            self.witness = Some(Witness {
                condition: condition.to_string(),
                group,
                member,
                position,
                state: state
                    .map(|s| self.model.states[s].name.clone())
                    .unwrap_or_default(),
                action: self.model.actions[action].clone(),
                populations: populations.to_vec(),
                lhs,
                rhs,
                residual: r,
            });
            false
        } else {
            true
        }
    }

    fn finish(
        self,
        kind: &str,
        samples: usize,
        opts: &VerifyOptions,
        vmax: f64,
        warnings: Vec<String>,
    ) -> VerifyReport {
        VerifyReport {
            kind: kind.to_string(),
            verdict: if self.witness.is_none() {
                "PASS"
            } else {
                "FAIL"
            }
            .to_string(),
            samples,
            checks: self.checks,
            worst_residual: self.worst,
            tol: opts.tol,
            seed: opts.seed,
            vmax,
            warnings,
            witness: self.witness,
        }
    }
}

fn ill_posed_warning(model: &CompiledModel) -> Vec<String> {
    if model.ill_posed {
        vec![
            "model is ill-posed: the characterisation theorems do not apply; \
             this verdict rests on the sampled equalities alone"
                .to_string(),
        ]
    } else {
        Vec::new()
    }
}

/// Population vector after swapping each related pair of atoms in class
/// `class`, tuple `j`, along the class bijections.
fn efl_swap(model: &CompiledModel, class: &ResolvedClass, j: usize, v: &[f64]) -> Vec<f64> {
    let mut vs = v.to_vec();
    for (k, rep_atom) in class.tuples[0].iter().enumerate() {
        let rep_states = &model.atoms[*rep_atom].states;
        let sigma = &class.sigmas[j][k];
        for (l, p) in rep_states.iter().enumerate() {
            vs[*p] = v[sigma[l]];
            vs[sigma[l]] = v[*p];
        }
    }
    vs
}

/// Population vector folding every block onto its representative: each
/// representative state carries the block-wide sum along the bijections,
/// every other state is zero.
fn ofl_fold(model: &CompiledModel, blocks: &[ResolvedBlock], v: &[f64]) -> Vec<f64> {
    let mut vs = vec![0.0; v.len()];
    for block in blocks {
        let rep_states = &model.atoms[block.atoms[0]].states;
        for (l, p) in rep_states.iter().enumerate() {
            vs[*p] = block.sigmas.iter().map(|s| v[s[l]]).sum();
        }
    }
    vs
}

/// Inflow into `tgt` along `action`: jump probability from each `src`
/// state of the same atom times the source's component rate at `v`.
fn inflow(model: &CompiledModel, action: usize, tgt: usize, v: &[f64]) -> f64 {
    let atom = model.states[tgt].atom;
    model.atoms[atom]
        .states
        .iter()
        .map(|src| {
            let p = model.jump_probability(*src, action, tgt);
            if p > 0.0 {
                p * system_component_rate(model, action, *src, v)
            } else {
                0.0
            }
        })
        .sum()
}

/// Check that related atoms have the same state-level apparent rate at
/// their initial states, for every action. Both lumping notions require it.
fn structural_pair(
    run: &mut Run,
    condition: &str,
    group: usize,
    member: usize,
    position: usize,
    rep_atom: usize,
    member_atom: usize,
) -> bool {
    let model = run.model;
    let rep_root = model.atoms[rep_atom].states[0];
    let mem_root = model.atoms[member_atom].states[0];
    for action in 0..model.actions.len() {
        let lhs = model.atom_apparent_rate(rep_root, action);
        let rhs = model.atom_apparent_rate(mem_root, action);
        if !run.check(
            condition,
            group,
            member,
            position,
            Some(rep_root),
            action,
            &[],
            lhs,
            rhs,
        ) {
            return false;
        }
    }
    true
}

/// Verify a tuple partition as an exact fluid lumping: for every class and
/// every non-representative tuple, swapping the related atoms' populations
/// must preserve (a) each related state's component rate, (b) its inflow,
/// (c) every uninvolved state's component rate, and (d) the system apparent
/// rate, for every action.
pub fn verify_efl(
    model: &CompiledModel,
    partition: &TuplePartition,
    opts: &VerifyOptions,
) -> Result<VerifyReport, PartitionError> {
    let resolved = resolve_tuple_partition_tol(model, partition, opts.tol)?;
    let warnings = ill_posed_warning(model);
    let mut run = Run::new(model, opts.tol);

    'structural: for (ci, class) in resolved.classes.iter().enumerate() {
        for j in 1..class.tuples.len() {
            for k in 0..class.tuples[0].len() {
                if !structural_pair(
                    &mut run,
                    "d structural",
                    ci,
                    j,
                    k,
                    class.tuples[0][k],
                    class.tuples[j][k],
                ) {
                    break 'structural;
                }
            }
        }
    }
    if run.witness.is_some() {
        return Ok(run.finish("exact", 0, opts, sample_box(model), warnings));
    }

    let (vmax, samples) = draw_samples(model, opts);
    let n_actions = model.actions.len();
    let mut drawn = 0;
    'samples: for v in &samples {
        drawn += 1;
        for (ci, class) in resolved.classes.iter().enumerate() {
            let involved_atoms: Vec<usize> = class.tuples[0].clone();
            for j in 1..class.tuples.len() {
                let vs = efl_swap(model, class, j, v);
                for action in 0..n_actions {
                    for (k, rep_atom) in class.tuples[0].iter().enumerate() {
                        let sigma = &class.sigmas[j][k];
                        for (l, p) in model.atoms[*rep_atom].states.iter().enumerate() {
                            let q = sigma[l];
                            let lhs = system_component_rate(model, action, *p, v);
                            let rhs = system_component_rate(model, action, q, &vs);
                            if !run.check("a", ci, j, k, Some(*p), action, v, lhs, rhs) {
                                break 'samples;
                            }
                            let lhs = inflow(model, action, *p, v);
                            let rhs = inflow(model, action, q, &vs);
                            if !run.check("b", ci, j, k, Some(*p), action, v, lhs, rhs) {
                                break 'samples;
                            }
                        }
                    }
                    for (ai, atom) in model.atoms.iter().enumerate() {
                        if involved_atoms.contains(&ai) || class.tuples[j].contains(&ai) {
                            continue;
                        }
                        for p in &atom.states {
                            let lhs = system_component_rate(model, action, *p, v);
                            let rhs = system_component_rate(model, action, *p, &vs);
                            if !run.check("c", ci, j, 0, Some(*p), action, v, lhs, rhs) {
                                break 'samples;
                            }
                        }
                    }
                    let lhs = system_apparent_rate(model, action, v);
                    let rhs = system_apparent_rate(model, action, &vs);
                    if !run.check("d", ci, j, 0, None, action, v, lhs, rhs) {
                        break 'samples;
                    }
                }
            }
        }
    }
    Ok(run.finish("exact", drawn, opts, vmax, warnings))
}

/// Verify an atom partition as an ordinary fluid lumping: folding every
/// block onto its representative must preserve (i) the blockwise sum of
/// each related state's component rate, (ii) of its inflow, and (iii) the
/// system apparent rate, for every action.
pub fn verify_ofl(
    model: &CompiledModel,
    partition: &Partition,
    opts: &VerifyOptions,
) -> Result<VerifyReport, PartitionError> {
    let blocks = resolve_partition(model, partition, opts.tol)?;
    let warnings = ill_posed_warning(model);
    let mut run = Run::new(model, opts.tol);

    'structural: for (bi, block) in blocks.iter().enumerate() {
        for (j, member) in block.atoms.iter().enumerate().skip(1) {
            if !structural_pair(
                &mut run,
                "iii structural",
                bi,
                j,
                0,
                block.atoms[0],
                *member,
            ) {
                break 'structural;
            }
        }
    }
    if run.witness.is_some() {
        return Ok(run.finish("ordinary", 0, opts, sample_box(model), warnings));
    }

    let (vmax, samples) = draw_samples(model, opts);
    let n_actions = model.actions.len();
    let mut drawn = 0;
    'samples: for v in &samples {
        drawn += 1;
        let vs = ofl_fold(model, &blocks, v);
        for action in 0..n_actions {
            for (bi, block) in blocks.iter().enumerate() {
                let rep_states = &model.atoms[block.atoms[0]].states;
                for (l, p) in rep_states.iter().enumerate() {
                    let lhs: f64 = block
                        .sigmas
                        .iter()
                        .map(|s| system_component_rate(model, action, s[l], v))
                        .sum();
                    let rhs = system_component_rate(model, action, *p, &vs);
                    if !run.check("i", bi, 0, 0, Some(*p), action, v, lhs, rhs) {
                        break 'samples;
                    }
                    let lhs: f64 = block
                        .sigmas
                        .iter()
                        .map(|s| {
                            rep_states
                                .iter()
                                .enumerate()
                                .map(|(l2, _)| {
                                    let jp = model.jump_probability(s[l2], action, s[l]);
                                    if jp > 0.0 {
                                        jp * system_component_rate(model, action, s[l2], v)
                                    } else {
                                        0.0
                                    }
                                })
                                .sum::<f64>()
                        })
                        .sum();
                    let rhs: f64 = rep_states
                        .iter()
                        .map(|p2| {
                            let jp = model.jump_probability(*p2, action, *p);
                            if jp > 0.0 {
                                jp * system_component_rate(model, action, *p2, &vs)
                            } else {
                                0.0
                            }
                        })
                        .sum();
                    if !run.check("ii", bi, 0, 0, Some(*p), action, v, lhs, rhs) {
                        break 'samples;
                    }
                }
            }
            let lhs = system_apparent_rate(model, action, v);
            let rhs = system_apparent_rate(model, action, &vs);
            if !run.check("iii", 0, 0, 0, None, action, v, lhs, rhs) {
                break 'samples;
            }
        }
    }
    Ok(run.finish("ordinary", drawn, opts, vmax, warnings))
}

/// Re-evaluate a witness against the model and partition it came from.
/// Returns `(lhs, rhs, residual)` computed afresh.
pub fn recheck_efl(
    model: &CompiledModel,
    partition: &TuplePartition,
    w: &Witness,
) -> Result<(f64, f64, f64), PartitionError> {
    let resolved = resolve_tuple_partition_tol(model, partition, 1e-9)?;
    let class = &resolved.classes[w.group];
    let action = model
        .action_index(&w.action)
        .ok_or_else(|| PartitionError::UnknownState(w.action.clone()))?;
    let (lhs, rhs) = match w.condition.as_str() {
        "d structural" => {
            let rep_root = model.atoms[class.tuples[0][w.position]].states[0];
            let mem_root = model.atoms[class.tuples[w.member][w.position]].states[0];
            (
                model.atom_apparent_rate(rep_root, action),
                model.atom_apparent_rate(mem_root, action),
            )
        }
        "a" | "b" | "c" | "d" => {
            let vs = efl_swap(model, class, w.member, &w.populations);
            match w.condition.as_str() {
                "d" => (
                    system_apparent_rate(model, action, &w.populations),
                    system_apparent_rate(model, action, &vs),
                ),
                "c" => {
                    let p = model
                        .state_index(&w.state)
                        .ok_or_else(|| PartitionError::UnknownState(w.state.clone()))?;
                    (
                        system_component_rate(model, action, p, &w.populations),
                        system_component_rate(model, action, p, &vs),
                    )
                }
                cond => {
                    let p = model
                        .state_index(&w.state)
                        .ok_or_else(|| PartitionError::UnknownState(w.state.clone()))?;
                    let rep_atom = class.tuples[0][w.position];
                    let l = model.atoms[rep_atom]
                        .states
                        .iter()
                        .position(|s| *s == p)
                        .expect("witness state belongs to the representative atom");
                    let q = class.sigmas[w.member][w.position][l];
                    if cond == "a" {
                        (
                            system_component_rate(model, action, p, &w.populations),
                            system_component_rate(model, action, q, &vs),
                        )
                    } else {
                        (
                            inflow(model, action, p, &w.populations),
                            inflow(model, action, q, &vs),
                        )
                    }
                }
            }
        }
        other => {
            return Err(PartitionError::NotAPartition(format!(
                "witness condition `{other}` is not an exact-lumping condition"
            )))
        }
    };
    Ok((lhs, rhs, residual(lhs, rhs)))
}

/// Re-evaluate an ordinary-lumping witness. Returns `(lhs, rhs, residual)`.
pub fn recheck_ofl(
    model: &CompiledModel,
    partition: &Partition,
    w: &Witness,
) -> Result<(f64, f64, f64), PartitionError> {
    let blocks = resolve_partition(model, partition, 1e-9)?;
    let action = model
        .action_index(&w.action)
        .ok_or_else(|| PartitionError::UnknownState(w.action.clone()))?;
    let (lhs, rhs) = match w.condition.as_str() {
        "iii structural" => {
            let block = &blocks[w.group];
            let rep_root = model.atoms[block.atoms[0]].states[0];
            let mem_root = model.atoms[block.atoms[w.member]].states[0];
            (
                model.atom_apparent_rate(rep_root, action),
                model.atom_apparent_rate(mem_root, action),
            )
        }
        "iii" => {
            let vs = ofl_fold(model, &blocks, &w.populations);
            (
                system_apparent_rate(model, action, &w.populations),
                system_apparent_rate(model, action, &vs),
            )
        }
        "i" | "ii" => {
            let vs = ofl_fold(model, &blocks, &w.populations);
            let block = &blocks[w.group];
            let p = model
                .state_index(&w.state)
                .ok_or_else(|| PartitionError::UnknownState(w.state.clone()))?;
            let rep_states = &model.atoms[block.atoms[0]].states;
            let l = rep_states
                .iter()
                .position(|s| *s == p)
                .expect("witness state belongs to the block representative");
            if w.condition == "i" {
                (
                    block
                        .sigmas
                        .iter()
                        .map(|s| system_component_rate(model, action, s[l], &w.populations))
                        .sum(),
                    system_component_rate(model, action, p, &vs),
                )
            } else {
                let lhs: f64 = block
                    .sigmas
                    .iter()
                    .map(|s| {
                        (0..rep_states.len())
                            .map(|l2| {
                                let jp = model.jump_probability(s[l2], action, s[l]);
                                if jp > 0.0 {
                                    jp * system_component_rate(model, action, s[l2], &w.populations)
                                } else {
                                    0.0
                                }
                            })
                            .sum::<f64>()
                    })
                    .sum();
                let rhs = rep_states
                    .iter()
                    .map(|p2| {
                        let jp = model.jump_probability(*p2, action, p);
                        if jp > 0.0 {
                            jp * system_component_rate(model, action, *p2, &vs)
                        } else {
                            0.0
                        }
                    })
                    .sum();
                (lhs, rhs)
            }
        }
        other => {
            return Err(PartitionError::NotAPartition(format!(
                "witness condition `{other}` is not an ordinary-lumping condition"
            )))
        }
    };
    Ok((lhs, rhs, residual(lhs, rhs)))
}
