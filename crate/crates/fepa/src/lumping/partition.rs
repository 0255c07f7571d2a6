//! Partition descriptions and their resolution against a compiled model.
//!
//! Users describe partitions by atom name, optionally pinning the state
//! bijections. Resolution checks the partition laws (disjoint cover),
//! validates or derives every bijection, and rewrites everything into
//! index form for the verifiers and the lumped-system builder.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use super::semi::{eps_semi_isomorphism, semi_isomorphic};
use crate::model::CompiledModel;

/// A named state-to-state map, `(state of the representative, state of the
/// member)` pairs. Only needed when derivation should not pick the map.
pub type SigmaSpec = Vec<(String, String)>;

/// One block of an atom partition. The first atom is the representative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub atoms: Vec<String>,
    /// One map per non-representative atom, aligned with `atoms[1..]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<SigmaSpec>>,
}

/// Partition of the model's atoms, used for ordinary lumping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub blocks: Vec<Block>,
}

/// One class of atom tuples. Tuples must have equal length; the first is
/// the representative. Position k of every tuple plays the same role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TupleClass {
    pub tuples: Vec<Vec<String>>,
    /// `sigmas[j][k]`: map from tuple 0 position k to tuple j+1 position k.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<Vec<SigmaSpec>>>,
}

/// Partition of the atoms into tuples of equal shape, used for exact
/// lumping. Every atom appears in exactly one tuple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuplePartition {
    pub classes: Vec<TupleClass>,
}

impl Partition {
    pub fn from_json(text: &str) -> Result<Self, PartitionError> {
        serde_json::from_str(text).map_err(|e| PartitionError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }
}

impl TuplePartition {
    pub fn from_json(text: &str) -> Result<Self, PartitionError> {
        serde_json::from_str(text).map_err(|e| PartitionError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }

    /// Forget the grouping into tuples: position k of each class becomes an
    /// atom block, maps carried over. An exact-lumping partition projects to
    /// an ordinary one this way.
    pub fn project(&self, model: &CompiledModel) -> Result<Partition, PartitionError> {
        let resolved = resolve_tuple_partition(model, self)?;
        let mut blocks = Vec::new();
        for class in &resolved.classes {
            let width = class.tuples[0].len();
            for k in 0..width {
                let atoms: Vec<String> = class
                    .tuples
                    .iter()
                    .map(|t| model.atoms[t[k]].name.clone())
                    .collect();
                let sigmas: Vec<SigmaSpec> = class
                    .tuples
                    .iter()
                    .zip(&class.sigmas)
                    .skip(1)
                    .map(|(_t, s)| sigma_names(model, class.tuples[0][k], &s[k]))
                    .collect();
                blocks.push(Block {
                    atoms,
                    sigmas: Some(sigmas),
                });
            }
        }
        Ok(Partition { blocks })
    }
}

fn sigma_names(model: &CompiledModel, rep_atom: usize, sigma: &[usize]) -> SigmaSpec {
    let rep_states = &model.atoms[rep_atom].states;
    rep_states
        .iter()
        .zip(sigma)
        .map(|(rs, ms)| {
            (
                model.states[*rs].name.clone(),
                model.states[*ms].name.clone(),
            )
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum PartitionError {
    #[error("partition JSON: {0}")]
    Json(String),
    #[error("unknown atom `{0}`")]
    UnknownAtom(String),
    #[error("unknown state `{0}` in a state map")]
    UnknownState(String),
    #[error("{0}")]
    NotAPartition(String),
    #[error("tuples in one class must have the same length (class with `{0}`)")]
    RaggedClass(String),
    #[error("no rate-preserving state bijection between `{a}` and `{b}`; supply one explicitly")]
    NoBijection { a: String, b: String },
    #[error("bad state map for `{atom}`: {why}")]
    BadSigma { atom: String, why: String },
}

/// Index-form block: atom ids plus, per member atom (representative first,
/// with the identity map), the map sending local state index `i` of the
/// representative to the *global* state id of the member's image.
#[derive(Debug, Clone)]
pub struct ResolvedBlock {
    pub atoms: Vec<usize>,
    pub sigmas: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ResolvedClass {
    pub tuples: Vec<Vec<usize>>,
    /// `sigmas[j][k]` maps representative-tuple position k local indices to
    /// global state ids in tuple j's position-k atom; `sigmas[0]` identity.
    pub sigmas: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct ResolvedTuplePartition {
    pub classes: Vec<ResolvedClass>,
}

fn atom_id(model: &CompiledModel, name: &str) -> Result<usize, PartitionError> {
    model
        .atom_index(name)
        .ok_or_else(|| PartitionError::UnknownAtom(name.to_string()))
}

/// Turn an explicit name-level map into local-rep-index -> global-state form.
fn resolve_sigma(
    model: &CompiledModel,
    rep: usize,
    member: usize,
    spec: &SigmaSpec,
) -> Result<Vec<usize>, PartitionError> {
    let rep_states = &model.atoms[rep].states;
    let member_name = model.atoms[member].name.clone();
    let n = rep_states.len();
    if model.atoms[member].states.len() != n {
        return Err(PartitionError::BadSigma {
            atom: member_name,
            why: "derivative sets differ in size".into(),
        });
    }
    if spec.len() != n {
        return Err(PartitionError::BadSigma {
            atom: member_name,
            why: format!("map has {} pairs, expected {}", spec.len(), n),
        });
    }
    let mut out = vec![usize::MAX; n];
    let mut hit = vec![false; n];
    for (from, to) in spec {
        let f = model
            .state_index(from)
            .ok_or_else(|| PartitionError::UnknownState(from.clone()))?;
        let t = model
            .state_index(to)
            .ok_or_else(|| PartitionError::UnknownState(to.clone()))?;
        let fi =
            rep_states
                .iter()
                .position(|s| *s == f)
                .ok_or_else(|| PartitionError::BadSigma {
                    atom: member_name.clone(),
                    why: format!("`{from}` is not a state of the representative"),
                })?;
        if !model.atoms[member].states.contains(&t) {
            return Err(PartitionError::BadSigma {
                atom: member_name.clone(),
                why: format!("`{to}` is not a state of `{member_name}`"),
            });
        }
        let ti = model.atoms[member]
            .states
            .iter()
            .position(|s| *s == t)
            .unwrap();
        if out[fi] != usize::MAX {
            return Err(PartitionError::BadSigma {
                atom: member_name.clone(),
                why: format!("`{from}` mapped twice"),
            });
        }
        if hit[ti] {
            return Err(PartitionError::BadSigma {
                atom: member_name.clone(),
                why: format!("`{to}` hit twice"),
            });
        }
        out[fi] = t;
        hit[ti] = true;
    }
    Ok(out)
}

/// Derive a map when none is given: a rate-preserving bijection if one
/// exists, otherwise the bijection with the smallest worst rate mismatch
/// (the relaxed-lumping case, where members need not match exactly).
fn derive_sigma(
    model: &CompiledModel,
    rep: usize,
    member: usize,
    tol: f64,
) -> Result<Vec<usize>, PartitionError> {
    let local = match semi_isomorphic(model, rep, model, member, tol) {
        Some(s) => s,
        None => match eps_semi_isomorphism(model, rep, model, member) {
            Some((s, _)) => s,
            None => {
                return Err(PartitionError::NoBijection {
                    a: model.atoms[rep].name.clone(),
                    b: model.atoms[member].name.clone(),
                })
            }
        },
    };
    Ok(local
        .iter()
        .map(|l| model.atoms[member].states[*l])
        .collect())
}

fn check_cover(model: &CompiledModel, seen: &BTreeMap<usize, usize>) -> Result<(), PartitionError> {
    for (id, count) in seen {
        if *count > 1 {
            return Err(PartitionError::NotAPartition(format!(
                "atom `{}` appears {} times",
                model.atoms[*id].name, count
            )));
        }
    }
    let missing: Vec<&str> = (0..model.atoms.len())
        .filter(|a| !seen.contains_key(a))
        .map(|a| model.atoms[a].name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(PartitionError::NotAPartition(format!(
            "atoms not covered: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

pub fn resolve_partition(
    model: &CompiledModel,
    partition: &Partition,
    tol: f64,
) -> Result<Vec<ResolvedBlock>, PartitionError> {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut blocks = Vec::new();
    for block in &partition.blocks {
        if block.atoms.is_empty() {
            return Err(PartitionError::NotAPartition("empty block".into()));
        }
        let atoms: Vec<usize> = block
            .atoms
            .iter()
            .map(|n| atom_id(model, n))
            .collect::<Result<_, _>>()?;
        for a in &atoms {
            *seen.entry(*a).or_insert(0) += 1;
        }
        if let Some(specs) = &block.sigmas {
            if specs.len() != atoms.len() - 1 {
                return Err(PartitionError::BadSigma {
                    atom: block.atoms[0].clone(),
                    why: format!(
                        "{} maps for {} non-representative atoms",
                        specs.len(),
                        atoms.len() - 1
                    ),
                });
            }
        }
        let rep = atoms[0];
        let mut sigmas = vec![model.atoms[rep].states.clone()];
        for (j, member) in atoms.iter().enumerate().skip(1) {
            let sigma = match &block.sigmas {
                Some(specs) => resolve_sigma(model, rep, *member, &specs[j - 1])?,
                None => derive_sigma(model, rep, *member, tol)?,
            };
            sigmas.push(sigma);
        }
        blocks.push(ResolvedBlock { atoms, sigmas });
    }
    check_cover(model, &seen)?;
    Ok(blocks)
}

pub fn resolve_tuple_partition(
    model: &CompiledModel,
    partition: &TuplePartition,
) -> Result<ResolvedTuplePartition, PartitionError> {
    resolve_tuple_partition_tol(model, partition, 1e-9)
}

pub fn resolve_tuple_partition_tol(
    model: &CompiledModel,
    partition: &TuplePartition,
    tol: f64,
) -> Result<ResolvedTuplePartition, PartitionError> {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut classes = Vec::new();
    for class in &partition.classes {
        if class.tuples.is_empty() || class.tuples[0].is_empty() {
            return Err(PartitionError::NotAPartition("empty tuple class".into()));
        }
        let width = class.tuples[0].len();
        let mut tuples = Vec::new();
        for tuple in &class.tuples {
            if tuple.len() != width {
                return Err(PartitionError::RaggedClass(class.tuples[0][0].clone()));
            }
            let ids: Vec<usize> = tuple
                .iter()
                .map(|n| atom_id(model, n))
                .collect::<Result<_, _>>()?;
            for a in &ids {
                *seen.entry(*a).or_insert(0) += 1;
            }
            tuples.push(ids);
        }
        if let Some(specs) = &class.sigmas {
            if specs.len() != tuples.len() - 1 || specs.iter().any(|s| s.len() != width) {
                return Err(PartitionError::BadSigma {
                    atom: class.tuples[0][0].clone(),
                    why: "state map table shape does not match the tuples".into(),
                });
            }
        }
        let rep = &tuples[0];
        let mut sigmas = vec![rep
            .iter()
            .map(|a| model.atoms[*a].states.clone())
            .collect::<Vec<_>>()];
        for (j, tuple) in tuples.iter().enumerate().skip(1) {
            let mut row = Vec::new();
            for k in 0..width {
                let sigma = match &class.sigmas {
                    Some(specs) => resolve_sigma(model, rep[k], tuple[k], &specs[j - 1][k])?,
                    None => derive_sigma(model, rep[k], tuple[k], tol)?,
                };
                row.push(sigma);
            }
            sigmas.push(row);
        }
        classes.push(ResolvedClass { tuples, sigmas });
    }
    check_cover(model, &seen)?;
    Ok(ResolvedTuplePartition { classes })
}

/// The discrete partition: every atom alone in its block.
pub fn discrete_partition(model: &CompiledModel) -> Partition {
    Partition {
        blocks: model
            .atoms
            .iter()
            .map(|a| Block {
                atoms: vec![a.name.clone()],
                sigmas: None,
            })
            .collect(),
    }
}

/// Atom names of a resolved block, representative first.
pub fn block_atom_names(model: &CompiledModel, block: &ResolvedBlock) -> Vec<String> {
    block
        .atoms
        .iter()
        .map(|a| model.atoms[*a].name.clone())
        .collect()
}

/// All global state ids covered by the blocks' representatives.
pub fn representative_states(blocks: &[ResolvedBlock]) -> BTreeSet<usize> {
    blocks
        .iter()
        .flat_map(|b| b.sigmas[0].iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::compile;
    use crate::syntax::parse_model;

    fn two_replicas() -> CompiledModel {
        let text = "\
P1 = (alpha, 1.0).P1';\nP1' = (beta, 0.5).P1;\n\
P2 = (alpha, 1.0).P2';\nP2' = (beta, 0.5).P2;\n\
Q = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\n\
system = (P1 <> P2) <alpha> Q;\n";
        compile(&parse_model(text).unwrap(), None).unwrap()
    }

    #[test]
    fn resolves_with_derived_maps() {
        let m = two_replicas();
        let p = Partition {
            blocks: vec![
                Block {
                    atoms: vec!["P1".into(), "P2".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["Q".into()],
                    sigmas: None,
                },
            ],
        };
        let blocks = resolve_partition(&m, &p, 1e-9).unwrap();
        assert_eq!(blocks.len(), 2);
        let b = &blocks[0];
        // P1 -> P2, P1' -> P2'.
        let p2 = m.state_index("P2").unwrap();
        let p2p = m.state_index("P2'").unwrap();
        assert_eq!(b.sigmas[1], vec![p2, p2p]);
    }

    #[test]
    fn explicit_map_overrides_derivation() {
        let m = two_replicas();
        let p = Partition {
            blocks: vec![
                Block {
                    atoms: vec!["P1".into(), "P2".into()],
                    sigmas: Some(vec![vec![
                        ("P1".into(), "P2'".into()),
                        ("P1'".into(), "P2".into()),
                    ]]),
                },
                Block {
                    atoms: vec!["Q".into()],
                    sigmas: None,
                },
            ],
        };
        let blocks = resolve_partition(&m, &p, 1e-9).unwrap();
        let p2 = m.state_index("P2").unwrap();
        let p2p = m.state_index("P2'").unwrap();
        assert_eq!(blocks[0].sigmas[1], vec![p2p, p2]);
    }

    #[test]
    fn missing_and_duplicate_atoms_are_rejected() {
        let m = two_replicas();
        let missing = Partition {
            blocks: vec![Block {
                atoms: vec!["P1".into(), "P2".into()],
                sigmas: None,
            }],
        };
        assert!(matches!(
            resolve_partition(&m, &missing, 1e-9),
            Err(PartitionError::NotAPartition(_))
        ));
        let dup = Partition {
            blocks: vec![
                Block {
                    atoms: vec!["P1".into(), "P2".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["Q".into(), "P1".into()],
                    sigmas: None,
                },
            ],
        };
        assert!(matches!(
            resolve_partition(&m, &dup, 1e-9),
            Err(PartitionError::NotAPartition(_))
        ));
    }

    #[test]
    fn partition_json_round_trip() {
        let p = Partition {
            blocks: vec![
                Block {
                    atoms: vec!["P1".into(), "P2".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["Q".into()],
                    sigmas: None,
                },
            ],
        };
        let back = Partition::from_json(&p.to_json()).unwrap();
        assert_eq!(back.blocks.len(), 2);
        assert_eq!(back.blocks[0].atoms, vec!["P1", "P2"]);
        assert!(back.blocks[0].sigmas.is_none());
    }

    #[test]
    fn tuple_partition_projects_positionwise() {
        let text = "\
P1 = (alpha, 1.0).P1';\nP1' = (beta, 0.5).P1;\n\
R1 = (alpha, 2.0).R1';\nR1' = (delta, 0.1).R1;\n\
P2 = (alpha, 1.0).P2';\nP2' = (beta, 0.5).P2;\n\
R2 = (alpha, 2.0).R2';\nR2' = (delta, 0.1).R2;\n\
system = (P1 <alpha> R1) <> (P2 <alpha> R2);\n";
        let m = compile(&parse_model(text).unwrap(), None).unwrap();
        let tp = TuplePartition {
            classes: vec![TupleClass {
                tuples: vec![
                    vec!["P1".into(), "R1".into()],
                    vec!["P2".into(), "R2".into()],
                ],
                sigmas: None,
            }],
        };
        let p = tp.project(&m).unwrap();
        assert_eq!(p.blocks.len(), 2);
        assert_eq!(p.blocks[0].atoms, vec!["P1", "P2"]);
        assert_eq!(p.blocks[1].atoms, vec!["R1", "R2"]);
        assert!(p.blocks[0].sigmas.is_some());
    }
}
