//! Automatic partition discovery and partition merging.
//!
//! Discovery proposes the coarsest candidates the structural theory
//! suggests: for atom partitions, group atoms whose derivation graphs are
//! semi-isomorphic; for tuple partitions, flatten chains of identically
//! synchronised compositions and group operand subtrees of equal shape,
//! synchronisation sets, and leafwise semi-isomorphic atoms. Verification
//! stays a separate step; discovery only proposes.
//!
//! Merging unions overlapping blocks across several partitions, composing
//! the state maps along the way, so a verified pair of lumpings yields
//! their coarsest common refinement-free union.

use std::collections::BTreeMap;

use super::partition::{
    resolve_partition, Block, Partition, PartitionError, SigmaSpec, TupleClass, TuplePartition,
};
use super::semi::semi_isomorphic;
use crate::model::{CompiledModel, Node};

/// Group the model's atoms into blocks of pairwise semi-isomorphic
/// derivation graphs. Returns the one candidate this induces; with all
/// atoms structurally distinct that is the discrete partition.
pub fn discover_ofl(model: &CompiledModel, tol: f64) -> Vec<Partition> {
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut order: Vec<usize> = (0..model.atoms.len()).collect();
    order.sort_by(|a, b| model.atoms[*a].name.cmp(&model.atoms[*b].name));
    for atom in order {
        match classes
            .iter_mut()
            .find(|c| semi_isomorphic(model, c[0], model, atom, tol).is_some())
        {
            Some(class) => class.push(atom),
            None => classes.push(vec![atom]),
        }
    }
    let blocks = classes
        .into_iter()
        .map(|atoms| Block {
            atoms: atoms.iter().map(|a| model.atoms[*a].name.clone()).collect(),
            sigmas: None,
        })
        .collect();
    vec![Partition { blocks }]
}

/// Operands of the maximal chain of compositions sharing this node's
/// synchronisation set (composition is left-associated, so a chain is a
/// left-leaning spine of equal sync sets).
fn chain_operands<'n>(node: &'n Node, out: &mut Vec<&'n Node>) {
    if let Node::Par { left, right, sync } = node {
        for part in [left.as_ref(), right.as_ref()] {
            match part {
                Node::Par { sync: s2, .. } if s2 == sync => chain_operands(part, out),
                other => out.push(other),
            }
        }
    } else {
        out.push(node);
    }
}

/// Same tree shape, same synchronisation sets, and positionwise
/// semi-isomorphic leaf atoms.
fn equivalent_operands(model: &CompiledModel, a: &Node, b: &Node, tol: f64) -> bool {
    match (a, b) {
        (Node::Leaf(x), Node::Leaf(y)) => semi_isomorphic(model, *x, model, *y, tol).is_some(),
        (
            Node::Par {
                left: l1,
                right: r1,
                sync: s1,
            },
            Node::Par {
                left: l2,
                right: r2,
                sync: s2,
            },
        ) => {
            s1 == s2
                && equivalent_operands(model, l1, l2, tol)
                && equivalent_operands(model, r1, r2, tol)
        }
        _ => false,
    }
}

fn discover_tuples(
    model: &CompiledModel,
    node: &Node,
    tol: f64,
    classes: &mut Vec<Vec<Vec<usize>>>,
) {
    match node {
        Node::Leaf(a) => classes.push(vec![vec![*a]]),
        Node::Par { .. } => {
            let mut operands = Vec::new();
            chain_operands(node, &mut operands);
            let mut groups: Vec<Vec<&Node>> = Vec::new();
            for op in operands {
                match groups
                    .iter_mut()
                    .find(|g| equivalent_operands(model, g[0], op, tol))
                {
                    Some(g) => g.push(op),
                    None => groups.push(vec![op]),
                }
            }
            for group in groups {
                if group.len() >= 2 {
                    classes.push(group.iter().map(|op| op.atoms()).collect());
                } else {
                    discover_tuples(model, group[0], tol, classes);
                }
            }
        }
    }
}

/// Propose a tuple partition from the composition structure: replicated
/// operands of a chain become one class each, everything else stays
/// singleton. Returns the one candidate this induces.
pub fn discover_efl(model: &CompiledModel, tol: f64) -> Vec<TuplePartition> {
    let mut raw: Vec<Vec<Vec<usize>>> = Vec::new();
    discover_tuples(model, &model.tree, tol, &mut raw);
    let name = |a: &usize| model.atoms[*a].name.clone();
    let mut classes: Vec<TupleClass> = raw
        .into_iter()
        .map(|tuples| {
            let mut named: Vec<Vec<String>> = tuples
                .iter()
                .map(|t| t.iter().map(name).collect())
                .collect();
            named.sort();
            TupleClass {
                tuples: named,
                sigmas: None,
            }
        })
        .collect();
    classes.sort_by(|a, b| a.tuples[0].cmp(&b.tuples[0]));
    vec![TuplePartition { classes }]
}

/// Union of several partitions of the same model: blocks sharing an atom
/// are merged, and the state maps are composed through the overlaps so the
/// result relates states the same way each input did. The characterisation
/// behind this only covers well-posed models, so ill-posed ones are refused.
pub fn merge_partitions(
    model: &CompiledModel,
    parts: &[Partition],
    tol: f64,
) -> Result<Partition, PartitionError> {
    if model.ill_posed {
        return Err(PartitionError::NotAPartition(
            "model is ill-posed: merged blocks are not guaranteed to stay lumpable".into(),
        ));
    }
    if parts.is_empty() {
        return Err(PartitionError::NotAPartition("nothing to merge".into()));
    }

    // Forest over atoms. Every tree root holds, per member atom, the map
    // root-local-state-index -> member-local-state-index.
    let n_atoms = model.atoms.len();
    let mut root: Vec<usize> = (0..n_atoms).collect();
    let mut maps: Vec<BTreeMap<usize, Vec<usize>>> = (0..n_atoms)
        .map(|a| {
            let id: Vec<usize> = (0..model.atoms[a].states.len()).collect();
            BTreeMap::from([(a, id)])
        })
        .collect();

    fn find(root: &[usize], mut a: usize) -> usize {
        while root[a] != a {
            a = root[a];
        }
        a
    }
    fn compose(outer: &[usize], inner: &[usize]) -> Vec<usize> {
        inner.iter().map(|i| outer[*i]).collect()
    }
    fn invert(s: &[usize]) -> Vec<usize> {
        let mut inv = vec![0usize; s.len()];
        for (i, j) in s.iter().enumerate() {
            inv[*j] = i;
        }
        inv
    }

    for part in parts {
        let blocks = resolve_partition(model, part, tol)?;
        for block in &blocks {
            let rep = block.atoms[0];
            for (j, member) in block.atoms.iter().enumerate().skip(1) {
                // Block map in local-to-local form.
                let member_states = &model.atoms[*member].states;
                let s_rm: Vec<usize> = block.sigmas[j]
                    .iter()
                    .map(|g| member_states.iter().position(|s| s == g).unwrap())
                    .collect();
                let (ra, rb) = (find(&root, rep), find(&root, *member));
                if ra == rb {
                    continue;
                }
                // Bridge: root(rep) -> rep -> member -> root(member).
                let to_rep = maps[ra][&rep].clone();
                let to_member_inv = invert(&maps[rb][member]);
                let bridge = compose(&to_member_inv, &compose(&s_rm, &to_rep));
                let moved: Vec<(usize, Vec<usize>)> = maps[rb]
                    .iter()
                    .map(|(m, s)| (*m, compose(s, &bridge)))
                    .collect();
                maps[ra].extend(moved);
                root[rb] = ra;
            }
        }
    }

    // Collect components; re-anchor each on its lexicographically least
    // member so the output is independent of merge order.
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for a in 0..n_atoms {
        components.entry(find(&root, a)).or_default().push(a);
    }
    let mut blocks: Vec<Block> = Vec::new();
    for (r, mut members) in components {
        members.sort_by(|a, b| model.atoms[*a].name.cmp(&model.atoms[*b].name));
        let anchor = members[0];
        let to_anchor_inv = invert(&maps[r][&anchor]);
        let anchor_states = &model.atoms[anchor].states;
        let mut sigmas: Vec<SigmaSpec> = Vec::new();
        for m in members.iter().skip(1) {
            let s = compose(&maps[r][m], &to_anchor_inv);
            sigmas.push(
                anchor_states
                    .iter()
                    .enumerate()
                    .map(|(l, p)| {
                        let q = model.atoms[*m].states[s[l]];
                        (model.states[*p].name.clone(), model.states[q].name.clone())
                    })
                    .collect(),
            );
        }
        blocks.push(Block {
            atoms: members
                .iter()
                .map(|a| model.atoms[*a].name.clone())
                .collect(),
            sigmas: if sigmas.is_empty() {
                None
            } else {
                Some(sigmas)
            },
        });
    }
    blocks.sort_by(|a, b| a.atoms[0].cmp(&b.atoms[0]));
    Ok(Partition { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lumping::verify::{verify_efl, verify_ofl, VerifyOptions};
    use crate::model::compile;
    use crate::syntax::parse_model;

    fn replicas(d: usize) -> CompiledModel {
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
        text.push_str(&format!("system = ({chain}) <alpha> Q;\n"));
        for i in 1..=d {
            text.push_str(&format!("init P{i} = 2.0;\n"));
        }
        text.push_str("init Q = 4.0;\n");
        compile(&parse_model(&text).unwrap(), None).unwrap()
    }

    #[test]
    fn groups_replicas_into_one_block() {
        let m = replicas(3);
        let found = discover_ofl(&m, 1e-9);
        assert_eq!(found.len(), 1);
        let p = &found[0];
        assert_eq!(p.blocks.len(), 2);
        assert_eq!(p.blocks[0].atoms, vec!["P1", "P2", "P3"]);
        assert_eq!(p.blocks[1].atoms, vec!["Q"]);
        assert!(verify_ofl(&m, p, &VerifyOptions::default())
            .unwrap()
            .passed());
    }

    #[test]
    fn distinct_atoms_give_discrete_partition() {
        let text = "\
P = (alpha, 1.0).P';\nP' = (beta, 0.5).P;\n\
Q = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\n\
system = P <alpha> Q;\n";
        let m = compile(&parse_model(text).unwrap(), None).unwrap();
        let p = &discover_ofl(&m, 1e-9)[0];
        assert_eq!(p.blocks.len(), 2);
        assert!(p.blocks.iter().all(|b| b.atoms.len() == 1));
    }

    #[test]
    fn proposes_singleton_tuples_for_replicated_leaves() {
        let m = replicas(3);
        let tp = &discover_efl(&m, 1e-9)[0];
        assert_eq!(tp.classes.len(), 2);
        assert_eq!(
            tp.classes[0].tuples,
            vec![
                vec!["P1".to_string()],
                vec!["P2".to_string()],
                vec!["P3".to_string()]
            ]
        );
        assert_eq!(tp.classes[1].tuples, vec![vec!["Q".to_string()]]);
        assert!(verify_efl(&m, tp, &VerifyOptions::default())
            .unwrap()
            .passed());
    }

    #[test]
    fn proposes_pair_tuples_for_replicated_subtrees() {
        let mut text = String::new();
        for i in 1..=2 {
            text.push_str(&format!(
                "P{i} = (alpha, 1.0).P{i}';\nP{i}' = (beta, 0.5).P{i};\n"
            ));
            text.push_str(&format!(
                "R{i} = (alpha, 2.0).R{i}';\nR{i}' = (delta, 0.1).R{i};\n"
            ));
        }
        text.push_str("Q = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\n");
        text.push_str("system = ((P1 <alpha> R1) <> (P2 <alpha> R2)) <alpha> Q;\n");
        let m = compile(&parse_model(&text).unwrap(), None).unwrap();
        let tp = &discover_efl(&m, 1e-9)[0];
        assert_eq!(tp.classes.len(), 2);
        assert_eq!(
            tp.classes[0].tuples,
            vec![
                vec!["P1".to_string(), "R1".to_string()],
                vec!["P2".to_string(), "R2".to_string()]
            ]
        );
        assert_eq!(tp.classes[1].tuples, vec![vec!["Q".to_string()]]);
    }

    #[test]
    fn merge_is_the_transitive_closure() {
        let m = replicas(3);
        let p1 = Partition {
            blocks: vec![
                Block {
                    atoms: vec!["P1".into(), "P2".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["P3".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["Q".into()],
                    sigmas: None,
                },
            ],
        };
        let p2 = Partition {
            blocks: vec![
                Block {
                    atoms: vec!["P1".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["P2".into(), "P3".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["Q".into()],
                    sigmas: None,
                },
            ],
        };
        let merged = merge_partitions(&m, &[p1, p2], 1e-9).unwrap();
        assert_eq!(merged.blocks.len(), 2);
        assert_eq!(merged.blocks[0].atoms, vec!["P1", "P2", "P3"]);
        assert_eq!(merged.blocks[1].atoms, vec!["Q"]);
        // The merged partition still verifies, with its composed maps.
        assert!(verify_ofl(&m, &merged, &VerifyOptions::default())
            .unwrap()
            .passed());
    }

    #[test]
    fn merge_composes_explicit_crossed_maps() {
        // P1~P2 related by a crossed map in one partition, P2~P3 crossed in
        // the other; composition must map P1 to P3 straight.
        let m = replicas(3);
        let crossed = |a: usize, b: usize| {
            Some(vec![vec![
                (format!("P{a}"), format!("P{b}'")),
                (format!("P{a}'"), format!("P{b}")),
            ]])
        };
        let p1 = Partition {
            blocks: vec![
                Block {
                    atoms: vec!["P1".into(), "P2".into()],
                    sigmas: crossed(1, 2),
                },
                Block {
                    atoms: vec!["P3".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["Q".into()],
                    sigmas: None,
                },
            ],
        };
        let p2 = Partition {
            blocks: vec![
                Block {
                    atoms: vec!["P1".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["P2".into(), "P3".into()],
                    sigmas: crossed(2, 3),
                },
                Block {
                    atoms: vec!["Q".into()],
                    sigmas: None,
                },
            ],
        };
        let merged = merge_partitions(&m, &[p1, p2], 1e-9).unwrap();
        let block = &merged.blocks[0];
        assert_eq!(block.atoms, vec!["P1", "P2", "P3"]);
        let sigmas = block.sigmas.as_ref().unwrap();
        // P1 -> P2 stays crossed, P1 -> P3 is the straight composition.
        assert!(sigmas[0].contains(&("P1".to_string(), "P2'".to_string())));
        assert!(sigmas[1].contains(&("P1".to_string(), "P3".to_string())));
    }

    #[test]
    fn merge_refuses_ill_posed_models() {
        let text = "\
P1 = (alpha, 1.0).P1;\nP2 = (alpha, 1.0).P2;\nR = (delta, 1.0).R;\n\
system = (P1 <> P2) <alpha> R;\n";
        let m = compile(&parse_model(text).unwrap(), None).unwrap();
        assert!(m.ill_posed);
        let p = Partition {
            blocks: vec![
                Block {
                    atoms: vec!["P1".into(), "P2".into()],
                    sigmas: None,
                },
                Block {
                    atoms: vec!["R".into()],
                    sigmas: None,
                },
            ],
        };
        assert!(merge_partitions(&m, &[p], 1e-9).is_err());
    }
}
