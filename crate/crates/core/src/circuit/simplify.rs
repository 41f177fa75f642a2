use std::collections::HashMap;

use rayon::prelude::*;

use super::eval_packed;
use super::tree::{ChildRef, CircuitTree, Mode, NodeKind};
use crate::error::{Error, Result};
use crate::nn::MlpParams;
use crate::states::GridSpec;

/// Result of [`simplify`].
#[derive(Debug, Clone)]
pub struct SimplifyOutcome {
    pub tree: CircuitTree,
    pub leaves_before: usize,
    pub leaves_after: usize,
    /// Set when the simplified tree failed the grid check and the input tree
    /// was returned instead.
    pub diagnostic: Option<String>,
}

type Bits = Vec<u64>;

fn subset(a: &Bits, b: &Bits) -> bool {
    a.iter().zip(b).all(|(x, y)| x & !y == 0)
}

/// Truth bitsets over `probes` for every node and atom of `tree`.
fn truth_tables(tree: &CircuitTree, probes: &[Vec<f64>]) -> (Vec<Bits>, Vec<Bits>) {
    let words = probes.len().div_ceil(64);
    let per_probe: Vec<(Vec<bool>, Vec<bool>)> = probes
        .par_iter()
        .map(|x| {
            let atoms = (0..tree.atom_count() as u32)
                .map(|a| eval_packed(&tree.atom(a).packed(), x) >= 0.0)
                .collect();
            (tree.node_truths(x), atoms)
        })
        .collect();
    let mut nodes = vec![vec![0u64; words]; tree.node_count()];
    let mut atoms = vec![vec![0u64; words]; tree.atom_count()];
    for (p, (nt, at)) in per_probe.iter().enumerate() {
        let (w, bit) = (p / 64, 1u64 << (p % 64));
        for (i, &v) in nt.iter().enumerate() {
            if v {
                nodes[i][w] |= bit;
            }
        }
        for (i, &v) in at.iter().enumerate() {
            if v {
                atoms[i][w] |= bit;
            }
        }
    }
    (nodes, atoms)
}

/// Drops children made redundant by siblings on the probe set, flattens
/// nested nodes of the same kind, and collapses single-child nodes.
///
/// An OR child is dropped when another child is true wherever it is; an AND
/// child is dropped when it is true wherever another child is. Of two
/// children with equal truth sets the first is kept. The result agrees with
/// the input on every probe.
pub fn absorb(tree: &CircuitTree, probes: &[Vec<f64>]) -> Result<CircuitTree> {
    if tree.mode() != Mode::Logical {
        return Err(Error::input("only logical trees can be simplified"));
    }
    if probes.iter().any(|p| p.len() != tree.input_dim()) {
        return Err(Error::input("probe dimension does not match the tree"));
    }
    let (node_bits, atom_bits) = truth_tables(tree, probes);
    let bits_of = |c: ChildRef| -> &Bits {
        match c {
            ChildRef::Node(n) => &node_bits[n as usize],
            ChildRef::Atom(a) => &atom_bits[a as usize],
        }
    };
    // Old node id -> replacement in the new arena (new ids are prefixed by
    // `N` via the `fresh` table below).
    let mut repl: HashMap<u32, ChildRef> = HashMap::new();
    // New nodes; `origin` records which old node's truth table each carries.
    let mut fresh: Vec<(NodeKind, u32, Vec<(ChildRef, u32)>)> = Vec::new();
    let mut fresh_bits_src: Vec<ChildRef> = Vec::new();
    // New-arena refs -> old-arena refs for bit lookups.
    let old_of = |c: ChildRef, fresh_src: &[ChildRef]| match c {
        ChildRef::Node(i) => fresh_src[i as usize],
        a => a,
    };
    for n in 0..tree.node_count() as u32 {
        let kind = tree.kind(n);
        if let NodeKind::Const(_) = kind {
            fresh.push((kind, 0, Vec::new()));
            fresh_bits_src.push(ChildRef::Node(n));
            repl.insert(n, ChildRef::Node(fresh.len() as u32 - 1));
            continue;
        }
        let mut kids: Vec<(ChildRef, u32)> = Vec::new();
        for (c, key) in tree.raw_children(n) {
            let new = match c {
                ChildRef::Node(j) => repl[&j],
                a => a,
            };
            match new {
                ChildRef::Node(f) if fresh[f as usize].0 == kind => {
                    kids.extend(fresh[f as usize].2.iter().copied());
                }
                _ => kids.push((new, key)),
            }
        }
        let bits: Vec<&Bits> = kids
            .iter()
            .map(|&(c, _)| bits_of(old_of(c, &fresh_bits_src)))
            .collect();
        let join = kind.is_join();
        let mut keep = vec![true; kids.len()];
        for i in 0..kids.len() {
            for j in 0..kids.len() {
                if i == j || !keep[j] {
                    continue;
                }
                let redundant = if join {
                    subset(bits[i], bits[j])
                } else {
                    subset(bits[j], bits[i])
                };
                let tie = bits[i] == bits[j];
                if redundant && (!tie || j < i) {
                    keep[i] = false;
                    break;
                }
            }
        }
        let kept: Vec<(ChildRef, u32)> = kids
            .into_iter()
            .zip(keep)
            .filter_map(|(k, f)| f.then_some(k))
            .collect();
        if kept.len() == 1 {
            repl.insert(n, kept[0].0);
        } else {
            fresh.push((kind, tree.layer(n), kept));
            fresh_bits_src.push(ChildRef::Node(n));
            repl.insert(n, ChildRef::Node(fresh.len() as u32 - 1));
        }
    }
    let root = match tree.root() {
        ChildRef::Node(r) => repl[&r],
        a => a,
    };
    Ok(CircuitTree::from_parts(tree, fresh, root))
}

/// [`absorb`] followed by a check against the network on `grid`: the
/// simplified tree may not disagree with the sign of the network anywhere
/// the input tree agrees. On failure the input tree is returned with a
/// diagnostic.
pub fn simplify(
    tree: &CircuitTree,
    probes: &[Vec<f64>],
    params: &MlpParams,
    grid: &GridSpec,
) -> Result<SimplifyOutcome> {
    let simplified = absorb(tree, probes)?;
    let n = grid
        .total_points()
        .ok_or_else(|| Error::Resource("grid too large".into()))?;
    let bad = (0..n)
        .into_par_iter()
        .filter(|&i| {
            let x = grid.point(i);
            let truth = params.output(&x) >= 0.0;
            simplified.eval_bool(&x) != truth && tree.eval_bool(&x) == truth
        })
        .min();
    let leaves_before = tree.leaf_count();
    Ok(match bad {
        None => SimplifyOutcome {
            leaves_after: simplified.leaf_count(),
            tree: simplified,
            leaves_before,
            diagnostic: None,
        },
        Some(i) => SimplifyOutcome {
            tree: tree.clone(),
            leaves_before,
            leaves_after: leaves_before,
            diagnostic: Some(format!(
                "simplified circuit disagrees with the network at {:?}; kept the original",
                grid.point(i)
            )),
        },
    })
}
