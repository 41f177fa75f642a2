use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trie::StateTrie;
use super::{atom_table, eval_packed, AffineAtom};
use crate::error::{Error, Result};
use crate::hexfloat;
use crate::linalg::Matrix;
use crate::nn::{LayerState, MlpParams, NetworkState};
use crate::states::StateRegistry;

/// Numeric trees reproduce the output value; logical trees its sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Numeric,
    Logical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Max,
    Min,
    Or,
    And,
    Const(bool),
}

impl NodeKind {
    /// Max and Or: the `mu` levels.
    pub fn is_join(self) -> bool {
        matches!(self, NodeKind::Max | NodeKind::Or)
    }

    pub fn is_meet(self) -> bool {
        matches!(self, NodeKind::Min | NodeKind::And)
    }

    fn name(self) -> &'static str {
        match self {
            NodeKind::Max => "max",
            NodeKind::Min => "min",
            NodeKind::Or => "or",
            NodeKind::And => "and",
            NodeKind::Const(true) => "true",
            NodeKind::Const(false) => "false",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "max" => NodeKind::Max,
            "min" => NodeKind::Min,
            "or" => NodeKind::Or,
            "and" => NodeKind::And,
            "true" => NodeKind::Const(true),
            "false" => NodeKind::Const(false),
            _ => return Err(Error::format(format!("unknown node kind {s:?}"))),
        })
    }

    fn for_mode(join: bool, mode: Mode) -> Self {
        match (join, mode) {
            (true, Mode::Numeric) => NodeKind::Max,
            (false, Mode::Numeric) => NodeKind::Min,
            (true, Mode::Logical) => NodeKind::Or,
            (false, Mode::Logical) => NodeKind::And,
        }
    }
}

/// A child slot: an internal node or an atom leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChildRef {
    Node(u32),
    Atom(u32),
}

const ATOM_BIT: u32 = 1 << 31;
const NO_KEY: u32 = u32::MAX;

impl ChildRef {
    fn encode(self) -> u32 {
        match self {
            ChildRef::Node(i) => i,
            ChildRef::Atom(i) => i | ATOM_BIT,
        }
    }

    fn decode(v: u32) -> Self {
        if v & ATOM_BIT != 0 {
            ChildRef::Atom(v & !ATOM_BIT)
        } else {
            ChildRef::Node(v)
        }
    }
}

/// The layer state that selects an edge. Labels from spliced-in trees get a
/// fresh `origin` so they never match the host's states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyLabel {
    pub origin: u32,
    /// 1-based hidden layer.
    pub layer: u32,
    pub state: LayerState,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    child: u32,
    key: u32,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: NodeKind,
    layer: u32,
    first: u32,
    len: u32,
}

/// Value of a tree at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeValue {
    Numeric(f64),
    Logical(bool),
}

/// Alternating join/meet tree over affine atoms, stored as a flat arena.
///
/// Children always precede their parents in the node table.
#[derive(Debug, Clone)]
pub struct CircuitTree {
    mode: Mode,
    input_dim: usize,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    atoms: Vec<f64>,
    labels: Vec<KeyLabel>,
    root: ChildRef,
    lookup: HashMap<(u32, LayerState), u32>,
}

impl PartialEq for CircuitTree {
    fn eq(&self, other: &Self) -> bool {
        self.to_record() == other.to_record()
    }
}

struct Builder<'a> {
    trie: &'a StateTrie,
    n: usize,
    mode: Mode,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    labels: Vec<KeyLabel>,
    lookup: HashMap<(u32, LayerState), u32>,
}

impl Builder<'_> {
    fn key(&mut self, layer: u32, state: LayerState) -> u32 {
        if let Some(&k) = self.lookup.get(&(layer, state)) {
            return k;
        }
        let k = self.labels.len() as u32;
        self.labels.push(KeyLabel {
            origin: 0,
            layer,
            state,
        });
        self.lookup.insert((layer, state), k);
        k
    }

    fn finish(&mut self, kind: NodeKind, layer: u32, local: Vec<Edge>) -> ChildRef {
        if local.len() == 1 {
            return ChildRef::decode(local[0].child);
        }
        let first = self.edges.len() as u32;
        let len = local.len() as u32;
        self.edges.extend(local);
        self.nodes.push(Node {
            kind,
            layer,
            first,
            len,
        });
        ChildRef::Node(self.nodes.len() as u32 - 1)
    }

    fn build_join(&mut self, m: usize, t: usize, l: usize) -> ChildRef {
        let kids: Vec<(LayerState, usize)> = self.trie.children(m).to_vec();
        let mut local = Vec::with_capacity(kids.len());
        for (key, m2) in kids {
            let child = self.build_meet(m2, t, l);
            let key = self.key(l as u32, key);
            local.push(Edge {
                child: child.encode(),
                key,
            });
        }
        self.finish(NodeKind::for_mode(true, self.mode), l as u32, local)
    }

    fn build_meet(&mut self, m2: usize, t: usize, l: usize) -> ChildRef {
        let kids: Vec<(LayerState, usize)> = self.trie.children(t).to_vec();
        let mut local = Vec::with_capacity(kids.len());
        for (key, t2) in kids {
            let child = if l == 1 {
                let i = self.trie.leaf(m2).expect("depth-d trie node is a leaf");
                let j = self.trie.leaf(t2).expect("depth-d trie node is a leaf");
                ChildRef::Atom((i * self.n + j) as u32)
            } else {
                self.build_join(m2, t2, l - 1)
            };
            let key = self.key(l as u32, key);
            local.push(Edge {
                child: child.encode(),
                key,
            });
        }
        self.finish(NodeKind::for_mode(false, self.mode), l as u32, local)
    }
}

/// Builds the alternating tree over `states` (`d` join/meet level pairs, from
/// the last hidden layer to the first) with one leaf per ordered pair.
/// Nodes with a single child are collapsed into that child.
pub fn build_tree(params: &MlpParams, states: &[NetworkState], mode: Mode) -> Result<CircuitTree> {
    if states.is_empty() {
        return Err(Error::input("cannot build a tree over an empty state set"));
    }
    let mut sorted = states.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    if (n as u64) * (n as u64) >= ATOM_BIT as u64 {
        return Err(Error::Resource(format!("{n} states give too many leaves")));
    }
    let atoms = atom_table(params, &sorted)?;
    let trie = StateTrie::new(&sorted);
    let mut b = Builder {
        trie: &trie,
        n,
        mode,
        nodes: Vec::new(),
        edges: Vec::new(),
        labels: Vec::new(),
        lookup: HashMap::new(),
    };
    let root = b.build_join(trie.root(), trie.root(), params.depth());
    Ok(CircuitTree {
        mode,
        input_dim: params.input_dim(),
        nodes: b.nodes,
        edges: b.edges,
        atoms,
        labels: b.labels,
        root,
        lookup: b.lookup,
    })
}

/// Numeric tree over every realized state.
pub fn build_numeric(params: &MlpParams, registry: &StateRegistry) -> Result<CircuitTree> {
    build_tree(params, &registry.sigma_bar(), Mode::Numeric)
}

/// Logical tree over the boundary states. Without boundary states the
/// network never changes sign and the result is a constant.
pub fn build_logical(params: &MlpParams, registry: &StateRegistry) -> Result<CircuitTree> {
    let zero = registry.sigma_zero();
    if zero.is_empty() {
        let sign = match registry.iter().next() {
            Some((_, info)) => info.nonneg,
            None => params.output(&vec![0.0; params.input_dim()]) >= 0.0,
        };
        log::warn!("no boundary states: the network never changes sign; circuit is constant {sign}");
        return Ok(CircuitTree::constant(params.input_dim(), sign));
    }
    build_tree(params, &zero, Mode::Logical)
}

impl CircuitTree {
    /// Logical tree that is constantly `value`.
    pub fn constant(input_dim: usize, value: bool) -> Self {
        Self {
            mode: Mode::Logical,
            input_dim,
            nodes: vec![Node {
                kind: NodeKind::Const(value),
                layer: 0,
                first: 0,
                len: 0,
            }],
            edges: Vec::new(),
            atoms: Vec::new(),
            labels: Vec::new(),
            root: ChildRef::Node(0),
            lookup: HashMap::new(),
        }
    }

    /// Single-atom tree.
    pub fn leaf(mode: Mode, atom: &AffineAtom) -> Self {
        Self {
            mode,
            input_dim: atom.coefficients.len(),
            nodes: Vec::new(),
            edges: Vec::new(),
            atoms: atom.packed(),
            labels: Vec::new(),
            root: ChildRef::Atom(0),
            lookup: HashMap::new(),
        }
    }

    /// A new root of `kind` over the given subtrees. Subtree edge labels are
    /// kept with fresh origins.
    pub fn compose(kind: NodeKind, children: Vec<CircuitTree>) -> Result<Self> {
        let first = children
            .first()
            .ok_or_else(|| Error::input("compose needs at least one child"))?;
        let (mode, input_dim) = (first.mode, first.input_dim);
        if children.iter().any(|c| c.input_dim != input_dim) {
            return Err(Error::input("composed trees differ in input dimension"));
        }
        let mut out = Self {
            mode,
            input_dim,
            nodes: Vec::new(),
            edges: Vec::new(),
            atoms: Vec::new(),
            labels: Vec::new(),
            root: ChildRef::Node(0),
            lookup: HashMap::new(),
        };
        let mut local = Vec::with_capacity(children.len());
        for (i, c) in children.iter().enumerate() {
            let r = out.append(c, i as u32 + 1);
            local.push(Edge {
                child: r.encode(),
                key: NO_KEY,
            });
        }
        let first = out.edges.len() as u32;
        out.nodes.push(Node {
            kind,
            layer: 0,
            first,
            len: local.len() as u32,
        });
        out.edges.extend(local);
        out.root = ChildRef::Node(out.nodes.len() as u32 - 1);
        Ok(out)
    }

    /// Appends another tree's arena; returns its root in this arena.
    fn append(&mut self, other: &CircuitTree, origin: u32) -> ChildRef {
        let node_off = self.nodes.len() as u32;
        let edge_off = self.edges.len() as u32;
        let atom_off = (self.atoms.len() / (self.input_dim + 1)) as u32;
        let mut label_map = Vec::with_capacity(other.labels.len());
        for l in &other.labels {
            let new = KeyLabel {
                origin: origin + l.origin,
                ..*l
            };
            label_map.push(self.intern_label(new));
        }
        let shift = |c: ChildRef| match c {
            ChildRef::Node(i) => ChildRef::Node(i + node_off),
            ChildRef::Atom(i) => ChildRef::Atom(i + atom_off),
        };
        for n in &other.nodes {
            self.nodes.push(Node {
                first: n.first + edge_off,
                ..*n
            });
        }
        for e in &other.edges {
            self.edges.push(Edge {
                child: shift(ChildRef::decode(e.child)).encode(),
                key: if e.key == NO_KEY {
                    NO_KEY
                } else {
                    label_map[e.key as usize]
                },
            });
        }
        self.atoms.extend_from_slice(&other.atoms);
        shift(other.root)
    }

    fn intern_label(&mut self, l: KeyLabel) -> u32 {
        if let Some(i) = self.labels.iter().position(|x| *x == l) {
            return i as u32;
        }
        self.labels.push(l);
        let id = self.labels.len() as u32 - 1;
        if l.origin == 0 {
            self.lookup.insert((l.layer, l.state), id);
        }
        id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn root(&self) -> ChildRef {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of atom references (leaves).
    pub fn leaf_count(&self) -> usize {
        let from_edges = self
            .edges
            .iter()
            .filter(|e| e.child & ATOM_BIT != 0)
            .count();
        from_edges + usize::from(matches!(self.root, ChildRef::Atom(_)))
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len() / (self.input_dim + 1)
    }

    pub fn atom(&self, id: u32) -> AffineAtom {
        AffineAtom::from_packed(self.packed_atom(id))
    }

    /// Overwrites atom `id` in place; every leaf sharing it changes.
    pub fn set_atom(&mut self, id: u32, atom: &AffineAtom) -> Result<()> {
        let w = self.input_dim + 1;
        if atom.coefficients.len() != self.input_dim {
            return Err(Error::input("atom dimension does not match the tree"));
        }
        if id as usize >= self.atom_count() {
            return Err(Error::input(format!("no atom {id}")));
        }
        self.atoms[id as usize * w..][..w].copy_from_slice(&atom.packed());
        Ok(())
    }

    /// The same circuit read through an affine input map `z = weights·x + bias`:
    /// every atom `w·z + c` becomes `(wᵀ·weights)·x + (w·bias + c)`.
    pub fn lift(&self, weights: &Matrix, bias: &[f64]) -> Result<CircuitTree> {
        if weights.rows() != self.input_dim || bias.len() != self.input_dim {
            return Err(Error::input("input map does not end in the tree's input space"));
        }
        let dim = weights.cols();
        let mut atoms = Vec::with_capacity(self.atom_count() * (dim + 1));
        for a in 0..self.atom_count() as u32 {
            let v = self.packed_atom(a);
            let (w, c) = v.split_at(self.input_dim);
            let mut row = vec![0.0; dim + 1];
            for (i, &wi) in w.iter().enumerate() {
                if wi != 0.0 {
                    for (r, &m) in row.iter_mut().zip(weights.row(i)) {
                        *r += wi * m;
                    }
                }
            }
            row[dim] = c[0] + w.iter().zip(bias).map(|(a, b)| a * b).sum::<f64>();
            atoms.extend(row);
        }
        Ok(CircuitTree {
            input_dim: dim,
            atoms,
            ..self.clone()
        })
    }

    fn packed_atom(&self, id: u32) -> &[f64] {
        let w = self.input_dim + 1;
        &self.atoms[id as usize * w..][..w]
    }

    pub fn kind(&self, node: u32) -> NodeKind {
        self.nodes[node as usize].kind
    }

    /// 1-based hidden layer that indexes this node's children; 0 if none.
    pub fn layer(&self, node: u32) -> u32 {
        self.nodes[node as usize].layer
    }

    pub fn children(&self, node: u32) -> impl Iterator<Item = (ChildRef, Option<KeyLabel>)> + '_ {
        let n = self.nodes[node as usize];
        self.edges[n.first as usize..(n.first + n.len) as usize]
            .iter()
            .map(|e| {
                (
                    ChildRef::decode(e.child),
                    (e.key != NO_KEY).then(|| self.labels[e.key as usize]),
                )
            })
    }

    fn edge_slice(&self, node: u32) -> &[Edge] {
        let n = self.nodes[node as usize];
        &self.edges[n.first as usize..(n.first + n.len) as usize]
    }

    /// Follows child indices from the root.
    pub fn resolve(&self, path: &[usize]) -> Result<ChildRef> {
        let mut cur = self.root;
        for (depth, &i) in path.iter().enumerate() {
            let ChildRef::Node(n) = cur else {
                return Err(Error::input(format!("path descends below a leaf at depth {depth}")));
            };
            let e = self
                .edge_slice(n)
                .get(i)
                .ok_or_else(|| Error::input(format!("node at depth {depth} has no child {i}")))?;
            cur = ChildRef::decode(e.child);
        }
        Ok(cur)
    }

    /// Paths of the root's children (the components closest to the output).
    pub fn top_level_paths(&self) -> Vec<Vec<usize>> {
        match self.root {
            ChildRef::Node(n) => (0..self.nodes[n as usize].len as usize).map(|i| vec![i]).collect(),
            ChildRef::Atom(_) => vec![vec![]],
        }
    }

    /// Every node and leaf path, in preorder.
    pub fn all_paths(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack = vec![(self.root, Vec::new())];
        while let Some((c, path)) = stack.pop() {
            if let ChildRef::Node(n) = c {
                let kids = self.edge_slice(n);
                for (i, e) in kids.iter().enumerate().rev() {
                    let mut p = path.clone();
                    p.push(i);
                    stack.push((ChildRef::decode(e.child), p));
                }
            }
            out.push(path);
        }
        out
    }

    /// Subtree rooted at `path` as a standalone tree.
    pub fn subtree(&self, path: &[usize]) -> Result<CircuitTree> {
        let r = self.resolve(path)?;
        let mut t = self.clone();
        t.root = r;
        Ok(t.compacted())
    }

    /// Per-layer label ids of `state`, used to try the matching child first.
    pub fn hint(&self, state: &NetworkState) -> Vec<u32> {
        (0..state.depth())
            .map(|l| {
                self.lookup
                    .get(&(l as u32 + 1, state.layer(l)))
                    .copied()
                    .unwrap_or(NO_KEY)
            })
            .collect()
    }

    pub fn eval(&self, x: &[f64]) -> TreeValue {
        match self.mode {
            Mode::Numeric => TreeValue::Numeric(self.eval_numeric(x)),
            Mode::Logical => TreeValue::Logical(self.eval_bool(x)),
        }
    }

    /// Max/min value (Or/And read as Max/Min), with alpha-beta pruning.
    pub fn eval_numeric(&self, x: &[f64]) -> f64 {
        self.ab(self.root, x, &[], f64::NEG_INFINITY, f64::INFINITY)
    }

    /// As [`Self::eval_numeric`], trying the children selected by `state` first.
    pub fn eval_numeric_hinted(&self, x: &[f64], state: &NetworkState) -> f64 {
        let h = self.hint(state);
        self.ab(self.root, x, &h, f64::NEG_INFINITY, f64::INFINITY)
    }

    /// Reference evaluation visiting every leaf.
    pub fn eval_numeric_exhaustive(&self, x: &[f64]) -> f64 {
        self.full_numeric(self.root, x)
    }

    /// Or/And value (Max/Min read as Or/And) with short-circuiting.
    pub fn eval_bool(&self, x: &[f64]) -> bool {
        self.sc(self.root, x, &[])
    }

    pub fn eval_bool_hinted(&self, x: &[f64], state: &NetworkState) -> bool {
        let h = self.hint(state);
        self.sc(self.root, x, &h)
    }

    /// Reference evaluation visiting every leaf.
    pub fn eval_bool_exhaustive(&self, x: &[f64]) -> bool {
        self.full_bool(self.root, x)
    }

    /// Boolean value of the subtree at `c`.
    pub fn eval_bool_at(&self, c: ChildRef, x: &[f64]) -> bool {
        self.sc(c, x, &[])
    }

    /// Boolean value of every node at `x`, indexed by node id.
    pub fn node_truths(&self, x: &[f64]) -> Vec<bool> {
        let mut v = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            let child = |e: &Edge| match ChildRef::decode(e.child) {
                ChildRef::Atom(a) => eval_packed(self.packed_atom(a), x) >= 0.0,
                ChildRef::Node(j) => v[j as usize],
            };
            let es = &self.edges[n.first as usize..(n.first + n.len) as usize];
            v[i] = match n.kind {
                NodeKind::Const(b) => b,
                k if k.is_join() => es.iter().any(child),
                _ => es.iter().all(child),
            };
        }
        v
    }

    /// Boolean value at `x` of the child slot `c`, given [`Self::node_truths`].
    pub fn truth_of(&self, c: ChildRef, x: &[f64], truths: &[bool]) -> bool {
        match c {
            ChildRef::Atom(a) => eval_packed(self.packed_atom(a), x) >= 0.0,
            ChildRef::Node(n) => truths[n as usize],
        }
    }

    fn ordered<'a>(&'a self, node: &Node, hint: &[u32]) -> (Option<&'a Edge>, &'a [Edge]) {
        let es = &self.edges[node.first as usize..(node.first + node.len) as usize];
        let want = if node.layer >= 1 {
            hint.get(node.layer as usize - 1).copied().unwrap_or(NO_KEY)
        } else {
            NO_KEY
        };
        let first = if want == NO_KEY {
            None
        } else {
            es.iter().find(|e| e.key == want)
        };
        (first, es)
    }

    fn ab(&self, c: ChildRef, x: &[f64], hint: &[u32], mut alpha: f64, mut beta: f64) -> f64 {
        let n = match c {
            ChildRef::Atom(a) => return eval_packed(self.packed_atom(a), x),
            ChildRef::Node(n) => &self.nodes[n as usize],
        };
        if let NodeKind::Const(b) = n.kind {
            return if b { 1.0 } else { -1.0 };
        }
        let (first, es) = self.ordered(n, hint);
        let skip = first.map(|e| e as *const Edge);
        let iter = first
            .into_iter()
            .chain(es.iter().filter(|e| Some(*e as *const Edge) != skip));
        if n.kind.is_join() {
            let mut v = f64::NEG_INFINITY;
            for e in iter {
                let val = self.ab(ChildRef::decode(e.child), x, hint, alpha, beta);
                if val > v {
                    v = val;
                }
                if v >= beta {
                    break;
                }
                alpha = alpha.max(v);
            }
            v
        } else {
            let mut v = f64::INFINITY;
            for e in iter {
                let val = self.ab(ChildRef::decode(e.child), x, hint, alpha, beta);
                if val < v {
                    v = val;
                }
                if v <= alpha {
                    break;
                }
                beta = beta.min(v);
            }
            v
        }
    }

    fn sc(&self, c: ChildRef, x: &[f64], hint: &[u32]) -> bool {
        let n = match c {
            ChildRef::Atom(a) => return eval_packed(self.packed_atom(a), x) >= 0.0,
            ChildRef::Node(n) => &self.nodes[n as usize],
        };
        if let NodeKind::Const(b) = n.kind {
            return b;
        }
        let (first, es) = self.ordered(n, hint);
        let skip = first.map(|e| e as *const Edge);
        let mut iter = first
            .into_iter()
            .chain(es.iter().filter(|e| Some(*e as *const Edge) != skip));
        if n.kind.is_join() {
            iter.any(|e| self.sc(ChildRef::decode(e.child), x, hint))
        } else {
            iter.all(|e| self.sc(ChildRef::decode(e.child), x, hint))
        }
    }

    fn full_numeric(&self, c: ChildRef, x: &[f64]) -> f64 {
        let n = match c {
            ChildRef::Atom(a) => return eval_packed(self.packed_atom(a), x),
            ChildRef::Node(n) => n,
        };
        let node = self.nodes[n as usize];
        match node.kind {
            NodeKind::Const(b) => {
                if b {
                    1.0
                } else {
                    -1.0
                }
            }
            k => {
                let vals = self
                    .edge_slice(n)
                    .iter()
                    .map(|e| self.full_numeric(ChildRef::decode(e.child), x));
                if k.is_join() {
                    vals.fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.fold(f64::INFINITY, f64::min)
                }
            }
        }
    }

    fn full_bool(&self, c: ChildRef, x: &[f64]) -> bool {
        let n = match c {
            ChildRef::Atom(a) => return eval_packed(self.packed_atom(a), x) >= 0.0,
            ChildRef::Node(n) => n,
        };
        let node = self.nodes[n as usize];
        match node.kind {
            NodeKind::Const(b) => b,
            k => {
                let vals: Vec<bool> = self
                    .edge_slice(n)
                    .iter()
                    .map(|e| self.full_bool(ChildRef::decode(e.child), x))
                    .collect();
                if k.is_join() {
                    vals.into_iter().any(|v| v)
                } else {
                    vals.into_iter().all(|v| v)
                }
            }
        }
    }

    /// Replaces the subtree at `path` with `replacement`. Nothing else changes.
    pub fn splice(&self, path: &[usize], replacement: &CircuitTree) -> Result<CircuitTree> {
        if replacement.mode != Mode::Logical && self.mode == Mode::Logical {
            return Err(Error::input("replacement must be a logical tree"));
        }
        if replacement.input_dim != self.input_dim {
            return Err(Error::input(format!(
                "replacement has input dimension {}, tree has {}",
                replacement.input_dim, self.input_dim
            )));
        }
        if path.is_empty() {
            return Ok(replacement.compacted());
        }
        self.resolve(path)?;
        let mut out = self.clone();
        let origin = out.labels.iter().map(|l| l.origin).max().unwrap_or(0) + 1;
        let new_root = out.append(replacement, origin);
        let (&last, parent) = path.split_last().expect("path is not empty");
        let ChildRef::Node(p) = out.resolve(parent)? else {
            unreachable!("resolve succeeded on the full path");
        };
        let slot = out.nodes[p as usize].first as usize + last;
        out.edges[slot].child = new_root.encode();
        Ok(out.compacted())
    }

    /// Copy holding only what is reachable from the root, children first.
    pub fn compacted(&self) -> CircuitTree {
        let w = self.input_dim + 1;
        let mut out = CircuitTree {
            mode: self.mode,
            input_dim: self.input_dim,
            nodes: Vec::new(),
            edges: Vec::new(),
            atoms: Vec::new(),
            labels: Vec::new(),
            root: self.root,
            lookup: HashMap::new(),
        };
        let mut node_map: HashMap<u32, u32> = HashMap::new();
        let mut atom_map: HashMap<u32, u32> = HashMap::new();
        let mut label_map: HashMap<u32, u32> = HashMap::new();
        let mut map_atom = |out: &mut CircuitTree, a: u32| -> u32 {
            *atom_map.entry(a).or_insert_with(|| {
                out.atoms.extend_from_slice(&self.atoms[a as usize * w..][..w]);
                (out.atoms.len() / w - 1) as u32
            })
        };
        // Iterative post-order.
        let mut stack: Vec<(u32, bool)> = Vec::new();
        match self.root {
            ChildRef::Node(r) => stack.push((r, false)),
            ChildRef::Atom(a) => {
                out.root = ChildRef::Atom(map_atom(&mut out, a));
                return out;
            }
        }
        while let Some((n, expanded)) = stack.pop() {
            if node_map.contains_key(&n) {
                continue;
            }
            if !expanded {
                stack.push((n, true));
                for e in self.edge_slice(n).iter().rev() {
                    if let ChildRef::Node(c) = ChildRef::decode(e.child) {
                        if !node_map.contains_key(&c) {
                            stack.push((c, false));
                        }
                    }
                }
                continue;
            }
            let node = self.nodes[n as usize];
            let first = out.edges.len() as u32;
            for e in self.edge_slice(n) {
                let child = match ChildRef::decode(e.child) {
                    ChildRef::Node(c) => ChildRef::Node(node_map[&c]),
                    ChildRef::Atom(a) => ChildRef::Atom(map_atom(&mut out, a)),
                };
                let key = if e.key == NO_KEY {
                    NO_KEY
                } else {
                    *label_map.entry(e.key).or_insert_with(|| {
                        let l = self.labels[e.key as usize];
                        out.labels.push(l);
                        if l.origin == 0 {
                            out.lookup.insert((l.layer, l.state), out.labels.len() as u32 - 1);
                        }
                        out.labels.len() as u32 - 1
                    })
                };
                out.edges.push(Edge {
                    child: child.encode(),
                    key,
                });
            }
            out.nodes.push(Node { first, ..node });
            node_map.insert(n, out.nodes.len() as u32 - 1);
        }
        out.root = match self.root {
            ChildRef::Node(r) => ChildRef::Node(node_map[&r]),
            a => a,
        };
        out
    }

    /// Rebuilds a tree from explicit parts; used by simplification.
    pub(crate) fn from_parts(
        template: &CircuitTree,
        nodes: Vec<(NodeKind, u32, Vec<(ChildRef, u32)>)>,
        root: ChildRef,
    ) -> CircuitTree {
        let mut out = CircuitTree {
            mode: template.mode,
            input_dim: template.input_dim,
            nodes: Vec::with_capacity(nodes.len()),
            edges: Vec::new(),
            atoms: template.atoms.clone(),
            labels: template.labels.clone(),
            root,
            lookup: template.lookup.clone(),
        };
        for (kind, layer, kids) in nodes {
            let first = out.edges.len() as u32;
            let len = kids.len() as u32;
            out.edges.extend(kids.into_iter().map(|(c, key)| Edge {
                child: c.encode(),
                key,
            }));
            out.nodes.push(Node {
                kind,
                layer,
                first,
                len,
            });
        }
        out.compacted()
    }

    /// Raw edge view `(child, label id)` used by simplification.
    pub(crate) fn raw_children(&self, node: u32) -> Vec<(ChildRef, u32)> {
        self.edge_slice(node)
            .iter()
            .map(|e| (ChildRef::decode(e.child), e.key))
            .collect()
    }

    fn to_record(&self) -> TreeRecord {
        let label = |k: u32| {
            (k != NO_KEY).then(|| {
                let l = self.labels[k as usize];
                LabelRecord {
                    origin: l.origin,
                    layer: l.layer,
                    state: l.state.to_string(),
                }
            })
        };
        let child_rec = |c: ChildRef, key: u32| match c {
            ChildRef::Node(i) => ChildRecord {
                node: Some(i),
                atom: None,
                key: label(key),
            },
            ChildRef::Atom(i) => ChildRecord {
                node: None,
                atom: Some(i),
                key: label(key),
            },
        };
        TreeRecord {
            format: CIRCUIT_FORMAT.into(),
            mode: self.mode,
            input_dim: self.input_dim,
            root: child_rec(self.root, NO_KEY),
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| NodeRecord {
                    id: i as u32,
                    kind: n.kind.name().into(),
                    layer: n.layer,
                    children: self
                        .edge_slice(i as u32)
                        .iter()
                        .map(|e| child_rec(ChildRef::decode(e.child), e.key))
                        .collect(),
                })
                .collect(),
            atoms: (0..self.atom_count() as u32)
                .map(|a| {
                    let at = self.atom(a);
                    AtomRecord {
                        id: a,
                        coefficients: at.coefficients,
                        constant: hexfloat::format(at.constant),
                    }
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_record())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: TreeRecord = serde_json::from_str(text)?;
        if rec.format != CIRCUIT_FORMAT {
            return Err(Error::format(format!("unsupported circuit format {:?}", rec.format)));
        }
        let w = rec.input_dim + 1;
        let mut atoms = Vec::with_capacity(rec.atoms.len() * w);
        for (i, a) in rec.atoms.iter().enumerate() {
            if a.id as usize != i || a.coefficients.len() != rec.input_dim {
                return Err(Error::format(format!("atom record {i} is malformed")));
            }
            atoms.extend_from_slice(&a.coefficients);
            atoms.push(hexfloat::parse(&a.constant)?);
        }
        let n_atoms = rec.atoms.len() as u32;
        let n_nodes = rec.nodes.len() as u32;
        let mut out = CircuitTree {
            mode: rec.mode,
            input_dim: rec.input_dim,
            nodes: Vec::new(),
            edges: Vec::new(),
            atoms,
            labels: Vec::new(),
            root: ChildRef::Node(0),
            lookup: HashMap::new(),
        };
        let mut seen: HashMap<(u32, u32, String), u32> = HashMap::new();
        let mut decode = |out: &mut CircuitTree, c: &ChildRecord| -> Result<(ChildRef, u32)> {
            let r = match (c.node, c.atom) {
                (Some(i), None) if i < n_nodes => ChildRef::Node(i),
                (None, Some(i)) if i < n_atoms => ChildRef::Atom(i),
                _ => return Err(Error::format("child must name exactly one existing node or atom")),
            };
            let key = match &c.key {
                None => NO_KEY,
                Some(l) => match seen.get(&(l.origin, l.layer, l.state.clone())) {
                    Some(&k) => k,
                    None => {
                        let k = out.intern_label(KeyLabel {
                            origin: l.origin,
                            layer: l.layer,
                            state: LayerState::parse(&l.state)?,
                        });
                        seen.insert((l.origin, l.layer, l.state.clone()), k);
                        k
                    }
                },
            };
            Ok((r, key))
        };
        for (i, n) in rec.nodes.iter().enumerate() {
            if n.id as usize != i {
                return Err(Error::format(format!("node record {i} has id {}", n.id)));
            }
            let first = out.edges.len() as u32;
            for c in &n.children {
                let (r, key) = decode(&mut out, c)?;
                if let ChildRef::Node(j) = r {
                    if j >= i as u32 {
                        return Err(Error::format("node children must precede their parent"));
                    }
                }
                out.edges.push(Edge {
                    child: r.encode(),
                    key,
                });
            }
            let kind = NodeKind::parse(&n.kind)?;
            if !matches!(kind, NodeKind::Const(_)) && n.children.is_empty() {
                return Err(Error::format(format!("node {i} has no children")));
            }
            out.nodes.push(Node {
                kind,
                layer: n.layer,
                first,
                len: n.children.len() as u32,
            });
        }
        out.root = decode(&mut out, &rec.root)?.0;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::error::read_to_string(path)?)
    }
}

pub const CIRCUIT_FORMAT: &str = "netlogic-circuit/1";

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct LabelRecord {
    origin: u32,
    layer: u32,
    state: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ChildRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atom: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key: Option<LabelRecord>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct NodeRecord {
    id: u32,
    kind: String,
    layer: u32,
    children: Vec<ChildRecord>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct AtomRecord {
    id: u32,
    #[serde(with = "hexfloat::vec")]
    coefficients: Vec<f64>,
    constant: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TreeRecord {
    format: String,
    mode: Mode,
    input_dim: usize,
    root: ChildRecord,
    nodes: Vec<NodeRecord>,
    atoms: Vec<AtomRecord>,
}
