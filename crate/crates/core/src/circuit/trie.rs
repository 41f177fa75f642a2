use crate::nn::{LayerState, NetworkState};

#[derive(Debug, Clone)]
struct TrieNode {
    children: Vec<(LayerState, usize)>,
    leaf: Option<usize>,
}

/// Prefix tree over a state set read from the last hidden layer down to the
/// first. A node at depth `k` has one child per layer-`d-k` state that
/// extends its suffix within the set.
#[derive(Debug, Clone)]
pub struct StateTrie {
    nodes: Vec<TrieNode>,
    depth: usize,
}

impl StateTrie {
    /// `states[i]` becomes the leaf with index `i`. Duplicates share a leaf
    /// (the first index wins).
    pub fn new(states: &[NetworkState]) -> Self {
        let depth = states.first().map_or(0, NetworkState::depth);
        let mut nodes = vec![TrieNode {
            children: Vec::new(),
            leaf: None,
        }];
        let mut order: Vec<usize> = (0..states.len()).collect();
        order.sort_by(|&a, &b| {
            let ka = states[a].layers().iter().rev();
            let kb = states[b].layers().iter().rev();
            ka.cmp(kb).then(a.cmp(&b))
        });
        for i in order {
            let s = &states[i];
            assert_eq!(s.depth(), depth, "states of mixed depth");
            let mut cur = 0;
            for l in (0..depth).rev() {
                let key = s.layer(l);
                cur = match nodes[cur].children.iter().find(|(k, _)| *k == key) {
                    Some(&(_, c)) => c,
                    None => {
                        nodes.push(TrieNode {
                            children: Vec::new(),
                            leaf: None,
                        });
                        let c = nodes.len() - 1;
                        nodes[cur].children.push((key, c));
                        c
                    }
                };
            }
            if nodes[cur].leaf.is_none() {
                nodes[cur].leaf = Some(i);
            }
        }
        Self { nodes, depth }
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn children(&self, node: usize) -> &[(LayerState, usize)] {
        &self.nodes[node].children
    }

    pub fn leaf(&self, node: usize) -> Option<usize> {
        self.nodes[node].leaf
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of root-to-leaf paths.
    pub fn path_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.leaf.is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_sets() {
        let states: Vec<NetworkState> = ["01|10", "11|10", "01|11"]
            .iter()
            .map(|s| NetworkState::parse(s).unwrap())
            .collect();
        let t = StateTrie::new(&states);
        assert_eq!(t.path_count(), 3);
        let top: Vec<String> = t.children(0).iter().map(|(k, _)| k.to_string()).collect();
        assert_eq!(top, ["10", "11"]);
        let under_10 = t.children(t.children(0)[0].1);
        let keys: Vec<String> = under_10.iter().map(|(k, _)| k.to_string()).collect();
        assert_eq!(keys, ["01", "11"]);
    }
}
