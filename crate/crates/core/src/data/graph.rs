use std::collections::{BTreeMap, VecDeque};

use super::dotbracket::parse_dot_bracket;
use super::nucleotide_index;
use crate::error::{Error, Result};
use crate::numerics::NDArray;

/// Kind of a distance-1 edge. A pair that is also backbone-adjacent counts as a base pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Backbone,
    BasePair,
}

impl EdgeKind {
    /// Position of the 1 in the two-dimensional one-hot edge attribute.
    pub fn one_hot_index(self) -> usize {
        match self {
            EdgeKind::Backbone => 0,
            EdgeKind::BasePair => 1,
        }
    }
}

/// Secondary structure as a graph: backbone plus base pairs, partitioned by hop distance.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureGraph {
    pub n: usize,
    /// One-hot A/C/G/U per node; `N` is an all-zero row.
    pub node_feats: NDArray,
    /// Directed pairs `(i, j)` whose shortest-path distance is exactly `s`, sorted.
    pub edges_by_scale: BTreeMap<usize, Vec<(usize, usize)>>,
    /// Attribute of each distance-1 edge, aligned with `edges_by_scale[&1]`
    /// (empty when scale 1 was not requested).
    pub edge_attrs: Vec<EdgeKind>,
}

impl StructureGraph {
    pub fn edges(&self, scale: usize) -> &[(usize, usize)] {
        self.edges_by_scale.get(&scale).map_or(&[], Vec::as_slice)
    }

    /// Distance-1 adjacency with attributes, independent of the requested scales.
    pub fn base_edges(&self) -> &[(usize, usize)] {
        self.edges(1)
    }
}

/// Builds the multi-scale graph of `seq` folded as `structure`.
pub fn build_structure_graph(seq: &str, structure: &str, scales: &[usize]) -> Result<StructureGraph> {
    let pairs = parse_dot_bracket(structure)?;
    let n = structure.chars().count();
    let seq_len = seq.chars().count();
    if seq_len != n {
        return Err(Error::Shape(format!(
            "sequence length {seq_len} differs from structure length {n}"
        )));
    }
    if let Some(&bad) = scales.iter().find(|&&s| s == 0) {
        return Err(Error::Shape(format!("scale {bad} is not a positive hop count")));
    }

    let mut feats = NDArray::zeros(&[n, 4]);
    for (i, ch) in seq.chars().enumerate() {
        if let Some(k) = nucleotide_index(ch, i)? {
            feats.set(&[i, k], 1.0);
        }
    }

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut kinds: BTreeMap<(usize, usize), EdgeKind> = BTreeMap::new();
    for i in 1..n {
        kinds.insert((i - 1, i), EdgeKind::Backbone);
        kinds.insert((i, i - 1), EdgeKind::Backbone);
    }
    for &(i, j) in &pairs {
        kinds.insert((i, j), EdgeKind::BasePair);
        kinds.insert((j, i), EdgeKind::BasePair);
    }
    for &(i, j) in kinds.keys() {
        adj[i].push(j);
    }

    let max_scale = scales.iter().copied().max().unwrap_or(0);
    let mut edges_by_scale: BTreeMap<usize, Vec<(usize, usize)>> =
        scales.iter().map(|&s| (s, Vec::new())).collect();
    let mut dist = vec![usize::MAX; n];
    for src in 0..n {
        dist.fill(usize::MAX);
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            if dist[u] == max_scale {
                continue;
            }
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (dst, &d) in dist.iter().enumerate() {
            if d > 0 && d != usize::MAX {
                if let Some(list) = edges_by_scale.get_mut(&d) {
                    list.push((src, dst));
                }
            }
        }
    }

    let edge_attrs = edges_by_scale
        .get(&1)
        .map(|e| e.iter().map(|k| kinds[k]).collect())
        .unwrap_or_default();
    Ok(StructureGraph {
        n,
        node_feats: feats,
        edges_by_scale,
        edge_attrs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = pairs.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn path_graph_scales() {
        let g = build_structure_graph("ACGU", "....", &[1, 2, 3]).unwrap();
        assert_eq!(g.edges(1), sym(&[(0, 1), (1, 2), (2, 3)]).as_slice());
        assert_eq!(g.edges(2), sym(&[(0, 2), (1, 3)]).as_slice());
        assert_eq!(g.edges(3), sym(&[(0, 3)]).as_slice());
        assert!(g.edge_attrs.iter().all(|&k| k == EdgeKind::Backbone));
        assert_eq!(g.node_feats, NDArray::eye(4));
    }

    #[test]
    fn hairpin_attributes() {
        let g = build_structure_graph("GGAACC", "((..))", &[1, 2, 3]).unwrap();
        let kind = |i, j| {
            let pos = g.edges(1).iter().position(|&e| e == (i, j)).unwrap();
            g.edge_attrs[pos]
        };
        assert_eq!(kind(0, 5), EdgeKind::BasePair);
        assert_eq!(kind(5, 0), EdgeKind::BasePair);
        assert_eq!(kind(1, 4), EdgeKind::BasePair);
        assert_eq!(kind(0, 1), EdgeKind::Backbone);
        assert_eq!(kind(2, 3), EdgeKind::Backbone);
    }

    #[test]
    fn adjacent_pair_is_labelled_base_pair() {
        let g = build_structure_graph("GC", "()", &[1]).unwrap();
        assert_eq!(g.edge_attrs, vec![EdgeKind::BasePair, EdgeKind::BasePair]);
    }

    #[test]
    fn single_base_has_no_edges() {
        let g = build_structure_graph("A", ".", &[1, 2, 3]).unwrap();
        assert_eq!(g.n, 1);
        assert!(g.edges_by_scale.values().all(Vec::is_empty));
    }

    #[test]
    fn unknown_base_is_zero_row() {
        let g = build_structure_graph("NA", "..", &[1]).unwrap();
        assert_eq!(g.node_feats.row(0), &[0.0; 4]);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(build_structure_graph("ACG", "....", &[1]).is_err());
    }

    /// Floyd–Warshall distances as an independent oracle.
    fn all_pairs(n: usize, structure: &str) -> Vec<Vec<usize>> {
        let inf = usize::MAX / 4;
        let mut d = vec![vec![inf; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0;
        }
        for i in 1..n {
            d[i - 1][i] = 1;
            d[i][i - 1] = 1;
        }
        for (i, j) in parse_dot_bracket(structure).unwrap() {
            d[i][j] = 1;
            d[j][i] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    proptest! {
        #[test]
        fn scales_match_exact_distances(ops in prop::collection::vec(0u8..3, 1..40)) {
            let mut s = String::new();
            let mut open = 0;
            for op in ops {
                match op {
                    0 => { s.push('('); open += 1; }
                    1 if open > 0 => { s.push(')'); open -= 1; }
                    _ => s.push('.'),
                }
            }
            s.extend(std::iter::repeat_n(')', open));
            let seq: String = std::iter::repeat_n('A', s.len()).collect();
            let g = build_structure_graph(&seq, &s, &[1, 2, 3]).unwrap();
            let d = all_pairs(s.len(), &s);
            for scale in 1..=3 {
                let mut expected = Vec::new();
                for (i, row) in d.iter().enumerate() {
                    for (j, &dij) in row.iter().enumerate() {
                        if dij == scale {
                            expected.push((i, j));
                        }
                    }
                }
                prop_assert_eq!(g.edges(scale), expected.as_slice());
            }
            prop_assert_eq!(g.n, s.len());
        }
    }
}
