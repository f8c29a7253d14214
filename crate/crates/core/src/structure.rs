//! All-pairs hop distances and canonical shortest paths over a [`MolGraph`].

use std::collections::VecDeque;

use thiserror::Error;

use crate::molgraph::MolGraph;

/// Distance entry for node pairs in different connected components.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<u32>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }

    pub fn is_reachable(&self, i: usize, j: usize) -> bool {
        self.get(i, j) != UNREACHABLE
    }

    pub fn max_finite(&self) -> Option<u32> {
        self.d.iter().copied().filter(|&x| x != UNREACHABLE).max()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StructureError {
    #[error("nodes {0} and {1} lie in different fragments")]
    Unreachable(usize, usize),
}

/// Sorted neighbor lists carrying the index of the connecting edge.
fn adjacency(g: &MolGraph) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); g.n_nodes()];
    for (k, e) in g.edges.iter().enumerate() {
        adj[e.src].push((e.dst, k));
        adj[e.dst].push((e.src, k));
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

fn bfs(adj: &[Vec<(usize, usize)>], source: usize, out: &mut [u32]) {
    out.fill(UNREACHABLE);
    out[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &adj[u] {
            if out[v] == UNREACHABLE {
                out[v] = out[u] + 1;
                queue.push_back(v);
            }
        }
    }
}

pub fn all_pairs_distance(g: &MolGraph) -> DistanceMatrix {
    let n = g.n_nodes();
    let adj = adjacency(g);
    let mut d = vec![UNREACHABLE; n * n];
    for (i, row) in d.chunks_mut(n.max(1)).enumerate().take(n) {
        bfs(&adj, i, row);
    }
    DistanceMatrix { n, d }
}

/// Edge-index sequence of the canonical shortest path from `i` to `j`.
///
/// The path is built from the smaller endpoint: walking back from the far end,
/// each step goes to the smallest-index neighbor one hop closer to the source.
/// Requests with `i > j` return the reverse of the `(j, i)` path.
pub fn canonical_shortest_path(
    g: &MolGraph,
    i: usize,
    j: usize,
    dm: &DistanceMatrix,
) -> Result<Vec<usize>, StructureError> {
    let adj = adjacency(g);
    path_with_adjacency(&adj, i, j, dm)
}

fn path_with_adjacency(
    adj: &[Vec<(usize, usize)>],
    i: usize,
    j: usize,
    dm: &DistanceMatrix,
) -> Result<Vec<usize>, StructureError> {
    if !dm.is_reachable(i, j) {
        return Err(StructureError::Unreachable(i, j));
    }
    let (source, target) = (i.min(j), i.max(j));
    let mut edges = Vec::with_capacity(dm.get(i, j) as usize);
    let mut cur = target;
    while cur != source {
        let want = dm.get(source, cur) - 1;
        let &(parent, edge) = adj[cur]
            .iter()
            .find(|&&(v, _)| dm.get(source, v) == want)
            .expect("BFS layer has a predecessor");
        edges.push(edge);
        cur = parent;
    }
    // `edges` now runs target -> source.
    if i < j {
        edges.reverse();
    }
    Ok(edges)
}

/// Canonical shortest paths for every ordered reachable pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathTable {
    n: usize,
    paths: Vec<Option<Vec<usize>>>,
}

impl PathTable {
    pub fn build(g: &MolGraph, dm: &DistanceMatrix) -> Self {
        let n = g.n_nodes();
        let adj = adjacency(g);
        let mut paths = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                if dm.is_reachable(i, j) {
                    paths[i * n + j] = Some(path_with_adjacency(&adj, i, j, dm).expect("reachable"));
                }
            }
        }
        Self { n, paths }
    }

    /// `None` for cross-fragment pairs.
    pub fn path(&self, i: usize, j: usize) -> Option<&[usize]> {
        self.paths[i * self.n + j].as_deref()
    }
}

/// A molecule with its distance matrix and path table computed once.
#[derive(Debug, Clone)]
pub struct GraphStructure {
    pub graph: MolGraph,
    pub distances: DistanceMatrix,
    pub paths: PathTable,
}

impl GraphStructure {
    pub fn new(graph: MolGraph) -> Self {
        let distances = all_pairs_distance(&graph);
        let paths = PathTable::build(&graph, &distances);
        Self {
            graph,
            distances,
            paths,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }
}

/// Number of connected components, counted by union-find.
pub fn connected_components(g: &MolGraph) -> usize {
    let mut parent: Vec<usize> = (0..g.n_nodes()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = g.n_nodes();
    for e in &g.edges {
        let (a, b) = (find(&mut parent, e.src), find(&mut parent, e.dst));
        if a != b {
            parent[a] = b;
            components -= 1;
        }
    }
    components
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{parse_smiles, AtomFeature, BondFeature, Chirality, Edge};

    fn carbon_graph(n: usize, edges: &[(usize, usize)]) -> MolGraph {
        MolGraph {
            nodes: vec![AtomFeature::new(6, Chirality::None); n],
            edges: edges
                .iter()
                .map(|&(src, dst)| Edge {
                    src,
                    dst,
                    feat: BondFeature::SINGLE,
                })
                .collect(),
            n_fragments: 1,
        }
    }

    #[test]
    fn path_graph_distances() {
        let g = carbon_graph(3, &[(0, 1), (1, 2)]);
        let dm = all_pairs_distance(&g);
        assert_eq!(dm.get(0, 2), 2);
        assert_eq!(canonical_shortest_path(&g, 0, 2, &dm).unwrap(), vec![0, 1]);
        assert_eq!(canonical_shortest_path(&g, 2, 0, &dm).unwrap(), vec![1, 0]);
        assert!(canonical_shortest_path(&g, 1, 1, &dm).unwrap().is_empty());
    }

    #[test]
    fn benzene_diameter() {
        let g = parse_smiles("c1ccccc1").unwrap();
        let dm = all_pairs_distance(&g);
        assert_eq!(dm.get(0, 3), 3);
        assert_eq!(dm.max_finite(), Some(3));
    }

    #[test]
    fn fragments_are_unreachable() {
        let g = parse_smiles("C.C").unwrap();
        let dm = all_pairs_distance(&g);
        assert_eq!(dm.get(0, 1), UNREACHABLE);
        assert_eq!(
            canonical_shortest_path(&g, 0, 1, &dm),
            Err(StructureError::Unreachable(0, 1))
        );
        assert_eq!(connected_components(&g), 2);
    }

    #[test]
    fn four_cycle_tie_breaks_through_smallest_parent() {
        // edges: 0:(0,1) 1:(1,2) 2:(2,3) 3:(0,3)
        let g = carbon_graph(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let dm = all_pairs_distance(&g);
        assert_eq!(dm.get(0, 2), 2);
        assert_eq!(canonical_shortest_path(&g, 0, 2, &dm).unwrap(), vec![0, 1]);
        assert_eq!(canonical_shortest_path(&g, 2, 0, &dm).unwrap(), vec![1, 0]);
    }

    #[test]
    fn path_table_matches_single_queries() {
        let g = parse_smiles("C1CC2CCC1C2.CO").unwrap();
        let s = GraphStructure::new(g.clone());
        for i in 0..g.n_nodes() {
            for j in 0..g.n_nodes() {
                let single = canonical_shortest_path(&g, i, j, &s.distances).ok();
                assert_eq!(s.paths.path(i, j).map(<[usize]>::to_vec), single);
            }
        }
    }
}
