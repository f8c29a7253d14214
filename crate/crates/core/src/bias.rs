//! Attention bias for the joint graph + text sequence.
//!
//! Positions `0..n` are graph nodes and `n..n+m` are instruction tokens. The
//! bias for query `i` and key `j` is the sum of a learned per-head scalar looked
//! up by relative position class, the graph-to-text mask, and (graph-graph only)
//! the mean of learned per-head bond scalars along the canonical shortest path.

use serde::{Deserialize, Serialize};

use crate::model::tensor::Mat;
use crate::molgraph::bond_vocab_index;
use crate::structure::{DistanceMatrix, GraphStructure, UNREACHABLE};

/// Additive mask value. Finite so softmax and its gradient stay NaN-free.
pub const NEG_LARGE: f64 = -1e9;

/// Relative position classes and their table layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionBuckets {
    /// Text offsets are clipped to `[-text_clip, text_clip]`.
    pub text_clip: usize,
    /// Graph distances at or above this value share one bucket.
    pub graph_clip: usize,
}

impl Default for PositionBuckets {
    fn default() -> Self {
        Self {
            text_clip: 32,
            graph_clip: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionClass {
    TextRel(i64),
    GraphDist(u32),
    Unreachable,
    Cross,
}

impl PositionBuckets {
    pub fn n_text(&self) -> usize {
        2 * self.text_clip + 1
    }

    /// Rows in the encoder position-bias table.
    pub fn n_classes(&self) -> usize {
        self.n_text() + self.graph_clip + 1 + 2
    }

    /// Rows in the decoder causal self-attention table (offsets `0..=text_clip`).
    pub fn n_causal(&self) -> usize {
        self.text_clip + 1
    }

    pub fn index(&self, class: PositionClass) -> usize {
        let n_text = self.n_text();
        match class {
            PositionClass::TextRel(k) => {
                let k = k.clamp(-(self.text_clip as i64), self.text_clip as i64);
                (k + self.text_clip as i64) as usize
            }
            PositionClass::GraphDist(d) => n_text + (d as usize).min(self.graph_clip),
            PositionClass::Unreachable => n_text + self.graph_clip + 1,
            PositionClass::Cross => n_text + self.graph_clip + 2,
        }
    }

    pub fn causal_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i);
        (i - j).min(self.text_clip)
    }
}

/// Relative position class for zero-based query `i` and key `j` with `n` graph
/// nodes in front of the text.
pub fn position_class(i: usize, j: usize, n: usize, dm: &DistanceMatrix) -> PositionClass {
    match (i < n, j < n) {
        (false, false) => PositionClass::TextRel(i as i64 - j as i64),
        (true, true) => match dm.get(i, j) {
            UNREACHABLE => PositionClass::Unreachable,
            d => PositionClass::GraphDist(d),
        },
        _ => PositionClass::Cross,
    }
}

pub fn position_index(i: usize, j: usize, n: usize, dm: &DistanceMatrix, buckets: &PositionBuckets) -> usize {
    buckets.index(position_class(i, j, n, dm))
}

/// Graph queries never see text keys.
pub fn mask_term(i: usize, j: usize, n: usize) -> f64 {
    if i < n && j >= n {
        NEG_LARGE
    } else {
        0.0
    }
}

/// Mean of `edge_table` rows along the canonical path from `i` to `j`; zeros
/// for `i == j` and for cross-fragment pairs.
pub fn path_term(s: &GraphStructure, i: usize, j: usize, edge_table: &Mat) -> Vec<f64> {
    let heads = edge_table.cols();
    let mut out = vec![0.0; heads];
    let Some(path) = s.paths.path(i, j) else {
        return out;
    };
    if path.is_empty() {
        return out;
    }
    for &e in path {
        let row = edge_table.row(bond_vocab_index(s.graph.edges[e].feat));
        for (o, &r) in out.iter_mut().zip(row) {
            *o += r;
        }
    }
    let len = path.len() as f64;
    out.iter_mut().for_each(|o| *o /= len);
    out
}

/// `(n+m) x (n+m)` table of position-bias row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionIndexMatrix {
    pub size: usize,
    pub index: Vec<usize>,
}

impl PositionIndexMatrix {
    pub fn build(s: &GraphStructure, text_len: usize, buckets: &PositionBuckets) -> Self {
        let n = s.n_nodes();
        let size = n + text_len;
        let mut index = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                index.push(position_index(i, j, n, &s.distances, buckets));
            }
        }
        Self { size, index }
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.index[i * self.size + j]
    }
}

/// Learned bias tables shared by every encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTables<'a> {
    /// `n_classes x heads`
    pub position: &'a Mat,
    /// `BOND_VOCAB_SIZE x heads`
    pub edge: &'a Mat,
}

/// Per-head additive bias, laid out `[head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    pub heads: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl BiasMatrix {
    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.data[(h * self.size + i) * self.size + j]
    }

    pub fn head(&self, h: usize) -> &[f64] {
        let t = self.size * self.size;
        &self.data[h * t..(h + 1) * t]
    }
}

/// Everything the encoder needs to build its bias and route bias gradients.
#[derive(Debug, Clone)]
pub struct JointLayout {
    pub n_graph: usize,
    pub n_text: usize,
    pub positions: PositionIndexMatrix,
}

impl JointLayout {
    pub fn new(s: &GraphStructure, text_len: usize, buckets: &PositionBuckets) -> Self {
        Self {
            n_graph: s.n_nodes(),
            n_text: text_len,
            positions: PositionIndexMatrix::build(s, text_len, buckets),
        }
    }

    pub fn len(&self) -> usize {
        self.n_graph + self.n_text
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn assemble_bias(
    s: &GraphStructure,
    text_len: usize,
    tables: &BiasTables<'_>,
    buckets: &PositionBuckets,
) -> BiasMatrix {
    let layout = JointLayout::new(s, text_len, buckets);
    assemble_with_layout(s, &layout, tables)
}

pub fn assemble_with_layout(s: &GraphStructure, layout: &JointLayout, tables: &BiasTables<'_>) -> BiasMatrix {
    let heads = tables.position.cols();
    let size = layout.len();
    let n = layout.n_graph;
    let mut data = vec![0.0; heads * size * size];
    for i in 0..size {
        for j in 0..size {
            let mask = mask_term(i, j, n);
            if mask != 0.0 {
                for h in 0..heads {
                    data[(h * size + i) * size + j] = mask;
                }
                continue;
            }
            let pos = tables.position.row(layout.positions.get(i, j));
            let path = if i < n && j < n && i != j {
                Some(path_term(s, i, j, tables.edge))
            } else {
                None
            };
            for h in 0..heads {
                let mut b = pos[h];
                if let Some(p) = &path {
                    b += p[h];
                }
                data[(h * size + i) * size + j] = b;
            }
        }
    }
    BiasMatrix { heads, size, data }
}

/// Routes a gradient w.r.t. the bias matrix back into the two tables.
/// Masked entries are constants and contribute nothing.
pub fn accumulate_bias_grad(
    s: &GraphStructure,
    layout: &JointLayout,
    dbias: &[f64],
    heads: usize,
    dposition: &mut Mat,
    dedge: &mut Mat,
) {
    let size = layout.len();
    let n = layout.n_graph;
    for i in 0..size {
        for j in 0..size {
            if mask_term(i, j, n) != 0.0 {
                continue;
            }
            let row = layout.positions.get(i, j);
            for h in 0..heads {
                *dposition.at_mut(row, h) += dbias[(h * size + i) * size + j];
            }
            if i < n && j < n && i != j {
                if let Some(path) = s.paths.path(i, j) {
                    let w = 1.0 / path.len() as f64;
                    for &e in path {
                        let r = bond_vocab_index(s.graph.edges[e].feat);
                        for h in 0..heads {
                            *dedge.at_mut(r, h) += w * dbias[(h * size + i) * size + j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{parse_smiles, BondFeature, BondStereo, BondType, BOND_VOCAB_SIZE};

    fn structure(smiles: &str) -> GraphStructure {
        GraphStructure::new(parse_smiles(smiles).unwrap())
    }

    fn random_tables(buckets: &PositionBuckets, heads: usize, seed: u64) -> (Mat, Mat) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = Mat::zeros(buckets.n_classes(), heads);
        let mut e = Mat::zeros(BOND_VOCAB_SIZE, heads);
        p.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        e.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        (p, e)
    }

    #[test]
    fn position_classes_follow_three_cases() {
        // 5-node chain, node 1 and node 4 are 3 hops apart
        let s = structure("CCCCC");
        let b = PositionBuckets::default();
        let n = s.n_nodes();
        assert_eq!(position_class(n + 2, n, n, &s.distances), PositionClass::TextRel(2));
        assert_eq!(position_class(1, 4, n, &s.distances), PositionClass::GraphDist(3));
        assert_eq!(position_class(0, n, n, &s.distances), PositionClass::Cross);
        assert_eq!(position_class(n, 0, n, &s.distances), PositionClass::Cross);
        assert_eq!(
            b.index(PositionClass::TextRel(100)),
            b.index(PositionClass::TextRel(32))
        );
        assert_eq!(
            b.index(PositionClass::GraphDist(25)),
            b.index(PositionClass::GraphDist(20))
        );
        let s = structure("C.C");
        assert_eq!(position_class(0, 1, 2, &s.distances), PositionClass::Unreachable);
    }

    #[test]
    fn bucket_indices_are_distinct() {
        let b = PositionBuckets::default();
        let mut all: Vec<usize> = (-32..=32).map(|k| b.index(PositionClass::TextRel(k))).collect();
        all.extend((0..=20).map(|d| b.index(PositionClass::GraphDist(d))));
        all.push(b.index(PositionClass::Unreachable));
        all.push(b.index(PositionClass::Cross));
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, b.n_classes());
        assert_eq!(*all.last().unwrap(), b.n_classes() - 1);
    }

    #[test]
    fn mask_cases() {
        assert_eq!(mask_term(0, 3, 2), NEG_LARGE);
        assert_eq!(mask_term(3, 0, 2), 0.0);
        assert_eq!(mask_term(0, 1, 2), 0.0);
        assert_eq!(mask_term(2, 3, 2), 0.0);
    }

    #[test]
    fn path_term_means() {
        let (_, mut edge) = random_tables(&PositionBuckets::default(), 3, 1);
        // C=C-C: edge 0 double, edge 1 single
        let s = structure("C=CC");
        assert_eq!(path_term(&s, 1, 1, &edge), vec![0.0; 3]);
        let single = edge.row(bond_vocab_index(BondFeature::SINGLE)).to_vec();
        assert_eq!(path_term(&s, 1, 2, &edge), single);
        let double = edge
            .row(bond_vocab_index(BondFeature::new(BondType::Double, BondStereo::None)))
            .to_vec();
        let got = path_term(&s, 0, 2, &edge);
        for h in 0..3 {
            assert!((got[h] - (single[h] + double[h]) / 2.0).abs() < 1e-15);
        }
        let s = structure("C.C");
        edge.data_mut().fill(1.0);
        assert_eq!(path_term(&s, 0, 1, &edge), vec![0.0; 3]);
    }

    #[test]
    fn single_node_single_token_layout() {
        let s = structure("C");
        let b = PositionBuckets::default();
        let l = JointLayout::new(&s, 1, &b);
        assert_eq!(l.positions.get(0, 0), b.index(PositionClass::GraphDist(0)));
        assert_eq!(l.positions.get(1, 0), b.index(PositionClass::Cross));
        assert_eq!(l.positions.get(1, 1), b.index(PositionClass::TextRel(0)));
        let (p, e) = random_tables(&b, 2, 3);
        let m = assemble_bias(&s, 1, &BiasTables { position: &p, edge: &e }, &b);
        for h in 0..2 {
            assert_eq!(m.get(h, 0, 0), p.at(b.index(PositionClass::GraphDist(0)), h));
            assert_eq!(m.get(h, 0, 1), NEG_LARGE);
            assert_eq!(m.get(h, 1, 0), p.at(b.index(PositionClass::Cross), h));
            assert_eq!(m.get(h, 1, 1), p.at(b.index(PositionClass::TextRel(0)), h));
        }
    }

    #[test]
    fn empty_graph_is_pure_text_bias() {
        let s = GraphStructure::new(crate::molgraph::MolGraph {
            nodes: vec![],
            edges: vec![],
            n_fragments: 0,
        });
        let b = PositionBuckets::default();
        let (p, e) = random_tables(&b, 2, 5);
        let m = assemble_bias(&s, 4, &BiasTables { position: &p, edge: &e }, &b);
        for h in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let k = i as i64 - j as i64;
                    assert_eq!(m.get(h, i, j), p.at(b.index(PositionClass::TextRel(k)), h));
                }
            }
        }
    }

    #[test]
    fn graph_to_text_block_uniformly_masked() {
        let s = structure("c1ccccc1CCl");
        let b = PositionBuckets::default();
        let (p, e) = random_tables(&b, 4, 9);
        let m = assemble_bias(&s, 6, &BiasTables { position: &p, edge: &e }, &b);
        let n = s.n_nodes();
        for h in 0..4 {
            for i in 0..n {
                for j in n..n + 6 {
                    assert_eq!(m.get(h, i, j), NEG_LARGE);
                }
            }
        }
        assert!(m.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn graph_block_is_symmetric_in_position_index() {
        let s = structure("CC(C)C1CCN(C1)c1ccccc1.O");
        let l = JointLayout::new(&s, 5, &PositionBuckets::default());
        let n = s.n_nodes();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(l.positions.get(i, j), l.positions.get(j, i));
            }
        }
    }

    #[test]
    fn bias_ignores_text_content() {
        // assemble_bias takes only a length; two instructions of the same
        // length produce the same matrix by construction, and the graph-graph
        // block is shared across lengths.
        let s = structure("CCN(C)C=O");
        let b = PositionBuckets::default();
        let (p, e) = random_tables(&b, 2, 11);
        let t = BiasTables { position: &p, edge: &e };
        let short = assemble_bias(&s, 3, &t, &b);
        let long = assemble_bias(&s, 9, &t, &b);
        let n = s.n_nodes();
        for h in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(short.get(h, i, j), long.get(h, i, j));
                }
            }
        }
    }
}
