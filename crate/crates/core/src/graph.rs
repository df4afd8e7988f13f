//! Per-phase sensor graphs built from learnable node embeddings.
//!
//! Each of the `G` graph slots owns an `N x d` embedding matrix. Its
//! adjacency keeps, for every target node, the `k` most cosine-similar
//! source nodes (self excluded).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PgmaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEmbeddings {
    pub n_nodes: usize,
    pub dim: usize,
    /// One row-major `n_nodes x dim` matrix per slot.
    pub slots: Vec<Vec<f64>>,
}

impl NodeEmbeddings {
    /// Uniform init on `[-1/sqrt(d), 1/sqrt(d)]`; all-zero rows are redrawn.
    pub fn init(n_nodes: usize, dim: usize, n_slots: usize, rng: &mut impl Rng) -> Self {
        assert!(n_nodes > 0 && dim > 0 && n_slots > 0);
        let bound = 1.0 / (dim as f64).sqrt();
        let slots = (0..n_slots)
            .map(|_| {
                let mut m = vec![0.0; n_nodes * dim];
                for row in m.chunks_mut(dim) {
                    loop {
                        row.iter_mut()
                            .for_each(|v| *v = rng.random_range(-bound..=bound));
                        if row.iter().any(|&v| v != 0.0) {
                            break;
                        }
                    }
                }
                m
            })
            .collect();
        NodeEmbeddings {
            n_nodes,
            dim,
            slots,
        }
    }

    pub fn seeded(n_nodes: usize, dim: usize, n_slots: usize, seed: u64) -> Self {
        Self::init(n_nodes, dim, n_slots, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, s: usize) -> &[f64] {
        &self.slots[s]
    }
}

/// Dense symmetric cosine-similarity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Directed 0/1 adjacency; `get(j, i) == 1` means `j` is an in-neighbor of
/// `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    pub n: usize,
    pub k: usize,
    values: Vec<u8>,
    /// In-neighbors of each node, ascending.
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn get(&self, j: usize, i: usize) -> u8 {
        self.values[j * self.n + i]
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Adjacency with no edges at all.
    pub fn empty(n: usize) -> Self {
        Adjacency {
            n,
            k: 0,
            values: vec![0; n * n],
            neighbors: vec![Vec::new(); n],
        }
    }

    /// Builds an adjacency from per-node in-neighbor lists.
    pub fn from_neighbors(n: usize, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        if neighbors.len() != n {
            return Err(PgmaError::Shape(format!(
                "{} neighbor lists for {n} nodes",
                neighbors.len()
            )));
        }
        let mut values = vec![0; n * n];
        let mut k = 0;
        let mut sorted = Vec::with_capacity(n);
        for (i, mut list) in neighbors.into_iter().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j == i || j >= n) {
                return Err(PgmaError::Shape(format!("invalid neighbor list for node {i}")));
            }
            for &j in &list {
                values[j * n + i] = 1;
            }
            k = k.max(list.len());
            sorted.push(list);
        }
        Ok(Adjacency {
            n,
            k,
            values,
            neighbors: sorted,
        })
    }

    /// Edges as `(source, target)` pairs ordered by target then source.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().map(move |&j| (j, i)))
            .collect()
    }
}

/// Row-wise cosine similarity `E_ij = m_i . m_j / (|m_i| |m_j|)`.
pub fn cosine_similarity(m: &[f64], n: usize, d: usize) -> Result<SimilarityMatrix> {
    if m.len() != n * d {
        return Err(PgmaError::Shape(format!(
            "embedding has {} entries, expected {n} x {d}",
            m.len()
        )));
    }
    let norms: Vec<f64> = m
        .chunks(d)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(node) = norms.iter().position(|&v| v == 0.0) {
        return Err(PgmaError::ZeroNorm { node });
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = m[i * d..(i + 1) * d]
                .iter()
                .zip(&m[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            let e = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * n + j] = e;
            values[j * n + i] = e;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Keeps the `k` largest `E[j][i]`, `j != i`, for each target `i`. Ties go
/// to the lower node index.
pub fn topk_adjacency(e: &SimilarityMatrix, k: usize) -> Result<Adjacency> {
    let n = e.n;
    if k == 0 || k + 1 > n {
        return Err(PgmaError::Config(format!(
            "neighbor budget k={k} must lie in [1, {}]",
            n.saturating_sub(1)
        )));
    }
    let mut neighbors = Vec::with_capacity(n);
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i));
        candidates.sort_by(|&a, &b| e.get(b, i).total_cmp(&e.get(a, i)).then(a.cmp(&b)));
        neighbors.push(candidates[..k].to_vec());
    }
    let mut adj = Adjacency::from_neighbors(n, neighbors)?;
    adj.k = k;
    Ok(adj)
}

/// One adjacency per slot, index `s` serving periodic phase bin `s`.
pub fn build_slot_graphs(emb: &NodeEmbeddings, k: usize) -> Result<Vec<Adjacency>> {
    emb.slots
        .iter()
        .map(|m| topk_adjacency(&cosine_similarity(m, emb.n_nodes, emb.dim)?, k))
        .collect()
}

/// Phase bin of a window: `floor((start mod p) * G / p)`.
pub fn assign_slot(window_start: usize, period: usize, n_slots: usize) -> usize {
    let p = period.max(1);
    ((window_start % p) * n_slots.max(1)) / p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_give_all_ones() {
        let m = [0.3, -0.2, 0.3, -0.2, 0.3, -0.2];
        let e = cosine_similarity(&m, 3, 2).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn basis_rows_give_identity() {
        let m = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let e = cosine_similarity(&m, 3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(e.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn hand_computed_cosine() {
        let e = cosine_similarity(&[1.0, 0.0, 1.0, 1.0], 2, 2).unwrap();
        assert!((e.get(0, 1) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((e.get(0, 1) - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn zero_row_names_node() {
        let err = cosine_similarity(&[1.0, 0.0, 0.0, 0.0], 2, 2).unwrap_err();
        assert!(matches!(err, PgmaError::ZeroNorm { node: 1 }));
    }

    #[test]
    fn topk_examples() {
        let e = SimilarityMatrix {
            n: 3,
            values: vec![1.0, 0.9, 0.1, 0.9, 1.0, 0.2, 0.1, 0.2, 1.0],
        };
        let a = topk_adjacency(&e, 1).unwrap();
        assert_eq!(a.in_neighbors(0), [1]);
        assert_eq!(a.in_neighbors(1), [0]);
        assert_eq!(a.in_neighbors(2), [1]);
        assert_eq!(a.get(1, 0), 1);

        let full = topk_adjacency(&e, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(full.get(j, i), u8::from(i != j));
            }
        }
        assert!(topk_adjacency(&e, 0).is_err());
        assert!(topk_adjacency(&e, 3).is_err());
    }

    #[test]
    fn topk_ties_go_to_lower_index() {
        let e = SimilarityMatrix {
            n: 4,
            values: vec![1.0; 16],
        };
        let a = topk_adjacency(&e, 2).unwrap();
        assert_eq!(a.in_neighbors(0), [1, 2]);
        assert_eq!(a.in_neighbors(1), [0, 2]);
        assert_eq!(a.in_neighbors(2), [0, 1]);
        assert_eq!(a.in_neighbors(3), [0, 1]);
    }

    #[test]
    fn slot_graphs() {
        let emb = NodeEmbeddings::seeded(10, 8, 3, 5);
        let graphs = build_slot_graphs(&emb, 3).unwrap();
        assert_eq!(graphs.len(), 3);
        for g in &graphs {
            for i in 0..10 {
                let col: u32 = (0..10).map(|j| u32::from(g.get(j, i))).sum();
                assert_eq!(col, 3);
                assert_eq!(g.get(i, i), 0);
            }
        }

        let mut twin = emb.clone();
        twin.slots[1] = twin.slots[0].clone();
        let graphs = build_slot_graphs(&twin, 3).unwrap();
        assert_eq!(graphs[0], graphs[1]);

        let single = NodeEmbeddings::seeded(10, 8, 1, 5);
        assert_eq!(build_slot_graphs(&single, 3).unwrap().len(), 1);
    }

    #[test]
    fn slot_assignment() {
        assert_eq!(assign_slot(0, 24, 4), 0);
        assert_eq!(assign_slot(6, 24, 4), 1);
        assert_eq!(assign_slot(23, 24, 4), 3);
        assert_eq!(assign_slot(24, 24, 4), 0);
        for t in 0..100 {
            assert_eq!(assign_slot(t, 24, 1), 0);
        }
    }

    #[test]
    fn init_has_no_zero_rows_and_stays_in_bounds() {
        let emb = NodeEmbeddings::seeded(20, 4, 2, 0);
        for m in &emb.slots {
            for row in m.chunks(4) {
                assert!(row.iter().any(|&v| v != 0.0));
                assert!(row.iter().all(|v| v.abs() <= 0.5));
            }
        }
    }
}
