//! Position-aware node embeddings conditioning the coarse-stage network.
//!
//! Anchor-set scheme: `ceil(c * log2(n)^2)` node sets with sizes cycling
//! through `ceil(n / 2^(j mod ceil(log2 n) + 1))`, sampled without
//! replacement. The raw feature of node `v` against set `S_j` is
//! `1 / (d(v, S_j) + 1)` with truncated-BFS hop distance (unreachable
//! gives 0). A fixed seeded affine map projects the raw features to the
//! embedding width; the projection is deterministic given the seed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::scalar::{lit, Scalar};
use crate::seeds;

/// Anchor node sets over the whole graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSets {
    pub sets: Vec<Vec<u32>>,
    pub seed: u64,
}

impl AnchorSets {
    pub fn count(&self) -> usize {
        self.sets.len()
    }
}

/// Sample the anchor sets; deterministic given `(graph, seed)`.
pub fn sample_anchor_sets(graph: &Graph, seed: u64) -> Result<AnchorSets> {
    sample_anchor_sets_scaled(graph, seed, 1.0)
}

/// Anchor sampling with an explicit set-count multiplier `c`.
pub fn sample_anchor_sets_scaled(graph: &Graph, seed: u64, c: f64) -> Result<AnchorSets> {
    let n = graph.node_count();
    if n < 2 {
        return Err(Error::InvalidGraph("anchor sampling needs at least 2 nodes".into()));
    }
    let log_n = (n as f64).log2();
    let k = (c * log_n * log_n).ceil() as usize;
    let cycle = log_n.ceil() as usize;
    let mut rng = seeds::rng(seeds::derive(seed, "anchor-sets"));
    let mut ids: Vec<u32> = (0..n as u32).collect();
    let mut sets = Vec::with_capacity(k);
    for j in 0..k {
        let size = ((n as f64) / 2f64.powi((j % cycle) as i32 + 1)).ceil() as usize;
        let size = size.clamp(1, n);
        ids.shuffle(&mut rng);
        let mut set: Vec<u32> = ids[..size].to_vec();
        set.sort_unstable();
        sets.push(set);
    }
    Ok(AnchorSets { sets, seed })
}

/// Node embeddings: raw anchor-distance features plus the shared affine
/// projection to `dim` columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalEmbedding<T> {
    /// `n x k` raw features, `k` = number of anchor sets.
    pub raw: Matrix<T>,
    /// `k x dim` projection.
    pub proj_w: Matrix<T>,
    /// `1 x dim` offset.
    pub proj_b: Matrix<T>,
}

impl<T: Scalar> PositionalEmbedding<T> {
    /// Projected embedding rows, `n x dim`.
    pub fn rows(&self) -> Matrix<T> {
        let mut out = self.raw.matmul(&self.proj_w);
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + self.proj_b.get(0, c);
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.proj_w.cols()
    }
}

/// Multi-source BFS distance from every node to the nearest anchor of one
/// set, capped at `max_hops` (`u32::MAX` marks unreachable/beyond-cap).
fn multi_source_bfs(graph: &Graph, sources: &[u32], max_hops: u32) -> Vec<u32> {
    let n = graph.node_count();
    let mut dist = vec![u32::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for &s in sources {
        if dist[s as usize] != 0 {
            dist[s as usize] = 0;
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let du = dist[u as usize];
        if du >= max_hops {
            continue;
        }
        for v in graph.neighbors(u) {
            if dist[v as usize] == u32::MAX {
                dist[v as usize] = du + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Crude diameter estimate: double BFS from node 0.
fn diameter_estimate(graph: &Graph) -> u32 {
    if graph.node_count() == 0 {
        return 0;
    }
    let d0 = multi_source_bfs(graph, &[0], u32::MAX);
    let far = d0
        .iter()
        .enumerate()
        .filter(|(_, &d)| d != u32::MAX)
        .max_by_key(|(_, &d)| d)
        .map(|(i, _)| i as u32)
        .unwrap_or(0);
    let d1 = multi_source_bfs(graph, &[far], u32::MAX);
    d1.iter().filter(|&&d| d != u32::MAX).max().copied().unwrap_or(0)
}

/// Compute the positional embedding of every node. The BFS is truncated at
/// twice the diameter estimate; the projection is drawn from `seed`.
pub fn embed_nodes<T: Scalar>(
    graph: &Graph,
    anchors: &AnchorSets,
    dim: usize,
    seed: u64,
) -> Result<PositionalEmbedding<T>> {
    if anchors.sets.is_empty() {
        return Err(Error::InvalidParam("at least one anchor set required".into()));
    }
    let n = graph.node_count();
    for set in &anchors.sets {
        if set.is_empty() {
            return Err(Error::InvalidParam("empty anchor set".into()));
        }
        if set.iter().any(|&v| v as usize >= n) {
            return Err(Error::InvalidGraph("anchor node outside graph".into()));
        }
    }
    let cap = (2 * diameter_estimate(graph)).max(1);
    let k = anchors.sets.len();
    let mut raw = Matrix::zeros(n, k);
    for (j, set) in anchors.sets.iter().enumerate() {
        let dist = multi_source_bfs(graph, set, cap);
        for (v, &d) in dist.iter().enumerate() {
            let feat = if d == u32::MAX {
                T::zero()
            } else {
                T::one() / lit::<T>(d as f64 + 1.0)
            };
            raw.set(v, j, feat);
        }
    }
    let mut rng = seeds::rng(seeds::derive(seed, "positional-projection"));
    let proj_w = Matrix::glorot(k, dim, &mut rng);
    let proj_b = Matrix::zeros(1, dim);
    Ok(PositionalEmbedding { raw, proj_w, proj_b })
}

/// Restrict a whole-graph embedding to a cascade graph: row-select the raw
/// features through `node_map`, keeping the shared projection (whole-graph
/// relative position is preserved).
pub fn restrict_to_cascade<T: Scalar>(
    embedding: &PositionalEmbedding<T>,
    node_map: &[u32],
) -> Result<PositionalEmbedding<T>> {
    for &v in node_map {
        if v as usize >= embedding.raw.rows() {
            return Err(Error::InvalidGraph(format!("node map entry {v} outside embedding")));
        }
    }
    Ok(PositionalEmbedding {
        raw: embedding.raw.select_rows(node_map),
        proj_w: embedding.proj_w.clone(),
        proj_b: embedding.proj_b.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize) -> Graph {
        Graph::new(n, (0..n as u32 - 1).map(|i| (i, i + 1)).collect()).unwrap()
    }

    #[test]
    fn anchor_counts_follow_log_square() {
        let g2 = path_graph(2);
        assert_eq!(sample_anchor_sets(&g2, 0).unwrap().count(), 1);

        let g16 = path_graph(16);
        assert_eq!(sample_anchor_sets(&g16, 0).unwrap().count(), 16);
    }

    #[test]
    fn anchor_sampling_deterministic() {
        let g = path_graph(20);
        let a = sample_anchor_sets(&g, 9).unwrap();
        let b = sample_anchor_sets(&g, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_anchor_sets(&g, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn anchor_sampling_rejects_tiny_graphs() {
        let g = Graph::new(1, vec![]).unwrap();
        assert!(sample_anchor_sets(&g, 0).is_err());
    }

    #[test]
    fn raw_features_on_path() {
        // anchor {0} on the path 0-1-2-3: features 1, 1/2, 1/3, 1/4
        let g = path_graph(4);
        let anchors = AnchorSets { sets: vec![vec![0]], seed: 0 };
        let emb = embed_nodes::<f64>(&g, &anchors, 2, 0).unwrap();
        let col: Vec<f64> = (0..4).map(|v| emb.raw.get(v, 0)).collect();
        assert_eq!(col, vec![1.0, 0.5, 1.0 / 3.0, 0.25]);
    }

    #[test]
    fn member_and_disconnected_features() {
        let g = Graph::new(4, vec![(0, 1), (1, 2)]).unwrap(); // node 3 isolated
        let anchors = AnchorSets { sets: vec![vec![0], vec![3]], seed: 0 };
        let emb = embed_nodes::<f64>(&g, &anchors, 2, 1).unwrap();
        assert_eq!(emb.raw.get(0, 0), 1.0); // member of its own set
        assert_eq!(emb.raw.get(3, 0), 0.0); // unreachable
        assert_eq!(emb.raw.get(3, 1), 1.0);
        assert_eq!(emb.raw.get(0, 1), 0.0);
    }

    #[test]
    fn features_bounded_and_monotone_in_distance() {
        let g = path_graph(10);
        let anchors = AnchorSets { sets: vec![vec![0]], seed: 0 };
        let emb = embed_nodes::<f64>(&g, &anchors, 4, 2).unwrap();
        let mut prev = f64::INFINITY;
        for v in 0..10 {
            let f = emb.raw.get(v, 0);
            assert!((0.0..=1.0).contains(&f));
            assert!(f <= prev);
            prev = f;
        }
    }

    #[test]
    fn automorphism_gives_equal_features() {
        // mirror of the path 0-1-2-3-4 fixes anchor {2}; nodes 0/4 and 1/3
        // must get identical raw features
        let g = path_graph(5);
        let anchors = AnchorSets { sets: vec![vec![2]], seed: 0 };
        let emb = embed_nodes::<f64>(&g, &anchors, 2, 3).unwrap();
        assert_eq!(emb.raw.get(0, 0), emb.raw.get(4, 0));
        assert_eq!(emb.raw.get(1, 0), emb.raw.get(3, 0));
    }

    #[test]
    fn restriction_selects_rows() {
        let g = path_graph(6);
        let anchors = sample_anchor_sets(&g, 4).unwrap();
        let emb = embed_nodes::<f64>(&g, &anchors, 3, 4).unwrap();

        let identity: Vec<u32> = (0..6).collect();
        let same = restrict_to_cascade(&emb, &identity).unwrap();
        assert_eq!(same.rows(), emb.rows());

        let single = restrict_to_cascade(&emb, &[3]).unwrap();
        assert_eq!(single.raw.row(0), emb.raw.row(3));
        assert_eq!(single.rows().row(0), emb.rows().row(3));

        let map = vec![5u32, 0, 2];
        let sub = restrict_to_cascade(&emb, &map).unwrap();
        for (i, &v) in map.iter().enumerate() {
            assert_eq!(sub.raw.row(i), emb.raw.row(v as usize));
        }

        assert!(restrict_to_cascade(&emb, &[9]).is_err());
    }

    #[test]
    fn embedding_deterministic_given_seeds() {
        let g = path_graph(12);
        let anchors = sample_anchor_sets(&g, 7).unwrap();
        let a = embed_nodes::<f64>(&g, &anchors, 8, 11).unwrap();
        let b = embed_nodes::<f64>(&g, &anchors, 8, 11).unwrap();
        assert_eq!(a, b);
    }
}
