//! Graph, cascade, and label data model.
//!
//! The same immutable [`Graph`] type backs the whole graph and per-episode
//! cascade graphs. Labels derived from a cascade follow one fixed polarity
//! convention throughout the crate: **0 marks a source** in indicator
//! vectors and **0 marks an affected node** in observation vectors. The
//! evaluation code treats value 0 as the positive class.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense per-node real vector over a graph's node set.
pub type NodeVector<T> = Vec<T>;
/// Relative activation order, `k/K` per node; 0 = earliest, 1 = latest or absent.
pub type ProximityDegree<T> = NodeVector<T>;
/// Source labels; ground truth is binary with 0 = source.
pub type SourceIndicator<T> = NodeVector<T>;
/// Affected-node labels; ground truth is binary with 0 = affected.
pub type ObservationVector<T> = NodeVector<T>;

/// Immutable undirected graph with contiguous node ids `0..node_count`.
///
/// Edges are normalized to `(min, max)` pairs and sorted; the adjacency
/// lists carry the index of the undirected edge so per-edge parameters can
/// be looked up while walking neighbors.
#[derive(Clone, Debug, Serialize)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(u32, u32)>,
    #[serde(skip)]
    adj: Arc<Vec<Vec<(u32, u32)>>>,
}

impl<'de> Deserialize<'de> for Graph {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Shadow {
            node_count: usize,
            edges: Vec<(u32, u32)>,
        }
        let s = Shadow::deserialize(deserializer)?;
        Graph::new(s.node_count, s.edges).map_err(serde::de::Error::custom)
    }
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.node_count == other.node_count && self.edges == other.edges
    }
}

impl Graph {
    pub fn new(node_count: usize, edges: Vec<(u32, u32)>) -> Result<Self> {
        let mut normalized = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u as usize >= node_count || v as usize >= node_count {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u},{v}) references node outside 0..{node_count}"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
            }
            normalized.push((u.min(v), u.max(v)));
        }
        normalized.sort_unstable();
        if normalized.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph("duplicate edge".into()));
        }
        let adj = Arc::new(build_adjacency(node_count, &normalized));
        Ok(Self { node_count, edges: normalized, adj })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Sorted normalized edge list.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn neighbors(&self, v: u32) -> impl Iterator<Item = u32> + '_ {
        self.adj[v as usize].iter().map(|&(u, _)| u)
    }

    /// Neighbor list with undirected edge indices.
    pub fn adjacency(&self, v: u32) -> &[(u32, u32)] {
        &self.adj[v as usize]
    }

    pub fn degree(&self, v: u32) -> usize {
        self.adj[v as usize].len()
    }

    /// Shared handle to the neighbor lists (without edge ids), for ops that
    /// outlive a borrow of the graph.
    pub fn neighbor_lists(&self) -> Arc<Vec<Vec<u32>>> {
        Arc::new(
            self.adj
                .iter()
                .map(|l| l.iter().map(|&(u, _)| u).collect())
                .collect(),
        )
    }

    /// Shared handle to the adjacency-with-edge-id lists.
    pub fn adjacency_lists(&self) -> Arc<Vec<Vec<(u32, u32)>>> {
        Arc::clone(&self.adj)
    }

    pub fn has_edge(&self, u: u32, v: u32) -> bool {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).is_ok()
    }
}

fn build_adjacency(n: usize, edges: &[(u32, u32)]) -> Vec<Vec<(u32, u32)>> {
    let mut adj = vec![Vec::new(); n];
    for (idx, &(u, v)) in edges.iter().enumerate() {
        adj[u as usize].push((v, idx as u32));
        adj[v as usize].push((u, idx as u32));
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

/// Time-ordered activation record of one dissemination episode.
///
/// Entries are `(node, time_index)` with non-decreasing time indices and
/// distinct nodes; the first `source_count` entries are the source nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    entries: Vec<(u32, u32)>,
    source_count: usize,
}

impl Cascade {
    pub fn new(entries: Vec<(u32, u32)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidCascade("empty cascade".into()));
        }
        if entries.windows(2).any(|w| w[0].1 > w[1].1) {
            return Err(Error::InvalidCascade("time indices must be non-decreasing".into()));
        }
        let mut seen = BTreeSet::new();
        for &(v, _) in &entries {
            if !seen.insert(v) {
                return Err(Error::InvalidCascade(format!("node {v} appears twice")));
            }
        }
        Ok(Self { entries, source_count: 1 })
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(v, _)| v)
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    /// Validate that every cascade node exists in `host`.
    pub fn check_against(&self, host: &Graph) -> Result<()> {
        for &(v, _) in &self.entries {
            if v as usize >= host.node_count() {
                return Err(Error::InvalidCascade(format!(
                    "cascade node {v} outside host graph of {} nodes",
                    host.node_count()
                )));
            }
        }
        Ok(())
    }
}

/// Build the cascade graph: the subgraph on the cascade nodes plus every
/// incident edge. Endpoints outside the cascade are pulled in so all edges
/// are realizable; the returned `node_map` sends cascade-graph ids back to
/// whole-graph ids (ascending order).
pub fn build_cascade_graph(whole: &Graph, cascade: &Cascade) -> Result<(Graph, Vec<u32>)> {
    cascade.check_against(whole)?;
    let in_cascade: BTreeSet<u32> = cascade.nodes().collect();
    let mut node_set: BTreeSet<u32> = in_cascade.clone();
    let mut kept_edges = Vec::new();
    for &(u, v) in whole.edges() {
        if in_cascade.contains(&u) || in_cascade.contains(&v) {
            node_set.insert(u);
            node_set.insert(v);
            kept_edges.push((u, v));
        }
    }
    let node_map: Vec<u32> = node_set.into_iter().collect();
    let lookup: std::collections::HashMap<u32, u32> = node_map
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new as u32))
        .collect();
    let edges = kept_edges
        .into_iter()
        .map(|(u, v)| (lookup[&u], lookup[&v]))
        .collect();
    let graph = Graph::new(node_map.len(), edges)?;
    Ok((graph, node_map))
}

/// Source proximity degrees: the node at cascade position `k` gets `k/K`
/// (`K = len - 1`); host nodes outside the cascade get 1.0.
pub fn proximity_from_cascade<T: Scalar>(cascade: &Cascade, host: &Graph) -> Result<ProximityDegree<T>> {
    cascade.check_against(host)?;
    if cascade.len() < 2 {
        return Err(Error::DegenerateCascade(cascade.len()));
    }
    let big_k = T::from_usize(cascade.len() - 1).unwrap();
    let mut values = vec![T::one(); host.node_count()];
    for (k, &(v, _)) in cascade.entries().iter().enumerate() {
        values[v as usize] = T::from_usize(k).unwrap() / big_k;
    }
    Ok(values)
}

/// Number of source entries implied by the labeling fraction.
pub fn source_count_for_len<T: Scalar>(len: usize, fraction: T) -> usize {
    let k = (fraction * T::from_usize(len).unwrap()).ceil();
    (k.to_usize().unwrap_or(1)).max(1)
}

/// Source indicator labels: the first `max(1, ceil(fraction * len))` cascade
/// entries get 0 (source) and every other host node gets 1. Also records the
/// implied source count on the cascade.
pub fn sources_from_cascade<T: Scalar>(
    cascade: &mut Cascade,
    fraction: T,
    host: &Graph,
) -> Result<SourceIndicator<T>> {
    cascade.check_against(host)?;
    if cascade.is_empty() {
        return Err(Error::InvalidCascade("empty cascade".into()));
    }
    if fraction <= T::zero() || fraction > T::one() {
        return Err(Error::InvalidParam(format!("source fraction {fraction} outside (0,1]")));
    }
    let k_s = source_count_for_len(cascade.len(), fraction);
    cascade.source_count = k_s;
    let mut values = vec![T::one(); host.node_count()];
    for &(v, _) in &cascade.entries[..k_s] {
        values[v as usize] = T::zero();
    }
    Ok(values)
}

/// Decode a relaxed indicator into a source set: `{v : vec[v] < threshold}`
/// under the 0 = source convention.
pub fn indicator_to_sources<T: Scalar>(vec: &[T], threshold: T) -> BTreeSet<u32> {
    vec.iter()
        .enumerate()
        .filter(|(_, &x)| x < threshold)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Decode the `k` most source-like nodes (smallest values; ties broken by
/// ascending node id).
pub fn decode_top_k<T: Scalar>(vec: &[T], k: usize) -> BTreeSet<u32> {
    let mut order: Vec<u32> = (0..vec.len() as u32).collect();
    order.sort_by(|&a, &b| {
        vec[a as usize]
            .partial_cmp(&vec[b as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.into_iter().take(k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn path_graph(n: usize) -> Graph {
        Graph::new(n, (0..n as u32 - 1).map(|i| (i, i + 1)).collect()).unwrap()
    }

    #[test]
    fn rejects_malformed_graphs() {
        assert!(Graph::new(3, vec![(0, 0)]).is_err());
        assert!(Graph::new(3, vec![(0, 3)]).is_err());
        assert!(Graph::new(3, vec![(0, 1), (1, 0)]).is_err());
    }

    #[test]
    fn adjacency_is_symmetric() {
        let g = Graph::new(4, vec![(0, 1), (1, 2), (0, 3)]).unwrap();
        for u in 0..4u32 {
            for v in g.neighbors(u) {
                assert!(g.neighbors(v).any(|w| w == u));
            }
        }
    }

    #[test]
    fn cascade_graph_on_path() {
        // path 0-1-2-3, cascade [(1,0),(2,1)]: all three edges touch the cascade
        let g = path_graph(4);
        let cascade = Cascade::new(vec![(1, 0), (2, 1)]).unwrap();
        let (cg, map) = build_cascade_graph(&g, &cascade).unwrap();
        assert_eq!(map, vec![0, 1, 2, 3]);
        assert_eq!(cg.edge_count(), 3);
        assert_eq!(cg.edges(), &[(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn cascade_graph_on_star() {
        let star = Graph::new(5, vec![(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        let cascade = Cascade::new(vec![(0, 0)]).unwrap();
        let (cg, map) = build_cascade_graph(&star, &cascade).unwrap();
        assert_eq!(map.len(), 5);
        assert_eq!(cg.edge_count(), 4);
    }

    #[test]
    fn cascade_graph_matches_brute_force_on_random_graph() {
        // node set must equal the 1-hop closure of the cascade under the
        // incident-edge definition
        let mut rng = crate::seeds::rng(11);
        let n = 100usize;
        let mut edges = Vec::new();
        for u in 0..n as u32 {
            for v in (u + 1)..n as u32 {
                if rng.gen::<f64>() < 0.04 {
                    edges.push((u, v));
                }
            }
        }
        let g = Graph::new(n, edges).unwrap();
        let mut ids: Vec<u32> = (0..n as u32).collect();
        ids.shuffle(&mut rng);
        let cascade_nodes: Vec<u32> = ids[..10].to_vec();
        let cascade =
            Cascade::new(cascade_nodes.iter().enumerate().map(|(k, &v)| (v, k as u32)).collect())
                .unwrap();
        let (cg, map) = build_cascade_graph(&g, &cascade).unwrap();

        // brute-force edge filter
        let ds: BTreeSet<u32> = cascade_nodes.iter().copied().collect();
        let mut expect_nodes: BTreeSet<u32> = ds.clone();
        let mut expect_edges = 0usize;
        for &(u, v) in g.edges() {
            if ds.contains(&u) || ds.contains(&v) {
                expect_nodes.insert(u);
                expect_nodes.insert(v);
                expect_edges += 1;
            }
        }
        assert_eq!(map.iter().copied().collect::<BTreeSet<_>>(), expect_nodes);
        assert_eq!(cg.edge_count(), expect_edges);
        // every edge of the result touches the cascade
        for &(u, v) in cg.edges() {
            let (wu, wv) = (map[u as usize], map[v as usize]);
            assert!(ds.contains(&wu) || ds.contains(&wv));
        }
    }

    #[test]
    fn cascade_node_outside_graph_is_rejected() {
        let g = path_graph(3);
        let cascade = Cascade::new(vec![(5, 0)]).unwrap();
        assert!(build_cascade_graph(&g, &cascade).is_err());
    }

    #[test]
    fn proximity_values() {
        let g = path_graph(5);
        let c = Cascade::new((0..5).map(|i| (i as u32, i as u32)).collect()).unwrap();
        let x: Vec<f64> = proximity_from_cascade(&c, &g).unwrap();
        assert_eq!(x, vec![0.0, 0.25, 0.5, 0.75, 1.0]);

        let c2 = Cascade::new(vec![(0, 0), (1, 0)]).unwrap();
        let x2: Vec<f64> = proximity_from_cascade(&c2, &g).unwrap();
        assert_eq!(&x2[..2], &[0.0, 1.0]);
    }

    #[test]
    fn proximity_fills_non_cascade_nodes_with_one() {
        let g = path_graph(8);
        let c = Cascade::new((0..5).map(|i| (i as u32, i as u32)).collect()).unwrap();
        let x: Vec<f64> = proximity_from_cascade(&c, &g).unwrap();
        assert_eq!(&x[5..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn proximity_rejects_degenerate_cascade() {
        let g = path_graph(3);
        let c = Cascade::new(vec![(0, 0)]).unwrap();
        assert!(matches!(
            proximity_from_cascade::<f64>(&c, &g),
            Err(Error::DegenerateCascade(1))
        ));
    }

    #[test]
    fn source_labeling_follows_ceil_rule() {
        let g = path_graph(150);
        let mk = |len: usize| {
            Cascade::new((0..len).map(|i| (i as u32, i as u32)).collect()).unwrap()
        };
        let mut c = mk(100);
        let ind: Vec<f64> = sources_from_cascade(&mut c, 0.05, &g).unwrap();
        assert_eq!(c.source_count(), 5);
        assert_eq!(ind.iter().filter(|&&x| x == 0.0).count(), 5);

        let mut c = mk(10);
        sources_from_cascade::<f64>(&mut c, 0.05, &g).unwrap();
        assert_eq!(c.source_count(), 1);

        let mut c = mk(40);
        sources_from_cascade::<f64>(&mut c, 0.05, &g).unwrap();
        assert_eq!(c.source_count(), 2);
    }

    #[test]
    fn indicator_decode() {
        let sources = indicator_to_sources(&[0.1, 0.9, 0.4], 0.5);
        assert_eq!(sources, BTreeSet::from([0, 2]));
        assert!(indicator_to_sources(&[1.0, 1.0], 0.5).is_empty());
    }

    #[test]
    fn label_roundtrip_through_decode() {
        let g = path_graph(40);
        let mut c = Cascade::new((0..40).map(|i| (i as u32, i as u32)).collect()).unwrap();
        let ind: Vec<f64> = sources_from_cascade(&mut c, 0.05, &g).unwrap();
        let decoded = indicator_to_sources(&ind, 0.5);
        let expect: BTreeSet<u32> = c.nodes().take(c.source_count()).collect();
        assert_eq!(decoded, expect);
    }

    #[test]
    fn top_k_decode_breaks_ties_by_id() {
        let scores = [0.5, 0.2, 0.2, 0.9];
        assert_eq!(decode_top_k(&scores, 2), BTreeSet::from([1, 2]));
    }

    #[test]
    fn removing_cascade_nodes_leaves_edgeless_graph() {
        let mut rng = crate::seeds::rng(5);
        let n = 30usize;
        let mut edges = Vec::new();
        for u in 0..n as u32 {
            for v in (u + 1)..n as u32 {
                if rng.gen::<f64>() < 0.1 {
                    edges.push((u, v));
                }
            }
        }
        let g = Graph::new(n, edges).unwrap();
        let cascade = Cascade::new(vec![(3, 0), (7, 1), (12, 2)]).unwrap();
        let (cg, map) = build_cascade_graph(&g, &cascade).unwrap();
        let ds: BTreeSet<u32> = cascade.nodes().collect();
        for &(u, v) in cg.edges() {
            assert!(ds.contains(&map[u as usize]) || ds.contains(&map[v as usize]));
        }
    }

    proptest! {
        #[test]
        fn proximity_non_decreasing_along_cascade(len in 2usize..30) {
            let g = path_graph(40);
            let c = Cascade::new((0..len).map(|i| (i as u32, i as u32)).collect()).unwrap();
            let x: Vec<f64> = proximity_from_cascade(&c, &g).unwrap();
            let along: Vec<f64> = c.nodes().map(|v| x[v as usize]).collect();
            prop_assert!(along.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn permutation_consistency(seed in 0u64..500) {
            let mut rng = crate::seeds::rng(seed);
            let n = 12usize;
            let mut edges = Vec::new();
            for u in 0..n as u32 {
                for v in (u + 1)..n as u32 {
                    if rng.gen::<f64>() < 0.3 { edges.push((u, v)); }
                }
            }
            let g = Graph::new(n, edges.clone()).unwrap();
            let mut perm: Vec<u32> = (0..n as u32).collect();
            perm.shuffle(&mut rng);
            let pg = Graph::new(
                n,
                edges.iter().map(|&(u, v)| (perm[u as usize], perm[v as usize])).collect(),
            ).unwrap();

            let cascade_nodes = vec![1u32, 4, 9];
            let c = Cascade::new(cascade_nodes.iter().enumerate().map(|(k, &v)| (v, k as u32)).collect()).unwrap();
            let pc = Cascade::new(cascade_nodes.iter().enumerate().map(|(k, &v)| (perm[v as usize], k as u32)).collect()).unwrap();

            let x: Vec<f64> = proximity_from_cascade(&c, &g).unwrap();
            let px: Vec<f64> = proximity_from_cascade(&pc, &pg).unwrap();
            for v in 0..n {
                prop_assert!((x[v] - px[perm[v] as usize]).abs() < 1e-15);
            }

            let (cg, map) = build_cascade_graph(&g, &c).unwrap();
            let (pcg, pmap) = build_cascade_graph(&pg, &pc).unwrap();
            prop_assert_eq!(cg.edge_count(), pcg.edge_count());
            let mapped: BTreeSet<u32> = map.iter().map(|&v| perm[v as usize]).collect();
            let pset: BTreeSet<u32> = pmap.iter().copied().collect();
            prop_assert_eq!(mapped, pset);
        }
    }
}
