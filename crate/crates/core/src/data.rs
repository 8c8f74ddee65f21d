//! Synthetic data generation, dataset file formats, splits, and bundle
//! persistence.
//!
//! A dataset is a directory: `manifest.json` (format version, sha256
//! checksums, generation recipe), `graph.txt` (`#nodes N` header, one
//! `u v` edge per line), `episodes.txt` (`episode_id,node_id,time_index`
//! lines in cascade order), and `splits.txt` (`episode_id,split`). Files
//! are written to a temp name and renamed into place; loads verify every
//! checksum before parsing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dissemination::{simulate_ic, EdgeProb, ICParams};
use crate::error::{Error, Result};
use crate::graph::{
    proximity_from_cascade, sources_from_cascade, Cascade, Graph, ObservationVector,
    ProximityDegree, SourceIndicator,
};
use crate::scalar::Scalar;
use crate::seeds;

pub const FORMAT_VERSION: u32 = 1;

/// Random-graph families available to the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphKind {
    /// Preferential attachment seeded with a single edge; node `i` joins
    /// with `min(m, i)` edges to distinct targets, so the edge count is
    /// `1 + sum_i min(m, i)` (`2(n-2)+1` for `m = 2`).
    BarabasiAlbert { n: usize, m: usize },
    /// Ring lattice with `k` nearest neighbors, clockwise edges rewired
    /// with probability `rewire`.
    WattsStrogatz { n: usize, k: usize, rewire: f64 },
    ErdosRenyi { n: usize, p: f64 },
    Grid { rows: usize, cols: usize },
}

/// Generate a graph; disconnected outputs are reduced to their largest
/// connected component with nodes relabeled densely in ascending order.
pub fn gen_graph(kind: &GraphKind, seed: u64) -> Result<Graph> {
    let mut rng = seeds::rng(seeds::derive(seed, "gen-graph"));
    let graph = match kind {
        GraphKind::BarabasiAlbert { n, m } => {
            if *n < 2 || *m == 0 {
                return Err(Error::InvalidParam("barabasi_albert needs n >= 2, m >= 1".into()));
            }
            let mut edges: Vec<(u32, u32)> = vec![(0, 1)];
            let mut endpoints: Vec<u32> = vec![0, 1];
            for i in 2..*n as u32 {
                let want = (*m).min(i as usize);
                let mut targets = std::collections::BTreeSet::new();
                while targets.len() < want {
                    let t = endpoints[rng.gen_range(0..endpoints.len())];
                    targets.insert(t);
                }
                for t in targets {
                    edges.push((t, i));
                    endpoints.push(t);
                    endpoints.push(i);
                }
            }
            Graph::new(*n, edges)?
        }
        GraphKind::WattsStrogatz { n, k, rewire } => {
            if *n < 3 || *k == 0 || *k % 2 != 0 || *k >= *n {
                return Err(Error::InvalidParam(
                    "watts_strogatz needs n >= 3 and even k < n".into(),
                ));
            }
            if !(0.0..=1.0).contains(rewire) {
                return Err(Error::InvalidParam("rewire probability outside [0,1]".into()));
            }
            let n32 = *n as u32;
            let mut set: std::collections::BTreeSet<(u32, u32)> = std::collections::BTreeSet::new();
            for u in 0..n32 {
                for j in 1..=(*k / 2) as u32 {
                    let v = (u + j) % n32;
                    set.insert((u.min(v), u.max(v)));
                }
            }
            for u in 0..n32 {
                for j in 1..=(*k / 2) as u32 {
                    let v = (u + j) % n32;
                    let key = (u.min(v), u.max(v));
                    if rng.gen::<f64>() < *rewire && set.contains(&key) {
                        for _ in 0..*n {
                            let w = rng.gen_range(0..n32);
                            let cand = (u.min(w), u.max(w));
                            if w != u && !set.contains(&cand) {
                                set.remove(&key);
                                set.insert(cand);
                                break;
                            }
                        }
                    }
                }
            }
            Graph::new(*n, set.into_iter().collect())?
        }
        GraphKind::ErdosRenyi { n, p } => {
            if *n < 2 || !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidParam("erdos_renyi needs n >= 2, p in [0,1]".into()));
            }
            let mut edges = Vec::new();
            for u in 0..*n as u32 {
                for v in (u + 1)..*n as u32 {
                    if rng.gen::<f64>() < *p {
                        edges.push((u, v));
                    }
                }
            }
            Graph::new(*n, edges)?
        }
        GraphKind::Grid { rows, cols } => {
            if *rows == 0 || *cols == 0 || rows * cols < 2 {
                return Err(Error::InvalidParam("grid needs at least 2 nodes".into()));
            }
            let at = |r: usize, c: usize| (r * cols + c) as u32;
            let mut edges = Vec::new();
            for r in 0..*rows {
                for c in 0..*cols {
                    if c + 1 < *cols {
                        edges.push((at(r, c), at(r, c + 1)));
                    }
                    if r + 1 < *rows {
                        edges.push((at(r, c), at(r + 1, c)));
                    }
                }
            }
            Graph::new(rows * cols, edges)?
        }
    };
    largest_component(&graph)
}

fn largest_component(graph: &Graph) -> Result<Graph> {
    let n = graph.node_count();
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    for start in 0..n as u32 {
        if comp[start as usize] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0usize;
        let mut stack = vec![start];
        comp[start as usize] = id;
        while let Some(u) = stack.pop() {
            size += 1;
            for v in graph.neighbors(u) {
                if comp[v as usize] == usize::MAX {
                    comp[v as usize] = id;
                    stack.push(v);
                }
            }
        }
        sizes.push(size);
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if sizes.len() <= 1 {
        return Ok(graph.clone());
    }
    let keep: Vec<u32> = (0..n as u32).filter(|&v| comp[v as usize] == best).collect();
    let mut remap = vec![u32::MAX; n];
    for (new, &old) in keep.iter().enumerate() {
        remap[old as usize] = new as u32;
    }
    let edges = graph
        .edges()
        .iter()
        .filter(|(u, v)| comp[*u as usize] == best && comp[*v as usize] == best)
        .map(|&(u, v)| (remap[u as usize], remap[v as usize]))
        .collect();
    Graph::new(keep.len(), edges)
}

/// How many sources seed each episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceCount {
    Fixed { count: usize },
    UniformRange { lo: usize, hi: usize },
}

impl SourceCount {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            SourceCount::Fixed { count } => *count,
            SourceCount::UniformRange { lo, hi } => rng.gen_range(*lo..=*hi),
        }
    }
}

/// Episode-generation recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecipe {
    pub count: usize,
    pub edge_prob: f64,
    pub max_rounds: Option<usize>,
    pub source_count: SourceCount,
    /// Fraction of the cascade labeled as sources.
    pub source_fraction: f64,
}

/// Train/validation/test assignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    Ratio { train: f64, val: f64 },
    Counts { train: usize, val: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        // the 2:2:6 protocol
        SplitSpec::Ratio { train: 0.2, val: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

/// Full generation recipe recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenRecipe {
    pub graph: GraphKind,
    pub episodes: EpisodeRecipe,
    pub split: SplitSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u32,
    pub cascade: Cascade,
}

/// Whole graph plus episodes and their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub graph: Graph,
    pub episodes: Vec<Episode>,
    pub splits: Vec<Split>,
    pub recipe: GenRecipe,
    /// Episodes dropped after 100 degenerate resampling attempts.
    pub skipped: usize,
}

impl DatasetBundle {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Observation derived from the cascade (0 = affected).
    pub fn observation<T: Scalar>(&self, idx: usize) -> ObservationVector<T> {
        let mut obs = vec![T::one(); self.graph.node_count()];
        for v in self.episodes[idx].cascade.nodes() {
            obs[v as usize] = T::zero();
        }
        obs
    }

    /// Source indicator labels under the recipe's fraction (0 = source).
    pub fn indicator<T: Scalar>(&self, idx: usize) -> Result<SourceIndicator<T>> {
        let mut cascade = self.episodes[idx].cascade.clone();
        sources_from_cascade(
            &mut cascade,
            T::from_f64(self.recipe.episodes.source_fraction).unwrap(),
            &self.graph,
        )
    }

    /// Proximity degrees over the whole graph (non-cascade nodes 1.0).
    pub fn proximity<T: Scalar>(&self, idx: usize) -> Result<ProximityDegree<T>> {
        proximity_from_cascade(&self.episodes[idx].cascade, &self.graph)
    }
}

/// Generate episodes: sample sources, run the cascade simulator, and split
/// by seeded shuffle. Cascades shorter than 2 are resampled up to 100
/// times, then skipped (counted in `skipped`).
pub fn gen_episodes(graph: &Graph, recipe: &GenRecipe) -> Result<DatasetBundle> {
    let ep = &recipe.episodes;
    if ep.count == 0 {
        return Err(Error::InvalidParam("need at least one episode".into()));
    }
    let ic = ICParams {
        edge_prob: EdgeProb::Uniform(ep.edge_prob),
        max_rounds: ep.max_rounds,
    };
    let n = graph.node_count();
    let mut episodes = Vec::with_capacity(ep.count);
    let mut skipped = 0usize;
    let mut attempt_counter = 0u64;
    for id in 0..ep.count {
        let mut accepted = None;
        for _ in 0..100 {
            let attempt_seed = seeds::derive_indexed(recipe.seed, "episode-attempt", attempt_counter);
            let sim_seed = seeds::derive_indexed(recipe.seed, "episode-sim", attempt_counter);
            attempt_counter += 1;
            let mut rng = seeds::rng(attempt_seed);
            let count = ep.source_count.sample(&mut rng).clamp(1, n);
            let mut ids: Vec<u32> = (0..n as u32).collect();
            ids.shuffle(&mut rng);
            let sources: Vec<u32> = ids[..count].to_vec();
            let (_, mut cascade) = simulate_ic::<f64>(graph, &sources, &ic, sim_seed)?;
            if cascade.len() >= 2 {
                sources_from_cascade::<f64>(&mut cascade, ep.source_fraction, graph)?;
                accepted = Some(cascade);
                break;
            }
        }
        match accepted {
            Some(cascade) => episodes.push(Episode { id: id as u32, cascade }),
            None => skipped += 1,
        }
    }
    if episodes.is_empty() {
        return Err(Error::EmptyDataset("every episode degenerated during generation".into()));
    }

    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut split_rng = seeds::rng(seeds::derive(recipe.seed, "split"));
    order.shuffle(&mut split_rng);
    let (n_train, n_val) = match recipe.split {
        SplitSpec::Ratio { train, val } => {
            if !(train >= 0.0 && val >= 0.0 && train + val <= 1.0) {
                return Err(Error::InvalidParam("split ratios must be nonnegative and sum <= 1".into()));
            }
            let nt = (episodes.len() as f64 * train).floor() as usize;
            let nv = (episodes.len() as f64 * val).floor() as usize;
            (nt, nv)
        }
        SplitSpec::Counts { train, val, test } => {
            if train + val + test != episodes.len() {
                return Err(Error::InvalidParam(format!(
                    "split counts {}+{}+{} != {} generated episodes",
                    train,
                    val,
                    test,
                    episodes.len()
                )));
            }
            (train, val)
        }
    };
    let mut splits = vec![Split::Test; episodes.len()];
    for (pos, &idx) in order.iter().enumerate() {
        splits[idx] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(DatasetBundle {
        graph: graph.clone(),
        episodes,
        splits,
        recipe: recipe.clone(),
        skipped,
    })
}

// ---------------------------------------------------------------------------
// directory persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    files: BTreeMap<String, String>,
    meta: serde_json::Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write a bundle directory atomically: every payload file plus a manifest
/// carrying checksums and metadata.
pub fn write_bundle_dir(
    dir: &Path,
    kind: &str,
    files: &[(&str, Vec<u8>)],
    meta: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        files: BTreeMap::new(),
        meta,
    };
    for (name, bytes) in files {
        manifest.files.insert(name.to_string(), sha256_hex(bytes));
        atomic_write(&dir.join(name), bytes)?;
    }
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    atomic_write(&dir.join("manifest.json"), &manifest_bytes)?;
    Ok(())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a bundle directory, verifying the format version and every file
/// checksum before returning the payloads.
pub fn read_bundle_dir(dir: &Path, kind: &str) -> Result<(BTreeMap<String, Vec<u8>>, serde_json::Value)> {
    let manifest_bytes = std::fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    if manifest.kind != kind {
        return Err(Error::Format(format!(
            "bundle kind '{}' where '{kind}' was expected",
            manifest.kind
        )));
    }
    let mut out = BTreeMap::new();
    for (name, checksum) in &manifest.files {
        let bytes = std::fs::read(dir.join(name))?;
        if &sha256_hex(&bytes) != checksum {
            return Err(Error::Checksum(name.clone()));
        }
        out.insert(name.clone(), bytes);
    }
    Ok((out, manifest.meta))
}

fn graph_to_text(graph: &Graph) -> String {
    let mut s = format!("#nodes {}\n", graph.node_count());
    for &(u, v) in graph.edges() {
        s.push_str(&format!("{u} {v}\n"));
    }
    s
}

fn graph_from_text(text: &str) -> Result<Graph> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty graph file".into()))?;
    let n: usize = header
        .strip_prefix("#nodes ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("bad graph header '{header}'")))?;
    let mut edges = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let u: u32 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad edge line '{line}'")))?;
        let v: u32 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad edge line '{line}'")))?;
        edges.push((u, v));
    }
    Graph::new(n, edges)
}

/// Save a dataset bundle as a directory.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    let mut episodes_txt = String::new();
    for ep in &bundle.episodes {
        for &(node, t) in ep.cascade.entries() {
            episodes_txt.push_str(&format!("{},{},{}\n", ep.id, node, t));
        }
    }
    let mut splits_txt = String::new();
    for (ep, split) in bundle.episodes.iter().zip(&bundle.splits) {
        splits_txt.push_str(&format!("{},{}\n", ep.id, split.as_str()));
    }
    let meta = serde_json::json!({
        "recipe": bundle.recipe,
        "skipped": bundle.skipped,
    });
    write_bundle_dir(
        dir,
        "dataset",
        &[
            ("graph.txt", graph_to_text(&bundle.graph).into_bytes()),
            ("episodes.txt", episodes_txt.into_bytes()),
            ("splits.txt", splits_txt.into_bytes()),
        ],
        meta,
    )
}

/// Load a dataset bundle from a directory.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let (files, meta) = read_bundle_dir(dir, "dataset")?;
    let get = |name: &str| -> Result<&Vec<u8>> {
        files
            .get(name)
            .ok_or_else(|| Error::Format(format!("bundle is missing {name}")))
    };
    let graph = graph_from_text(std::str::from_utf8(get("graph.txt")?).map_err(|_| {
        Error::Format("graph.txt is not utf-8".into())
    })?)?;

    let episodes_txt = std::str::from_utf8(get("episodes.txt")?)
        .map_err(|_| Error::Format("episodes.txt is not utf-8".into()))?;
    let mut grouped: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
    for line in episodes_txt.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad episode line '{line}'")));
        }
        let id: u32 = parts[0].parse().map_err(|_| Error::Format(format!("bad episode id in '{line}'")))?;
        let node: u32 = parts[1].parse().map_err(|_| Error::Format(format!("bad node id in '{line}'")))?;
        let t: u32 = parts[2].parse().map_err(|_| Error::Format(format!("bad time index in '{line}'")))?;
        grouped.entry(id).or_default().push((node, t));
    }

    let splits_txt = std::str::from_utf8(get("splits.txt")?)
        .map_err(|_| Error::Format("splits.txt is not utf-8".into()))?;
    let mut split_map: BTreeMap<u32, Split> = BTreeMap::new();
    for line in splits_txt.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("bad split line '{line}'")))?;
        let id: u32 = id.parse().map_err(|_| Error::Format(format!("bad split id in '{line}'")))?;
        split_map.insert(id, Split::parse(split)?);
    }

    #[derive(Deserialize)]
    struct MetaShape {
        recipe: GenRecipe,
        skipped: usize,
    }
    let meta: MetaShape = serde_json::from_value(meta)?;

    let mut episodes = Vec::new();
    let mut splits = Vec::new();
    for (id, entries) in grouped {
        let mut cascade = Cascade::new(entries)?;
        sources_from_cascade::<f64>(&mut cascade, meta.recipe.episodes.source_fraction, &graph)?;
        let split = split_map
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Format(format!("episode {id} has no split assignment")))?;
        episodes.push(Episode { id, cascade });
        splits.push(split);
    }
    Ok(DatasetBundle { graph, episodes, splits, recipe: meta.recipe, skipped: meta.skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recipe(seed: u64, count: usize, p: f64) -> GenRecipe {
        GenRecipe {
            graph: GraphKind::WattsStrogatz { n: 40, k: 4, rewire: 0.1 },
            episodes: EpisodeRecipe {
                count,
                edge_prob: p,
                max_rounds: Some(2),
                source_count: SourceCount::Fixed { count: 1 },
                source_fraction: 0.05,
            },
            split: SplitSpec::default(),
            seed,
        }
    }

    #[test]
    fn grid_counts() {
        let g = gen_graph(&GraphKind::Grid { rows: 3, cols: 3 }, 0).unwrap();
        assert_eq!(g.node_count(), 9);
        assert_eq!(g.edge_count(), 12);
    }

    #[test]
    fn barabasi_albert_edge_count() {
        let g = gen_graph(&GraphKind::BarabasiAlbert { n: 50, m: 2 }, 3).unwrap();
        assert_eq!(g.node_count(), 50);
        assert_eq!(g.edge_count(), 2 * (50 - 2) + 1);
    }

    #[test]
    fn watts_strogatz_keeps_degree_mass() {
        let g = gen_graph(&GraphKind::WattsStrogatz { n: 30, k: 4, rewire: 0.2 }, 7).unwrap();
        // rewiring preserves the edge count unless duplicates forced a keep
        assert!(g.edge_count() <= 60);
        assert!(g.edge_count() >= 55);
        assert_eq!(g.node_count(), 30);
    }

    #[test]
    fn generators_deterministic() {
        for kind in [
            GraphKind::BarabasiAlbert { n: 30, m: 2 },
            GraphKind::WattsStrogatz { n: 30, k: 4, rewire: 0.3 },
            GraphKind::ErdosRenyi { n: 30, p: 0.2 },
        ] {
            let a = gen_graph(&kind, 11).unwrap();
            let b = gen_graph(&kind, 11).unwrap();
            assert_eq!(a.edges(), b.edges());
        }
    }

    #[test]
    fn sparse_er_reduces_to_largest_component() {
        let g = gen_graph(&GraphKind::ErdosRenyi { n: 60, p: 0.02 }, 5).unwrap();
        // connectivity check by BFS
        let mut seen = vec![false; g.node_count()];
        let mut stack = vec![0u32];
        seen[0] = true;
        let mut count = 0;
        while let Some(u) = stack.pop() {
            count += 1;
            for v in g.neighbors(u) {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    stack.push(v);
                }
            }
        }
        assert_eq!(count, g.node_count());
    }

    #[test]
    fn split_follows_two_two_six() {
        let g = gen_graph(&GraphKind::WattsStrogatz { n: 40, k: 4, rewire: 0.1 }, 1).unwrap();
        let bundle = gen_episodes(&g, &recipe(2, 10, 0.9)).unwrap();
        assert_eq!(bundle.episodes.len(), 10);
        assert_eq!(bundle.indices(Split::Train).len(), 2);
        assert_eq!(bundle.indices(Split::Val).len(), 2);
        assert_eq!(bundle.indices(Split::Test).len(), 6);
        // partition: every episode in exactly one split
        let total: usize = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| bundle.indices(s).len())
            .sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn zero_probability_episodes_are_skipped() {
        let g = gen_graph(&GraphKind::WattsStrogatz { n: 20, k: 4, rewire: 0.0 }, 1).unwrap();
        let mut r = recipe(3, 5, 0.0);
        r.split = SplitSpec::Ratio { train: 0.2, val: 0.2 };
        let err = gen_episodes(&g, &r).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn generation_deterministic() {
        let g = gen_graph(&GraphKind::WattsStrogatz { n: 40, k: 4, rewire: 0.1 }, 1).unwrap();
        let a = gen_episodes(&g, &recipe(5, 12, 0.8)).unwrap();
        let b = gen_episodes(&g, &recipe(5, 12, 0.8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_respect_graph_invariants() {
        let g = gen_graph(&GraphKind::WattsStrogatz { n: 40, k: 4, rewire: 0.1 }, 1).unwrap();
        let bundle = gen_episodes(&g, &recipe(7, 10, 0.9)).unwrap();
        for i in 0..bundle.episodes.len() {
            let obs: Vec<f64> = bundle.observation(i);
            let ind: Vec<f64> = bundle.indicator(i).unwrap();
            let prox: Vec<f64> = bundle.proximity(i).unwrap();
            assert!(obs.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(ind.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(prox.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // sources are affected
            for v in 0..g.node_count() {
                if ind[v] == 0.0 {
                    assert_eq!(obs[v], 0.0);
                }
            }
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let g = gen_graph(&GraphKind::WattsStrogatz { n: 40, k: 4, rewire: 0.1 }, 1).unwrap();
        let bundle = gen_episodes(&g, &recipe(9, 8, 0.9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&bundle, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(bundle, loaded);
    }

    #[test]
    fn corruption_is_detected_before_parsing() {
        let g = gen_graph(&GraphKind::Grid { rows: 3, cols: 3 }, 1).unwrap();
        let mut r = recipe(1, 5, 0.9);
        r.graph = GraphKind::Grid { rows: 3, cols: 3 };
        let bundle = gen_episodes(&g, &r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&bundle, dir.path()).unwrap();

        let path = dir.path().join("episodes.txt");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checksum(_)));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let g = gen_graph(&GraphKind::Grid { rows: 2, cols: 3 }, 1).unwrap();
        let mut r = recipe(1, 5, 0.9);
        r.graph = GraphKind::Grid { rows: 2, cols: 3 };
        let bundle = gen_episodes(&g, &r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&bundle, dir.path()).unwrap();

        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&path, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 99, .. }));
    }
}
