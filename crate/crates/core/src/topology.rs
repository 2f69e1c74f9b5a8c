//! Communication graphs, mixing matrices, hop sets and walk enumeration.
//!
//! Edge `(k, j)` means node `j` sends its parameters to node `k`, matching the
//! row convention of the mixing matrix: `W[k][j]` is the weight node `k` puts on
//! what it receives from `j`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row sums of generated matrices must be this close to one.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Tolerance used when accepting user-supplied matrix files.
pub const LOAD_ROW_SUM_TOL: f64 = 1e-6;
/// Default cap on the number of walks a single enumeration may produce.
pub const DEFAULT_PATH_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid graph size {n}: {reason}")]
    InvalidSize { n: usize, reason: &'static str },
    #[error("edge ({0}, {1}) has an endpoint outside the graph")]
    EdgeOutOfRange(usize, usize),
    #[error("node {node} out of range for graph of {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("mixing matrix is not square: row {row} has {len} entries, expected {n}")]
    NotSquare { row: usize, len: usize, n: usize },
    #[error("mixing matrix entry W[{row}][{col}] = {value} is outside [0, 1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("mixing matrix row {row} sums to {sum}, not 1")]
    RowSum { row: usize, sum: f64 },
    #[error("mixing weight W[{row}][{col}] is positive but ({row}, {col}) is not an edge")]
    Support { row: usize, col: usize },
    #[error("enumerating walks of length {length} from node {origin} needs {count} paths, over the cap of {cap}; use a smaller radius")]
    PathBudget {
        origin: usize,
        length: usize,
        count: u128,
        cap: usize,
    },
    #[error("could not parse matrix file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A directed communication graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    /// `out[j]`: receivers of node `j`, sorted, self included when looped.
    out: Vec<Vec<usize>>,
    /// `inc[k]`: senders into node `k`, sorted, self included when looped.
    inc: Vec<Vec<usize>>,
}

impl Topology {
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::InvalidSize {
                n,
                reason: "a graph needs at least one node",
            });
        }
        let mut set = BTreeSet::new();
        for (k, j) in edges {
            if k >= n || j >= n {
                return Err(TopologyError::EdgeOutOfRange(k, j));
            }
            set.insert((k, j));
        }
        let mut out = vec![Vec::new(); n];
        let mut inc = vec![Vec::new(); n];
        for &(k, j) in &set {
            out[j].push(k);
            inc[k].push(j);
        }
        for list in out.iter_mut().chain(inc.iter_mut()) {
            list.sort_unstable();
        }
        Ok(Self {
            n,
            edges: set,
            out,
            inc,
        })
    }

    /// Bidirectional ring with self-loops.
    pub fn ring(n: usize) -> Result<Self, TopologyError> {
        if n < 2 {
            return Err(TopologyError::InvalidSize {
                n,
                reason: "a ring needs at least two nodes",
            });
        }
        let mut edges = Vec::with_capacity(3 * n);
        for i in 0..n {
            edges.push((i, i));
            edges.push(((i + 1) % n, i));
            edges.push(((i + n - 1) % n, i));
        }
        Self::from_edges(n, edges)
    }

    /// Node `i` sends to `(i + 2^m) mod n` for `m = 0..=floor(log2(n-1))`, plus self-loops.
    pub fn exponential(n: usize) -> Result<Self, TopologyError> {
        if n < 2 {
            return Err(TopologyError::InvalidSize {
                n,
                reason: "an exponential graph needs at least two nodes",
            });
        }
        let mut edges = Vec::new();
        for i in 0..n {
            edges.push((i, i));
            let mut offset = 1;
            while offset < n {
                edges.push(((i + offset) % n, i));
                offset *= 2;
            }
        }
        Self::from_edges(n, edges)
    }

    pub fn fully_connected(n: usize) -> Result<Self, TopologyError> {
        Self::from_edges(n, (0..n).flat_map(|k| (0..n).map(move |j| (k, j))))
    }

    /// The support graph of a mixing matrix: `(k, j)` for every `W[k][j] > 0`.
    pub fn from_mixing(w: &MixingMatrix) -> Self {
        let n = w.n();
        let edges = (0..n).flat_map(|k| (0..n).map(move |j| (k, j)));
        Self::from_edges(n, edges.filter(|&(k, j)| w.get(k, j) > 0.0))
            .expect("a mixing matrix always describes a valid graph")
    }

    /// Union of this graph with another over the same node set.
    pub fn union(&self, other: &Topology) -> Result<Self, TopologyError> {
        if self.n != other.n {
            return Err(TopologyError::InvalidSize {
                n: other.n,
                reason: "cannot merge graphs of different sizes",
            });
        }
        Self::from_edges(self.n, self.edges.iter().chain(other.edges.iter()).copied())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, k: usize, j: usize) -> bool {
        self.edges.contains(&(k, j))
    }

    pub fn has_self_loop(&self, k: usize) -> bool {
        self.has_edge(k, k)
    }

    /// Receivers of `j`, sorted. Includes `j` itself when it has a self-loop.
    pub fn out_neighbors(&self, j: usize) -> &[usize] {
        &self.out[j]
    }

    /// Senders into `k`, sorted. Includes `k` itself when it has a self-loop.
    pub fn in_neighbors(&self, k: usize) -> &[usize] {
        &self.inc[k]
    }

    fn check_node(&self, node: usize) -> Result<(), TopologyError> {
        if node >= self.n {
            return Err(TopologyError::NodeOutOfRange { node, n: self.n });
        }
        Ok(())
    }

    /// Shortest-path distance from `j` to every node; self-loops are ignored.
    pub fn distances_from(&self, j: usize) -> Result<Vec<Option<usize>>, TopologyError> {
        self.check_node(j)?;
        let mut dist = vec![None; self.n];
        dist[j] = Some(0);
        let mut queue = VecDeque::from([j]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.out[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        Ok(dist)
    }

    /// Nodes at shortest-path distance exactly `r` from `j`.
    pub fn r_hop_neighbors(&self, j: usize, r: usize) -> Result<BTreeSet<usize>, TopologyError> {
        let dist = self.distances_from(j)?;
        Ok(dist
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == Some(r))
            .map(|(k, _)| k)
            .collect())
    }

    /// End points of walks of exactly `length` steps from `j` (self-loop steps allowed).
    pub fn walk_reach(&self, j: usize, length: usize) -> Result<BTreeSet<usize>, TopologyError> {
        self.check_node(j)?;
        let mut frontier = BTreeSet::from([j]);
        for _ in 0..length {
            frontier = frontier
                .iter()
                .flat_map(|&u| self.out[u].iter().copied())
                .collect();
        }
        Ok(frontier)
    }

    /// Number of walks of `length` steps starting at `j`, saturating.
    pub fn walk_count(&self, j: usize, length: usize) -> Result<u128, TopologyError> {
        self.check_node(j)?;
        let mut counts = vec![0u128; self.n];
        counts[j] = 1;
        for _ in 0..length {
            let mut next = vec![0u128; self.n];
            for (u, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                for &v in &self.out[u] {
                    next[v] = next[v].saturating_add(c);
                }
            }
            counts = next;
        }
        Ok(counts.into_iter().fold(0u128, u128::saturating_add))
    }

    /// Fails with a budget error when walks of `length` from `j` exceed `cap`.
    pub fn check_path_budget(&self, j: usize, length: usize, cap: usize) -> Result<u128, TopologyError> {
        let count = self.walk_count(j, length)?;
        if count > cap as u128 {
            return Err(TopologyError::PathBudget {
                origin: j,
                length,
                count,
                cap,
            });
        }
        Ok(count)
    }

    /// All walks `(k_1, ..., k_length)` from `j` in lexicographic order.
    pub fn enumerate_paths(&self, j: usize, length: usize, cap: usize) -> Result<PathSet, TopologyError> {
        self.check_path_budget(j, length, cap)?;
        let mut sequences = Vec::new();
        let mut stack = Vec::with_capacity(length);
        self.walk_dfs(j, length, &mut stack, &mut sequences);
        Ok(PathSet {
            origin: j,
            length,
            sequences,
        })
    }

    fn walk_dfs(&self, at: usize, left: usize, stack: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(stack.clone());
            return;
        }
        for &v in &self.out[at] {
            stack.push(v);
            self.walk_dfs(v, left - 1, stack, out);
            stack.pop();
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(TopologyRecord::from(self)).expect("topology serializes")
    }
}

/// Serialized form `{n, edges: [[k, j], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyRecord {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

impl From<&Topology> for TopologyRecord {
    fn from(t: &Topology) -> Self {
        Self {
            n: t.n,
            edges: t.edges.iter().map(|&(k, j)| [k, j]).collect(),
        }
    }
}

impl TryFrom<TopologyRecord> for Topology {
    type Error = TopologyError;

    fn try_from(r: TopologyRecord) -> Result<Self, Self::Error> {
        Topology::from_edges(r.n, r.edges.into_iter().map(|[k, j]| (k, j)))
    }
}

/// Walks of a fixed length from one origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSet {
    pub origin: usize,
    pub length: usize,
    pub sequences: Vec<Vec<usize>>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// A row-stochastic, non-negative weight matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixingRecord", into = "MixingRecord")]
pub struct MixingMatrix {
    n: usize,
    entries: Vec<f64>,
    time_index: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixingRecord {
    rows: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_index: Option<usize>,
}

impl From<MixingMatrix> for MixingRecord {
    fn from(w: MixingMatrix) -> Self {
        Self {
            rows: w.rows(),
            time_index: w.time_index,
        }
    }
}

impl TryFrom<MixingRecord> for MixingMatrix {
    type Error = TopologyError;

    fn try_from(r: MixingRecord) -> Result<Self, Self::Error> {
        let mut w = MixingMatrix::from_rows(r.rows, LOAD_ROW_SUM_TOL)?;
        w.time_index = r.time_index;
        Ok(w)
    }
}

impl MixingMatrix {
    /// Validates shape, entry range and row sums against `tol`.
    pub fn from_rows(rows: Vec<Vec<f64>>, tol: f64) -> Result<Self, TopologyError> {
        let n = rows.len();
        if n == 0 {
            return Err(TopologyError::InvalidSize {
                n,
                reason: "a mixing matrix needs at least one row",
            });
        }
        let mut entries = Vec::with_capacity(n * n);
        for (row, r) in rows.into_iter().enumerate() {
            if r.len() != n {
                return Err(TopologyError::NotSquare { row, len: r.len(), n });
            }
            entries.extend(r);
        }
        let w = Self {
            n,
            entries,
            time_index: None,
        };
        w.validate(tol)?;
        Ok(w)
    }

    fn validate(&self, tol: f64) -> Result<(), TopologyError> {
        for row in 0..self.n {
            let mut sum = 0.0;
            for col in 0..self.n {
                let value = self.get(row, col);
                if !(0.0..=1.0).contains(&value) {
                    return Err(TopologyError::EntryOutOfRange { row, col, value });
                }
                sum += value;
            }
            if (sum - 1.0).abs() > tol {
                return Err(TopologyError::RowSum { row, sum });
            }
        }
        Ok(())
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self {
            n,
            entries,
            time_index: None,
        }
    }

    /// Row `k` puts `1/|N_in(k) ∪ {k}|` on itself and every in-neighbor.
    pub fn uniform(t: &Topology) -> Self {
        let n = t.n();
        let mut entries = vec![0.0; n * n];
        for k in 0..n {
            let mut senders: BTreeSet<usize> = t.in_neighbors(k).iter().copied().collect();
            senders.insert(k);
            let w = 1.0 / senders.len() as f64;
            for j in senders {
                entries[k * n + j] = w;
            }
        }
        Self {
            n,
            entries,
            time_index: None,
        }
    }

    /// Reads whitespace-separated rows; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| TopologyError::Parse {
                        line: i + 1,
                        msg: format!("{tok:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::from_rows(rows, LOAD_ROW_SUM_TOL)
    }

    pub fn save(&self, path: &Path) -> Result<(), TopologyError> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn with_time_index(mut self, t: usize) -> Self {
        self.time_index = Some(t);
        self
    }

    pub fn time_index(&self) -> Option<usize> {
        self.time_index
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.entries[k * self.n + j]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.entries[k * self.n..(k + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|k| self.row(k).to_vec()).collect()
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|k| self.get(k, j)).sum()
    }

    pub fn is_doubly_stochastic(&self) -> bool {
        (0..self.n).all(|j| (self.column_sum(j) - 1.0).abs() <= ROW_SUM_TOL)
    }

    /// Checks that every positive off-diagonal weight sits on an edge of `t`.
    pub fn check_support(&self, t: &Topology) -> Result<(), TopologyError> {
        for k in 0..self.n {
            for j in 0..self.n {
                if k != j && self.get(k, j) > 0.0 && !t.has_edge(k, j) {
                    return Err(TopologyError::Support { row: k, col: j });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for MixingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.n {
            let row: Vec<String> = self.row(k).iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// A graph whose `dominant` node feeds every other node with weight `weight`.
///
/// The base graph is kept and an edge `dominant -> k` is added for every `k`.
/// Each row `k != dominant` spends `weight` on the dominant node and splits the
/// remainder evenly over itself and its other in-neighbors. The dominant row is
/// uniform over its own in-neighbors and itself.
pub fn dominant_node_mixing(
    base: &Topology,
    dominant: usize,
    weight: f64,
) -> Result<(Topology, MixingMatrix), TopologyError> {
    let n = base.n();
    base.check_node(dominant)?;
    if !(0.0..1.0).contains(&weight) {
        return Err(TopologyError::EntryOutOfRange {
            row: 0,
            col: dominant,
            value: weight,
        });
    }
    let star = Topology::from_edges(n, (0..n).map(|k| (k, dominant)))?;
    let topo = base.union(&star)?;
    let mut rows = vec![vec![0.0; n]; n];
    for (k, row) in rows.iter_mut().enumerate() {
        let mut others: BTreeSet<usize> = topo.in_neighbors(k).iter().copied().collect();
        others.insert(k);
        if k == dominant {
            let w = 1.0 / others.len() as f64;
            for j in others {
                row[j] = w;
            }
        } else {
            others.remove(&dominant);
            row[dominant] = weight;
            let w = (1.0 - weight) / others.len() as f64;
            for j in others {
                row[j] = w;
            }
        }
    }
    let w = MixingMatrix::from_rows(rows, ROW_SUM_TOL)?;
    Ok((topo, w))
}
