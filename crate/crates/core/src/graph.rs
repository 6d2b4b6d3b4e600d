//! Text-attributed graphs: loading, validation, neighborhoods, splits and
//! mini-batch schedules.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: node `{node}` lists unknown neighbor `{neighbor}`")]
    DanglingEdge {
        path: PathBuf,
        line: usize,
        node: String,
        neighbor: String,
    },
    #[error("{path}:{line}: duplicate node id `{id}`")]
    DuplicateNodeId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: label `{label}` is not in the label set")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("k must be at least 1")]
    ZeroHops,
    #[error("test size {test_size} must be smaller than the {labeled} labeled nodes")]
    TestSizeTooLarge { test_size: usize, labeled: usize },
    #[error("no labeled training nodes to batch")]
    NoTrainNodes,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Opaque node identifier, unique within a graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    LabeledTrain,
    UnlabeledTest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: NodeId,
    pub text: String,
    pub label: Option<String>,
    /// `None` for nodes that carry no label and so belong to neither side.
    pub split: Option<Split>,
}

/// Supported on-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    /// One JSON object per line: `id`, `text`, `label`, `neighbors`.
    #[default]
    JsonLines,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "jsonl" | "json-lines" => Ok(Self::JsonLines),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    neighbors: Vec<String>,
}

/// An undirected graph whose nodes carry free text and optional labels.
///
/// Immutable after construction apart from split assignment.
#[derive(Debug, Clone)]
pub struct TextAttributedGraph {
    nodes: Vec<NodeRecord>,
    index: HashMap<NodeId, usize>,
    adjacency: Vec<Vec<usize>>,
    labels: Vec<String>,
}

impl TextAttributedGraph {
    /// Builds a graph from in-memory parts. Edges are unordered id pairs.
    pub fn new(
        nodes: Vec<NodeRecord>,
        edges: &[(NodeId, NodeId)],
        labels: Vec<String>,
    ) -> Result<Self> {
        validate_labels(&labels)?;
        let origin = PathBuf::from("<memory>");
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id.as_str().is_empty() || node.text.trim().is_empty() {
                return Err(GraphError::MalformedRecord {
                    path: origin,
                    line: i + 1,
                    reason: "empty id or text".into(),
                });
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateNodeId {
                    path: origin,
                    line: i + 1,
                    id: node.id.to_string(),
                });
            }
            if let Some(label) = &node.label {
                if !labels.contains(label) {
                    return Err(GraphError::UnknownLabel {
                        path: origin,
                        line: i + 1,
                        label: label.clone(),
                    });
                }
            }
        }
        let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
        for (a, b) in edges {
            let (ia, ib) = match (index.get(a), index.get(b)) {
                (Some(&ia), Some(&ib)) => (ia, ib),
                (None, _) => return Err(GraphError::UnknownNode(a.to_string())),
                (_, None) => return Err(GraphError::UnknownNode(b.to_string())),
            };
            if ia == ib {
                return Err(GraphError::MalformedRecord {
                    path: origin,
                    line: ia + 1,
                    reason: format!("self-loop on `{a}`"),
                });
            }
            adjacency[ia].insert(ib);
            adjacency[ib].insert(ia);
        }
        Ok(Self {
            nodes,
            index,
            adjacency: adjacency
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &NodeRecord {
        &self.nodes[idx]
    }

    pub fn index_of(&self, id: &NodeId) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    pub fn record(&self, id: &NodeId) -> Result<&NodeRecord> {
        Ok(&self.nodes[self.index_of(id)?])
    }

    /// Unordered edge list with each edge reported once, `a < b` by file order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for (a, adj) in self.adjacency.iter().enumerate() {
            out.extend(adj.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    /// Neighbor indices of `idx` in file order.
    pub fn adjacent(&self, idx: usize) -> &[usize] {
        &self.adjacency[idx]
    }

    pub fn one_hop_neighbors(&self, v: &NodeId) -> Result<BTreeSet<usize>> {
        let idx = self.index_of(v)?;
        Ok(self.adjacency[idx].iter().copied().collect())
    }

    /// Nodes at shortest-path distance exactly `k` from `v`.
    pub fn k_hop_neighbors(&self, v: &NodeId, k: usize) -> Result<BTreeSet<usize>> {
        if k == 0 {
            return Err(GraphError::ZeroHops);
        }
        let idx = self.index_of(v)?;
        Ok(self.bfs_layers(idx, k).pop().unwrap_or_default())
    }

    /// BFS layers 1..=k around `source`; layer `i` (0-based) holds nodes at
    /// distance `i + 1`. Trailing empty layers are kept so the result always
    /// has length `k`.
    pub fn bfs_layers(&self, source: usize, k: usize) -> Vec<BTreeSet<usize>> {
        let mut dist: HashMap<usize, usize> = HashMap::from([(source, 0)]);
        let mut layers = vec![BTreeSet::new(); k];
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            if d == k {
                continue;
            }
            for &w in &self.adjacency[u] {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(w) {
                    e.insert(d + 1);
                    layers[d].insert(w);
                    queue.push_back(w);
                }
            }
        }
        layers
    }

    /// Union of layers 1..=k in layer order, file order within a layer.
    pub fn neighborhood_within(&self, source: usize, k: usize) -> Vec<usize> {
        self.bfs_layers(source, k).into_iter().flatten().collect()
    }

    pub fn nodes_in_split(&self, split: Split) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].split == Some(split))
            .collect()
    }

    /// Marks exactly `test_size` labeled nodes as test, the rest as train.
    pub fn make_split(&mut self, test_size: usize, seed: u64) -> Result<()> {
        let mut labeled: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].label.is_some())
            .collect();
        if test_size >= labeled.len() {
            return Err(GraphError::TestSizeTooLarge {
                test_size,
                labeled: labeled.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        labeled.shuffle(&mut rng);
        for (rank, &i) in labeled.iter().enumerate() {
            self.nodes[i].split = Some(if rank < test_size {
                Split::UnlabeledTest
            } else {
                Split::LabeledTrain
            });
        }
        Ok(())
    }

    /// Writes the graph in the line-delimited dataset format.
    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let raw = RawRecord {
                id: node.id.to_string(),
                text: node.text.clone(),
                label: node.label.clone(),
                neighbors: self.adjacency[i]
                    .iter()
                    .map(|&j| self.nodes[j].id.to_string())
                    .collect(),
            };
            serde_json::to_writer(&mut *out, &raw)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_labels(&self, out: &mut impl Write) -> std::io::Result<()> {
        for label in &self.labels {
            writeln!(out, "{label}")?;
        }
        Ok(())
    }
}

fn validate_labels(labels: &[String]) -> Result<()> {
    let distinct: BTreeSet<&String> = labels.iter().collect();
    if distinct.len() != labels.len() {
        return Err(GraphError::InvalidLabelSet("duplicate label".into()));
    }
    if labels.len() < 2 {
        return Err(GraphError::InvalidLabelSet(
            "at least two labels are required".into(),
        ));
    }
    if labels.iter().any(|l| l.trim().is_empty()) {
        return Err(GraphError::InvalidLabelSet("empty label".into()));
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a label set file: one label per line, blank lines ignored.
pub fn load_labels(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let labels: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    validate_labels(&labels)?;
    Ok(labels)
}

/// Loads a dataset file against a label set. Labeled nodes start in the
/// training split; unlabeled nodes have no split.
pub fn load_graph(
    path: &Path,
    labels: Vec<String>,
    format: DatasetFormat,
) -> Result<TextAttributedGraph> {
    match format {
        DatasetFormat::JsonLines => load_jsonl(path, labels),
    }
}

fn load_jsonl(path: &Path, labels: Vec<String>) -> Result<TextAttributedGraph> {
    validate_labels(&labels)?;
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut nodes = Vec::new();
    let mut index: HashMap<NodeId, usize> = HashMap::new();
    let mut pending: Vec<(usize, Vec<String>)> = Vec::new();
    let malformed = |line: usize, reason: String| GraphError::MalformedRecord {
        path: path.to_path_buf(),
        line,
        reason,
    };

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
        if raw.id.is_empty() {
            return Err(malformed(lineno, "empty id".into()));
        }
        if raw.text.trim().is_empty() {
            return Err(malformed(
                lineno,
                format!("node `{}` has empty text", raw.id),
            ));
        }
        let label = raw.label.filter(|l| !l.trim().is_empty());
        if let Some(l) = &label {
            if !labels.contains(l) {
                return Err(GraphError::UnknownLabel {
                    path: path.to_path_buf(),
                    line: lineno,
                    label: l.clone(),
                });
            }
        }
        let id = NodeId::new(raw.id);
        if index.contains_key(&id) {
            return Err(GraphError::DuplicateNodeId {
                path: path.to_path_buf(),
                line: lineno,
                id: id.to_string(),
            });
        }
        if raw.neighbors.iter().any(|n| n == id.as_str()) {
            return Err(malformed(lineno, format!("self-loop on `{id}`")));
        }
        index.insert(id.clone(), nodes.len());
        pending.push((lineno, raw.neighbors));
        let split = label.as_ref().map(|_| Split::LabeledTrain);
        nodes.push(NodeRecord {
            id,
            text: raw.text,
            label,
            split,
        });
    }

    let mut edges = Vec::new();
    for (i, (lineno, neighbors)) in pending.into_iter().enumerate() {
        for n in neighbors {
            let n = NodeId::new(n);
            if !index.contains_key(&n) {
                return Err(GraphError::DanglingEdge {
                    path: path.to_path_buf(),
                    line: lineno,
                    node: nodes[i].id.to_string(),
                    neighbor: n.to_string(),
                });
            }
            edges.push((nodes[i].id.clone(), n));
        }
    }
    TextAttributedGraph::new(nodes, &edges, labels).map_err(|e| match e {
        GraphError::MalformedRecord { line, reason, .. } => malformed(line, reason),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniBatch {
    /// 1-based.
    pub step_index: usize,
    pub node_ids: Vec<NodeId>,
}

/// Shuffled one-pass sweeps over the training split, reshuffled each sweep.
/// The final batch of a sweep may be short.
pub fn make_batches(
    graph: &TextAttributedGraph,
    batch_size: usize,
    seed: u64,
    num_steps: usize,
) -> Result<Vec<MiniBatch>> {
    if batch_size == 0 {
        return Err(GraphError::ZeroBatchSize);
    }
    let pool = graph.nodes_in_split(Split::LabeledTrain);
    if pool.is_empty() {
        return Err(GraphError::NoTrainNodes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::with_capacity(num_steps);
    while batches.len() < num_steps {
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size).take(num_steps - batches.len()) {
            batches.push(MiniBatch {
                step_index: batches.len() + 1,
                node_ids: chunk.iter().map(|&i| graph.node(i).id.clone()).collect(),
            });
        }
    }
    Ok(batches)
}
