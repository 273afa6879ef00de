//! Graphs, the GCN propagation matrix, dataset ingestion, class splits and
//! episode sampling.

mod episode;
mod io;
mod synth;

pub use episode::{apply_label_rate, sample_episode, Episode, LabeledPool};
pub use io::{load_citation_dataset, write_citation_dataset};
pub use synth::{synth_graph_classes, synth_sbm, GraphSetConfig, SbmConfig};

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An undirected attributed graph with optional node or graph labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    /// Sorted, deduplicated, each stored as `(lo, hi)` with `lo < hi`.
    edges: Vec<(usize, usize)>,
    features: Tensor,
    node_labels: Option<Vec<usize>>,
    graph_label: Option<usize>,
}

impl Graph {
    /// Builds a graph; edge orientation and duplicates are normalized away.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Tensor,
    ) -> Result<Self> {
        if features.rows() != num_nodes {
            return Err(Error::Integrity(format!(
                "{} feature rows for {num_nodes} nodes",
                features.rows()
            )));
        }
        let mut norm = Vec::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Integrity(format!(
                    "edge ({u}, {v}) outside 0..{num_nodes}"
                )));
            }
            if u == v {
                return Err(Error::Integrity(format!("self-loop on node {u}")));
            }
            norm.push((u.min(v), u.max(v)));
        }
        norm.sort_unstable();
        norm.dedup();
        Ok(Self {
            num_nodes,
            edges: norm,
            features,
            node_labels: None,
            graph_label: None,
        })
    }

    pub fn with_node_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(Error::Integrity(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn with_graph_label(mut self, label: usize) -> Self {
        self.graph_label = Some(label);
        self
    }

    /// A copy that carries no node or graph labels.
    pub fn without_labels(&self) -> Self {
        Self {
            node_labels: None,
            graph_label: None,
            ..self.clone()
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<usize> {
        self.graph_label
    }

    /// Distinct node labels, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.node_labels.iter().flatten().copied().collect();
        set.into_iter().collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    /// Neighbor lists (excluding self).
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// The subgraph induced by `nodes` (kept in the given order).
    ///
    /// Node labels follow the nodes; the graph label is kept.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Self> {
        let mut remap = HashMap::with_capacity(nodes.len());
        for (new, &old) in nodes.iter().enumerate() {
            if old >= self.num_nodes {
                return Err(Error::Integrity(format!(
                    "node {old} outside 0..{}",
                    self.num_nodes
                )));
            }
            if remap.insert(old, new).is_some() {
                return Err(Error::Integrity(format!("node {old} listed twice")));
            }
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|(u, v)| Some((*remap.get(u)?, *remap.get(v)?)));
        let mut g = Graph::new(nodes.len(), edges, self.features.select_rows(nodes))?;
        if let Some(labels) = &self.node_labels {
            g.node_labels = Some(nodes.iter().map(|&i| labels[i]).collect());
        }
        g.graph_label = self.graph_label;
        Ok(g)
    }

    /// Places the graphs side by side; returns the union and each graph's node offset.
    pub fn disjoint_union(graphs: &[&Graph]) -> Result<(Self, Vec<usize>)> {
        let dim = graphs.first().map_or(0, |g| g.feature_dim());
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut edges = Vec::new();
        let mut data = Vec::new();
        let mut n = 0;
        for g in graphs {
            if g.feature_dim() != dim {
                return Err(Error::dim(
                    "disjoint_union",
                    format!("feature dims {dim} and {}", g.feature_dim()),
                ));
            }
            offsets.push(n);
            edges.extend(g.edges.iter().map(|&(u, v)| (u + n, v + n)));
            data.extend_from_slice(g.features.data());
            n += g.num_nodes;
        }
        let g = Graph::new(n, edges, Tensor::new(n, dim, data)?)?;
        Ok((g, offsets))
    }
}

/// `D^-1/2 (A + I) D^-1/2` as a dense matrix, with `D` the degree of `A + I`.
pub fn propagation_matrix(g: &Graph) -> Tensor {
    let n = g.num_nodes();
    let mut degree = vec![1.0f64; n];
    for &(u, v) in g.edges() {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut a = Tensor::zeros(n, n);
    for (i, s) in inv_sqrt.iter().enumerate() {
        a.set(i, i, s * s);
    }
    for &(u, v) in g.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        a.set(u, v, w);
        a.set(v, u, w);
    }
    a
}

/// Disjoint base (meta-training) and novel (meta-testing) class sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    base: BTreeSet<usize>,
    novel: BTreeSet<usize>,
}

impl ClassSplit {
    pub fn new(
        base: impl IntoIterator<Item = usize>,
        novel: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let base: BTreeSet<usize> = base.into_iter().collect();
        let novel: BTreeSet<usize> = novel.into_iter().collect();
        if base.is_empty() || novel.is_empty() {
            return Err(Error::Config(
                "base and novel class sets must be non-empty".into(),
            ));
        }
        if let Some(c) = base.intersection(&novel).next() {
            return Err(Error::Config(format!("class {c} is both base and novel")));
        }
        Ok(Self { base, novel })
    }

    /// The `n_novel` highest class ids become novel; the rest are base.
    pub fn highest_as_novel(classes: &[usize], n_novel: usize) -> Result<Self> {
        let sorted: BTreeSet<usize> = classes.iter().copied().collect();
        if n_novel == 0 || n_novel >= sorted.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n_novel} of {} classes",
                sorted.len()
            )));
        }
        let cut = sorted.len() - n_novel;
        Self::new(
            sorted.iter().take(cut).copied(),
            sorted.iter().skip(cut).copied(),
        )
    }

    pub fn base(&self) -> &BTreeSet<usize> {
        &self.base
    }

    pub fn novel(&self) -> &BTreeSet<usize> {
        &self.novel
    }
}
