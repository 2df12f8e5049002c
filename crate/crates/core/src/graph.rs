//! Immutable directed graphs stored as per-target in-edge lists.
//!
//! Edges are numbered globally in target-major order: all in-edges of node 0,
//! then node 1, and so on, with sources ascending inside each target. Edge
//! removal never touches the graph; it goes through an [`EdgeMask`].

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(tag: &str) -> Option<Split> {
        match tag {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-edge activity flags; `true` keeps the edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask(Vec<bool>);

impl EdgeMask {
    pub fn all(num_edges: usize) -> Self {
        EdgeMask(vec![true; num_edges])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        EdgeMask(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, e: usize) -> bool {
        self.0[e]
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn num_active(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Copy of this mask with the given edges switched off.
    pub fn without(&self, edges: &[usize]) -> EdgeMask {
        let mut m = self.0.clone();
        for &e in edges {
            m[e] = false;
        }
        EdgeMask(m)
    }

    /// True when every edge active here is also active in `other`.
    pub fn is_subset_of(&self, other: &EdgeMask) -> bool {
        self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

/// Summary of what `build_graph` discarded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub self_loops_dropped: usize,
    /// Directed edges discarded as repeats, counted after undirected doubling.
    pub duplicates_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct Graph {
    num_nodes: usize,
    in_offsets: Vec<usize>,
    edge_src: Arc<[usize]>,
    edge_dst: Arc<[usize]>,
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    splits: Vec<Option<Split>>,
    mean_in_degree: f64,
}

/// Inputs to [`Graph::build`] besides the edge list.
#[derive(Debug, Clone)]
pub struct NodeData {
    pub features: Tensor,
    /// Empty for graphs without node labels.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Empty, or one entry per node.
    pub splits: Vec<Option<Split>>,
}

impl Graph {
    /// Build from an edge list.
    ///
    /// Self-loops are dropped with a warning, duplicate directed edges
    /// collapse to one, and undirected input yields both directions.
    pub fn build(edges: &[(usize, usize)], directed: bool, nodes: NodeData) -> Result<(Graph, BuildReport)> {
        let NodeData {
            features,
            labels,
            num_classes,
            mut splits,
        } = nodes;
        if features.shape().len() != 2 {
            return Err(Error::dim("build_graph", format!("features must be a matrix, got {:?}", features.shape())));
        }
        let n = features.rows();
        if !labels.is_empty() && labels.len() != n {
            return Err(Error::dim("build_graph", format!("{} labels for {} nodes", labels.len(), n)));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "node {i} has label {y} but num_classes is {num_classes}"
            )));
        }
        if splits.is_empty() {
            splits = vec![None; n];
        } else if splits.len() != n {
            return Err(Error::dim("build_graph", format!("{} split entries for {} nodes", splits.len(), n)));
        }

        let mut report = BuildReport::default();
        let mut directed_edges = Vec::with_capacity(edges.len() * if directed { 1 } else { 2 });
        for (k, &(s, t)) in edges.iter().enumerate() {
            if s >= n || t >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge #{k} ({s}, {t}) references a node outside 0..{n}"
                )));
            }
            if s == t {
                report.self_loops_dropped += 1;
                continue;
            }
            directed_edges.push((t, s));
            if !directed {
                directed_edges.push((s, t));
            }
        }
        if report.self_loops_dropped > 0 {
            log::warn!("dropped {} self-loop(s)", report.self_loops_dropped);
        }
        directed_edges.sort_unstable();
        let before = directed_edges.len();
        directed_edges.dedup();
        report.duplicates_dropped = before - directed_edges.len();

        let mut in_offsets = vec![0usize; n + 1];
        for &(t, _) in &directed_edges {
            in_offsets[t + 1] += 1;
        }
        for j in 0..n {
            in_offsets[j + 1] += in_offsets[j];
        }
        let edge_dst: Arc<[usize]> = directed_edges.iter().map(|&(t, _)| t).collect();
        let edge_src: Arc<[usize]> = directed_edges.iter().map(|&(_, s)| s).collect();
        let mean_in_degree = if n == 0 { 0.0 } else { edge_src.len() as f64 / n as f64 };

        Ok((
            Graph {
                num_nodes: n,
                in_offsets,
                edge_src,
                edge_dst,
                features,
                labels,
                num_classes,
                splits,
                mean_in_degree,
            },
            report,
        ))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.row_width()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty()
    }

    pub fn split(&self, node: usize) -> Option<Split> {
        self.splits[node]
    }

    pub fn splits(&self) -> &[Option<Split>] {
        &self.splits
    }

    /// Nodes in `split`, ascending.
    pub fn nodes_in(&self, split: Split) -> Vec<usize> {
        (0..self.num_nodes)
            .filter(|&v| self.splits[v] == Some(split))
            .collect()
    }

    pub fn mean_in_degree(&self) -> f64 {
        self.mean_in_degree
    }

    pub fn edge_src(&self) -> &Arc<[usize]> {
        &self.edge_src
    }

    pub fn edge_dst(&self) -> &Arc<[usize]> {
        &self.edge_dst
    }

    pub fn edge(&self, e: usize) -> (usize, usize) {
        (self.edge_src[e], self.edge_dst[e])
    }

    /// Global edge ids of `j`'s in-edges (all of them, ignoring any mask).
    pub fn in_edge_range(&self, j: usize) -> std::ops::Range<usize> {
        self.in_offsets[j]..self.in_offsets[j + 1]
    }

    /// Global id of edge `(src, dst)`, if present.
    pub fn find_edge(&self, src: usize, dst: usize) -> Option<usize> {
        let r = self.in_edge_range(dst);
        self.edge_src[r.clone()]
            .binary_search(&src)
            .ok()
            .map(|k| r.start + k)
    }

    pub fn full_mask(&self) -> EdgeMask {
        EdgeMask::all(self.num_edges())
    }

    /// Active in-edges of `j` under `mask` (all in-edges when `mask` is `None`).
    pub fn active_in_edges<'a>(&'a self, j: usize, mask: Option<&'a EdgeMask>) -> impl Iterator<Item = usize> + 'a {
        self.in_edge_range(j)
            .filter(move |&e| mask.map_or(true, |m| m.is_active(e)))
    }

    pub fn in_degree(&self, j: usize, mask: Option<&EdgeMask>) -> usize {
        match mask {
            None => self.in_offsets[j + 1] - self.in_offsets[j],
            Some(_) => self.active_in_edges(j, mask).count(),
        }
    }

    /// Nodes that reach `j` along at most `depth` active edges, excluding `j`.
    pub fn l_hop_in_neighborhood(&self, j: usize, depth: usize, mask: Option<&EdgeMask>) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut frontier = vec![j];
        for _ in 0..depth {
            let mut next = Vec::new();
            for &v in &frontier {
                for e in self.active_in_edges(v, mask) {
                    let s = self.edge_src[e];
                    if s != j && seen.insert(s) {
                        next.push(s);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        seen
    }

    /// Fraction of active directed edges joining same-label endpoints.
    pub fn edge_homophily(&self, mask: Option<&EdgeMask>) -> Result<f64> {
        if !self.has_labels() {
            return Err(Error::InvalidArgument("edge homophily needs node labels".into()));
        }
        let mut total = 0usize;
        let mut same = 0usize;
        for e in 0..self.num_edges() {
            if mask.map_or(true, |m| m.is_active(e)) {
                total += 1;
                if self.labels[self.edge_src[e]] == self.labels[self.edge_dst[e]] {
                    same += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::EmptyGraph);
        }
        Ok(same as f64 / total as f64)
    }

    /// Same graph with different node data; used to attach relabelled or
    /// re-featurised data without rebuilding the adjacency.
    pub fn with_node_data(&self, features: Tensor, labels: Vec<usize>) -> Result<Graph> {
        if features.rows() != self.num_nodes || (!labels.is_empty() && labels.len() != self.num_nodes) {
            return Err(Error::dim("with_node_data", "row count changed"));
        }
        Ok(Graph {
            features,
            labels,
            ..self.clone()
        })
    }

    /// Copy keeping only the edges active in `mask`; edge ids are renumbered.
    pub fn subgraph(&self, mask: &EdgeMask) -> Result<Graph> {
        if mask.len() != self.num_edges() {
            return Err(Error::dim("subgraph", format!("mask of {} for {} edges", mask.len(), self.num_edges())));
        }
        let mut in_offsets = vec![0usize; self.num_nodes + 1];
        let mut src = Vec::with_capacity(mask.num_active());
        let mut dst = Vec::with_capacity(mask.num_active());
        for j in 0..self.num_nodes {
            for e in self.active_in_edges(j, Some(mask)) {
                src.push(self.edge_src[e]);
                dst.push(j);
            }
            in_offsets[j + 1] = src.len();
        }
        let n = self.num_nodes;
        Ok(Graph {
            in_offsets,
            mean_in_degree: if n == 0 { 0.0 } else { src.len() as f64 / n as f64 },
            edge_src: src.into(),
            edge_dst: dst.into(),
            ..self.clone()
        })
    }
}
