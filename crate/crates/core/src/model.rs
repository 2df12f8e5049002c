//! Node- and graph-level classifiers built on the attention layers.
//!
//! Node model:
//! `h = LReLU(x W_in + b_in)`, `h' = layers(h)`,
//! `y = softmax(LReLU([h ‖ h']) W_out + b_out)`.
//!
//! Graph model: same hidden features, summed per graph, then
//! `LReLU(sum) W_out + b_out` with a sigmoid for binary targets.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, ActiveEdges, AttentionLayerParams, GcnLayerParams, HeadVars, Mechanism};
use crate::error::{Error, Result};
use crate::graph::{EdgeMask, Graph, NodeData};
use crate::tensor::{bce_term, PROB_FLOOR};
use crate::tensor::{Tape, Tensor, Var};

/// LeakyReLU slope for the input projection and output head.
pub const MLP_SLOPE: f64 = 0.01;

const CHECKPOINT_FORMAT: &str = "car-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NodeClassification,
    GraphClassification,
    GraphRegression,
}

impl Task {
    pub fn is_graph_level(self) -> bool {
        !matches!(self, Task::NodeClassification)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Attention(AttentionLayerParams),
    Gcn(GcnLayerParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub task: Task,
    /// Per-category embedding table; when present, column 0 of the node
    /// features holds the category id.
    pub embedding: Option<Tensor>,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub layers: Vec<Layer>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Hyperparameters for [`Model::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub task: Task,
    /// `None` builds GCN layers instead of attention.
    pub mechanism: Option<Mechanism>,
    pub in_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Number of classes for node tasks; ignored for graph tasks (one output).
    pub outputs: usize,
    /// Size of the category embedding table for graph tasks, if any.
    pub num_categories: Option<usize>,
}

/// Tape handles for every model parameter, in [`Model::named_params`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub all: Vec<Var>,
    embedding: Option<Var>,
    w_in: Var,
    b_in: Var,
    layers: Vec<BoundLayer>,
    w_out: Var,
    b_out: Var,
}

#[derive(Debug, Clone)]
enum BoundLayer {
    Attention(Mechanism, Vec<HeadVars>),
    Gcn(Var),
}

/// Result of a node-level forward pass recorded on a tape.
#[derive(Debug)]
pub struct NodeForward {
    pub params: BoundParams,
    pub hidden: Var,
    pub probs: Var,
    /// Head-mean attention of the final attention layer over `edges`.
    pub alpha: Option<Var>,
    pub edges: ActiveEdges,
}

/// Gradient-free node-level output.
#[derive(Debug, Clone)]
pub struct NodeOutput {
    pub probs: Tensor,
    /// Per layer, head-mean attention indexed by global edge id (masked and
    /// GCN layers give zeros / `None`).
    pub alphas: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Model,
}

impl Model {
    pub fn new(shape: ModelShape, rng: &mut impl Rng) -> Result<Model> {
        let ModelShape {
            task,
            mechanism,
            in_dim,
            hidden,
            heads,
            layers,
            outputs,
            num_categories,
        } = shape;
        if hidden == 0 || in_dim == 0 {
            return Err(Error::InvalidArgument("zero-width model".into()));
        }
        let outputs = if task.is_graph_level() { 1 } else { outputs };
        if outputs == 0 {
            return Err(Error::InvalidArgument("node classifier needs at least one class".into()));
        }
        let embedding = match (task.is_graph_level(), num_categories) {
            (true, Some(k)) => Some(attention::glorot(rng, k, in_dim, &[k, in_dim])),
            _ => None,
        };
        let w_in = attention::glorot(rng, in_dim, hidden, &[in_dim, hidden]);
        let b_in = Tensor::zeros(&[hidden]);
        let layers = (0..layers)
            .map(|_| match mechanism {
                Some(m) => AttentionLayerParams::init(m, heads, hidden, hidden, rng).map(Layer::Attention),
                None => Ok(Layer::Gcn(GcnLayerParams::init(hidden, hidden, rng))),
            })
            .collect::<Result<Vec<_>>>()?;
        let w_out = attention::glorot(rng, 2 * hidden, outputs, &[2 * hidden, outputs]);
        let b_out = Tensor::zeros(&[outputs]);
        let model = Model {
            task,
            embedding,
            w_in,
            b_in,
            layers,
            w_out,
            b_out,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn in_dim(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn num_outputs(&self) -> usize {
        self.w_out.shape()[1]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn mechanism(&self) -> Option<Mechanism> {
        self.layers.iter().find_map(|l| match l {
            Layer::Attention(p) => Some(p.mechanism),
            Layer::Gcn(_) => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.hidden_dim();
        if self.b_in.shape() != [f] {
            return Err(Error::dim("model", "b_in width"));
        }
        if let Some(e) = &self.embedding {
            if e.shape().len() != 2 || e.shape()[1] != self.in_dim() {
                return Err(Error::dim("model", "embedding width"));
            }
        }
        for layer in &self.layers {
            match layer {
                Layer::Attention(p) => {
                    if p.heads.is_empty() {
                        return Err(Error::InvalidArgument("attention layer has no heads".into()));
                    }
                    p.validate()?;
                    if p.in_dim() != f || p.out_dim() != f {
                        return Err(Error::dim("model", "stacked layers must keep the hidden width"));
                    }
                }
                Layer::Gcn(p) => {
                    if p.weight.shape() != [f, f] {
                        return Err(Error::dim("model", "gcn layer width"));
                    }
                }
            }
        }
        if self.w_out.shape().len() != 2 || self.w_out.shape()[0] != 2 * f || self.b_out.shape() != [self.w_out.shape()[1]] {
            return Err(Error::dim("model", "output layer"));
        }
        Ok(())
    }

    /// Parameters with stable names, in the order used everywhere else.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding".to_string(), e));
        }
        out.push(("w_in".to_string(), &self.w_in));
        out.push(("b_in".to_string(), &self.b_in));
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Attention(p) => {
                    for (k, h) in p.heads.iter().enumerate() {
                        out.push((format!("layer{l}.head{k}.weight"), &h.weight));
                        out.push((format!("layer{l}.head{k}.att_src"), &h.att_src));
                        out.push((format!("layer{l}.head{k}.att_dst"), &h.att_dst));
                    }
                }
                Layer::Gcn(p) => out.push((format!("layer{l}.weight"), &p.weight)),
            }
        }
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(e);
        }
        out.push(&mut self.w_in);
        out.push(&mut self.b_in);
        for layer in &mut self.layers {
            match layer {
                Layer::Attention(p) => out.extend(p.tensors_mut()),
                Layer::Gcn(p) => out.push(&mut p.weight),
            }
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Put every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut all = Vec::new();
        let mut leaf = |tape: &mut Tape, t: &Tensor| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            all.push(v);
            v
        };
        let embedding = self.embedding.as_ref().map(|e| leaf(tape, e));
        let w_in = leaf(tape, &self.w_in);
        let b_in = leaf(tape, &self.b_in);
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Attention(p) => BoundLayer::Attention(
                    p.mechanism,
                    p.heads
                        .iter()
                        .map(|h| HeadVars {
                            weight: leaf(tape, &h.weight),
                            att_src: leaf(tape, &h.att_src),
                            att_dst: leaf(tape, &h.att_dst),
                        })
                        .collect(),
                ),
                Layer::Gcn(p) => BoundLayer::Gcn(leaf(tape, &p.weight)),
            })
            .collect();
        let w_out = leaf(tape, &self.w_out);
        let b_out = leaf(tape, &self.b_out);
        BoundParams {
            all,
            embedding,
            w_in,
            b_in,
            layers,
            w_out,
            b_out,
        }
    }

    /// Input projection `h = LReLU(x W_in + b_in)`.
    pub fn project(&self, tape: &mut Tape, bp: &BoundParams, g: &Graph) -> Result<Var> {
        let x = match bp.embedding {
            Some(table) => {
                let rows = tape.value(table).rows();
                let ids = category_ids(g, rows)?;
                tape.gather_rows(table, ids.into())?
            }
            None => {
                if g.feature_dim() != self.in_dim() {
                    return Err(Error::dim(
                        "node_forward",
                        format!("graph has {} features, model expects {}", g.feature_dim(), self.in_dim()),
                    ));
                }
                tape.constant(g.features().clone())
            }
        };
        let z = tape.matmul(x, bp.w_in)?;
        let z = tape.add_bias(z, bp.b_in)?;
        Ok(tape.leaky_relu(z, MLP_SLOPE))
    }

    /// Message passing from hidden features; returns `[h ‖ h']`, the final
    /// attention layer's alpha and the per-layer alphas.
    fn propagate(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        h: Var,
        g: &Graph,
        mask: &EdgeMask,
        edges: &ActiveEdges,
    ) -> Result<(Var, Vec<Option<Var>>)> {
        let mut cur = h;
        let mut alphas = Vec::with_capacity(bp.layers.len());
        for layer in &bp.layers {
            match layer {
                BoundLayer::Attention(mech, heads) => {
                    let (out, alpha) = attention::attend_on(tape, *mech, heads, cur, edges)?;
                    cur = out;
                    alphas.push(Some(alpha));
                }
                BoundLayer::Gcn(w) => {
                    cur = attention::gcn_on(tape, *w, cur, g, mask)?;
                    alphas.push(None);
                }
            }
        }
        let cat = tape.concat_cols(h, cur)?;
        Ok((cat, alphas))
    }

    fn node_head(&self, tape: &mut Tape, bp: &BoundParams, cat: Var) -> Result<Var> {
        let a = tape.leaky_relu(cat, MLP_SLOPE);
        let z = tape.matmul(a, bp.w_out)?;
        let z = tape.add_bias(z, bp.b_out)?;
        tape.softmax_rows(z)
    }

    fn require_node_task(&self) -> Result<()> {
        if self.task != Task::NodeClassification {
            return Err(Error::InvalidArgument("model is not a node classifier".into()));
        }
        Ok(())
    }

    /// Node-level forward pass recorded on `tape`.
    pub fn node_forward_on(&self, tape: &mut Tape, g: &Graph, mask: &EdgeMask, trainable: bool) -> Result<NodeForward> {
        self.require_node_task()?;
        let bp = self.bind(tape, trainable);
        let h = self.project(tape, &bp, g)?;
        self.node_forward_from(tape, bp, h, g, mask)
    }

    fn node_forward_from(
        &self,
        tape: &mut Tape,
        bp: BoundParams,
        h: Var,
        g: &Graph,
        mask: &EdgeMask,
    ) -> Result<NodeForward> {
        let edges = ActiveEdges::new(g, mask)?;
        let (cat, alphas) = self.propagate(tape, &bp, h, g, mask, &edges)?;
        let probs = self.node_head(tape, &bp, cat)?;
        let alpha = alphas.into_iter().rev().flatten().next();
        Ok(NodeForward {
            params: bp,
            hidden: h,
            probs,
            alpha,
            edges,
        })
    }

    /// Gradient-free node forward pass.
    pub fn node_forward(&self, g: &Graph, mask: &EdgeMask) -> Result<NodeOutput> {
        self.require_node_task()?;
        let mut tape = Tape::new();
        let bp = self.bind(&mut tape, false);
        let h = self.project(&mut tape, &bp, g)?;
        let edges = ActiveEdges::new(g, mask)?;
        let (cat, alphas) = self.propagate(&mut tape, &bp, h, g, mask, &edges)?;
        let probs = self.node_head(&mut tape, &bp, cat)?;
        let alphas = alphas
            .into_iter()
            .map(|a| a.map(|a| edges.scatter(tape.value(a).data(), g.num_edges())))
            .collect();
        Ok(NodeOutput {
            probs: tape.value(probs).clone(),
            alphas,
        })
    }

    /// Gradient-free class probabilities starting from precomputed hidden
    /// features `h` (the input projection does not depend on the edge mask).
    pub fn node_probs_from_hidden(&self, h: &Tensor, g: &Graph, mask: &EdgeMask) -> Result<Tensor> {
        self.require_node_task()?;
        let mut tape = Tape::new();
        let bp = self.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let out = self.node_forward_from(&mut tape, bp, hv, g, mask)?;
        Ok(tape.value(out.probs).clone())
    }

    /// Graph-level forward on a batch; one prediction per graph.
    pub fn graph_forward_on(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        mask: &EdgeMask,
        trainable: bool,
    ) -> Result<GraphForward> {
        if !self.task.is_graph_level() {
            return Err(Error::InvalidArgument("model is not a graph-level model".into()));
        }
        let g = &batch.graph;
        let bp = self.bind(tape, trainable);
        let h = self.project(tape, &bp, g)?;
        let edges = ActiveEdges::new(g, mask)?;
        let (cat, alphas) = self.propagate(tape, &bp, h, g, mask, &edges)?;
        let pooled = tape.segment_sum(cat, batch.node_graph.clone(), batch.num_graphs())?;
        let a = tape.leaky_relu(pooled, MLP_SLOPE);
        let z = tape.matmul(a, bp.w_out)?;
        let z = tape.add_bias(z, bp.b_out)?;
        let z = tape.sum_cols(z)?;
        let out = match self.task {
            Task::GraphClassification => tape.sigmoid(z, 1.0),
            _ => z,
        };
        let alpha = alphas.into_iter().rev().flatten().next();
        Ok(GraphForward {
            params: bp,
            pooled,
            output: out,
            alpha,
            edges,
        })
    }

    /// Gradient-free per-graph predictions.
    pub fn graph_forward(&self, batch: &GraphBatch, mask: &EdgeMask) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.graph_forward_on(&mut tape, batch, mask, false)?;
        Ok(tape.value(out.output).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Model> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        ck.model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        for (name, t) in ck.model.named_params() {
            Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(ck.model)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_json(&std::fs::read_to_string(path)?)
    }
}

fn category_ids(g: &Graph, num_categories: usize) -> Result<Vec<usize>> {
    let x = g.features();
    (0..g.num_nodes())
        .map(|v| {
            let c = x.get2(v, 0);
            if c < 0.0 || c.fract() != 0.0 || c as usize >= num_categories {
                Err(Error::InvalidArgument(format!(
                    "node {v}: category {c} outside the embedding table of {num_categories}"
                )))
            } else {
                Ok(c as usize)
            }
        })
        .collect()
}

/// Output of [`Model::graph_forward_on`].
#[derive(Debug)]
pub struct GraphForward {
    pub params: BoundParams,
    /// Sum-pooled `[h ‖ h']` per graph, before the head activation.
    pub pooled: Var,
    pub output: Var,
    pub alpha: Option<Var>,
    pub edges: ActiveEdges,
}

/// Several graphs packed as one disjoint union.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub graph: Graph,
    pub node_graph: Arc<[usize]>,
    /// First global edge id of each graph, plus a final end marker.
    pub edge_offsets: Vec<usize>,
    pub targets: Vec<f64>,
}

/// One input graph for [`GraphBatch::new`].
#[derive(Debug, Clone)]
pub struct GraphSample {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub directed: bool,
    /// `num_nodes x d` node features (or a single category-id column).
    pub features: Tensor,
    pub target: f64,
}

impl GraphBatch {
    pub fn new(samples: &[GraphSample]) -> Result<GraphBatch> {
        if samples.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let d = samples[0].features.row_width();
        let mut edges = Vec::new();
        let mut feats = Vec::new();
        let mut node_graph = Vec::new();
        let mut offset = 0;
        for (k, s) in samples.iter().enumerate() {
            if s.num_nodes == 0 {
                return Err(Error::EmptyGraph);
            }
            if s.features.rows() != s.num_nodes || s.features.row_width() != d {
                return Err(Error::dim("graph batch", format!("graph {k} features {:?}", s.features.shape())));
            }
            for &(a, b) in &s.edges {
                if a >= s.num_nodes || b >= s.num_nodes {
                    return Err(Error::InvalidArgument(format!("graph {k}: edge ({a}, {b}) out of range")));
                }
                edges.push((a + offset, b + offset));
                if !s.directed {
                    edges.push((b + offset, a + offset));
                }
            }
            feats.extend_from_slice(s.features.data());
            node_graph.extend(std::iter::repeat(k).take(s.num_nodes));
            offset += s.num_nodes;
        }
        let (graph, _) = Graph::build(
            &edges,
            true,
            NodeData {
                features: Tensor::matrix(offset, d, feats)?,
                labels: vec![],
                num_classes: 0,
                splits: vec![],
            },
        )?;
        let mut edge_offsets = vec![0usize; samples.len() + 1];
        for e in 0..graph.num_edges() {
            edge_offsets[node_graph[graph.edge_dst()[e]] + 1] += 1;
        }
        for k in 0..samples.len() {
            edge_offsets[k + 1] += edge_offsets[k];
        }
        Ok(GraphBatch {
            graph,
            node_graph: node_graph.into(),
            edge_offsets,
            targets: samples.iter().map(|s| s.target).collect(),
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.targets.len()
    }

    /// Edge count of graph `k`.
    pub fn num_edges_of(&self, k: usize) -> usize {
        self.edge_offsets[k + 1] - self.edge_offsets[k]
    }
}

/// Per-entity prediction loss: cross-entropy for classification, squared
/// error for regression.
pub fn entity_loss(task: Task, prediction: &[f64], target: f64) -> Result<f64> {
    match task {
        Task::NodeClassification => {
            let y = target as usize;
            if target < 0.0 || target.fract() != 0.0 || y >= prediction.len() {
                return Err(Error::Index {
                    what: "class label",
                    index: y,
                    bound: prediction.len(),
                });
            }
            Ok(-prediction[y].max(PROB_FLOOR).ln())
        }
        Task::GraphClassification => {
            if !(0.0..=1.0).contains(&target) {
                return Err(Error::InvalidArgument(format!("binary target {target} outside [0, 1]")));
            }
            Ok(bce_term(prediction[0], target))
        }
        Task::GraphRegression => Ok((prediction[0] - target).powi(2)),
    }
}

/// Mean prediction loss on the tape over the selected rows.
pub fn prediction_loss_on(
    tape: &mut Tape,
    task: Task,
    output: Var,
    labels: &Arc<[usize]>,
    targets: &[f64],
    rows: &Arc<[usize]>,
) -> Result<Var> {
    match task {
        Task::NodeClassification => tape.cross_entropy(output, labels.clone(), rows.clone()),
        Task::GraphClassification => {
            if rows.is_empty() {
                return Err(Error::EmptyMask);
            }
            let sel = tape.gather_rows(output, rows.clone())?;
            let t: Vec<f64> = rows.iter().map(|&r| targets[r]).collect();
            if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("binary targets must lie in [0, 1]".into()));
            }
            tape.binary_cross_entropy(sel, t.into())
        }
        Task::GraphRegression => {
            if rows.is_empty() {
                return Err(Error::EmptyMask);
            }
            let sel = tape.gather_rows(output, rows.clone())?;
            let t: Vec<f64> = rows.iter().map(|&r| targets[r]).collect();
            let tv = tape.constant(Tensor::vector(t));
            let d = tape.sub(sel, tv)?;
            let sq = tape.mul(d, d)?;
            tape.mean(sq)
        }
    }
}
