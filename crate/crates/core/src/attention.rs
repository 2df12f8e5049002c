//! Graph attention layers and the plain GCN layer used for rewiring.
//!
//! Scoring per mechanism, with `W` the head projection and `a = (a_src ‖ a_dst)`:
//!
//! | mechanism   | raw score `e_ij`                               |
//! |-------------|------------------------------------------------|
//! | GAT         | `LeakyReLU(a_src·Wh_i + a_dst·Wh_j)`           |
//! | GATv2       | `a_src·LeakyReLU(Wh_i) + a_dst·LeakyReLU(Wh_j)`|
//! | Transformer | `(Wh_i)·(Wh_j) / sqrt(F')`                     |
//!
//! Scores are normalised with a softmax over each target's active in-edges,
//! head outputs are averaged, and the reported attention is the head mean.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeMask, Graph};
use crate::tensor::{Tape, Tensor, Var};

/// LeakyReLU slope inside attention scoring.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Gat,
    Gatv2,
    Transformer,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Gat, Mechanism::Gatv2, Mechanism::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Gat => "gat",
            Mechanism::Gatv2 => "gatv2",
            Mechanism::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(Mechanism::Gat),
            "gatv2" => Ok(Mechanism::Gatv2),
            "transformer" | "graphtransformer" | "graph_transformer" => Ok(Mechanism::Transformer),
            other => Err(Error::InvalidArgument(format!("unknown mechanism `{other}`"))),
        }
    }
}

/// One attention head: projection `weight` (`F x F'`, applied as `h · W`)
/// and the two halves of the attention vector, each `F' x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub weight: Tensor,
    pub att_src: Tensor,
    pub att_dst: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayerParams {
    pub mechanism: Mechanism,
    pub heads: Vec<HeadParams>,
}

pub(crate) fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

impl AttentionLayerParams {
    pub fn init(mechanism: Mechanism, heads: usize, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 {
            return Err(Error::InvalidArgument("attention layer needs at least one head".into()));
        }
        let heads = (0..heads)
            .map(|_| HeadParams {
                weight: glorot(rng, in_dim, out_dim, &[in_dim, out_dim]),
                att_src: glorot(rng, out_dim, 1, &[out_dim, 1]),
                att_dst: glorot(rng, out_dim, 1, &[out_dim, 1]),
            })
            .collect();
        Ok(AttentionLayerParams { mechanism, heads })
    }

    pub fn in_dim(&self) -> usize {
        self.heads[0].weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.heads[0].weight.shape()[1]
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.heads
            .iter_mut()
            .flat_map(|h| [&mut h.weight, &mut h.att_src, &mut h.att_dst])
            .collect()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let (fin, fout) = (self.in_dim(), self.out_dim());
        for h in &self.heads {
            if h.weight.shape() != [fin, fout] || h.att_src.shape() != [fout, 1] || h.att_dst.shape() != [fout, 1] {
                return Err(Error::dim("attention layer", "heads disagree on (F, F')"));
            }
        }
        Ok(())
    }
}

/// Single-head GCN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayerParams {
    pub weight: Tensor,
}

impl GcnLayerParams {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        GcnLayerParams {
            weight: glorot(rng, in_dim, out_dim, &[in_dim, out_dim]),
        }
    }
}

/// Active edges of a graph under a mask, in global edge order.
#[derive(Debug, Clone)]
pub struct ActiveEdges {
    pub ids: Arc<[usize]>,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub num_nodes: usize,
}

impl ActiveEdges {
    pub fn new(g: &Graph, mask: &EdgeMask) -> Result<Self> {
        if mask.len() != g.num_edges() {
            return Err(Error::dim(
                "edge mask",
                format!("{} flags for {} edges", mask.len(), g.num_edges()),
            ));
        }
        let ids: Vec<usize> = (0..g.num_edges()).filter(|&e| mask.is_active(e)).collect();
        let src: Arc<[usize]> = ids.iter().map(|&e| g.edge_src()[e]).collect();
        let dst: Arc<[usize]> = ids.iter().map(|&e| g.edge_dst()[e]).collect();
        Ok(ActiveEdges {
            ids: ids.into(),
            src,
            dst,
            num_nodes: g.num_nodes(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of each global edge id within this active list.
    pub fn positions(&self, num_edges: usize) -> Vec<Option<usize>> {
        let mut pos = vec![None; num_edges];
        for (k, &e) in self.ids.iter().enumerate() {
            pos[e] = Some(k);
        }
        pos
    }

    /// Scatter per-active-edge values into a vector over all edges (inactive = 0).
    pub fn scatter(&self, values: &[f64], num_edges: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_edges];
        for (&e, &v) in self.ids.iter().zip(values) {
            out[e] = v;
        }
        out
    }
}

/// Tape handles for one head's parameters.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub att_src: Var,
    pub att_dst: Var,
}

fn flatten_col(tape: &mut Tape, v: Var) -> Result<Var> {
    tape.sum_cols(v)
}

/// Raw scores for one head given its projected features `wh` (`N x F'`).
pub(crate) fn head_scores(
    tape: &mut Tape,
    mechanism: Mechanism,
    wh: Var,
    head: &HeadVars,
    edges: &ActiveEdges,
) -> Result<Var> {
    match mechanism {
        Mechanism::Gat | Mechanism::Gatv2 => {
            let z = if mechanism == Mechanism::Gatv2 {
                tape.leaky_relu(wh, ATTENTION_SLOPE)
            } else {
                wh
            };
            let s_src = tape.matmul(z, head.att_src)?;
            let s_dst = tape.matmul(z, head.att_dst)?;
            let gs = tape.gather_rows(s_src, edges.src.clone())?;
            let gd = tape.gather_rows(s_dst, edges.dst.clone())?;
            let e = tape.add(gs, gd)?;
            let e = if mechanism == Mechanism::Gat {
                tape.leaky_relu(e, ATTENTION_SLOPE)
            } else {
                e
            };
            flatten_col(tape, e)
        }
        Mechanism::Transformer => {
            let fout = tape.value(wh).row_width();
            let gi = tape.gather_rows(wh, edges.src.clone())?;
            let gj = tape.gather_rows(wh, edges.dst.clone())?;
            let prod = tape.mul(gi, gj)?;
            let dot = tape.sum_cols(prod)?;
            Ok(tape.scale(dot, 1.0 / (fout as f64).sqrt()))
        }
    }
}

fn check_width(tape: &Tape, h: Var, w: Var) -> Result<()> {
    let (fh, fw) = (tape.value(h).row_width(), tape.value(w).shape()[0]);
    if fh != fw {
        return Err(Error::dim(
            "score_edges",
            format!("features have {fh} columns, projection expects {fw}"),
        ));
    }
    Ok(())
}

/// Per-head raw scores on the tape.
pub fn score_edges_on(
    tape: &mut Tape,
    mechanism: Mechanism,
    heads: &[HeadVars],
    h: Var,
    edges: &ActiveEdges,
) -> Result<Vec<Var>> {
    heads
        .iter()
        .map(|head| {
            check_width(tape, h, head.weight)?;
            let wh = tape.matmul(h, head.weight)?;
            head_scores(tape, mechanism, wh, head, edges)
        })
        .collect()
}

/// Attention-weighted aggregation on the tape.
///
/// Returns the head-averaged node outputs (`N x F'`) and the head-averaged
/// attention over the active edges.
pub fn attend_on(
    tape: &mut Tape,
    mechanism: Mechanism,
    heads: &[HeadVars],
    h: Var,
    edges: &ActiveEdges,
) -> Result<(Var, Var)> {
    let n = edges.num_nodes;
    let mut out_sum: Option<Var> = None;
    let mut alpha_sum: Option<Var> = None;
    for head in heads {
        check_width(tape, h, head.weight)?;
        let wh = tape.matmul(h, head.weight)?;
        let scores = head_scores(tape, mechanism, wh, head, edges)?;
        let alpha = tape.segment_softmax(scores, edges.dst.clone(), n)?;
        let msgs = tape.gather_rows(wh, edges.src.clone())?;
        let msgs = tape.scale_rows(msgs, alpha)?;
        let out = tape.segment_sum(msgs, edges.dst.clone(), n)?;
        out_sum = Some(match out_sum {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
        alpha_sum = Some(match alpha_sum {
            None => alpha,
            Some(acc) => tape.add(acc, alpha)?,
        });
    }
    let k = heads.len() as f64;
    let (out, alpha) = match (out_sum, alpha_sum) {
        (Some(o), Some(a)) => (o, a),
        _ => return Err(Error::InvalidArgument("attention layer has no heads".into())),
    };
    if heads.len() == 1 {
        return Ok((out, alpha));
    }
    Ok((tape.scale(out, 1.0 / k), tape.scale(alpha, 1.0 / k)))
}

/// GCN propagation with symmetric normalisation and an implicit self-loop.
pub fn gcn_on(tape: &mut Tape, weight: Var, h: Var, g: &Graph, mask: &EdgeMask) -> Result<Var> {
    let n = g.num_nodes();
    let wh = tape.matmul(h, weight)?;
    let deg: Vec<f64> = (0..n).map(|j| g.in_degree(j, Some(mask)) as f64).collect();
    let edges = ActiveEdges::new(g, mask)?;
    let mut src: Vec<usize> = edges.src.to_vec();
    let mut dst: Vec<usize> = edges.dst.to_vec();
    src.extend(0..n);
    dst.extend(0..n);
    let coef: Vec<f64> = src
        .iter()
        .zip(&dst)
        .map(|(&i, &j)| 1.0 / ((deg[i] + 1.0) * (deg[j] + 1.0)).sqrt())
        .collect();
    let dst: Arc<[usize]> = dst.into();
    let coef = tape.constant(Tensor::vector(coef));
    let msgs = tape.gather_rows(wh, src.into())?;
    let msgs = tape.scale_rows(msgs, coef)?;
    tape.segment_sum(msgs, dst, n)
}

fn head_consts(tape: &mut Tape, params: &AttentionLayerParams) -> Vec<HeadVars> {
    params
        .heads
        .iter()
        .map(|h| HeadVars {
            weight: tape.constant(h.weight.clone()),
            att_src: tape.constant(h.att_src.clone()),
            att_dst: tape.constant(h.att_dst.clone()),
        })
        .collect()
}

/// Per-head raw scores over the active edges (in global edge order).
pub fn score_edges(params: &AttentionLayerParams, h: &Tensor, g: &Graph, mask: &EdgeMask) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let heads = head_consts(&mut tape, params);
    let hv = tape.constant(h.clone());
    let edges = ActiveEdges::new(g, mask)?;
    let scores = score_edges_on(&mut tape, params.mechanism, &heads, hv, &edges)?;
    Ok(scores.into_iter().map(|s| tape.value(s).data().to_vec()).collect())
}

/// Node outputs and the head-mean attention indexed by global edge id
/// (masked edges carry 0).
pub fn attend_and_aggregate(
    params: &AttentionLayerParams,
    h: &Tensor,
    g: &Graph,
    mask: &EdgeMask,
) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let heads = head_consts(&mut tape, params);
    let hv = tape.constant(h.clone());
    let edges = ActiveEdges::new(g, mask)?;
    let (out, alpha) = attend_on(&mut tape, params.mechanism, &heads, hv, &edges)?;
    let alpha = edges.scatter(tape.value(alpha).data(), g.num_edges());
    Ok((tape.value(out).clone(), alpha))
}

pub fn gcn_layer(params: &GcnLayerParams, h: &Tensor, g: &Graph, mask: &EdgeMask) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = tape.constant(params.weight.clone());
    let hv = tape.constant(h.clone());
    let out = gcn_on(&mut tape, w, hv, g, mask)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeData;

    fn graph(n: usize, edges: &[(usize, usize)], feats: Tensor) -> Graph {
        assert_eq!(feats.rows(), n);
        Graph::build(
            edges,
            true,
            NodeData {
                features: feats,
                labels: vec![],
                num_classes: 0,
                splits: vec![],
            },
        )
        .unwrap()
        .0
    }

    fn layer(mech: Mechanism, w: Tensor, a_src: Vec<f64>, a_dst: Vec<f64>) -> AttentionLayerParams {
        let f = a_src.len();
        AttentionLayerParams {
            mechanism: mech,
            heads: vec![HeadParams {
                weight: w,
                att_src: Tensor::matrix(f, 1, a_src).unwrap(),
                att_dst: Tensor::matrix(f, 1, a_dst).unwrap(),
            }],
        }
    }

    #[test]
    fn transformer_unit_basis_score() {
        let mut feats = vec![0.0; 8];
        feats[0] = 1.0;
        feats[4] = 1.0;
        let h = Tensor::matrix(2, 4, feats).unwrap();
        let g = graph(2, &[(0, 1)], h.clone());
        let p = layer(Mechanism::Transformer, Tensor::identity(4), vec![0.0; 4], vec![0.0; 4]);
        let s = score_edges(&p, &h, &g, &g.full_mask()).unwrap();
        assert!((s[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gat_zero_attention_vector() {
        let h = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap();
        let g = graph(3, &[(0, 1), (2, 1), (1, 0)], h.clone());
        let p = layer(Mechanism::Gat, Tensor::identity(2), vec![0.0; 2], vec![0.0; 2]);
        let s = score_edges(&p, &h, &g, &g.full_mask()).unwrap();
        assert!(s[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gatv2_symmetric_cancellation() {
        let h = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.3, -1.2, 2.0]).unwrap();
        let g = graph(2, &[(0, 1), (1, 0)], h.clone());
        let u = vec![0.7, -0.4, 1.5];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let p = layer(Mechanism::Gatv2, Tensor::identity(3), u, neg);
        let s = score_edges(&p, &h, &g, &g.full_mask()).unwrap();
        for v in &s[0] {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn single_in_edge_gets_full_attention() {
        let h = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let g = graph(3, &[(0, 1), (1, 2), (2, 0)], h.clone());
        let mut rng = rand::thread_rng();
        for mech in Mechanism::ALL {
            let p = AttentionLayerParams::init(mech, 3, 2, 2, &mut rng).unwrap();
            let (_, alpha) = attend_and_aggregate(&p, &h, &g, &g.full_mask()).unwrap();
            assert!(alpha.iter().all(|&a| (a - 1.0).abs() < 1e-15), "{mech}");
        }
    }

    #[test]
    fn identical_heads_match_single_head() {
        let h = Tensor::matrix(3, 2, vec![1.0, -0.5, 0.25, 1.0, -1.0, 2.0]).unwrap();
        let g = graph(3, &[(0, 2), (1, 2), (2, 0), (1, 0)], h.clone());
        let mut rng = rand::thread_rng();
        let one = AttentionLayerParams::init(Mechanism::Gat, 1, 2, 2, &mut rng).unwrap();
        let two = AttentionLayerParams {
            mechanism: Mechanism::Gat,
            heads: vec![one.heads[0].clone(), one.heads[0].clone()],
        };
        let (_, a1) = attend_and_aggregate(&one, &h, &g, &g.full_mask()).unwrap();
        let (_, a2) = attend_and_aggregate(&two, &h, &g, &g.full_mask()).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_scores_average_neighbours() {
        // nodes 0 and 1 feed node 2; GAT with a=0 gives equal scores
        let h = Tensor::matrix(3, 2, vec![1.0, 3.0, 5.0, -1.0, 0.0, 0.0]).unwrap();
        let g = graph(3, &[(0, 2), (1, 2)], h.clone());
        let p = layer(Mechanism::Gat, Tensor::identity(2), vec![0.0; 2], vec![0.0; 2]);
        let (out, _) = attend_and_aggregate(&p, &h, &g, &g.full_mask()).unwrap();
        assert_eq!(out.row(2), &[3.0, 1.0]);
        // zero in-degree nodes output zero
        assert_eq!(out.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn width_mismatch() {
        let h = Tensor::zeros(&[2, 3]);
        let g = graph(2, &[(0, 1)], h.clone());
        let p = layer(Mechanism::Gat, Tensor::identity(2), vec![0.0; 2], vec![0.0; 2]);
        let err = score_edges(&p, &h, &g, &g.full_mask()).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn gcn_examples() {
        let w = GcnLayerParams {
            weight: Tensor::matrix(2, 2, vec![2.0, 0.0, 1.0, -1.0]).unwrap(),
        };
        // isolated node 2: self-loop only
        let h = Tensor::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 0.5, 2.0]).unwrap();
        let g = graph(3, &[(0, 1), (1, 0)], h.clone());
        let out = gcn_layer(&w, &h, &g, &g.full_mask()).unwrap();
        // W h for row [0.5, 2.0] -> [0.5*2 + 2*1, 0.5*0 + 2*-1]
        assert_eq!(out.row(2), &[3.0, -2.0]);
        // mutually linked identical nodes keep W h
        assert!((out.get2(0, 0) - 3.0).abs() < 1e-15);
        assert!((out.get2(0, 1) + 1.0).abs() < 1e-15);

        let z = Tensor::zeros(&[3, 2]);
        let out = gcn_layer(&w, &z, &g, &g.full_mask()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mechanism_parse() {
        assert_eq!("GATv2".parse::<Mechanism>().unwrap(), Mechanism::Gatv2);
        assert!("gcn2".parse::<Mechanism>().is_err());
    }
}
