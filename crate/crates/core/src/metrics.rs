//! Evaluation: accuracy, label-agreement KL, attention deltas and run records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::car::{TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::graph::{EdgeMask, Graph, Split};
use crate::model::Model;
use crate::tensor::{Tensor, PROB_FLOOR};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of `rows` whose argmax prediction equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize], rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let hits = rows.iter().filter(|&&r| argmax(probs.row(r)) == labels[r]).count();
    Ok(hits as f64 / rows.len() as f64)
}

/// Mean cross-entropy over `rows`.
pub fn mean_loss(probs: &Tensor, labels: &[usize], rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let s: f64 = rows.iter().map(|&r| -probs.get2(r, labels[r]).max(PROB_FLOOR).ln()).sum();
    Ok(s / rows.len() as f64)
}

/// Label-agreement reference distribution over the active in-edges of `j`,
/// as `(edge id, weight)` pairs. `None` when no in-neighbor shares `j`'s label.
pub fn reference_attention(g: &Graph, j: usize, mask: &EdgeMask) -> Result<Option<Vec<(usize, f64)>>> {
    let labels = g.labels();
    let edges: Vec<usize> = g.active_in_edges(j, Some(mask)).collect();
    if edges.is_empty() {
        return Err(Error::InvalidArgument(format!("node {j} has no in-edges")));
    }
    let agree: Vec<f64> = edges
        .iter()
        .map(|&e| if labels[g.edge_src()[e]] == labels[j] { 1.0 } else { 0.0 })
        .collect();
    let total: f64 = agree.iter().sum();
    if total == 0.0 {
        return Ok(None);
    }
    Ok(Some(edges.into_iter().zip(agree).map(|(e, a)| (e, a / total)).collect()))
}

/// `KL(reference || alpha)` with `0 ln 0 = 0` and `alpha` floored.
pub fn kl_divergence(reference: &[f64], alpha: &[f64]) -> f64 {
    reference
        .iter()
        .zip(alpha)
        .filter(|(&r, _)| r > 0.0)
        .map(|(&r, &a)| r * (r / a.max(PROB_FLOOR)).ln())
        .sum()
}

/// Mean over eligible `nodes` of the KL divergence between the label-agreement
/// reference and the final attention layer's mean coefficients.
pub fn mean_label_agreement_kl_from_alpha(g: &Graph, alpha: &[f64], nodes: &[usize]) -> Result<f64> {
    let mask = g.full_mask();
    let mut total = 0.0;
    let mut count = 0usize;
    for &j in nodes {
        if g.in_degree(j, Some(&mask)) == 0 {
            continue;
        }
        if let Some(reference) = reference_attention(g, j, &mask)? {
            let r: Vec<f64> = reference.iter().map(|&(_, w)| w).collect();
            let a: Vec<f64> = reference.iter().map(|&(e, _)| alpha[e]).collect();
            total += kl_divergence(&r, &a);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no node is eligible for the KL metric".into()));
    }
    Ok(total / count as f64)
}

pub fn mean_label_agreement_kl(model: &Model, g: &Graph, nodes: &[usize]) -> Result<f64> {
    let out = model.node_forward(g, &g.full_mask())?;
    let alpha = out
        .alphas
        .into_iter()
        .rev()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidArgument("model has no attention layer".into()))?;
    mean_label_agreement_kl_from_alpha(g, &alpha, nodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDelta {
    pub edge: usize,
    pub src: usize,
    pub dst: usize,
    pub alpha_a: f64,
    pub alpha_b: f64,
    /// `100 * (alpha_b - alpha_a) / alpha_a`.
    pub delta_pct: f64,
    /// True when `alpha_a` was below the probability floor.
    pub floored: bool,
}

/// Edge-wise change of final-layer attention from `model_a` to `model_b`,
/// largest absolute relative change first (ties by edge id).
pub fn attention_delta_report(model_a: &Model, model_b: &Model, g: &Graph, top_k: usize) -> Result<Vec<AttentionDelta>> {
    if model_a.mechanism() != model_b.mechanism() {
        return Err(Error::InvalidArgument("models use different attention mechanisms".into()));
    }
    let final_alpha = |m: &Model| -> Result<Vec<f64>> {
        m.node_forward(g, &g.full_mask())?
            .alphas
            .into_iter()
            .rev()
            .flatten()
            .next()
            .ok_or_else(|| Error::InvalidArgument("model has no attention layer".into()))
    };
    let a = final_alpha(model_a)?;
    let b = final_alpha(model_b)?;
    let mut rows: Vec<AttentionDelta> = (0..g.num_edges())
        .map(|e| {
            let (src, dst) = g.edge(e);
            let floored = a[e] < PROB_FLOOR;
            let base = a[e].max(PROB_FLOOR);
            AttentionDelta {
                edge: e,
                src,
                dst,
                alpha_a: a[e],
                alpha_b: b[e],
                delta_pct: 100.0 * (b[e] - base) / base,
                floored,
            }
        })
        .collect();
    rows.sort_by(|x, y| y.delta_pct.abs().total_cmp(&x.delta_pct.abs()).then(x.edge.cmp(&y.edge)));
    rows.truncate(top_k);
    Ok(rows)
}

/// Percentage with two decimals and an explicit sign, e.g. `-89.80%`.
pub fn format_pct(p: f64) -> String {
    format!("{p:+.2}%")
}

pub fn write_delta_tsv(rows: &[AttentionDelta], out: &mut impl Write) -> Result<()> {
    writeln!(out, "rank\tedge\tsrc\tdst\talpha_a\talpha_b\tdelta\tfloored")?;
    for (k, r) in rows.iter().enumerate() {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            k + 1,
            r.edge,
            r.src,
            r.dst,
            r.alpha_a,
            r.alpha_b,
            format_pct(r.delta_pct),
            r.floored
        )?;
    }
    Ok(())
}

/// One line of experiment output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub dataset: String,
    pub config: TrainConfig,
    pub car_enabled: bool,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// `None` when no test node has a same-label in-neighbor or the model has
    /// no attention layer.
    pub mean_kl: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub wall_clock_seconds: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// JSON without the wall-clock field, for determinism comparisons.
    pub fn fingerprint_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        r.to_json_line()
    }
}

/// Test-split metrics of a trained node classifier.
pub fn evaluate(dataset: &str, config: &TrainConfig, g: &Graph, outcome: &TrainOutcome) -> Result<MetricsRecord> {
    let test = g.nodes_in(Split::Test);
    let out = outcome.model.node_forward(g, &g.full_mask())?;
    let test_accuracy = accuracy(&out.probs, g.labels(), &test)?;
    let test_loss = mean_loss(&out.probs, g.labels(), &test)?;
    let mean_kl = out
        .alphas
        .iter()
        .rev()
        .flatten()
        .next()
        .and_then(|alpha| mean_label_agreement_kl_from_alpha(g, alpha, &test).ok());
    Ok(MetricsRecord {
        dataset: dataset.to_string(),
        config: config.clone(),
        car_enabled: config.regularized(),
        test_accuracy,
        test_loss,
        mean_kl,
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        wall_clock_seconds: outcome.wall_clock_seconds,
    })
}

/// Initialise, train and evaluate one node-classification run.
pub fn run_node_experiment(dataset: &str, g: &Graph, config: &TrainConfig) -> Result<(TrainOutcome, MetricsRecord)> {
    let model = config.init_node_model(g)?;
    let outcome = crate::car::train(&model, g, config)?;
    let record = evaluate(dataset, config, g, &outcome)?;
    Ok((outcome, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeData;

    #[test]
    fn accuracy_examples() {
        let p = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7]).unwrap();
        assert_eq!(accuracy(&p, &[0, 1, 0, 0], &[0, 1, 2, 3]).unwrap(), 0.75);
        assert_eq!(accuracy(&p, &[0, 1, 0, 1], &[0, 1, 2, 3]).unwrap(), 1.0);
        let u = Tensor::filled(&[3, 3], 1.0 / 3.0);
        assert_eq!(accuracy(&u, &[0, 0, 0], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&u, &[1, 2, 1], &[0, 1, 2]).unwrap(), 0.0);
        assert!(matches!(accuracy(&p, &[0, 1, 0, 0], &[]), Err(Error::EmptyMask)));
    }

    fn star(labels: Vec<usize>) -> Graph {
        let n = labels.len();
        let edges: Vec<(usize, usize)> = (1..n).map(|s| (s, 0)).collect();
        Graph::build(
            &edges,
            true,
            NodeData {
                features: Tensor::zeros(&[n, 1]),
                labels,
                num_classes: 3,
                splits: vec![],
            },
        )
        .unwrap()
        .0
    }

    #[test]
    fn reference_examples() {
        let g = star(vec![0, 0, 0, 1]);
        let r = reference_attention(&g, 0, &g.full_mask()).unwrap().unwrap();
        let w: Vec<f64> = r.iter().map(|&(_, w)| w).collect();
        assert_eq!(w, vec![0.5, 0.5, 0.0]);

        let g = star(vec![2, 2, 2, 2, 2]);
        let r = reference_attention(&g, 0, &g.full_mask()).unwrap().unwrap();
        assert!(r.iter().all(|&(_, w)| w == 0.25));

        let g = star(vec![0, 1, 2]);
        assert!(reference_attention(&g, 0, &g.full_mask()).unwrap().is_none());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5, 0.0], &[0.5, 0.5, 0.0]), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_excludes_no_agreement_nodes() {
        // node 0 has agreement, node 3 has only a disagreeing neighbor
        let edges = [(1, 0), (2, 0), (1, 3)];
        let g = Graph::build(
            &edges,
            true,
            NodeData {
                features: Tensor::zeros(&[4, 1]),
                labels: vec![0, 0, 1, 1],
                num_classes: 2,
                splits: vec![],
            },
        )
        .unwrap()
        .0;
        let mut alpha = vec![0.0; g.num_edges()];
        alpha[g.find_edge(1, 0).unwrap()] = 1.0;
        alpha[g.find_edge(2, 0).unwrap()] = 0.0;
        alpha[g.find_edge(1, 3).unwrap()] = 1.0;
        let kl = mean_label_agreement_kl_from_alpha(&g, &alpha, &[0, 3]).unwrap();
        assert_eq!(kl, 0.0);
        assert!(mean_label_agreement_kl_from_alpha(&g, &alpha, &[3]).is_err());
    }

    #[test]
    fn pct_format() {
        assert_eq!(format_pct(100.0 * (0.09 - 0.9) / 0.9), "-90.00%");
        assert_eq!(format_pct(100.0 * (0.078 - 0.001) / 0.001), "+7700.00%");
        assert_eq!(format_pct(0.0), "+0.00%");
    }
}
