//! Attention-guided graph pruning followed by GCN retraining.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::car::{self, Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{EdgeMask, Graph, Split};
use crate::metrics;
use crate::model::{Model, ModelShape, Task};

/// Keep the active edges whose attention is at least `alpha_t`.
pub fn prune_by_threshold(alpha: &[f64], base: &EdgeMask, alpha_t: f64) -> Result<EdgeMask> {
    if alpha.len() != base.len() {
        return Err(Error::dim("prune_by_threshold", format!("{} weights for {} edges", alpha.len(), base.len())));
    }
    Ok(EdgeMask::from_flags(
        alpha
            .iter()
            .zip(base.flags())
            .map(|(&a, &on)| on && a >= alpha_t)
            .collect(),
    ))
}

/// Signed trapezoid area under `ys` over the ascending axis `xs`.
pub fn signed_trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewiringSpec {
    pub thresholds: Vec<f64>,
    pub gcn_hidden: usize,
    pub gcn_layers: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for RewiringSpec {
    fn default() -> Self {
        RewiringSpec {
            thresholds: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            gcn_hidden: 100,
            gcn_layers: 1,
            lr: 0.01,
            max_epochs: 200,
            patience: 10,
        }
    }
}

impl RewiringSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidArgument("no pruning thresholds".into()));
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("thresholds must be finite".into()));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("thresholds must be strictly ascending".into()));
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: Mode::Baseline,
            layers: self.gcn_layers,
            hidden: self.gcn_hidden,
            lambda: 0.0,
            lr: self.lr,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    Baseline,
    Car,
}

impl AttentionSource {
    pub fn name(self) -> &'static str {
        match self {
            AttentionSource::Baseline => "baseline",
            AttentionSource::Car => "car",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewiringRow {
    pub threshold: f64,
    pub source: AttentionSource,
    pub seed: u64,
    pub accuracy: f64,
    pub kept_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewiringResult {
    pub rows: Vec<RewiringRow>,
    /// GCN test accuracy per seed on the untouched graph.
    pub unpruned_accuracy: Vec<f64>,
    pub auc_baseline: f64,
    pub auc_car: f64,
}

/// Train a GCN on `g` and return its test accuracy.
pub fn gcn_test_accuracy(g: &Graph, spec: &RewiringSpec, seed: u64) -> Result<f64> {
    let config = spec.train_config(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(
        ModelShape {
            task: Task::NodeClassification,
            mechanism: None,
            in_dim: g.feature_dim(),
            hidden: spec.gcn_hidden,
            heads: 1,
            layers: spec.gcn_layers,
            outputs: g.num_classes(),
            num_categories: None,
        },
        &mut rng,
    )?;
    let outcome = car::train(&model, g, &config)?;
    let out = outcome.model.node_forward(g, &g.full_mask())?;
    metrics::accuracy(&out.probs, g.labels(), &g.nodes_in(Split::Test))
}

fn final_alpha(model: &Model, g: &Graph) -> Result<Vec<f64>> {
    model
        .node_forward(g, &g.full_mask())?
        .alphas
        .into_iter()
        .rev()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidArgument("source model has no attention layer".into()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Prune `g` by the attention of each source model at every threshold, retrain
/// a GCN per seed, and compare the signed areas between each source's mean
/// accuracy curve and the unpruned GCN's mean accuracy.
pub fn rewired_gcn_experiment(
    g: &Graph,
    spec: &RewiringSpec,
    baseline_model: &Model,
    car_model: &Model,
    seeds: &[u64],
) -> Result<RewiringResult> {
    spec.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    let unpruned_accuracy: Vec<f64> = seeds.iter().map(|&s| gcn_test_accuracy(g, spec, s)).collect::<Result<_>>()?;
    let reference = mean(&unpruned_accuracy);

    let full = g.full_mask();
    let mut rows = Vec::new();
    let mut aucs = [0.0; 2];
    for (k, (source, model)) in [(AttentionSource::Baseline, baseline_model), (AttentionSource::Car, car_model)]
        .into_iter()
        .enumerate()
    {
        let alpha = final_alpha(model, g)?;
        let mut curve = Vec::with_capacity(spec.thresholds.len());
        for &t in &spec.thresholds {
            let mask = prune_by_threshold(&alpha, &full, t)?;
            let pruned = g.subgraph(&mask)?;
            let mut accs = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let accuracy = gcn_test_accuracy(&pruned, spec, seed)?;
                log::info!("rewire source={} threshold={t} seed={seed} accuracy={accuracy:.4}", source.name());
                accs.push(accuracy);
                rows.push(RewiringRow {
                    threshold: t,
                    source,
                    seed,
                    accuracy,
                    kept_edges: mask.num_active(),
                });
            }
            curve.push(mean(&accs) - reference);
        }
        aucs[k] = signed_trapezoid(&spec.thresholds, &curve);
    }
    Ok(RewiringResult {
        rows,
        unpruned_accuracy,
        auc_baseline: aucs[0],
        auc_car: aucs[1],
    })
}

pub fn write_rewiring_tsv(result: &RewiringResult, out: &mut impl Write) -> Result<()> {
    writeln!(out, "threshold\tsource\tseed\taccuracy\tkept_edges")?;
    for r in &result.rows {
        writeln!(out, "{}\t{}\t{}\t{:.6}\t{}", r.threshold, r.source.name(), r.seed, r.accuracy, r.kept_edges)?;
    }
    Ok(())
}
