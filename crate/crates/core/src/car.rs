//! Causal attention regularization.
//!
//! Each training step samples `R` rounds of single-edge interventions. Within
//! a round every entity (a node, or a whole graph for graph-level tasks) has
//! at most one of its in-edges removed, and no removed edge may reach another
//! selected entity within the model's receptive field. That lets one
//! gradient-free forward pass with all of a round's edges masked stand in for
//! one pass per intervention.
//!
//! The effect of deleting `(i, j)` for entity `n` is
//! `c = sigmoid(((loss_without / loss_with)^d(n) - 1) / T)`, and attention is
//! pulled toward it with a binary cross-entropy term weighted by `lambda`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Mechanism;
use crate::error::{Error, Result};
use crate::graph::{EdgeMask, Graph, Split};
use crate::model::{self, GraphBatch, Model, ModelShape, Task};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var, PROB_FLOOR};

/// Floor on the unperturbed loss in the effect ratio.
pub const RATIO_FLOOR: f64 = 1e-9;
/// Clamp on `rho^d - 1` before the temperature sigmoid.
pub const EXPONENT_CLAMP: f64 = 1e6;

const INTERVENTION_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Car,
    NeighborVote,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Car => "car",
            Mode::NeighborVote => "neighbor_vote",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "car" => Ok(Mode::Car),
            "neighbor_vote" | "neighbor-vote" => Ok(Mode::NeighborVote),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub mechanism: Mechanism,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub rounds: usize,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Car,
            mechanism: Mechanism::Gat,
            layers: 1,
            heads: 1,
            hidden: 100,
            lambda: 1.0,
            rounds: 5,
            temperature: 0.1,
            lr: 0.01,
            batch_size: 10_000,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return bad("layers, heads and hidden must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    /// Whether the regularizer contributes to this run at all.
    pub fn regularized(&self) -> bool {
        self.mode != Mode::Baseline && self.lambda > 0.0
    }

    /// Fresh model for a node classification graph, seeded from `seed`.
    pub fn init_node_model(&self, g: &Graph) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Model::new(
            ModelShape {
                task: Task::NodeClassification,
                mechanism: Some(self.mechanism),
                in_dim: g.feature_dim(),
                hidden: self.hidden,
                heads: self.heads,
                layers: self.layers,
                outputs: g.num_classes(),
                num_categories: None,
            },
            &mut rng,
        )
    }
}

/// One edge deletion `(i, j)` evaluated for entity `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Intervention {
    pub entity: usize,
    pub src: usize,
    pub dst: usize,
    pub edge: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionRound {
    pub round: usize,
    pub interventions: Vec<Intervention>,
}

impl InterventionRound {
    pub fn edges(&self) -> Vec<usize> {
        self.interventions.iter().map(|iv| iv.edge).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.interventions.is_empty()
    }
}

/// A round with one causal effect per intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRound {
    pub round: InterventionRound,
    pub effects: Vec<f64>,
}

/// Nodes whose prediction in a `depth`-layer model can change when an in-edge
/// of some node in the returned set is removed: `entity` and everything that
/// reaches it within `depth - 1` hops.
fn receptive_targets(g: &Graph, entity: usize, depth: usize, mask: &EdgeMask) -> BTreeSet<usize> {
    let mut set = g.l_hop_in_neighborhood(entity, depth.saturating_sub(1), Some(mask));
    set.insert(entity);
    set
}

/// Sample one round of node-level interventions.
///
/// Every entity with an active in-edge proposes one uniformly drawn in-edge.
/// Entities are then visited in ascending id and a proposal is kept only if
/// its edge lies outside the receptive field of every entity kept so far and
/// no kept edge lies inside its own receptive field.
pub fn sample_intervention_round(
    g: &Graph,
    mask: &EdgeMask,
    entities: &[usize],
    depth: usize,
    round: usize,
    rng: &mut impl Rng,
) -> InterventionRound {
    let mut order: Vec<usize> = entities.to_vec();
    order.sort_unstable();
    order.dedup();

    let mut candidates = Vec::with_capacity(order.len());
    for &n in &order {
        let active: Vec<usize> = g.active_in_edges(n, Some(mask)).collect();
        if active.is_empty() {
            continue;
        }
        let e = active[rng.gen_range(0..active.len())];
        candidates.push(Intervention {
            entity: n,
            src: g.edge_src()[e],
            dst: n,
            edge: e,
        });
    }

    let nn = g.num_nodes();
    let mut covered = vec![false; nn];
    let mut removed_target = vec![false; nn];
    let mut kept = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if covered[cand.dst] {
            continue;
        }
        let field = receptive_targets(g, cand.entity, depth, mask);
        if field.iter().any(|&x| removed_target[x]) {
            continue;
        }
        for x in field {
            covered[x] = true;
        }
        removed_target[cand.dst] = true;
        kept.push(cand);
    }
    InterventionRound {
        round,
        interventions: kept,
    }
}

/// Sample one intervention per graph of a batch (graphs are disjoint, so any
/// choice is independent).
pub fn sample_graph_round(
    batch: &GraphBatch,
    mask: &EdgeMask,
    graphs: &[usize],
    round: usize,
    rng: &mut impl Rng,
) -> InterventionRound {
    let mut interventions = Vec::new();
    for &k in graphs {
        let active: Vec<usize> = (batch.edge_offsets[k]..batch.edge_offsets[k + 1])
            .filter(|&e| mask.is_active(e))
            .collect();
        if active.is_empty() {
            continue;
        }
        let e = active[rng.gen_range(0..active.len())];
        let (src, dst) = batch.graph.edge(e);
        interventions.push(Intervention {
            entity: k,
            src,
            dst,
            edge: e,
        });
    }
    InterventionRound { round, interventions }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Causal effect from the losses with and without the edge.
pub fn causal_effect_value(base_loss: f64, post_loss: f64, degree: usize, temperature: f64) -> f64 {
    let rho = post_loss / base_loss.max(RATIO_FLOOR);
    let x = if degree == 0 || rho == 1.0 {
        0.0
    } else {
        (degree as f64 * rho.ln()).exp_m1()
    };
    let x = if x.is_nan() { 0.0 } else { x.clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP) };
    let c = stable_sigmoid(x / temperature);
    // keep strictly inside (0, 1) once the sigmoid saturates in f64
    c.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Causal effect of one intervention, from two gradient-free forward passes
/// of the same parameters.
pub fn causal_effect(
    model: &Model,
    g: &Graph,
    mask: &EdgeMask,
    iv: &Intervention,
    degree: usize,
    temperature: f64,
) -> Result<f64> {
    if !mask.is_active(iv.edge) {
        return Err(Error::InvalidArgument(format!("edge {} is not active", iv.edge)));
    }
    let y = g.labels()[iv.entity] as f64;
    let base = model.node_forward(g, mask)?;
    let post = model.node_forward(g, &mask.without(&[iv.edge]))?;
    let lb = model::entity_loss(Task::NodeClassification, base.probs.row(iv.entity), y)?;
    let lp = model::entity_loss(Task::NodeClassification, post.probs.row(iv.entity), y)?;
    Ok(causal_effect_value(lb, lp, degree, temperature))
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / z).collect()
}

/// Effect of an intervention on the neighbor-voting classifier, whose
/// prediction for `j` is the softmax of its in-neighbors' label counts.
pub fn neighbor_vote_effect(g: &Graph, mask: &EdgeMask, iv: &Intervention, degree: usize, temperature: f64) -> Result<f64> {
    if !g.has_labels() {
        return Err(Error::InvalidArgument("neighbor voting needs node labels".into()));
    }
    let labels = g.labels();
    let mut counts = vec![0.0; g.num_classes()];
    let mut n_in = 0;
    for e in g.active_in_edges(iv.dst, Some(mask)) {
        counts[labels[g.edge_src()[e]]] += 1.0;
        n_in += 1;
    }
    if n_in == 0 {
        return Err(Error::InvalidArgument(format!("node {} has no active in-neighbor", iv.dst)));
    }
    let y = labels[iv.entity];
    let before = softmax(&counts);
    counts[labels[iv.src]] -= 1.0;
    // all-zero counts give a uniform vote
    let after = softmax(&counts);
    let lb = -before[y].max(PROB_FLOOR).ln();
    let la = -after[y].max(PROB_FLOOR).ln();
    Ok(causal_effect_value(lb, la, degree, temperature))
}

/// Causal regularization loss from attention values indexed by global edge id.
///
/// Returns `None` when every round is empty.
pub fn causal_loss(alpha: &[f64], rounds: &[ScoredRound]) -> Option<f64> {
    let nonempty: Vec<&ScoredRound> = rounds.iter().filter(|r| !r.round.is_empty()).collect();
    if nonempty.is_empty() {
        return None;
    }
    let total: f64 = nonempty
        .iter()
        .map(|r| {
            let s: f64 = r
                .round
                .interventions
                .iter()
                .zip(&r.effects)
                .map(|(iv, &c)| crate::tensor::bce_term(alpha[iv.edge], c))
                .sum();
            s / r.round.interventions.len() as f64
        })
        .sum();
    Some(total / nonempty.len() as f64)
}

/// Tape version of [`causal_loss`]; `alpha` covers the active edges and
/// `positions` maps global edge ids into it.
pub fn causal_loss_on(
    tape: &mut Tape,
    alpha: Var,
    positions: &[Option<usize>],
    rounds: &[ScoredRound],
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for r in rounds.iter().filter(|r| !r.round.is_empty()) {
        let idx: Vec<usize> = r
            .round
            .interventions
            .iter()
            .map(|iv| {
                positions[iv.edge].ok_or_else(|| Error::InvalidArgument(format!("edge {} has no live attention", iv.edge)))
            })
            .collect::<Result<_>>()?;
        let sel = tape.gather_rows(alpha, idx.into())?;
        terms.push(tape.binary_cross_entropy(sel, r.effects.clone().into())?);
    }
    if terms.is_empty() {
        log::warn!("all intervention rounds were empty; causal loss is zero for this step");
        return Ok(None);
    }
    let k = terms.len() as f64;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / k)))
}

pub fn total_loss(prediction_loss: f64, causal_loss: f64, lambda: f64) -> f64 {
    prediction_loss + lambda * causal_loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub causal_loss: Option<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Number of parameter updates whose result was kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_clock_seconds: f64,
}

fn check_finite(epoch: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            detail: format!("{what} = {v}"),
        })
    }
}

fn mean_entity_loss(probs: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
    let s: f64 = rows.iter().map(|&r| -probs.get2(r, labels[r]).max(PROB_FLOOR).ln()).sum();
    s / rows.len() as f64
}

/// Early-stopping bookkeeping shared by node and graph training.
struct Stopper {
    best_loss: f64,
    best_model: Option<Model>,
    best_epoch: usize,
    wait: usize,
    patience: usize,
}

impl Stopper {
    fn new(patience: usize) -> Self {
        Stopper {
            best_loss: f64::INFINITY,
            best_model: None,
            best_epoch: 0,
            wait: 0,
            patience,
        }
    }

    /// Record the validation loss of `model` after `epoch` updates; returns
    /// true when training should stop.
    fn observe(&mut self, epoch: usize, val_loss: f64, model: &Model) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_model = Some(model.clone());
            self.best_epoch = epoch;
            self.wait = 0;
            false
        } else {
            self.wait += 1;
            self.wait >= self.patience
        }
    }
}

fn apply_step(model: &mut Model, adam: &mut Adam, tape: &Tape, loss: Var, bound: &[Var]) -> Result<()> {
    let grads = tape.backward(loss)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let gs: Vec<Tensor> = bound
        .iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v)))
        .collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut params = model.params_mut();
    adam.step(&mut params, &gs, &name_refs)
}

/// Train a node classifier with (or without) causal attention regularization.
///
/// Validation loss is measured on the full-graph forward pass at the start of
/// every epoch, i.e. for the parameters produced by the previous epoch, and
/// the best such parameters are returned.
pub fn train(model: &Model, g: &Graph, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let train_nodes = g.nodes_in(Split::Train);
    let val_nodes = g.nodes_in(Split::Val);
    if train_nodes.is_empty() || val_nodes.is_empty() {
        return Err(Error::EmptyMask);
    }
    if !g.has_labels() {
        return Err(Error::InvalidArgument("node classification needs labels".into()));
    }
    let labels: Arc<[usize]> = g.labels().into();
    let mask = g.full_mask();
    let degrees: Vec<usize> = (0..g.num_nodes()).map(|j| g.in_degree(j, Some(&mask))).collect();

    let mut model = model.clone();
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut iv_rng = ChaCha8Rng::seed_from_u64(config.seed);
    iv_rng.set_stream(INTERVENTION_STREAM);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);

    let mut stopper = Stopper::new(config.patience);
    let mut history = Vec::new();
    let mut epochs_run = 0;
    let mut stopped = false;
    let mut order = train_nodes.clone();

    for epoch in 0..config.max_epochs {
        if order.len() > config.batch_size {
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_lp = 0.0;
        let mut epoch_lc: Option<f64> = None;
        let mut val_loss = f64::NAN;
        let batches: Vec<Vec<usize>> = order.chunks(config.batch_size).map(|c| c.to_vec()).collect();
        let nb = batches.len();
        for (b, batch) in batches.into_iter().enumerate() {
            let mut tape = Tape::new();
            let fwd = model.node_forward_on(&mut tape, g, &mask, true)?;
            if b == 0 {
                val_loss = mean_entity_loss(tape.value(fwd.probs), g.labels(), &val_nodes);
                check_finite(epoch, "validation loss", val_loss)?;
                if stopper.observe(epoch, val_loss, &model) {
                    stopped = true;
                    break;
                }
            }
            let rows: Arc<[usize]> = batch.clone().into();
            let lp = tape.cross_entropy(fwd.probs, labels.clone(), rows)?;
            let lp_val = tape.value(lp).item();
            check_finite(epoch, "prediction loss", lp_val)?;
            epoch_lp += lp_val / nb as f64;

            let mut loss = lp;
            if config.regularized() {
                let alpha = fwd.alpha.ok_or_else(|| Error::InvalidArgument("model has no attention layer".into()))?;
                let probs = tape.value(fwd.probs).clone();
                let hidden = tape.value(fwd.hidden).clone();
                let mut scored = Vec::with_capacity(config.rounds);
                for r in 0..config.rounds {
                    let round = sample_intervention_round(g, &mask, &batch, config.layers, r, &mut iv_rng);
                    let effects = match config.mode {
                        Mode::Car => {
                            if round.is_empty() {
                                Vec::new()
                            } else {
                                let masked = mask.without(&round.edges());
                                let post = model.node_probs_from_hidden(&hidden, g, &masked)?;
                                round
                                    .interventions
                                    .iter()
                                    .map(|iv| {
                                        let n = iv.entity;
                                        let y = g.labels()[n];
                                        let lb = -probs.get2(n, y).max(PROB_FLOOR).ln();
                                        let la = -post.get2(n, y).max(PROB_FLOOR).ln();
                                        causal_effect_value(lb, la, degrees[n], config.temperature)
                                    })
                                    .collect()
                            }
                        }
                        Mode::NeighborVote => round
                            .interventions
                            .iter()
                            .map(|iv| neighbor_vote_effect(g, &mask, iv, degrees[iv.entity], config.temperature))
                            .collect::<Result<_>>()?,
                        Mode::Baseline => unreachable!("baseline is never regularized"),
                    };
                    scored.push(ScoredRound { round, effects });
                }
                let positions = fwd.edges.positions(g.num_edges());
                if let Some(lc) = causal_loss_on(&mut tape, alpha, &positions, &scored)? {
                    let lc_val = tape.value(lc).item();
                    check_finite(epoch, "causal loss", lc_val)?;
                    *epoch_lc.get_or_insert(0.0) += lc_val / nb as f64;
                    let weighted = tape.scale(lc, config.lambda);
                    loss = tape.add(lp, weighted)?;
                }
            }
            apply_step(&mut model, &mut adam, &tape, loss, &fwd.params.all)?;
        }
        if stopped {
            break;
        }
        epochs_run = epoch + 1;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_lp,
            causal_loss: epoch_lc,
            val_loss,
        });
    }
    if !stopped {
        let out = model.node_forward(g, &mask)?;
        let val_loss = mean_entity_loss(&out.probs, g.labels(), &val_nodes);
        check_finite(epochs_run, "validation loss", val_loss)?;
        stopper.observe(epochs_run, val_loss, &model);
    }
    let best_epoch = stopper.best_epoch;
    let model = stopper.best_model.unwrap_or(model);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        epochs_run,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Train a graph-level model on `train` with early stopping on `val`.
/// Each graph is one entity and `d(n)` is its edge count.
pub fn train_graph_model(model: &Model, train: &GraphBatch, val: &GraphBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.mode == Mode::NeighborVote {
        return Err(Error::InvalidArgument("neighbor voting is defined for node classification only".into()));
    }
    let start = Instant::now();
    let task = model.task;
    let mask = train.graph.full_mask();
    let val_mask = val.graph.full_mask();
    let all_rows: Arc<[usize]> = (0..train.num_graphs()).collect::<Vec<_>>().into();
    let no_labels: Arc<[usize]> = Vec::new().into();

    let mut model = model.clone();
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut iv_rng = ChaCha8Rng::seed_from_u64(config.seed);
    iv_rng.set_stream(INTERVENTION_STREAM);
    let mut stopper = Stopper::new(config.patience);
    let mut history = Vec::new();
    let mut epochs_run = 0;

    let val_loss_of = |m: &Model| -> Result<f64> {
        let out = m.graph_forward(val, &val_mask)?;
        let mut s = 0.0;
        for (p, &t) in out.iter().zip(&val.targets) {
            s += model::entity_loss(task, &[*p], t)?;
        }
        Ok(s / val.num_graphs() as f64)
    };

    let mut stopped = false;
    for epoch in 0..config.max_epochs {
        let val_loss = val_loss_of(&model)?;
        check_finite(epoch, "validation loss", val_loss)?;
        if stopper.observe(epoch, val_loss, &model) {
            stopped = true;
            break;
        }
        let mut tape = Tape::new();
        let fwd = model.graph_forward_on(&mut tape, train, &mask, true)?;
        let lp = model::prediction_loss_on(&mut tape, task, fwd.output, &no_labels, &train.targets, &all_rows)?;
        let lp_val = tape.value(lp).item();
        check_finite(epoch, "prediction loss", lp_val)?;
        let mut loss = lp;
        let mut lc_val = None;
        if config.regularized() {
            let alpha = fwd.alpha.ok_or_else(|| Error::InvalidArgument("model has no attention layer".into()))?;
            let base = tape.value(fwd.output).data().to_vec();
            let graphs: Vec<usize> = (0..train.num_graphs()).collect();
            let mut scored = Vec::new();
            for r in 0..config.rounds {
                let round = sample_graph_round(train, &mask, &graphs, r, &mut iv_rng);
                let post = if round.is_empty() {
                    Vec::new()
                } else {
                    model.graph_forward(train, &mask.without(&round.edges()))?
                };
                let effects = round
                    .interventions
                    .iter()
                    .map(|iv| {
                        let k = iv.entity;
                        let t = train.targets[k];
                        let lb = model::entity_loss(task, &[base[k]], t)?;
                        let la = model::entity_loss(task, &[post[k]], t)?;
                        Ok(causal_effect_value(lb, la, train.num_edges_of(k), config.temperature))
                    })
                    .collect::<Result<Vec<_>>>()?;
                scored.push(ScoredRound { round, effects });
            }
            let positions = fwd.edges.positions(train.graph.num_edges());
            if let Some(lc) = causal_loss_on(&mut tape, alpha, &positions, &scored)? {
                lc_val = Some(tape.value(lc).item());
                let weighted = tape.scale(lc, config.lambda);
                loss = tape.add(lp, weighted)?;
            }
        }
        apply_step(&mut model, &mut adam, &tape, loss, &fwd.params.all)?;
        epochs_run = epoch + 1;
        history.push(EpochRecord {
            epoch,
            train_loss: lp_val,
            causal_loss: lc_val,
            val_loss,
        });
    }
    if !stopped {
        let v = val_loss_of(&model)?;
        stopper.observe(epochs_run, v, &model);
    }
    Ok(TrainOutcome {
        best_epoch: stopper.best_epoch,
        model: stopper.best_model.unwrap_or(model),
        history,
        epochs_run,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
