#![allow(dead_code)]

use car_core::attention::Mechanism;
use car_core::graph::{Graph, NodeData, Split};
use car_core::model::{Model, ModelShape, Task};
use car_core::tensor::{Tape, Tensor, Var};
use car_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;
/// Gradients smaller than this in both estimates are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Directed graph with `n` nodes, each edge present with probability `p`,
/// Gaussian-ish features of width `f`, labels in `0..c` and random splits.
pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64, f: usize, c: usize) -> Graph {
    let mut edges = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s != t && rng.gen::<f64>() < p {
                edges.push((s, t));
            }
        }
    }
    let features: Vec<f64> = (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let splits: Vec<Option<Split>> = (0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            _ => Some(Split::Test),
        })
        .collect();
    Graph::build(
        &edges,
        true,
        NodeData {
            features: Tensor::matrix(n, f, features).unwrap(),
            labels,
            num_classes: c,
            splits,
        },
    )
    .unwrap()
    .0
}

pub fn node_model(
    rng: &mut impl Rng,
    g: &Graph,
    mechanism: Option<Mechanism>,
    layers: usize,
    heads: usize,
    hidden: usize,
) -> Model {
    Model::new(
        ModelShape {
            task: Task::NodeClassification,
            mechanism,
            in_dim: g.feature_dim(),
            hidden,
            heads,
            layers,
            outputs: g.num_classes(),
            num_categories: None,
        },
        rng,
    )
    .unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Largest relative error between tape gradients and central differences of
/// the scalar built by `build` from leaves holding `inputs`.
pub fn max_grad_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let l = build(&mut t, &vs).unwrap();
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], x);
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduce any tensor to a scalar through fixed random weights so every
/// output element gets a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let wv = tape.constant(w);
    let p = tape.mul(v, wv)?;
    Ok(tape.sum(p))
}

/// Average 1-based ranks computed by counting, independent of any sort.
pub fn oracle_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let below = values.iter().filter(|&&u| u < v).count() as f64;
            let equal = values.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// `P(W+ >= observed)` for the non-zero differences `d`, by enumerating all
/// sign assignments of the ranks.
pub fn brute_force_wilcoxon(d: &[f64]) -> f64 {
    let ranks = oracle_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let observed: f64 = ranks.iter().zip(d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let n = d.len();
    let hits = (0u64..1 << n)
        .filter(|pattern| {
            let w: f64 = (0..n).filter(|k| pattern >> k & 1 == 1).map(|k| ranks[k]).sum();
            w >= observed - 1e-9
        })
        .count();
    hits as f64 / (1u64 << n) as f64
}
