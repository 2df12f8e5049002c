//! Synthetic node-classification graphs with a controlled edge homophily.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeData, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Target fraction of same-label edges.
    pub homophily: f64,
    pub mean_degree: f64,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian noise added to one-hot label features.
    pub noise: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_nodes: 1000,
            num_classes: 5,
            homophily: 0.5,
            mean_degree: 4.0,
            feature_dim: 16,
            noise: 0.5,
            train_frac: 0.2,
            val_frac: 0.2,
        }
    }
}

/// Draw a graph where every node receives `ceil(mean_degree)` in-edges, each
/// from a same-label source with probability `homophily` and otherwise from a
/// uniformly chosen other class.
pub fn generate(params: &SynthParams, seed: u64) -> Result<Graph> {
    let SynthParams {
        num_nodes: n,
        num_classes: c,
        homophily,
        mean_degree,
        feature_dim,
        noise,
        train_frac,
        val_frac,
    } = *params;
    if !(0.0..=1.0).contains(&homophily) {
        return Err(Error::InvalidArgument(format!("homophily {homophily} outside [0, 1]")));
    }
    if c < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if mean_degree < 0.0 || mean_degree >= n as f64 {
        return Err(Error::InvalidArgument(format!(
            "mean degree {mean_degree} must be in [0, {n})"
        )));
    }
    if feature_dim < c {
        return Err(Error::InvalidArgument(format!(
            "feature_dim {feature_dim} cannot hold a one-hot over {c} classes"
        )));
    }
    if n < 2 * c {
        return Err(Error::InvalidArgument(format!("{n} nodes is too few for {c} classes")));
    }
    if train_frac < 0.0 || val_frac < 0.0 || train_frac + val_frac > 1.0 {
        return Err(Error::InvalidArgument("split fractions must be non-negative and sum to at most 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // balanced class sizes in random order, so every class has at least two members
    let mut labels: Vec<usize> = (0..n).map(|v| v % c).collect();
    labels.shuffle(&mut rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (v, &y) in labels.iter().enumerate() {
        members[y].push(v);
    }

    let k = mean_degree.ceil() as usize;
    let mut edges = Vec::with_capacity(n * k);
    for v in 0..n {
        let y = labels[v];
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..k {
            // a few redraws keep in-degrees close to k without looping forever on tiny classes
            for _attempt in 0..16 {
                let src_class = if rng.gen::<f64>() < homophily {
                    y
                } else {
                    let other = rng.gen_range(0..c - 1);
                    if other >= y {
                        other + 1
                    } else {
                        other
                    }
                };
                let pool = &members[src_class];
                let s = pool[rng.gen_range(0..pool.len())];
                if s != v && !chosen.contains(&s) {
                    chosen.push(s);
                    break;
                }
            }
        }
        edges.extend(chosen.into_iter().map(|s| (s, v)));
    }

    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut feats = vec![0.0; n * feature_dim];
    for v in 0..n {
        let row = &mut feats[v * feature_dim..(v + 1) * feature_dim];
        for x in row.iter_mut() {
            *x = normal.sample(&mut rng);
        }
        row[labels[v]] += 1.0;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (train_frac * n as f64).round() as usize;
    let n_val = (val_frac * n as f64).round() as usize;
    let mut splits = vec![Some(Split::Test); n];
    for (rank, &v) in order.iter().enumerate() {
        if rank < n_train {
            splits[v] = Some(Split::Train);
        } else if rank < n_train + n_val {
            splits[v] = Some(Split::Val);
        }
    }

    let (g, _) = Graph::build(
        &edges,
        true,
        NodeData {
            features: Tensor::matrix(n, feature_dim, feats)?,
            labels,
            num_classes: c,
            splits,
        },
    )?;
    Ok(g)
}
