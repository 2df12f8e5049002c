//! Grid sweeps over training configurations with matched baselines.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attention::Mechanism;
use crate::car::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{run_node_experiment, MetricsRecord};
use crate::stats;

pub const WORKERS_ENV: &str = "CAR_NUM_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub mechanisms: Vec<Mechanism>,
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub hidden: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Grid {
    /// 3 mechanisms x L in {1, 2} x K in {1, 3, 5} x F' in {10, 25, 100, 200}
    /// x lambda in {0.1, 0.5, 1, 5}.
    pub fn full() -> Self {
        Grid {
            mechanisms: Mechanism::ALL.to_vec(),
            layers: vec![1, 2],
            heads: vec![1, 3, 5],
            hidden: vec![10, 25, 100, 200],
            lambdas: vec![0.1, 0.5, 1.0, 5.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mechanisms.is_empty()
            || self.layers.is_empty()
            || self.heads.is_empty()
            || self.hidden.is_empty()
            || self.lambdas.is_empty()
        {
            return Err(Error::InvalidArgument("every grid axis needs at least one value".into()));
        }
        Ok(())
    }

    /// Number of regularized settings per seed.
    pub fn num_settings(&self) -> usize {
        self.mechanisms.len() * self.layers.len() * self.heads.len() * self.hidden.len() * self.lambdas.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub grid: Grid,
    pub seeds: Vec<u64>,
    /// Regularized mode compared against the matched baselines.
    pub mode: Mode,
    /// Values for every field the grid does not vary.
    pub base: TrainConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("no seeds given".into()));
        }
        if self.mode == Mode::Baseline {
            return Err(Error::InvalidArgument("sweep mode must be car or neighbor_vote".into()));
        }
        Ok(())
    }

    /// Every configuration of the sweep: per seed and architecture, one
    /// baseline followed by one regularized run per lambda.
    pub fn cells(&self) -> Vec<TrainConfig> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &mechanism in &g.mechanisms {
                for &layers in &g.layers {
                    for &heads in &g.heads {
                        for &hidden in &g.hidden {
                            let arch = TrainConfig {
                                mechanism,
                                layers,
                                heads,
                                hidden,
                                seed,
                                ..self.base.clone()
                            };
                            out.push(TrainConfig {
                                mode: Mode::Baseline,
                                lambda: 0.0,
                                ..arch.clone()
                            });
                            for &lambda in &g.lambdas {
                                out.push(TrainConfig {
                                    mode: self.mode,
                                    lambda,
                                    ..arch.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Worker count from `CAR_NUM_WORKERS`, else the available parallelism.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::InvalidArgument(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Run every configuration on `g` with up to `workers` threads. When
/// `cell_dir` is given, each finished cell also writes its own record file.
/// Records come back in `configs` order regardless of scheduling.
pub fn run_cells(
    dataset: &str,
    g: &Graph,
    configs: &[TrainConfig],
    workers: usize,
    cell_dir: Option<&Path>,
) -> Result<Vec<MetricsRecord>> {
    if let Some(dir) = cell_dir {
        fs::create_dir_all(dir)?;
    }
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let results: Mutex<Vec<Option<Result<MetricsRecord>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    let work = || loop {
        if abort.load(Ordering::Relaxed) {
            break;
        }
        let k = next.fetch_add(1, Ordering::Relaxed);
        if k >= configs.len() {
            break;
        }
        let res = run_node_experiment(dataset, g, &configs[k]).map(|(_, r)| r).and_then(|r| {
            if let Some(dir) = cell_dir {
                fs::write(dir.join(format!("cell_{k:05}.json")), r.to_json_line()? + "\n")?;
            }
            Ok(r)
        });
        match &res {
            Ok(r) => log::info!(
                "cell {}/{}: {} {} L={} K={} F'={} lambda={} seed={} loss={:.4}",
                k + 1,
                configs.len(),
                r.config.mode,
                r.config.mechanism,
                r.config.layers,
                r.config.heads,
                r.config.hidden,
                r.config.lambda,
                r.config.seed,
                r.test_loss
            ),
            Err(_) => abort.store(true, Ordering::Relaxed),
        }
        results.lock().expect("result lock poisoned")[k] = Some(res);
    };
    let workers = workers.clamp(1, configs.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    let mut out = Vec::with_capacity(configs.len());
    for r in results.into_inner().expect("result lock poisoned").into_iter().flatten() {
        out.push(r?);
    }
    if out.len() != configs.len() {
        return Err(Error::InvalidArgument("sweep stopped before every cell finished".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `all` or a mechanism name.
    pub scope: String,
    pub pairs: usize,
    pub median_baseline_loss: f64,
    pub median_regularized_loss: f64,
    /// One-tailed paired Wilcoxon p for lower regularized test loss.
    pub wilcoxon_p: Option<f64>,
    /// One-tailed Welch p for larger loss reductions at lambda in {1, 5}
    /// than at lambda in {0.1, 0.5}.
    pub welch_p: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub dataset: String,
    pub mode: Mode,
    pub num_records: usize,
    pub comparisons: Vec<Comparison>,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn arch_key(c: &TrainConfig) -> (Mechanism, usize, usize, usize, u64) {
    (c.mechanism, c.layers, c.heads, c.hidden, c.seed)
}

/// Paired (baseline, regularized) test losses with the regularized run's lambda.
pub fn matched_pairs(records: &[MetricsRecord], mode: Mode) -> Vec<(f64, f64, f64, Mechanism)> {
    let baselines: HashMap<_, f64> = records
        .iter()
        .filter(|r| r.config.mode == Mode::Baseline)
        .map(|r| (arch_key(&r.config), r.test_loss))
        .collect();
    records
        .iter()
        .filter(|r| r.config.mode == mode)
        .filter_map(|r| {
            baselines
                .get(&arch_key(&r.config))
                .map(|&b| (b, r.test_loss, r.config.lambda, r.config.mechanism))
        })
        .collect()
}

fn compare(scope: String, pairs: &[(f64, f64, f64, Mechanism)]) -> Comparison {
    let base: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let reg: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut notes = Vec::new();
    let wilcoxon_p = match stats::wilcoxon_signed_rank_one_tailed(&base, &reg) {
        Ok(p) => Some(p),
        Err(e) => {
            notes.push(format!("wilcoxon: {e}"));
            None
        }
    };
    let strong: Vec<f64> = pairs.iter().filter(|p| p.2 == 1.0 || p.2 == 5.0).map(|p| p.0 - p.1).collect();
    let weak: Vec<f64> = pairs.iter().filter(|p| p.2 == 0.1 || p.2 == 0.5).map(|p| p.0 - p.1).collect();
    let welch_p = match stats::welch_t_one_tailed(&strong, &weak) {
        Ok(p) => Some(p),
        Err(e) => {
            notes.push(format!("welch: {e}"));
            None
        }
    };
    Comparison {
        scope,
        pairs: pairs.len(),
        median_baseline_loss: median(&base),
        median_regularized_loss: median(&reg),
        wilcoxon_p,
        welch_p,
        notes,
    }
}

pub fn summarize(dataset: &str, records: &[MetricsRecord], mode: Mode) -> SweepSummary {
    let pairs = matched_pairs(records, mode);
    let mut comparisons = vec![compare("all".into(), &pairs)];
    let mut mechs: Vec<Mechanism> = pairs.iter().map(|p| p.3).collect();
    mechs.sort_by_key(|m| m.name());
    mechs.dedup();
    for m in mechs {
        let sub: Vec<_> = pairs.iter().copied().filter(|p| p.3 == m).collect();
        comparisons.push(compare(m.name().into(), &sub));
    }
    SweepSummary {
        dataset: dataset.to_string(),
        mode,
        num_records: records.len(),
        comparisons,
    }
}

/// Run a full sweep, writing `records.jsonl`, per-cell files under `cells/`
/// and `summary.json` into `out_dir`.
pub fn run_sweep(
    dataset: &str,
    g: &Graph,
    spec: &ExperimentSpec,
    workers: usize,
    out_dir: &Path,
) -> Result<(Vec<MetricsRecord>, SweepSummary)> {
    spec.validate()?;
    let configs = spec.cells();
    log::info!("sweep: {} runs on {dataset} with {workers} worker(s)", configs.len());
    let records = run_cells(dataset, g, &configs, workers, Some(&out_dir.join("cells")))?;
    let mut w = std::io::BufWriter::new(fs::File::create(out_dir.join("records.jsonl"))?);
    for r in &records {
        writeln!(w, "{}", r.to_json_line()?)?;
    }
    w.flush()?;
    let summary = summarize(dataset, &records, spec.mode);
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok((records, summary))
}
