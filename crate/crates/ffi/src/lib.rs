//! C interface to `car-core`.
//!
//! Graphs and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`CarStatus`]; on failure the
//! message is kept per thread and can be copied out with
//! [`car_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use car_core::attention::Mechanism;
use car_core::car::{causal_effect_value, Mode, TrainConfig};
use car_core::graph::Graph;
use car_core::metrics::run_node_experiment;
use car_core::model::Model;
use car_core::synth::{generate, SynthParams};
use car_core::Error;

pub const CAR_MODE_BASELINE: u32 = 0;
pub const CAR_MODE_CAR: u32 = 1;
pub const CAR_MODE_NEIGHBOR_VOTE: u32 = 2;

pub const CAR_MECHANISM_GAT: u32 = 0;
pub const CAR_MECHANISM_GATV2: u32 = 1;
pub const CAR_MECHANISM_TRANSFORMER: u32 = 2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericError = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque graph handle.
pub struct CarGraph {
    inner: Graph,
}

/// Opaque model handle.
pub struct CarModel {
    inner: Model,
}

/// Training settings; `mode` and `mechanism` take the `CAR_MODE_*` and
/// `CAR_MECHANISM_*` values.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CarTrainConfig {
    pub mode: u32,
    pub mechanism: u32,
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

/// Test-split results of a training run; `mean_kl` is NaN when undefined.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CarMetrics {
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub mean_kl: f64,
    pub epochs_run: usize,
    pub wall_clock_seconds: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CarStatus {
    match e.exit_code() {
        1 => CarStatus::InvalidArgument,
        2 => CarStatus::DataError,
        _ => match e {
            Error::Dimension { .. } | Error::Index { .. } | Error::EmptyMask | Error::EmptyGraph => {
                CarStatus::InvalidArgument
            }
            _ => CarStatus::NumericError,
        },
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (CarStatus, String)>) -> CarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CarStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CarStatus::Panic
        }
    }
}

fn core<T>(r: car_core::Result<T>) -> Result<T, (CarStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CarStatus, String) {
    (CarStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (CarStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CarStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn graph_ref<'a>(g: *const CarGraph) -> Result<&'a Graph, (CarStatus, String)> {
    g.as_ref().map(|g| &g.inner).ok_or_else(|| null("graph"))
}

unsafe fn model_ref<'a>(m: *const CarModel) -> Result<&'a Model, (CarStatus, String)> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn car_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Fill `out` with the default training settings.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn car_train_config_default(out: *mut CarTrainConfig) -> CarStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = TrainConfig::default();
        *out = CarTrainConfig {
            mode: CAR_MODE_CAR,
            mechanism: CAR_MECHANISM_GAT,
            layers: c.layers,
            heads: c.heads,
            hidden: c.hidden,
            lambda: c.lambda,
            rounds: c.rounds,
            temperature: c.temperature,
            lr: c.lr,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            seed: c.seed,
        };
        Ok(())
    })
}

fn to_config(c: &CarTrainConfig) -> Result<TrainConfig, (CarStatus, String)> {
    let bad = |what: &str, v: u32| (CarStatus::InvalidArgument, format!("unknown {what} code {v}"));
    let mode = match c.mode {
        CAR_MODE_BASELINE => Mode::Baseline,
        CAR_MODE_CAR => Mode::Car,
        CAR_MODE_NEIGHBOR_VOTE => Mode::NeighborVote,
        v => return Err(bad("mode", v)),
    };
    let mechanism = match c.mechanism {
        CAR_MECHANISM_GAT => Mechanism::Gat,
        CAR_MECHANISM_GATV2 => Mechanism::Gatv2,
        CAR_MECHANISM_TRANSFORMER => Mechanism::Transformer,
        v => return Err(bad("mechanism", v)),
    };
    let config = TrainConfig {
        mode,
        mechanism,
        layers: c.layers,
        heads: c.heads,
        hidden: c.hidden,
        lambda: c.lambda,
        rounds: c.rounds,
        temperature: c.temperature,
        lr: c.lr,
        batch_size: c.batch_size,
        max_epochs: c.max_epochs,
        patience: c.patience,
        seed: c.seed,
    };
    core(config.validate())?;
    Ok(config)
}

/// Load a dataset directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn car_graph_load(dir: *const c_char, out: *mut *mut CarGraph) -> CarStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let g = core(car_core::io::load_dataset(&dir))?;
        *out = Box::into_raw(Box::new(CarGraph { inner: g }));
        Ok(())
    })
}

/// Generate a synthetic node classification graph.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn car_graph_synthetic(
    num_nodes: usize,
    num_classes: usize,
    homophily: f64,
    mean_degree: f64,
    feature_dim: usize,
    seed: u64,
    out: *mut *mut CarGraph,
) -> CarStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let params = SynthParams {
            num_nodes,
            num_classes,
            homophily,
            mean_degree,
            feature_dim,
            ..SynthParams::default()
        };
        let g = core(generate(&params, seed))?;
        *out = Box::into_raw(Box::new(CarGraph { inner: g }));
        Ok(())
    })
}

/// # Safety
/// `g` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn car_graph_free(g: *mut CarGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live graph handle.
#[no_mangle]
pub unsafe extern "C" fn car_graph_num_nodes(g: *const CarGraph) -> usize {
    g.as_ref().map_or(0, |g| g.inner.num_nodes())
}

/// Number of directed edges, or 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live graph handle.
#[no_mangle]
pub unsafe extern "C" fn car_graph_num_edges(g: *const CarGraph) -> usize {
    g.as_ref().map_or(0, |g| g.inner.num_edges())
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live graph handle.
#[no_mangle]
pub unsafe extern "C" fn car_graph_num_classes(g: *const CarGraph) -> usize {
    g.as_ref().map_or(0, |g| g.inner.num_classes())
}

/// Fraction of edges joining same-label nodes.
///
/// # Safety
/// `g` must be a live graph handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn car_graph_homophily(g: *const CarGraph, out: *mut f64) -> CarStatus {
    guard(|| {
        let g = graph_ref(g)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = core(g.edge_homophily(None))?;
        Ok(())
    })
}

/// Initialise and train a node classifier on `g`, returning the
/// best-validation model and, if `metrics` is non-null, its test metrics.
///
/// # Safety
/// `g` must be a live graph handle, `config` readable, `out` writable and
/// `metrics` null or writable.
#[no_mangle]
pub unsafe extern "C" fn car_train(
    g: *const CarGraph,
    config: *const CarTrainConfig,
    out: *mut *mut CarModel,
    metrics: *mut CarMetrics,
) -> CarStatus {
    guard(|| {
        let g = graph_ref(g)?;
        let config = to_config(config.as_ref().ok_or_else(|| null("config"))?)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (outcome, record) = core(run_node_experiment("ffi", g, &config))?;
        if let Some(m) = metrics.as_mut() {
            *m = CarMetrics {
                test_accuracy: record.test_accuracy,
                test_loss: record.test_loss,
                mean_kl: record.mean_kl.unwrap_or(f64::NAN),
                epochs_run: record.epochs_run,
                wall_clock_seconds: record.wall_clock_seconds,
            };
        }
        *out = Box::into_raw(Box::new(CarModel { inner: outcome.model }));
        Ok(())
    })
}

/// Write row-major class probabilities for every node of `g` into `probs`,
/// which must hold `num_nodes * num_classes` values.
///
/// # Safety
/// Handles must be live and `probs` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn car_model_predict(m: *const CarModel, g: *const CarGraph, probs: *mut f64, len: usize) -> CarStatus {
    guard(|| {
        let m = model_ref(m)?;
        let g = graph_ref(g)?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let out = core(m.node_forward(g, &g.full_mask()))?;
        let data = out.probs.data();
        if len < data.len() {
            return Err((CarStatus::BufferTooSmall, format!("need {} values, buffer holds {len}", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), probs, data.len());
        Ok(())
    })
}

/// # Safety
/// `m` must be a live model handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn car_model_save(m: *const CarModel, path: *const c_char) -> CarStatus {
    guard(|| {
        let m = model_ref(m)?;
        let path = path_arg(path, "path")?;
        core(m.save(&path))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn car_model_load(path: *const c_char, out: *mut *mut CarModel) -> CarStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = core(Model::load(&path))?;
        *out = Box::into_raw(Box::new(CarModel { inner: m }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn car_model_free(m: *mut CarModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Causal effect of an edge removal from the entity's loss with and without
/// the edge, its in-degree and the temperature.
#[no_mangle]
pub extern "C" fn car_causal_effect(base_loss: f64, post_loss: f64, degree: usize, temperature: f64) -> f64 {
    causal_effect_value(base_loss, post_loss, degree, temperature)
}
