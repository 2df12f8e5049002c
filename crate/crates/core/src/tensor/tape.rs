use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Clamp applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var, f64),
    Log(Var),
    Exp(Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    ScaleRows(Var, Var),
    SumCols(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        probs: Var,
        labels: Arc<[usize]>,
        rows: Arc<[usize]>,
    },
    Bce {
        pred: Var,
        target: Arc<[f64]>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Every operation appends one node whose parents were appended earlier, so
/// node order is a topological order and `backward` is a single reverse sweep.
/// A tape with no `param` leaves records nothing that needs a gradient and is
/// what the gradient-free intervention passes use.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("{} x {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[n,m] + bias[m]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.shape().len() != 2 || tb.shape() != [ta.shape()[1]] {
            return Err(Error::dim(
                "add_bias",
                format!("{} + {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let m = ta.shape()[1];
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(a, bias), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                name,
                format!("{} vs {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, out).expect("unary op preserves shape"),
            op,
            rg,
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    /// `1 / (1 + exp(-x / temperature))`.
    pub fn sigmoid(&mut self, a: Var, temperature: f64) -> Var {
        self.unary(
            a,
            |x| stable_sigmoid(x / temperature),
            Op::Sigmoid(a, temperature),
        )
    }

    /// Natural log with inputs floored at [`PROB_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(PROB_FLOOR).ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Concatenate two matrices with the same row count along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::dim(
                "concat_cols",
                format!("{} | {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let (n, ma, mb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![n, ma + mb], out)?,
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    /// Select rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().is_empty() {
            return Err(Error::dim("gather_rows", "scalar input"));
        }
        let rows = ta.rows();
        let w = ta.row_width();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &r in idx.iter() {
            if r >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: r,
                    bound: rows,
                });
            }
            out.extend_from_slice(ta.row(r));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows(a, idx), rg))
    }

    /// Sum rows sharing a segment id into `num_segments` output rows.
    pub fn segment_sum(
        &mut self,
        a: Var,
        segments: Arc<[usize]>,
        num_segments: usize,
    ) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().is_empty() || ta.rows() != segments.len() {
            return Err(Error::dim(
                "segment_sum",
                format!("{} with {} segment ids", shape_str(ta), segments.len()),
            ));
        }
        let w = ta.row_width();
        let mut out = vec![0.0; num_segments * w];
        for (e, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::Index {
                    what: "segment_sum",
                    index: s,
                    bound: num_segments,
                });
            }
            for (o, &v) in out[s * w..(s + 1) * w].iter_mut().zip(ta.row(e)) {
                *o += v;
            }
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = num_segments;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SegmentSum(a, segments), rg))
    }

    /// Softmax of a score vector within each segment.
    pub fn segment_softmax(
        &mut self,
        scores: Var,
        segments: Arc<[usize]>,
        num_segments: usize,
    ) -> Result<Var> {
        let ts = self.value(scores);
        if ts.shape().len() != 1 || ts.len() != segments.len() {
            return Err(Error::dim(
                "segment_softmax",
                format!("{} with {} segment ids", shape_str(ts), segments.len()),
            ));
        }
        let out = segment_softmax_raw(ts.data(), &segments, num_segments)?;
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::vector(out),
            Op::SegmentSoftmax(scores, segments),
            rg,
        ))
    }

    /// Multiply row `i` of `a` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ta.shape().is_empty() || ts.shape() != [ta.rows()] {
            return Err(Error::dim(
                "scale_rows",
                format!("{} by {}", shape_str(ta), shape_str(ts)),
            ));
        }
        let w = ta.row_width();
        let mut out = ta.data().to_vec();
        for (row, &f) in out.chunks_mut(w.max(1)).zip(ts.data()) {
            for o in row {
                *o *= f;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleRows(a, s), rg))
    }

    /// Row sums of a matrix: `[n, m] -> [n]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::dim("sum_cols", shape_str(ta)));
        }
        let out: Vec<f64> = (0..ta.rows()).map(|i| ta.row(i).iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::SumCols(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::dim("softmax_rows", shape_str(ta)));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(ta.row_width().max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::dim("mean", "empty input"));
        }
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Mean over `rows` of `-ln p[row, label[row]]`, with `p` floored at [`PROB_FLOOR`].
    pub fn cross_entropy(
        &mut self,
        probs: Var,
        labels: Arc<[usize]>,
        rows: Arc<[usize]>,
    ) -> Result<Var> {
        let tp = self.value(probs);
        if tp.shape().len() != 2 || tp.rows() != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} with {} labels", shape_str(tp), labels.len()),
            ));
        }
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        let c = tp.row_width();
        let mut total = 0.0;
        for &r in rows.iter() {
            if r >= tp.rows() {
                return Err(Error::Index {
                    what: "cross_entropy row",
                    index: r,
                    bound: tp.rows(),
                });
            }
            let y = labels[r];
            if y >= c {
                return Err(Error::Index {
                    what: "class label",
                    index: y,
                    bound: c,
                });
            }
            total -= tp.get2(r, y).max(PROB_FLOOR).ln();
        }
        let v = total / rows.len() as f64;
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(v),
            Op::CrossEntropy {
                probs,
                labels,
                rows,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of predictions against constant targets.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: Arc<[f64]>) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() {
            return Err(Error::dim(
                "binary_cross_entropy",
                format!("{} predictions vs {} targets", tp.len(), target.len()),
            ));
        }
        if tp.is_empty() {
            return Err(Error::dim("binary_cross_entropy", "empty input"));
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| bce_term(p, t))
            .sum();
        let v = total / tp.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(v), Op::Bce { pred, target }, rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::InvalidArgument("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {}", shape_str(&self.nodes[loss.0].value)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &tb.data()[p * m..(p + 1) * m];
                            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            ga[i * k + p] += dot;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::AddBias(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                let m = out.row_width();
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(m) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o += sign * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &v), &y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += v * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &v), &x) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += v * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o += v * s;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ma, mb) = (self.value(*a).row_width(), self.value(*b).row_width());
                let w = ma + mb;
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, row) in g.chunks(w).enumerate() {
                        for (o, &v) in ga[i * ma..(i + 1) * ma].iter_mut().zip(&row[..ma]) {
                            *o += v;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, row) in g.chunks(w).enumerate() {
                        for (o, &v) in gb[i * mb..(i + 1) * mb].iter_mut().zip(&row[ma..]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &v), &x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        *o += if x > 0.0 { v } else { slope * v };
                    }
                }
            }
            Op::Sigmoid(a, t) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &v), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *o += v * y * (1.0 - y) / t;
                    }
                }
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &v), &x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if x > PROB_FLOOR {
                            *o += v / x;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &v), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *o += v * y;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let w = out.row_width();
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &v) in ga[r * w..(r + 1) * w].iter_mut().zip(&g[k * w..(k + 1) * w]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SegmentSum(a, seg) => {
                let w = out.row_width();
                if let Some(ga) = self.acc(grads, *a) {
                    for (e, &s) in seg.iter().enumerate() {
                        for (o, &v) in ga[e * w..(e + 1) * w].iter_mut().zip(&g[s * w..(s + 1) * w]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let y = out.data();
                    let num_segments = seg.iter().map(|&s| s + 1).max().unwrap_or(0);
                    let mut dot = vec![0.0; num_segments];
                    for (e, &s) in seg.iter().enumerate() {
                        dot[s] += y[e] * g[e];
                    }
                    for (e, &s) in seg.iter().enumerate() {
                        ga[e] += y[e] * (g[e] - dot[s]);
                    }
                }
            }
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let w = ta.row_width();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &f) in ts.data().iter().enumerate() {
                        for (o, &v) in ga[i * w..(i + 1) * w].iter_mut().zip(&g[i * w..(i + 1) * w]) {
                            *o += v * f;
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for (i, o) in gs.iter_mut().enumerate() {
                        let d: f64 = g[i * w..(i + 1) * w]
                            .iter()
                            .zip(ta.row(i))
                            .map(|(x, y)| x * y)
                            .sum();
                        *o += d;
                    }
                }
            }
            Op::SumCols(a) => {
                let w = self.value(*a).row_width();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &v) in g.iter().enumerate() {
                        for o in &mut ga[i * w..(i + 1) * w] {
                            *o += v;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let w = out.row_width();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, (yrow, grow)) in out.data().chunks(w).zip(g.chunks(w)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, v)| y * v).sum();
                        for (k, o) in ga[i * w..(i + 1) * w].iter_mut().enumerate() {
                            *o += yrow[k] * (grow[k] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let f = g[0] / ga.len() as f64;
                    for o in ga.iter_mut() {
                        *o += f;
                    }
                }
            }
            Op::CrossEntropy {
                probs,
                labels,
                rows,
            } => {
                let tp = self.value(*probs);
                let c = tp.row_width();
                let scale = g[0] / rows.len() as f64;
                if let Some(gp) = self.acc(grads, *probs) {
                    for &r in rows.iter() {
                        let p = tp.get2(r, labels[r]);
                        if p > PROB_FLOOR {
                            gp[r * c + labels[r]] -= scale / p;
                        }
                    }
                }
            }
            Op::Bce { pred, target } => {
                let tp = self.value(*pred);
                let scale = g[0] / tp.len() as f64;
                if let Some(gp) = self.acc(grads, *pred) {
                    for ((o, &p), &t) in gp.iter_mut().zip(tp.data()).zip(target.iter()) {
                        if p > PROB_FLOOR && p < 1.0 - PROB_FLOOR {
                            *o += scale * (-(t / p) + (1.0 - t) / (1.0 - p));
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

pub(crate) fn segment_softmax_raw(
    scores: &[f64],
    segments: &[usize],
    num_segments: usize,
) -> Result<Vec<f64>> {
    let mut mx = vec![f64::NEG_INFINITY; num_segments];
    for (&s, &v) in segments.iter().zip(scores) {
        if s >= num_segments {
            return Err(Error::Index {
                what: "segment_softmax",
                index: s,
                bound: num_segments,
            });
        }
        if v > mx[s] {
            mx[s] = v;
        }
    }
    let mut out: Vec<f64> = segments
        .iter()
        .zip(scores)
        .map(|(&s, &v)| (v - mx[s]).exp())
        .collect();
    let mut z = vec![0.0; num_segments];
    for (&s, &v) in segments.iter().zip(&out) {
        z[s] += v;
    }
    for (o, &s) in out.iter_mut().zip(segments) {
        *o /= z[s];
    }
    Ok(out)
}
