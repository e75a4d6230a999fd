use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};
use crate::graph::CsrMatrix;

/// Clamp bound for predicted probabilities inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Norm floor inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce or stack along rows (result has one row per column group).
    Rows,
    /// Reduce or stack along columns.
    Cols,
}

/// Contiguous groups over a flat slot list. Group `g` covers slots
/// `offsets[g]..offsets[g + 1]`; `index[slot]` names the row a slot reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    index: Vec<usize>,
}

impl Segments {
    pub fn from_groups<I, G>(groups: I) -> Self
    where
        I: IntoIterator<Item = G>,
        G: IntoIterator<Item = usize>,
    {
        let mut offsets = vec![0];
        let mut index = Vec::new();
        for g in groups {
            index.extend(g);
            offsets.push(index.len());
        }
        Self { offsets, index }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total slot count.
    pub fn slots(&self) -> usize {
        self.index.len()
    }

    pub fn span(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.index[self.span(g)]
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Softmax(Var, Axis),
    Concat(Vec<Var>, Axis),
    Mean(Var, Axis),
    L2Norm(Var),
    Cosine(Var, Var),
    Dropout(Var, Rc<Vec<f64>>),
    Bce(Var, Rc<Vec<f64>>),
    GatherRows(Var, Rc<Vec<usize>>),
    SpMM(Rc<CsrMatrix>, Var),
    ScaleRows(Var, Rc<Vec<f64>>),
    WeightedSum(Var, Rc<Vec<f64>>),
    SegmentSoftmax(Var, Rc<Segments>),
    SegmentWeightedSum(Var, Var, Rc<Segments>),
}

struct Entry {
    value: Tensor,
    op: Op,
}

/// Parameter gradients produced by [`Tape::backward`], keyed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.grads.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// Wengert list recording every operation of one forward pass.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    consumed: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.entries[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.entries.push(Entry { value, op });
        Ok(Var(self.entries.len() - 1))
    }

    /// Records a constant; it receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.entries.push(Entry { value: t, op: Op::Leaf });
        Var(self.entries.len() - 1)
    }

    /// Records a trainable parameter under `id`. Registering the same id
    /// twice accumulates both gradients into one.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        self.entries.push(Entry { value: t.clone(), op: Op::Param(id) });
        Var(self.entries.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// Elementwise sum. `b` may also be a `1×c` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            Tensor::from_vec(ta.rows(), ta.cols(), ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect())?
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            let mut out = ta.clone();
            for r in 0..out.rows() {
                out.row_mut(r).iter_mut().zip(tb.data()).for_each(|(x, y)| *x += y);
            }
            out
        } else {
            return Err(Error::Shape { op: "add", left: ta.shape(), right: tb.shape() });
        };
        self.push("add", out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push("affine", out, Op::Affine(a, scale))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0) {
            return Err(Error::Config(format!("leaky_relu slope must be positive, got {slope}")));
        }
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope))
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(elu);
        self.push("elu", out, Op::Elu(a))
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let mut out = t.clone();
        let softmax_lane = |get: &dyn Fn(usize) -> f64, n: usize| -> Vec<f64> {
            let m = (0..n).map(get).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..n).map(|i| (get(i) - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        };
        match axis {
            Axis::Cols => {
                for i in 0..r {
                    let lane = softmax_lane(&|j| t.get(i, j), c);
                    out.row_mut(i).copy_from_slice(&lane);
                }
            }
            Axis::Rows => {
                for j in 0..c {
                    let lane = softmax_lane(&|i| t.get(i, j), r);
                    for (i, v) in lane.into_iter().enumerate() {
                        out.set(i, j, v);
                    }
                }
            }
        }
        self.push("softmax", out, Op::Softmax(a, axis))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Config("concat of nothing".into()))?;
        let (r0, c0) = self.shape(first);
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != c0 {
                        return Err(Error::Shape { op: "concat", left: (r0, c0), right: t.shape() });
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != r0 {
                        return Err(Error::Shape { op: "concat", left: (r0, c0), right: t.shape() });
                    }
                    cols += t.cols();
                }
                let mut out = Tensor::zeros(r0, cols);
                for i in 0..r0 {
                    let mut off = 0;
                    for &p in parts {
                        let t = self.value(p);
                        out.row_mut(i)[off..off + t.cols()].copy_from_slice(t.row(i));
                        off += t.cols();
                    }
                }
                out
            }
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis))
    }

    /// Mean along an axis: `Rows` gives `1×c`, `Cols` gives `r×1`.
    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let out = match axis {
            Axis::Rows => {
                let mut out = Tensor::zeros(1, c);
                for i in 0..r {
                    out.data_mut().iter_mut().zip(t.row(i)).for_each(|(o, x)| *o += x / r as f64);
                }
                out
            }
            Axis::Cols => Tensor::column_vector((0..r).map(|i| t.row(i).iter().sum::<f64>() / c as f64).collect()),
        };
        self.push("mean", out, Op::Mean(a, axis))
    }

    /// Row-wise Euclidean norm (`r×1`).
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::column_vector((0..t.rows()).map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect());
        self.push("l2_norm", out, Op::L2Norm(a))
    }

    /// Row-wise cosine similarity (`r×1`).
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape { op: "cosine", left: ta.shape(), right: tb.shape() });
        }
        let out = Tensor::column_vector((0..ta.rows()).map(|i| row_cosine(ta.row(i), tb.row(i)).0).collect());
        self.push("cosine", out, Op::Cosine(a, b))
    }

    /// Inverted dropout with a mask drawn from `mask_seed`. `p = 0` returns `a` itself.
    pub fn dropout(&mut self, a: Var, p: f64, mask_seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let t = self.value(a);
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..t.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), t.data().iter().zip(&mask).map(|(x, m)| x * m).collect())?;
        self.push("dropout", out, Op::Dropout(a, Rc::new(mask)))
    }

    /// Mean binary cross-entropy of `pred` against `targets`, predictions clamped to `[ε, 1−ε]`.
    pub fn bce(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != targets.len() || t.is_empty() {
            return Err(Error::Shape { op: "bce", left: t.shape(), right: (targets.len(), 1) });
        }
        let n = t.len() as f64;
        let loss: f64 = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        self.push("bce", Tensor::scalar(loss), Op::Bce(pred, Rc::new(targets.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        let mut out = Tensor::zeros(rows.len(), t.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= t.rows() {
                return Err(Error::Shape { op: "gather_rows", left: t.shape(), right: (r, 0) });
            }
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push("gather_rows", out, Op::GatherRows(a, rows))
    }

    /// Constant sparse matrix times a recorded dense matrix.
    pub fn spmm(&mut self, s: Rc<CsrMatrix>, a: Var) -> Result<Var> {
        let t = self.value(a);
        if s.cols() != t.rows() {
            return Err(Error::Shape { op: "spmm", left: (s.rows(), s.cols()), right: t.shape() });
        }
        let mut out = Tensor::zeros(s.rows(), t.cols());
        for i in 0..s.rows() {
            for (j, w) in s.row(i) {
                let src = t.row(j);
                out.row_mut(i).iter_mut().zip(src).for_each(|(o, x)| *o += w * x);
            }
        }
        self.push("spmm", out, Op::SpMM(s, a))
    }

    /// Multiplies row `i` by the constant `coeffs[i]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: Rc<Vec<f64>>) -> Result<Var> {
        let t = self.value(a);
        if coeffs.len() != t.rows() {
            return Err(Error::Shape { op: "scale_rows", left: t.shape(), right: (coeffs.len(), 1) });
        }
        let mut out = t.clone();
        for (i, &c) in coeffs.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= c);
        }
        self.push("scale_rows", out, Op::ScaleRows(a, coeffs))
    }

    /// Scalar `Σ wᵢ aᵢ` over all elements with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Rc<Vec<f64>>) -> Result<Var> {
        let t = self.value(a);
        if weights.len() != t.len() {
            return Err(Error::Shape { op: "weighted_sum", left: t.shape(), right: (weights.len(), 1) });
        }
        let s = t.data().iter().zip(weights.iter()).map(|(x, w)| x * w).sum();
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum(a, weights))
    }

    /// Softmax of an `m×1` column within each segment's contiguous slot span.
    pub fn segment_softmax(&mut self, a: Var, seg: Rc<Segments>) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != 1 || t.rows() != seg.slots() {
            return Err(Error::Shape { op: "segment_softmax", left: t.shape(), right: (seg.slots(), 1) });
        }
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for g in 0..seg.len() {
            let span = seg.span(g);
            if span.is_empty() {
                continue;
            }
            let m = x[span.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in span.clone() {
                out[i] = (x[i] - m).exp();
                s += out[i];
            }
            for o in &mut out[span] {
                *o /= s;
            }
        }
        self.push("segment_softmax", Tensor::column_vector(out), Op::SegmentSoftmax(a, seg))
    }

    /// Row `g` of the output is `Σ_{slot ∈ g} weights[slot] · x[index[slot]]`.
    /// Empty segments yield zero rows.
    pub fn segment_weighted_sum(&mut self, weights: Var, x: Var, seg: Rc<Segments>) -> Result<Var> {
        let (tw, tx) = (self.value(weights), self.value(x));
        if tw.cols() != 1 || tw.rows() != seg.slots() {
            return Err(Error::Shape { op: "segment_weighted_sum", left: tw.shape(), right: (seg.slots(), 1) });
        }
        if let Some(&bad) = seg.index().iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::Shape { op: "segment_weighted_sum", left: tx.shape(), right: (bad, 0) });
        }
        let mut out = Tensor::zeros(seg.len(), tx.cols());
        for g in 0..seg.len() {
            for slot in seg.span(g) {
                let w = tw.data()[slot];
                let src = tx.row(seg.index()[slot]);
                out.row_mut(g).iter_mut().zip(src).for_each(|(o, v)| *o += w * v);
            }
        }
        self.push("segment_weighted_sum", out, Op::SegmentWeightedSum(weights, x, seg))
    }

    /// Reverse sweep from a scalar `loss`. Intermediate values are freed and
    /// the tape cannot be differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let op = self.entries[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Param(id) => match out.grads.get_mut(&id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        out.grads.insert(id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k) = ta.shape();
                    let nn = tb.cols();
                    // dA = G Bᵀ, dB = Aᵀ G
                    let mut ga = Tensor::zeros(m, k);
                    matmul_into(g.data(), tb.transpose().data(), ga.data_mut(), m, nn, k);
                    let mut gb = Tensor::zeros(k, nn);
                    matmul_into(ta.transpose().data(), g.data(), gb.data_mut(), k, m, nn);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Add(a, b) => {
                    let sb = self.shape(b);
                    if sb == g.shape() {
                        accumulate(&mut grads, b, g.clone());
                    } else {
                        let mut gb = Tensor::zeros(1, sb.1);
                        for r in 0..g.rows() {
                            gb.data_mut().iter_mut().zip(g.row(r)).for_each(|(o, x)| *o += x);
                        }
                        accumulate(&mut grads, b, gb);
                    }
                    accumulate(&mut grads, a, g);
                }
                Op::Affine(a, scale) => accumulate(&mut grads, a, g.map(|x| x * scale)),
                Op::Tanh(a) => {
                    let y = &self.entries[idx].value;
                    let ga = zip_map(&g, y, |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(&mut grads, a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(a);
                    let ga = zip_map(&g, x, |gi, xi| if xi > 0.0 { gi } else { gi * slope });
                    accumulate(&mut grads, a, ga);
                }
                Op::Elu(a) => {
                    let x = self.value(a);
                    let ga = zip_map(&g, x, |gi, xi| if xi > 0.0 { gi } else { gi * xi.exp() });
                    accumulate(&mut grads, a, ga);
                }
                Op::Softmax(a, axis) => {
                    let y = &self.entries[idx].value;
                    let (r, c) = y.shape();
                    let mut ga = Tensor::zeros(r, c);
                    match axis {
                        Axis::Cols => {
                            for i in 0..r {
                                let dot: f64 = (0..c).map(|j| y.get(i, j) * g.get(i, j)).sum();
                                for j in 0..c {
                                    ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                                }
                            }
                        }
                        Axis::Rows => {
                            for j in 0..c {
                                let dot: f64 = (0..r).map(|i| y.get(i, j) * g.get(i, j)).sum();
                                for i in 0..r {
                                    ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Concat(parts, axis) => {
                    match axis {
                        Axis::Rows => {
                            let mut off = 0;
                            for p in parts {
                                let (pr, pc) = self.shape(p);
                                let gp = Tensor::from_vec(pr, pc, g.data()[off * pc..(off + pr) * pc].to_vec())?;
                                off += pr;
                                accumulate(&mut grads, p, gp);
                            }
                        }
                        Axis::Cols => {
                            let mut off = 0;
                            for p in parts {
                                let (pr, pc) = self.shape(p);
                                let mut gp = Tensor::zeros(pr, pc);
                                for i in 0..pr {
                                    gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                                }
                                off += pc;
                                accumulate(&mut grads, p, gp);
                            }
                        }
                    }
                }
                Op::Mean(a, axis) => {
                    let (r, c) = self.shape(a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let v = match axis {
                                Axis::Rows => g.get(0, j) / r as f64,
                                Axis::Cols => g.get(i, 0) / c as f64,
                            };
                            ga.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::L2Norm(a) => {
                    let x = self.value(a);
                    let y = &self.entries[idx].value;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let nrm = y.get(i, 0);
                        if nrm > 0.0 {
                            let s = g.get(i, 0) / nrm;
                            ga.row_mut(i).iter_mut().zip(x.row(i)).for_each(|(o, xi)| *o = s * xi);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Cosine(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                    for i in 0..ta.rows() {
                        let (ra, rb) = (ta.row(i), tb.row(i));
                        let (cos, na, nb) = row_cosine(ra, rb);
                        let gi = g.get(i, 0);
                        let (da, db) = (na.max(COSINE_EPS), nb.max(COSINE_EPS));
                        for j in 0..ra.len() {
                            let mut va = rb[j] / (da * db);
                            let mut vb = ra[j] / (da * db);
                            if na > COSINE_EPS {
                                va -= cos * ra[j] / (na * na);
                            }
                            if nb > COSINE_EPS {
                                vb -= cos * rb[j] / (nb * nb);
                            }
                            ga.row_mut(i)[j] = gi * va;
                            gb.row_mut(i)[j] = gi * vb;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Dropout(a, mask) => {
                    let ga = Tensor::from_vec(g.rows(), g.cols(), g.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect())?;
                    accumulate(&mut grads, a, ga);
                }
                Op::Bce(pred, targets) => {
                    let p = self.value(pred);
                    let n = p.len() as f64;
                    let up = g.item();
                    let ga = Tensor::from_vec(
                        p.rows(),
                        p.cols(),
                        p.data()
                            .iter()
                            .zip(targets.iter())
                            .map(|(&pi, &y)| {
                                if pi > BCE_EPS && pi < 1.0 - BCE_EPS {
                                    up * (-y / pi + (1.0 - y) / (1.0 - pi)) / n
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    )?;
                    accumulate(&mut grads, pred, ga);
                }
                Op::GatherRows(a, rows) => {
                    let (r, c) = self.shape(a);
                    let mut ga = Tensor::zeros(r, c);
                    for (i, &src) in rows.iter().enumerate() {
                        ga.row_mut(src).iter_mut().zip(g.row(i)).for_each(|(o, x)| *o += x);
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SpMM(s, a) => {
                    let (r, c) = self.shape(a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..s.rows() {
                        for (j, w) in s.row(i) {
                            ga.row_mut(j).iter_mut().zip(g.row(i)).for_each(|(o, x)| *o += w * x);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::ScaleRows(a, coeffs) => {
                    let mut ga = g;
                    for (i, &c) in coeffs.iter().enumerate() {
                        ga.row_mut(i).iter_mut().for_each(|x| *x *= c);
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::WeightedSum(a, weights) => {
                    let (r, c) = self.shape(a);
                    let up = g.item();
                    let ga = Tensor::from_vec(r, c, weights.iter().map(|w| w * up).collect())?;
                    accumulate(&mut grads, a, ga);
                }
                Op::SegmentSoftmax(a, seg) => {
                    let y = self.entries[idx].value.data();
                    let mut ga = vec![0.0; y.len()];
                    for grp in 0..seg.len() {
                        let span = seg.span(grp);
                        let dot: f64 = span.clone().map(|i| y[i] * g.data()[i]).sum();
                        for i in span {
                            ga[i] = y[i] * (g.data()[i] - dot);
                        }
                    }
                    accumulate(&mut grads, a, Tensor::column_vector(ga));
                }
                Op::SegmentWeightedSum(w, x, seg) => {
                    let (tw, tx) = (self.value(w), self.value(x));
                    let mut gw = vec![0.0; tw.len()];
                    let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                    for grp in 0..seg.len() {
                        let grow = g.row(grp);
                        for slot in seg.span(grp) {
                            let src = seg.index()[slot];
                            gw[slot] = grow.iter().zip(tx.row(src)).map(|(a, b)| a * b).sum();
                            let wv = tw.data()[slot];
                            gx.row_mut(src).iter_mut().zip(grow).for_each(|(o, x)| *o += wv * x);
                        }
                    }
                    accumulate(&mut grads, w, Tensor::column_vector(gw));
                    accumulate(&mut grads, x, gx);
                }
            }
        }
        // Free every recorded intermediate.
        self.entries.clear();
        if !out.is_finite() {
            return Err(Error::NonFinite("backward"));
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

/// `(cosine, |a|, |b|)` with norms floored at [`COSINE_EPS`] in the quotient.
fn row_cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na.max(COSINE_EPS) * nb.max(COSINE_EPS)), na, nb)
}
