//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The op set is exactly what the caption critic needs: matrix product,
//! addition, bias addition, elementwise product, relu/sigmoid/tanh,
//! concatenation and column slicing, embedding-row gather, circular
//! convolution, softmax and a fused softmax cross-entropy. Anything else a
//! caller needs (the count-sketch projection, for instance) plugs in through
//! [`CustomGrad`]. A [`Tape`] records one forward graph; [`Tape::backward`]
//! walks it once in reverse and accumulates gradients for every recorded
//! node. All arithmetic is f64.

pub mod fft;
mod gradcheck;

pub use gradcheck::{check_gradients, GradCheckReport, ParamCheck};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major tensor of rank 1 or 2 (a scalar is shape `[1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!(
                    "{rows}x{cols} matrix needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Elements drawn i.i.d. from `uniform(lo, hi)`.
    pub fn uniform<R: rand::Rng>(shape: &[usize], rng: &mut R, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Length of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `[m,k] x [n,k]^T -> [m,n]`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] = acc;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `[m,k]^T x [m,n] -> [k,n]`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = arow[kk];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}

/// Gradient rule for an operation the tape does not know natively.
/// `backward` receives the gradient at the output and the recorded input
/// values, and returns one gradient tensor per input, shapes matching.
pub trait CustomGrad: std::fmt::Debug + Send + Sync {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    AddBias(VarId, VarId),
    Mul(VarId, VarId),
    Relu(VarId),
    Sigmoid(VarId),
    Tanh(VarId),
    Sum(VarId),
    Concat(Vec<VarId>),
    SliceCols(VarId, usize),
    EmbedRows(VarId, Vec<usize>),
    CircConv(VarId, VarId),
    Softmax(VarId),
    /// Logits node plus cached probabilities and one-hot labels.
    SoftmaxXent(VarId, Tensor, Tensor),
    Custom(Vec<VarId>, Arc<dyn CustomGrad>),
}

/// Records a forward computation as an append-only list of nodes; node
/// indices are topologically ordered by construction.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.values.push(value);
        self.ops.push(op);
        VarId(self.values.len() - 1)
    }

    /// Registers an input. Whether it is a trainable parameter or a constant
    /// is the caller's business; gradients are computed for every leaf that
    /// the loss reaches.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape, tb.shape),
            ));
        }
        let out = matmul_nn(ta, tb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape, tb.shape),
            ));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `[r,c] + [c]`, the bias broadcast over rows.
    pub fn add_bias(&mut self, m: VarId, bias: VarId) -> Result<VarId> {
        let (tm, tb) = (self.value(m), self.value(bias));
        if tm.rank() != 2 || tb.rank() != 1 || tm.shape[1] != tb.shape[0] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", tm.shape, tb.shape),
            ));
        }
        let c = tm.shape[1];
        let mut data = tm.data.clone();
        for row in data.chunks_exact_mut(c) {
            for (x, b) in row.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let out = Tensor {
            shape: tm.shape.clone(),
            data,
        };
        Ok(self.push(out, Op::AddBias(m, bias)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", ta.shape, tb.shape),
            ));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x.tanh()).collect(),
        };
        self.push(out, Op::Tanh(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Concatenation along the last dimension. All inputs must share rank
    /// and leading dimension.
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let rank = self.value(parts[0]).rank();
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != rank || t.rows() != rows {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible input shape {:?}", t.shape),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 2 {
            vec![rows, total]
        } else {
            vec![total]
        };
        let out = Tensor { shape, data };
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Columns `[start, start+width)` of every row.
    pub fn slice_cols(&mut self, a: VarId, start: usize, width: usize) -> Result<VarId> {
        let t = self.value(a);
        let c = t.cols();
        if width == 0 || start + width > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) out of 0..{c}", start + width),
            ));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let shape = if t.rank() == 2 {
            vec![rows, width]
        } else {
            vec![width]
        };
        let out = Tensor { shape, data };
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Gathers rows of a `[n,d]` table; the backward pass scatter-adds,
    /// so repeated ids accumulate.
    pub fn embed_rows(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embed_rows", "table must be rank 2"));
        }
        let (n, d) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::shape(
                    "embed_rows",
                    format!("row {id} out of 0..{n}"),
                ));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.push(out, Op::EmbedRows(table, ids.to_vec())))
    }

    /// Row-wise circular convolution of two equal-shape tensors.
    pub fn circular_convolve(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape(
                "circular_convolve",
                format!("{:?} vs {:?}", ta.shape, tb.shape),
            ));
        }
        let cols = ta.cols();
        let mut data = Vec::with_capacity(ta.numel());
        for r in 0..ta.rows() {
            data.extend(fft::circular_convolve_raw(ta.row(r), tb.row(r))?);
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        debug_assert_eq!(out.cols(), cols);
        Ok(self.push(out, Op::CircConv(a, b)))
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            data.extend(softmax_row(t.row(r)));
        }
        debug_assert_eq!(data.len() % c, 0);
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        self.push(out, Op::Softmax(a))
    }

    /// Mean cross-entropy of row-wise softmax against one-hot labels,
    /// computed in log-sum-exp form so saturated logits stay finite.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &Tensor) -> Result<VarId> {
        let t = self.value(logits);
        if t.rank() != 2 || labels.shape != t.shape {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs labels {:?}", t.shape, labels.shape),
            ));
        }
        let (b, c) = (t.shape[0], t.shape[1]);
        if b == 0 {
            return Err(Error::shape("softmax_cross_entropy", "empty batch"));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = 0.0;
        for r in 0..b {
            let lrow = labels.row(r);
            let ones = lrow.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || lrow.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::data(format!(
                    "softmax_cross_entropy: label row {r} is not one-hot"
                )));
            }
            let zrow = t.row(r);
            let m = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + zrow.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for &z in zrow {
                probs.push((z - lse).exp());
            }
            let z_true: f64 = zrow.iter().zip(lrow).map(|(z, y)| z * y).sum();
            total += lse - z_true;
        }
        let loss = Tensor::scalar(total / b as f64);
        let probs = Tensor {
            shape: t.shape.clone(),
            data: probs,
        };
        Ok(self.push(loss, Op::SoftmaxXent(logits, probs, labels.clone())))
    }

    /// Output recorded by an external op with its own gradient rule.
    pub fn custom(&mut self, inputs: &[VarId], value: Tensor, grad: Arc<dyn CustomGrad>) -> VarId {
        self.push(value, Op::Custom(inputs.to_vec(), grad))
    }

    /// Reverse pass from a scalar node. Returns a gradient per reached node;
    /// leaves the loss does not depend on report `None`.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&g, self.value(*b));
                    let db = matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias(m, bias) => {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data.chunks_exact(c) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::vector(db));
                    accumulate(&mut grads, *m, g);
                }
                Op::Mul(a, b) => {
                    let da = elementwise(&g, self.value(*b), |x, y| x * y);
                    let db = elementwise(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(a) => {
                    let da = elementwise(&g, &self.values[i], |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = elementwise(&g, &self.values[i], |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = elementwise(&g, &self.values[i], |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let t = self.value(*a);
                    let da = Tensor {
                        shape: t.shape.clone(),
                        data: vec![g.data[0]; t.numel()],
                    };
                    accumulate(&mut grads, *a, da);
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let mut start = 0usize;
                    for &p in parts {
                        let t = self.value(p);
                        let w = t.cols();
                        let mut data = Vec::with_capacity(t.numel());
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        let dp = Tensor {
                            shape: t.shape.clone(),
                            data,
                        };
                        accumulate(&mut grads, p, dp);
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let t = self.value(*a);
                    let (c, w) = (t.cols(), g.cols());
                    let mut da = Tensor::zeros(t.shape());
                    for r in 0..t.rows() {
                        da.data[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::EmbedRows(table, ids) => {
                    let t = self.value(*table);
                    let d = t.shape[1];
                    let mut dt = Tensor::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let grow = g.row(r);
                        let trow = &mut dt.data[id * d..(id + 1) * d];
                        for (acc, v) in trow.iter_mut().zip(grow) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::CircConv(a, b) => {
                    // d/da (a (*) b) applied to g is circular correlation:
                    // convolve g with the index-reversed partner.
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut da = Vec::with_capacity(ta.numel());
                    let mut db = Vec::with_capacity(tb.numel());
                    for r in 0..g.rows() {
                        let rb = fft::reverse_circular(tb.row(r));
                        let ra = fft::reverse_circular(ta.row(r));
                        da.extend(fft::circular_convolve_raw(g.row(r), &rb)?);
                        db.extend(fft::circular_convolve_raw(g.row(r), &ra)?);
                    }
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: ta.shape.clone(),
                            data: da,
                        },
                    );
                    accumulate(
                        &mut grads,
                        *b,
                        Tensor {
                            shape: tb.shape.clone(),
                            data: db,
                        },
                    );
                }
                Op::Softmax(a) => {
                    let p = &self.values[i];
                    let c = p.cols();
                    let mut da = Tensor::zeros(p.shape());
                    for r in 0..p.rows() {
                        let prow = p.row(r);
                        let grow = g.row(r);
                        let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        let orow = &mut da.data[r * c..(r + 1) * c];
                        for j in 0..c {
                            orow[j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxXent(logits, probs, labels) => {
                    let b = probs.rows() as f64;
                    let scale = g.data[0] / b;
                    let data = probs
                        .data
                        .iter()
                        .zip(&labels.data)
                        .map(|(p, y)| scale * (p - y))
                        .collect();
                    let dl = Tensor {
                        shape: probs.shape.clone(),
                        data,
                    };
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Custom(inputs, rule) => {
                    let input_vals: Vec<&Tensor> = inputs.iter().map(|&p| self.value(p)).collect();
                    let deltas = rule.backward(&g, &input_vals);
                    debug_assert_eq!(deltas.len(), inputs.len());
                    for (&p, d) in inputs.iter().zip(deltas) {
                        debug_assert_eq!(d.shape(), self.value(p).shape());
                        accumulate(&mut grads, p, d);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: VarId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => {
            for (acc, v) in g.data.iter_mut().zip(&delta.data) {
                *acc += v;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stabilized softmax of one row.
pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradients produced by one backward pass, indexed by the tape's node ids.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient at `id`; `None` means the loss does not depend on it, which
    /// callers may read as a zero gradient.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        let s = tape.sum(y);
        assert_eq!(tape.value(y).data()[0], 0.5);
        let grads = tape.backward(s).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.tanh(x);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let labels = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let loss = tape.softmax_cross_entropy(z, &labels).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_logits_stay_finite() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 2, vec![1000.0, -1000.0]).unwrap());
        let labels = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let loss = tape.softmax_cross_entropy(z, &labels).unwrap();
        let v = tape.value(loss).data()[0];
        assert!(v.is_finite());
        assert!(
            v.abs() < 1e-12,
            "fully confident and correct: loss ~ 0, got {v}"
        );

        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 2, vec![-1000.0, 1000.0]).unwrap());
        let loss = tape.softmax_cross_entropy(z, &labels).unwrap();
        assert!((tape.value(loss).data()[0] - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_is_prob_minus_label_over_batch() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(2, 2, vec![0.3, -0.2, 1.0, 0.5]).unwrap());
        let labels = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = tape.softmax_cross_entropy(z, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(z).unwrap();
        for r in 0..2 {
            let p = softmax_row(tape.value(z).row(r));
            for c in 0..2 {
                let y = labels.row(r)[c];
                let want = (p[c] - y) / 2.0;
                assert!((g.row(r)[c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_soft_labels() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let labels = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(tape.softmax_cross_entropy(z, &labels).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let z = tape
            .leaf(Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.7 - 4.0).collect()).unwrap());
        let p = tape.softmax(z);
        for r in 0..3 {
            let s: f64 = tape.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn circular_convolution_on_tape() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let c = tape.circular_convolve(a, b).unwrap();
        assert!((tape.value(c).data()[0] - 11.0).abs() < 1e-12);
        assert!((tape.value(c).data()[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let cat = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice_cols(cat, 0, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn embed_rows_gathers_and_scatters() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let rows = tape.embed_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(rows);
        let grads = tape.backward(s).unwrap();
        // Row 2 was gathered twice, row 1 never.
        assert_eq!(
            grads.get(table).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(Tensor::scalar(5.0));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // d(f+g) must equal df + dg computed separately.
        let build = |weights: &[f64]| -> (Tape, VarId, VarId, VarId) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(weights.to_vec()));
            let r = tape.relu(x);
            let t = tape.tanh(x);
            let f = tape.sum(r);
            let g = tape.sum(t);
            (tape, x, f, g)
        };
        let w = [0.3, -0.7, 1.2];
        let (tape, x, f, g) = build(&w);
        let combined = {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::vector(w.to_vec()));
            let r = tape.relu(xv);
            let t = tape.tanh(xv);
            let fr = tape.sum(r);
            let ft = tape.sum(t);
            let total = tape.add(fr, ft).unwrap();
            let grads = tape.backward(total).unwrap();
            grads.get(xv).unwrap().clone()
        };
        let df = tape.backward(f).unwrap();
        let dg = tape.backward(g).unwrap();
        for i in 0..w.len() {
            let sum = df.get(x).unwrap().data()[i] + dg.get(x).unwrap().data()[i];
            assert!((sum - combined.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }
}
