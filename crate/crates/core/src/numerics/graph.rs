//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` walks it in reverse exactly once.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { a: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout { a: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<u32> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice { a: Var, rows: Range<usize>, cols: Range<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Attention(Box<AttentionSaved<T>>),
    BceWithLogits { x: Var, targets: Vec<T>, pos_weight: Vec<T>, sample_weight: Vec<T> },
}

#[derive(Debug)]
struct AttentionSaved<T> {
    qkv: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    scale: T,
    /// `batch * heads` row-stochastic `seq x seq` matrices.
    probs: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for parameter slot `slot`, as registered with [`Graph::param`].
    pub fn param(&self, slot: usize) -> Option<&Tensor<T>> {
        self.params.iter().find(|(s, _)| *s == slot).and_then(|(_, v)| self.get(*v))
    }

    /// Takes ownership of all parameter gradients, indexed by slot.
    pub fn into_param_grads(mut self, slots: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..slots).map(|_| None).collect();
        for (slot, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[v.0].take() {
                match &mut out[slot] {
                    Some(acc) => acc.add_assign(&g),
                    none => *none = Some(g),
                }
            }
        }
        out
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    train: bool,
    rng: Option<ChaCha8Rng>,
    consumed: bool,
}

fn shape_err<T>(what: &str, a: [usize; 2], b: [usize; 2]) -> Result<T> {
    Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")))
}

impl<T: Scalar> Graph<T> {
    /// Inference graph: dropout is the identity.
    pub fn eval() -> Self {
        Self { nodes: Vec::new(), train: false, rng: None, consumed: false }
    }

    /// Training graph; dropout masks are drawn from `rng`.
    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { nodes: Vec::new(), train: true, rng: Some(rng), consumed: false }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Constant, "constant")
    }

    /// Registers a trainable leaf. `slot` identifies it in [`Gradients`].
    pub fn param(&mut self, t: Tensor<T>, slot: usize) -> Result<Var> {
        self.push(t, Op::Param(slot), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b), false)?;
        self.push(v, Op::MatMul { a, b, trans_b: false }, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b), true)?;
        self.push(v, Op::MatMul { a, b, trans_b: true }, "matmul")
    }

    fn zip(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(what, sa, sb);
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(sa, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return shape_err("add_row", sa, sr);
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa[0] {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += *b;
            }
        }
        self.push(v, Op::AddRow { a, row }, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i), None);
        }
        self.push(v, Op::Softmax(a), "softmax")
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(gamma) != [1, c] || self.shape(beta) != [1, c] {
            return shape_err("layer_norm affine", [1, c], self.shape(gamma));
        }
        let eps = T::of(eps);
        let n = T::of(c as f64);
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = Tensor::zeros([r, c]);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().fold(T::zero(), |s, v| s + *v) / n;
            let var = row.iter().fold(T::zero(), |s, v| s + (*v - mean) * (*v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            let o = out.row_mut(i);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    /// Inverted dropout. Identity on eval graphs or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let rng = self.rng.as_mut().expect("train graphs own an rng");
        let n = self.nodes[a.0].value.len();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let mut v = self.value(a).clone();
        for (x, m) in v.data_mut().iter_mut().zip(&mask) {
            *x = *x * *m;
        }
        self.push(v, Op::Dropout { a, mask }, "dropout")
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let [vocab, dim] = t.shape();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for id in ids {
            if *id as usize >= vocab {
                return Err(Error::Shape(format!("embedding id {id} >= table rows {vocab}")));
            }
            data.extend_from_slice(t.row(*id as usize));
        }
        let v = Tensor::new([ids.len(), dim], data)?;
        self.push(v, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|p| self.shape(*p)[0]).ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s[0] != rows {
                return shape_err("concat_cols", [rows, cols], s);
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros([rows, cols]);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let r = self.value(*p).row(i);
                out.row_mut(i)[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|p| self.shape(*p)[1]).ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let s = self.shape(*p);
            if s[1] != cols {
                return shape_err("concat_rows", [rows, cols], s);
            }
            rows += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let v = Tensor::new([rows, cols], data)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat")
    }

    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let v = self.value(a).slice(rows.clone(), cols.clone())?;
        self.push(v, Op::Slice { a, rows, cols }, "slice")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape();
        let mut data = Vec::with_capacity(idx.len() * c);
        for i in idx {
            if *i >= r {
                return Err(Error::Shape(format!("gather row {i} of {r}")));
            }
            data.extend_from_slice(t.row(*i));
        }
        let v = Tensor::new([idx.len(), c], data)?;
        self.push(v, Op::GatherRows { a, idx: idx.to_vec() }, "gather_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |s, x| s + *x);
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = t.data().iter().fold(T::zero(), |s, x| s + *x) / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Fused multi-head self-attention over packed projections.
    ///
    /// `qkv` is `(batch * seq) x 3H` holding queries, keys and values side
    /// by side; `key_mask[b][j]` marks real positions. Masked keys get
    /// exactly zero weight. Output is `(batch * seq) x H`.
    pub fn attention(&mut self, qkv: Var, key_mask: &[Vec<bool>], heads: usize) -> Result<Var> {
        let [rows, three_h] = self.shape(qkv);
        let batch = key_mask.len();
        if batch == 0 || rows % batch != 0 || three_h % 3 != 0 {
            return Err(Error::Shape(format!("attention input {:?} for batch {batch}", [rows, three_h])));
        }
        let seq = rows / batch;
        let h = three_h / 3;
        if heads == 0 || h % heads != 0 || key_mask.iter().any(|m| m.len() != seq) {
            return Err(Error::Shape(format!("attention: hidden {h}, heads {heads}, seq {seq}")));
        }
        let d = h / heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let x = self.value(qkv).data();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = Tensor::zeros([rows, h]);
        let ld = three_h as isize;
        for b in 0..batch {
            let base = b * seq * three_h;
            for hd in 0..heads {
                let p = &mut probs[(b * heads + hd) * seq * seq..][..seq * seq];
                // scores = Q Kᵀ
                T::gemm(
                    seq,
                    d,
                    seq,
                    &x[base + hd * d..],
                    ld,
                    1,
                    &x[base + h + hd * d..],
                    1,
                    ld,
                    T::zero(),
                    p,
                    seq as isize,
                    1,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                    softmax_in_place(row, Some(&key_mask[b]));
                }
                let o = out.data_mut();
                T::gemm(
                    seq,
                    seq,
                    d,
                    p,
                    seq as isize,
                    1,
                    &x[base + 2 * h + hd * d..],
                    ld,
                    1,
                    T::zero(),
                    &mut o[b * seq * h + hd * d..],
                    h as isize,
                    1,
                );
            }
        }
        let saved = AttentionSaved { qkv, batch, seq, heads, scale, probs };
        self.push(out, Op::Attention(Box::new(saved)), "attention")
    }

    /// Attention weights saved by an [`Graph::attention`] node, as
    /// `(batch * heads)` matrices of `seq x seq`.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some((s.seq, &s.probs)),
            _ => None,
        }
    }

    /// Mean over all elements of
    /// `-w_n [p_t y log σ(x) + (1 - y) log(1 - σ(x))]`, in log-sum-exp form.
    pub fn bce_with_logits(
        &mut self,
        x: Var,
        targets: &[u8],
        pos_weight: &[f64],
        sample_weight: Option<&[f64]>,
    ) -> Result<Var> {
        let [b, t] = self.shape(x);
        if targets.len() != b * t || pos_weight.len() != t {
            return Err(Error::Shape(format!(
                "bce: logits {:?}, {} targets, {} pos weights",
                [b, t],
                targets.len(),
                pos_weight.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|y| **y > 1) {
            return Err(Error::Config(format!("bce target {bad} outside {{0, 1}}")));
        }
        if pos_weight.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config("bce pos_weight must be positive".into()));
        }
        let sw: Vec<f64> = match sample_weight {
            Some(w) if w.len() == b => w.to_vec(),
            Some(w) => return Err(Error::Shape(format!("bce: {} sample weights for batch {b}", w.len()))),
            None => vec![1.0; b],
        };
        let loss = bce_value(self.value(x).data(), targets, pos_weight, &sw, t);
        let op = Op::BceWithLogits {
            x,
            targets: targets.iter().map(|y| T::of(f64::from(*y))).collect(),
            pos_weight: pos_weight.iter().map(|p| T::of(*p)).collect(),
            sample_weight: sw.iter().map(|w| T::of(*w)).collect(),
        };
        self.push(Tensor::scalar(T::of(loss)), op, "bce_with_logits")
    }

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph; rebuild the forward pass".into()));
        }
        if self.shape(loss) != [1, 1] {
            return Err(Error::Graph(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(slot) => Some((slot, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if *trans_b {
                    // y = a bᵀ: da = gy b, db = gyᵀ a
                    acc(*a, gy.matmul(bv, false)?);
                    acc(*b, gy.transpose().matmul(av, false)?);
                } else {
                    acc(*a, gy.matmul(bv, true)?);
                    acc(*b, av.transpose().matmul(gy, false)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::AddRow { a, row } => {
                acc(*a, gy.clone());
                let mut r = Tensor::zeros([1, gy.cols()]);
                for k in 0..gy.rows() {
                    for (s, g) in r.data_mut().iter_mut().zip(gy.row(k)) {
                        *s += *g;
                    }
                }
                acc(*row, r);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, elementwise(gy, bv, |g, y| g * y));
                acc(*b, elementwise(gy, av, |g, x| g * x));
            }
            Op::Scale(a, s) => acc(*a, gy.map(|g| g * *s)),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    softmax_backward(y.row(r), gy.row(r), ga.row_mut(r));
                }
                acc(*a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let [r, c] = gy.shape();
                let g = self.value(*gamma).data();
                let n = T::of(c as f64);
                let mut dx = Tensor::zeros([r, c]);
                let mut dg = Tensor::zeros([1, c]);
                let mut db = Tensor::zeros([1, c]);
                for k in 0..r {
                    let gyr = gy.row(k);
                    let xh = &xhat[k * c..(k + 1) * c];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        let dxh = gyr[j] * g[j];
                        s1 += dxh;
                        s2 += dxh * xh[j];
                        dg.data_mut()[j] += gyr[j] * xh[j];
                        db.data_mut()[j] += gyr[j];
                    }
                    let out = dx.row_mut(k);
                    for j in 0..c {
                        let dxh = gyr[j] * g[j];
                        out[j] = rstd[k] / n * (n * dxh - s1 - xh[j] * s2);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Gelu(a) => acc(*a, elementwise(gy, self.value(*a), |g, x| g * gelu_grad(x))),
            Op::Tanh(a) => acc(*a, elementwise(gy, &node.value, |g, y| g * (T::one() - y * y))),
            Op::Relu(a) => acc(*a, elementwise(gy, self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() })),
            Op::Sigmoid(a) => acc(*a, elementwise(gy, &node.value, |g, y| g * y * (T::one() - y))),
            Op::Dropout { a, mask } => {
                let mut ga = gy.clone();
                for (x, m) in ga.data_mut().iter_mut().zip(mask) {
                    *x = *x * *m;
                }
                acc(*a, ga);
            }
            Op::Embedding { table, ids } => {
                let mut gt = Tensor::zeros(self.shape(*table));
                for (k, id) in ids.iter().enumerate() {
                    for (s, g) in gt.row_mut(*id as usize).iter_mut().zip(gy.row(k)) {
                        *s += *g;
                    }
                }
                acc(*table, gt);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    acc(*p, gy.slice(0..gy.rows(), off..off + c)?);
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let r = self.shape(*p)[0];
                    acc(*p, gy.slice(off..off + r, 0..gy.cols())?);
                    off += r;
                }
            }
            Op::Slice { a, rows, cols } => {
                let mut ga = Tensor::zeros(self.shape(*a));
                for (k, r) in rows.clone().enumerate() {
                    ga.row_mut(r)[cols.clone()].copy_from_slice(gy.row(k));
                }
                acc(*a, ga);
            }
            Op::GatherRows { a, idx } => {
                let mut ga = Tensor::zeros(self.shape(*a));
                for (k, r) in idx.iter().enumerate() {
                    for (s, g) in ga.row_mut(*r).iter_mut().zip(gy.row(k)) {
                        *s += *g;
                    }
                }
                acc(*a, ga);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), gy.item())),
            Op::Mean(a) => {
                let s = self.shape(*a);
                acc(*a, Tensor::full(s, gy.item() / T::of((s[0] * s[1]) as f64)));
            }
            Op::Attention(s) => acc(s.qkv, self.attention_backward(s, gy)),
            Op::BceWithLogits { x, targets, pos_weight, sample_weight } => {
                let xv = self.value(*x);
                let [b, t] = xv.shape();
                let norm = gy.item() / T::of((b * t) as f64);
                let mut gx = Tensor::zeros([b, t]);
                for (idx, g) in gx.data_mut().iter_mut().enumerate() {
                    let (n, k) = (idx / t, idx % t);
                    let s = sigmoid(xv.data()[idx]);
                    let y = targets[idx];
                    let d = (T::one() - y) * s - pos_weight[k] * y * (T::one() - s);
                    *g = sample_weight[n] * d * norm;
                }
                acc(*x, gx);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, gy: &Tensor<T>) -> Tensor<T> {
        let (batch, seq, heads) = (s.batch, s.seq, s.heads);
        let [rows, three_h] = self.shape(s.qkv);
        let h = three_h / 3;
        let d = h / heads;
        let x = self.value(s.qkv).data();
        let g = gy.data();
        let mut gx = Tensor::zeros([rows, three_h]);
        let mut dp = vec![T::zero(); seq * seq];
        let ld = three_h as isize;
        for b in 0..batch {
            let base = b * seq * three_h;
            for hd in 0..heads {
                let p = &s.probs[(b * heads + hd) * seq * seq..][..seq * seq];
                let go = &g[b * seq * h + hd * d..];
                let gxd = gx.data_mut();
                // dV = Pᵀ dO
                T::gemm(
                    seq,
                    seq,
                    d,
                    p,
                    1,
                    seq as isize,
                    go,
                    h as isize,
                    1,
                    T::one(),
                    &mut gxd[base + 2 * h + hd * d..],
                    ld,
                    1,
                );
                // dP = dO Vᵀ
                T::gemm(
                    seq,
                    d,
                    seq,
                    go,
                    h as isize,
                    1,
                    &x[base + 2 * h + hd * d..],
                    1,
                    ld,
                    T::zero(),
                    &mut dp,
                    seq as isize,
                    1,
                );
                // dS = P ⊙ (dP - rowsum(dP ⊙ P)), then fold in the scale
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |a, (p, d)| a + *p * *d);
                    for (dv, pv) in dr.iter_mut().zip(pr) {
                        *dv = *pv * (*dv - dot) * s.scale;
                    }
                }
                // dQ = dS K
                T::gemm(
                    seq,
                    seq,
                    d,
                    &dp,
                    seq as isize,
                    1,
                    &x[base + h + hd * d..],
                    ld,
                    1,
                    T::one(),
                    &mut gxd[base + hd * d..],
                    ld,
                    1,
                );
                // dK = dSᵀ Q
                T::gemm(
                    seq,
                    seq,
                    d,
                    &dp,
                    1,
                    seq as isize,
                    &x[base + hd * d..],
                    ld,
                    1,
                    T::one(),
                    &mut gxd[base + h + hd * d..],
                    ld,
                    1,
                );
            }
        }
        gx
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param(_) => vec![],
        Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow { a, row: b } => vec![*a, *b],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Scale(a, _)
        | Op::Softmax(a)
        | Op::Gelu(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Dropout { a, .. }
        | Op::Slice { a, .. }
        | Op::GatherRows { a, .. }
        | Op::BceWithLogits { x: a, .. } => vec![*a],
        Op::Embedding { table, .. } => vec![*table],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
        Op::Attention(s) => vec![s.qkv],
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Softmax over one row. Entries with `mask[j] == false` are set to zero
/// and excluded from the normalizer; a fully masked row becomes all zeros.
pub fn softmax_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, v) in row.iter().enumerate() {
        if keep(j) && *v > max {
            max = *v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn softmax_backward<T: Scalar>(y: &[T], gy: &[T], out: &mut [T]) {
    let dot = y.iter().zip(gy).fold(T::zero(), |s, (a, b)| s + *a * *b);
    for ((o, yv), g) in out.iter_mut().zip(y).zip(gy) {
        *o = *yv * (*g - dot);
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// `softplus(z) = ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Stable BCE-with-logits value in 64-bit, shared by the graph op and
/// standalone callers. `x` and `y` are row-major `batch x t`.
pub fn bce_value<T: Scalar>(x: &[T], y: &[u8], pos_weight: &[f64], sample_weight: &[f64], t: usize) -> f64 {
    let mut total = 0.0;
    for (idx, (xv, yv)) in x.iter().zip(y).enumerate() {
        let (n, k) = (idx / t, idx % t);
        let x = xv.f64();
        let y = f64::from(*yv);
        // -log σ(x) = softplus(-x); -log(1 - σ(x)) = softplus(x)
        total += sample_weight[n] * (pos_weight[k] * y * softplus(-x) + (1.0 - y) * softplus(x));
    }
    total / x.len() as f64
}
