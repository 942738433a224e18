//! BERT-style encoder with linear or BiLSTM classification heads.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, read_precision, save_checkpoint, Checkpoint, TrainMeta};
pub use train::{
    evaluate, evaluate_encoded, predict, select_best_epoch, train, EpochRecord, TrainConfig, TrainRequest,
    DEFAULT_THRESHOLD,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{finite_diff_check, GradCheckReport, Graph, Scalar, Tensor, Var};
use crate::seed;
use crate::tokenizer::EncodedInput;

const LN_EPS: f64 = 1e-12;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub segment_types: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: H = 64, two layers of four heads.
    pub fn desk(vocab_size: usize, max_positions: usize) -> Self {
        Self::with_dims(vocab_size, max_positions, ModelDims::default())
    }

    pub fn with_dims(vocab_size: usize, max_positions: usize, dims: ModelDims) -> Self {
        Self {
            vocab_size,
            hidden: dims.hidden,
            layers: dims.layers,
            heads: dims.heads,
            ffn_dim: dims.ffn_dim.unwrap_or(4 * dims.hidden),
            max_positions,
            segment_types: 2,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return bad("layers and ffn_dim must be positive".into());
        }
        if self.vocab_size <= crate::tokenizer::RESERVED.len() || self.max_positions < 2 || self.segment_types == 0 {
            return bad(format!("vocab {} / positions {} too small", self.vocab_size, self.max_positions));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Encoder width and depth, independent of vocabulary and sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Defaults to `4 * hidden`.
    pub ffn_dim: Option<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { hidden: 64, layers: 2, heads: 4, ffn_dim: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Bilstm,
}

impl HeadKind {
    pub const ALL: [HeadKind; 2] = [HeadKind::Linear, HeadKind::Bilstm];

    pub fn display_name(self) -> &'static str {
        match self {
            HeadKind::Linear => "Linear",
            HeadKind::Bilstm => "BiLSTM",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::Bilstm => "bilstm",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(HeadKind::Linear),
            "bilstm" => Ok(HeadKind::Bilstm),
            other => Err(Error::Config(format!("unknown head \"{other}\" (linear | bilstm)"))),
        }
    }
}

/// `Linear`: dense `H -> width`, tanh, then `width -> T`.
/// `Bilstm`: `width` units per direction, relu over both final states,
/// then `2 * width -> T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub width: usize,
    pub num_labels: usize,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, encoder: &EncoderConfig, num_labels: usize) -> Self {
        let width = match kind {
            HeadKind::Linear => encoder.hidden,
            HeadKind::Bilstm => (encoder.hidden / 2).max(1),
        };
        Self { kind, width, num_labels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.num_labels == 0 {
            return Err(Error::Config("head width and label count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Embedding tables: N(0, 0.02²).
    Embedding,
    /// Projections: N(0, 1/fan_in), unit gain at any width.
    Normal,
    /// LSTM gate bias: 1 on the forget gate, 0 elsewhere.
    ForgetBias,
    Zeros,
    Ones,
}

fn param_specs(enc: &EncoderConfig, head: &HeadConfig) -> Vec<(String, [usize; 2], Init)> {
    let h = enc.hidden;
    let mut v = vec![
        ("embeddings.word".to_string(), [enc.vocab_size, h], Init::Embedding),
        ("embeddings.position".to_string(), [enc.max_positions, h], Init::Embedding),
        ("embeddings.segment".to_string(), [enc.segment_types, h], Init::Embedding),
        ("embeddings.ln.gamma".to_string(), [1, h], Init::Ones),
        ("embeddings.ln.beta".to_string(), [1, h], Init::Zeros),
    ];
    for l in 0..enc.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        v.extend([
            (p("attn.qkv.weight"), [h, 3 * h], Init::Normal),
            (p("attn.qkv.bias"), [1, 3 * h], Init::Zeros),
            (p("attn.out.weight"), [h, h], Init::Normal),
            (p("attn.out.bias"), [1, h], Init::Zeros),
            (p("attn.ln.gamma"), [1, h], Init::Ones),
            (p("attn.ln.beta"), [1, h], Init::Zeros),
            (p("ffn.in.weight"), [h, enc.ffn_dim], Init::Normal),
            (p("ffn.in.bias"), [1, enc.ffn_dim], Init::Zeros),
            (p("ffn.out.weight"), [enc.ffn_dim, h], Init::Normal),
            (p("ffn.out.bias"), [1, h], Init::Zeros),
            (p("ffn.ln.gamma"), [1, h], Init::Ones),
            (p("ffn.ln.beta"), [1, h], Init::Zeros),
        ]);
    }
    let (w, t) = (head.width, head.num_labels);
    match head.kind {
        HeadKind::Linear => v.extend([
            ("head.dense.weight".to_string(), [h, w], Init::Normal),
            ("head.dense.bias".to_string(), [1, w], Init::Zeros),
            ("head.out.weight".to_string(), [w, t], Init::Normal),
            ("head.out.bias".to_string(), [1, t], Init::Zeros),
        ]),
        HeadKind::Bilstm => {
            for dir in ["fwd", "bwd"] {
                v.extend([
                    (format!("head.lstm.{dir}.w_ih"), [h, 4 * w], Init::Normal),
                    (format!("head.lstm.{dir}.w_hh"), [w, 4 * w], Init::Normal),
                    (format!("head.lstm.{dir}.bias"), [1, 4 * w], Init::ForgetBias),
                ]);
            }
            v.extend([
                ("head.out.weight".to_string(), [2 * w, t], Init::Normal),
                ("head.out.bias".to_string(), [1, t], Init::Zeros),
            ]);
        }
    }
    v
}

/// Encoder plus head parameters, in a fixed slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Batch trimmed to its longest real sequence.
struct PackedBatch {
    seq: usize,
    ids: Vec<u32>,
    positions: Vec<u32>,
    segments: Vec<u32>,
    mask: Vec<Vec<bool>>,
}

impl PackedBatch {
    fn new(inputs: &[&EncodedInput], enc: &EncoderConfig, trim: bool) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        for x in inputs {
            if x.len() != enc.max_positions {
                return Err(Error::Shape(format!(
                    "input length {} but encoder expects {}",
                    x.len(),
                    enc.max_positions
                )));
            }
            if let Some(bad) = x.token_ids.iter().find(|&&i| i as usize >= enc.vocab_size) {
                return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", enc.vocab_size)));
            }
            if let Some(bad) = x.segment_ids.iter().find(|&&s| s as usize >= enc.segment_types) {
                return Err(Error::Shape(format!("segment id {bad} outside {} types", enc.segment_types)));
            }
        }
        let seq = if trim { inputs.iter().map(|x| x.real_len()).max().unwrap_or(0).max(1) } else { enc.max_positions };
        let mut b = Self {
            seq,
            ids: Vec::with_capacity(inputs.len() * seq),
            positions: Vec::with_capacity(inputs.len() * seq),
            segments: Vec::with_capacity(inputs.len() * seq),
            mask: Vec::with_capacity(inputs.len()),
        };
        for x in inputs {
            b.ids.extend_from_slice(&x.token_ids[..seq]);
            b.positions.extend(0..seq as u32);
            b.segments.extend(x.segment_ids[..seq].iter().map(|&s| u32::from(s)));
            b.mask.push(x.attention_mask[..seq].iter().map(|&m| m == 1).collect());
        }
        Ok(b)
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: embeddings ~ N(0, 0.02²), projection weights
    /// ~ N(0, 1/fan_in), biases 0, norm gains 1.
    pub fn init(encoder: EncoderConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        head.validate()?;
        let mut rng = seed::stream(seed, "model-init");
        let embed = Normal::new(0.0, EMBED_STD).expect("valid std");
        let (names, params) = param_specs(&encoder, &head)
            .into_iter()
            .map(|(name, shape, init)| {
                let n = shape[0] * shape[1];
                let data: Vec<T> = match init {
                    Init::Embedding => (0..n).map(|_| T::of(rng.sample(embed))).collect(),
                    Init::Normal => {
                        let d = Normal::new(0.0, (1.0 / shape[0] as f64).sqrt()).expect("valid std");
                        (0..n).map(|_| T::of(rng.sample(d))).collect()
                    }
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::ForgetBias => {
                        let w = n / 4;
                        (0..n).map(|i| if (w..2 * w).contains(&i) { T::one() } else { T::zero() }).collect()
                    }
                };
                (name, Tensor::new(shape, data).expect("shape matches"))
            })
            .unzip();
        Ok(Self { encoder, head, names, params })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_parts(encoder: EncoderConfig, head: HeadConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        encoder.validate()?;
        head.validate()?;
        let specs = param_specs(&encoder, &head);
        if specs.len() != params.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", specs.len(), params.len())));
        }
        for ((name, shape, _), (got, t)) in specs.iter().zip(&params) {
            if name != got || *shape != t.shape() {
                return Err(Error::Shape(format!("tensor {got} {:?} where {name} {shape:?} expected", t.shape())));
            }
        }
        let (names, params) = params.into_iter().unzip();
        Ok(Self { encoder, head, names, params })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_labels(&self) -> usize {
        self.head.num_labels
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            encoder: self.encoder,
            head: self.head,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers parameters on `g`: trainable leaves, or constants for
    /// inference so the tape skips gradient bookkeeping.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .enumerate()
            .map(|(slot, p)| if trainable { g.param(p.clone(), slot) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Logits `(batch x T)` for `inputs`, using parameters bound by [`Model::bind`].
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], inputs: &[&EncodedInput]) -> Result<Var> {
        let batch = PackedBatch::new(inputs, &self.encoder, true)?;
        let (hidden, _) = self.encode(g, vars, &batch)?;
        self.head_forward(g, &vars[self.encoder_param_count()..], hidden, &batch)
    }

    /// Last-layer hidden states over the full padded length, `(max_len x H)`.
    pub fn hidden_states(&self, input: &EncodedInput) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let vars = self.bind(&mut g, false)?;
        let batch = PackedBatch::new(&[input], &self.encoder, false)?;
        let (h, _) = self.encode(&mut g, &vars, &batch)?;
        Ok(g.value(h).clone())
    }

    /// Per layer, `heads` row-stochastic `max_len x max_len` attention maps,
    /// flattened head-major.
    pub fn attention_weights(&self, input: &EncodedInput) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::eval();
        let vars = self.bind(&mut g, false)?;
        let batch = PackedBatch::new(&[input], &self.encoder, false)?;
        let (_, attn) = self.encode(&mut g, &vars, &batch)?;
        Ok(attn.into_iter().map(|v| g.attention_probs(v).expect("attention node").1.to_vec()).collect())
    }

    /// Inference logits, `batch_size` inputs per forward pass.
    pub fn logits(&self, inputs: &[EncodedInput], batch_size: usize) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedInput> = chunk.iter().collect();
            let mut g = Graph::eval();
            let vars = self.bind(&mut g, false)?;
            let y = self.forward(&mut g, &vars, &refs)?;
            let y = g.value(y);
            out.extend((0..y.rows()).map(|r| y.row(r).to_vec()));
        }
        Ok(out)
    }

    fn encoder_param_count(&self) -> usize {
        5 + 12 * self.encoder.layers
    }

    fn encode(&self, g: &mut Graph<T>, vars: &[Var], batch: &PackedBatch) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.encoder;
        let rate = cfg.dropout;
        let word = g.embedding(vars[0], &batch.ids)?;
        let pos = g.embedding(vars[1], &batch.positions)?;
        let seg = g.embedding(vars[2], &batch.segments)?;
        let x = g.add(word, pos)?;
        let x = g.add(x, seg)?;
        let x = g.layer_norm(x, vars[3], vars[4], LN_EPS)?;
        let mut x = g.dropout(x, rate)?;
        let mut attn = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = &vars[5 + 12 * l..5 + 12 * (l + 1)];
            let qkv = g.matmul(x, p[0])?;
            let qkv = g.add_row(qkv, p[1])?;
            let a = g.attention(qkv, &batch.mask, cfg.heads)?;
            attn.push(a);
            let a = g.matmul(a, p[2])?;
            let a = g.add_row(a, p[3])?;
            let a = g.dropout(a, rate)?;
            let r = g.add(x, a)?;
            x = g.layer_norm(r, p[4], p[5], LN_EPS)?;
            let f = g.matmul(x, p[6])?;
            let f = g.add_row(f, p[7])?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p[8])?;
            let f = g.add_row(f, p[9])?;
            let f = g.dropout(f, rate)?;
            let r = g.add(x, f)?;
            x = g.layer_norm(r, p[10], p[11], LN_EPS)?;
        }
        Ok((x, attn))
    }

    fn head_forward(&self, g: &mut Graph<T>, p: &[Var], hidden: Var, batch: &PackedBatch) -> Result<Var> {
        let rate = self.encoder.dropout;
        let b = batch.mask.len();
        match self.head.kind {
            HeadKind::Linear => {
                let cls_rows: Vec<usize> = (0..b).map(|i| i * batch.seq).collect();
                let cls = g.gather_rows(hidden, &cls_rows)?;
                let z = g.matmul(cls, p[0])?;
                let z = g.add_row(z, p[1])?;
                let z = g.tanh(z)?;
                let z = g.dropout(z, rate)?;
                let y = g.matmul(z, p[2])?;
                g.add_row(y, p[3])
            }
            HeadKind::Bilstm => {
                let fwd = self.lstm(g, &p[0..3], hidden, batch, false)?;
                let bwd = self.lstm(g, &p[3..6], hidden, batch, true)?;
                let z = g.concat_cols(&[fwd, bwd])?;
                let z = g.relu(z)?;
                let z = g.dropout(z, rate)?;
                let y = g.matmul(z, p[6])?;
                g.add_row(y, p[7])
            }
        }
    }

    /// One LSTM direction over the padded batch. Pad steps carry the state
    /// through unchanged, so the forward pass ends on the last real token
    /// and the backward pass ends on position 0.
    fn lstm(&self, g: &mut Graph<T>, p: &[Var], hidden: Var, batch: &PackedBatch, reverse: bool) -> Result<Var> {
        let w = self.head.width;
        let b = batch.mask.len();
        let xin = g.matmul(hidden, p[0])?;
        let xin = g.add_row(xin, p[2])?;
        let mut h = g.constant(Tensor::zeros([b, w]))?;
        let mut c = g.constant(Tensor::zeros([b, w]))?;
        let steps: Vec<usize> = if reverse { (0..batch.seq).rev().collect() } else { (0..batch.seq).collect() };
        for t in steps {
            let rows: Vec<usize> = (0..b).map(|i| i * batch.seq + t).collect();
            let xt = g.gather_rows(xin, &rows)?;
            let rec = g.matmul(h, p[1])?;
            let gates = g.add(xt, rec)?;
            let i = g.slice(gates, 0..b, 0..w)?;
            let f = g.slice(gates, 0..b, w..2 * w)?;
            let u = g.slice(gates, 0..b, 2 * w..3 * w)?;
            let o = g.slice(gates, 0..b, 3 * w..4 * w)?;
            let i = g.sigmoid(i)?;
            let f = g.sigmoid(f)?;
            let u = g.tanh(u)?;
            let o = g.sigmoid(o)?;
            let fc = g.mul(f, c)?;
            let iu = g.mul(i, u)?;
            let c_new = g.add(fc, iu)?;
            let tc = g.tanh(c_new)?;
            let h_new = g.mul(o, tc)?;
            let live: Vec<bool> = batch.mask.iter().map(|m| m[t]).collect();
            if live.iter().all(|l| *l) {
                h = h_new;
                c = c_new;
            } else {
                h = blend(g, &live, w, h_new, h)?;
                c = blend(g, &live, w, c_new, c)?;
            }
        }
        Ok(h)
    }
}

/// The `[CLS]` summary: row 0 of the last-layer hidden states.
pub fn pool_cls<T: Scalar>(hidden: &Tensor<T>) -> Result<Vec<T>> {
    if hidden.rows() == 0 {
        return Err(Error::Empty("no hidden states to pool".into()));
    }
    Ok(hidden.row(0).to_vec())
}

/// Row-wise select: `live[i] ? new[i] : old[i]`, as `m ⊙ new + (1 − m) ⊙ old`.
fn blend<T: Scalar>(g: &mut Graph<T>, live: &[bool], w: usize, new: Var, old: Var) -> Result<Var> {
    let m: Vec<T> = live.iter().flat_map(|&l| std::iter::repeat_n(if l { T::one() } else { T::zero() }, w)).collect();
    let keep: Vec<T> = m.iter().map(|&x| T::one() - x).collect();
    let m = g.constant(Tensor::new([live.len(), w], m)?)?;
    let keep = g.constant(Tensor::new([live.len(), w], keep)?)?;
    let a = g.mul(m, new)?;
    let b = g.mul(keep, old)?;
    g.add(a, b)
}

impl Model<f64> {
    /// Central-difference check of every parameter against the analytic
    /// gradient of the BCE loss on one batch. Dropout masks come from a
    /// fixed stream so each evaluation sees the same noise.
    pub fn check_gradients(
        &mut self,
        inputs: &[&EncodedInput],
        targets: &[u8],
        pos_weight: &[f64],
        h: f64,
    ) -> Result<GradCheckReport> {
        let start = self.params.clone();
        let report = finite_diff_check(
            |params, want| {
                self.params.clone_from_slice(params);
                let mut g = Graph::train(seed::stream(0, "gradcheck-dropout"));
                let vars = self.bind(&mut g, true)?;
                let logits = self.forward(&mut g, &vars, inputs)?;
                let loss = g.bce_with_logits(logits, targets, pos_weight, None)?;
                let value = g.value(loss).item();
                if !want {
                    return Ok((value, None));
                }
                let grads = g
                    .backward(loss)?
                    .into_param_grads(vars.len())
                    .into_iter()
                    .zip(params)
                    .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                Ok((value, Some(grads)))
            },
            &start,
            h,
        );
        self.params = start;
        report
    }
}
