use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, EncoderConfig, HeadConfig, HeadKind, Model, ModelDims, TrainMeta};
use crate::corpus::{Dataset, TeamLabelRegistry};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, confusion, macro_f1, MetricsReport};
use crate::numerics::graph::sigmoid;
use crate::numerics::{adam_step, AdamConfig, Graph, OptimizerState, Scalar};
use crate::seed;
use crate::tokenizer::{EncodedDataset, EncodedInput, Vocab};

pub const DEFAULT_THRESHOLD: f64 = 0.55;
const EVAL_BATCH: usize = 64;

/// Fine-tuning hyperparameters, keyed as in the usual BERT recipe tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dropout: f64,
    pub max_seq_length: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Per-label positive weights; all ones when absent.
    pub pos_weight: Option<Vec<f64>>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dropout: 0.1,
            max_seq_length: 128,
            batch_size: 16,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            adam_epsilon: 1e-6,
            epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            pos_weight: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_labels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) || self.weight_decay < 0.0 {
            return bad("learning_rate and adam_epsilon must be positive, weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if let Some(p) = &self.pos_weight {
            if p.len() != num_labels || p.iter().any(|w| !(*w > 0.0)) {
                return bad(format!("pos_weight needs {num_labels} positive entries"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            eps: self.adam_epsilon,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
        }
    }

    fn pos_weights(&self, num_labels: usize) -> Vec<f64> {
        self.pos_weight.clone().unwrap_or_else(|| vec![1.0; num_labels])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
}

/// 1-based epoch with the highest dev accuracy; the earliest wins ties.
pub fn select_best_epoch(dev_accuracy: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &a) in dev_accuracy.iter().enumerate() {
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i + 1, a));
        }
    }
    best.map(|(e, _)| e)
}

/// Bit `t` is set iff `σ(logit_t) ≥ τ`.
pub fn predict<T: Scalar>(logits: &[T], threshold: f64) -> Vec<u8> {
    logits.iter().map(|&x| u8::from(sigmoid(x).f64() >= threshold)).collect()
}

pub struct TrainRequest<'a> {
    pub train: &'a EncodedDataset,
    pub dev: &'a EncodedDataset,
    pub vocab: &'a Vocab,
    pub registry: &'a TeamLabelRegistry,
    pub head: HeadKind,
    pub dims: ModelDims,
    pub hparams: &'a TrainConfig,
    pub seed: u64,
}

fn check_encoding(name: &str, ds: &EncodedDataset, req: &TrainRequest) -> Result<()> {
    if ds.vocab_hash != req.vocab.hash() {
        return Err(Error::VocabMismatch { expected: req.vocab.hash(), found: ds.vocab_hash.clone() });
    }
    if ds.max_len != req.hparams.max_seq_length
        || ds.num_labels != req.registry.len()
        || ds.variant != req.train.variant
    {
        return Err(Error::Config(format!(
            "{name} set encoded as {} / max_len {} / {} labels, expected {} / {} / {}",
            ds.variant,
            ds.max_len,
            ds.num_labels,
            req.train.variant,
            req.hparams.max_seq_length,
            req.registry.len()
        )));
    }
    Ok(())
}

/// Fine-tunes a fresh model and returns the checkpoint of the epoch with
/// the best dev accuracy. Fully determined by `seed`.
pub fn train(req: &TrainRequest) -> Result<Checkpoint> {
    let hp = req.hparams;
    let t = req.registry.len();
    hp.validate(t)?;
    if req.train.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if req.dev.is_empty() {
        return Err(Error::Empty("dev set is empty".into()));
    }
    check_encoding("train", req.train, req)?;
    check_encoding("dev", req.dev, req)?;

    let mut encoder = EncoderConfig::with_dims(req.vocab.len(), hp.max_seq_length, req.dims);
    encoder.dropout = hp.dropout;
    let head = HeadConfig::new(req.head, &encoder, t);
    let mut model: Model<f32> = Model::init(encoder, head, req.seed)?;
    let mut opt = OptimizerState::new(hp.adam(), model.params());
    let pos_weight = hp.pos_weights(t);

    let mut order: Vec<usize> = (0..req.train.len()).collect();
    let mut shuffle_rng = seed::stream(req.seed, "shuffle");
    let mut history = Vec::with_capacity(hp.epochs);
    let mut best: Option<(f64, Model<f32>)> = None;
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(hp.batch_size).enumerate() {
            let inputs: Vec<&EncodedInput> = idx.iter().map(|&i| &req.train.inputs[i]).collect();
            let targets: Vec<u8> = idx.iter().flat_map(|&i| req.train.targets[i].iter().copied()).collect();
            let mut g = Graph::train(seed::stream(req.seed, &format!("dropout/{epoch}/{bi}")));
            let vars = model.bind(&mut g, true)?;
            let logits = model.forward(&mut g, &vars, &inputs)?;
            let loss = g.bce_with_logits(logits, &targets, &pos_weight, None)?;
            loss_sum += g.value(loss).item().f64();
            batches += 1;
            let grads = g.backward(loss)?.into_param_grads(vars.len());
            adam_step(model.params_mut(), &grads, &mut opt)?;
        }
        let dev_preds = predict_all(&model, &req.dev.inputs, hp.threshold)?;
        let c = confusion(&dev_preds, &req.dev.targets)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_accuracy: accuracy(&c)?,
            dev_macro_f1: macro_f1(&c)?,
        };
        if best.as_ref().is_none_or(|(a, _)| record.dev_accuracy > *a) {
            best = Some((record.dev_accuracy, model.clone()));
        }
        history.push(record);
    }
    let accs: Vec<f64> = history.iter().map(|r| r.dev_accuracy).collect();
    let best_epoch = select_best_epoch(&accs).expect("at least one epoch");
    let (_, best_model) = best.expect("at least one epoch");
    Ok(Checkpoint {
        model: best_model,
        vocab: req.vocab.clone(),
        registry: req.registry.clone(),
        variant: req.train.variant,
        max_len: hp.max_seq_length,
        meta: TrainMeta { seed: req.seed, best_epoch, history, hparams: hp.clone(), dims: req.dims },
    })
}

fn predict_all<T: Scalar>(model: &Model<T>, inputs: &[EncodedInput], threshold: f64) -> Result<Vec<Vec<u8>>> {
    Ok(model.logits(inputs, EVAL_BATCH)?.iter().map(|l| predict(l, threshold)).collect())
}

/// Metrics for a checkpoint on an already encoded set.
pub fn evaluate_encoded<T: Scalar>(
    ckpt: &Checkpoint<T>,
    test: &EncodedDataset,
    threshold: f64,
) -> Result<MetricsReport> {
    if test.vocab_hash != ckpt.vocab.hash() {
        return Err(Error::VocabMismatch { expected: ckpt.vocab.hash(), found: test.vocab_hash.clone() });
    }
    if test.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let preds = predict_all(&ckpt.model, &test.inputs, threshold)?;
    MetricsReport::from_predictions(&preds, &test.targets, ckpt.registry.names(), threshold)
}

/// Encodes `test` with the checkpoint's own vocabulary and layout, then scores it.
pub fn evaluate<T: Scalar>(ckpt: &Checkpoint<T>, test: &Dataset, threshold: f64) -> Result<MetricsReport> {
    if test.registry != ckpt.registry {
        return Err(Error::InvalidRegistry("test set labels differ from the checkpoint's".into()));
    }
    let enc = EncodedDataset::new(test, &ckpt.vocab, ckpt.variant, ckpt.max_len)?;
    evaluate_encoded(ckpt, &enc, threshold)
}
