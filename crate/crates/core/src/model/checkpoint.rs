use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderConfig, HeadConfig, Model, ModelDims, TrainConfig};
use crate::corpus::TeamLabelRegistry;
use crate::error::{Error, Result};
use crate::numerics::{Precision, Scalar, Tensor};
use crate::tokenizer::{EncodedInput, InputVariant, Vocab};

use super::train::EpochRecord;

const FORMAT: &str = "deftri-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub hparams: TrainConfig,
    pub dims: ModelDims,
}

/// A trained model together with everything needed to encode new inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub model: Model<T>,
    pub vocab: Vocab,
    pub registry: TeamLabelRegistry,
    pub variant: InputVariant,
    pub max_len: usize,
    pub meta: TrainMeta,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn logits(&self, inputs: &[EncodedInput]) -> Result<Vec<Vec<T>>> {
        self.model.logits(inputs, 64)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    precision: Precision,
    encoder: EncoderConfig,
    head: HeadConfig,
    labels: TeamLabelRegistry,
    vocab: Vec<String>,
    vocab_hash: String,
    variant: InputVariant,
    max_len: usize,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    payload_sha256: String,
}

/// Writes a JSON header line followed by the raw little-endian payload.
/// The file is written beside `path` and renamed into place.
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(ckpt.model.num_parameters() * T::BYTES);
    for t in ckpt.model.params() {
        for &x in t.data() {
            x.write_le(&mut payload);
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        precision: T::PRECISION,
        encoder: ckpt.model.encoder,
        head: ckpt.model.head,
        labels: ckpt.registry.clone(),
        vocab: ckpt.vocab.tokens().to_vec(),
        vocab_hash: ckpt.vocab.hash(),
        variant: ckpt.variant,
        max_len: ckpt.max_len,
        meta: ckpt.meta.clone(),
        tensors: ckpt
            .model
            .names()
            .iter()
            .zip(ckpt.model.params())
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape() })
            .collect(),
        payload_bytes: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("no header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(corrupt(&format!("unsupported format {} v{}", header.format, header.version)));
    }
    let payload = bytes[split + 1..].to_vec();
    if payload.len() != header.payload_bytes {
        return Err(corrupt(&format!("payload is {} bytes, header says {}", payload.len(), header.payload_bytes)));
    }
    if hex::encode(Sha256::digest(&payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    Ok((header, payload))
}

/// Precision the checkpoint at `path` was saved in.
pub fn read_precision(path: &Path) -> Result<Precision> {
    Ok(read_header(path)?.0.precision)
}

/// Loads a checkpoint saved in precision `T`. Nothing is returned unless
/// the whole file validates.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let (h, payload) = read_header(path)?;
    let corrupt = |m: String| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
    if h.precision != T::PRECISION {
        return Err(corrupt(format!("saved as {:?}, requested {:?}", h.precision, T::PRECISION)));
    }
    let vocab = Vocab::from_tokens(h.vocab).map_err(|e| corrupt(e.to_string()))?;
    if vocab.hash() != h.vocab_hash {
        return Err(Error::VocabMismatch { expected: h.vocab_hash, found: vocab.hash() });
    }
    let expected: usize = h.tensors.iter().map(|t| t.shape[0] * t.shape[1] * T::BYTES).sum();
    if expected != payload.len() {
        return Err(corrupt(format!("tensor table needs {expected} bytes, payload has {}", payload.len())));
    }
    let mut offset = 0;
    let mut params = Vec::with_capacity(h.tensors.len());
    for entry in h.tensors {
        let n = entry.shape[0] * entry.shape[1];
        let data: Vec<T> = payload[offset..offset + n * T::BYTES].chunks_exact(T::BYTES).map(T::read_le).collect();
        offset += n * T::BYTES;
        params.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    let model = Model::from_parts(h.encoder, h.head, params).map_err(|e| corrupt(e.to_string()))?;
    if h.labels.len() != model.num_labels() {
        return Err(corrupt(format!("{} labels for a {}-way head", h.labels.len(), model.num_labels())));
    }
    Ok(Checkpoint { model, vocab, registry: h.labels, variant: h.variant, max_len: h.max_len, meta: h.meta })
}

/// Loads a checkpoint and verifies it was trained on `vocab`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, vocab: &Vocab) -> Result<Checkpoint<T>> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.vocab.hash() != vocab.hash() {
        return Err(Error::VocabMismatch { expected: vocab.hash(), found: ckpt.vocab.hash() });
    }
    Ok(ckpt)
}
