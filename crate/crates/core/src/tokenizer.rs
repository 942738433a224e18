//! Word-level uncased tokenizer, vocabulary, and the three encoder input
//! layouts: plain defect text, labels fused into a single sentence, and
//! labels fused as a separate `[SEP]`-delimited sentence.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from a token list in id order. The first four
    /// entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if i >= RESERVED.len() && *t != t.to_lowercase() {
                return Err(Error::Config(format!("vocabulary token \"{t}\" is not lowercase")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token \"{t}\"")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, u32> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
        fs::write(path, serde_json::to_string_pretty(&map)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: HashMap<String, u32> = serde_json::from_str(&text)?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Config(format!("vocabulary ids are not dense ({t} -> {id})")))?;
            *slot = t;
        }
        Self::from_tokens(tokens)
    }
}

/// Frequency-ranked vocabulary over the dataset's defect texts. Ties are
/// broken lexicographically. Tokens of the registry's label names are added
/// afterwards when missing, so the fused layouts never see `[UNK]` labels.
pub fn build_vocab(ds: &Dataset, min_freq: usize, max_size: usize) -> Result<Vocab> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for d in &ds.defects {
        for t in tokenize(&d.text()) {
            *freq.entry(t).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::Empty("corpus has no tokens".into()));
    }
    let label_tokens: Vec<String> = ds.registry.names().iter().flat_map(|n| tokenize(n)).collect();
    let mut ranked: Vec<(String, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut missing_labels: Vec<String> = Vec::new();
    for t in &label_tokens {
        if !ranked.iter().any(|(r, _)| r == t) && !missing_labels.contains(t) {
            missing_labels.push(t.clone());
        }
    }
    let budget = max_size.saturating_sub(RESERVED.len()).saturating_sub(missing_labels.len());
    tokens.extend(ranked.into_iter().take(budget).map(|(t, _)| t));
    for t in label_tokens {
        if !tokens.contains(&t) {
            tokens.push(t);
        }
    }
    Vocab::from_tokens(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    Baseline,
    FuseNosep,
    FuseSep,
}

impl InputVariant {
    pub const ALL: [InputVariant; 3] = [InputVariant::Baseline, InputVariant::FuseNosep, InputVariant::FuseSep];

    pub fn as_str(self) -> &'static str {
        match self {
            InputVariant::Baseline => "baseline",
            InputVariant::FuseNosep => "fuse_nosep",
            InputVariant::FuseSep => "fuse_sep",
        }
    }
}

impl std::fmt::Display for InputVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InputVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "fuse_nosep" => Ok(Self::FuseNosep),
            "fuse_sep" => Ok(Self::FuseSep),
            other => Err(Error::Config(format!("unknown input variant \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub variant: InputVariant,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|m| **m == 1).count()
    }
}

fn finish(mut ids: Vec<u32>, mut segs: Vec<u8>, max_len: usize, variant: InputVariant) -> EncodedInput {
    let real = ids.len();
    ids.resize(max_len, PAD);
    segs.resize(max_len, 0);
    let mut mask = vec![1u8; real];
    mask.resize(max_len, 0);
    EncodedInput { token_ids: ids, segment_ids: segs, attention_mask: mask, variant }
}

/// `[CLS] d1..dK [SEP]`, padded to `max_len`.
pub fn encode_baseline(defect_text: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedInput> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for [CLS]/[SEP]")));
    }
    let mut d = vocab.ids(&tokenize(defect_text));
    d.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(d);
    ids.push(SEP);
    let segs = vec![0; ids.len()];
    Ok(finish(ids, segs, max_len, InputVariant::Baseline))
}

fn label_ids(label_texts: &[String], vocab: &Vocab) -> Vec<u32> {
    label_texts.iter().flat_map(|l| vocab.ids(&tokenize(l))).collect()
}

/// `[CLS] L1..LT d1..dK [SEP]`, one segment.
pub fn encode_fuse_nosep(
    label_texts: &[String],
    defect_text: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedInput> {
    let labels = label_ids(label_texts, vocab);
    if labels.len() + 2 >= max_len {
        return Err(Error::Config(format!(
            "{} label tokens plus 2 specials do not fit max_len {max_len}",
            labels.len()
        )));
    }
    let mut d = vocab.ids(&tokenize(defect_text));
    d.truncate(max_len - 2 - labels.len());
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(labels);
    ids.extend(d);
    ids.push(SEP);
    let segs = vec![0; ids.len()];
    Ok(finish(ids, segs, max_len, InputVariant::FuseNosep))
}

/// `[CLS] L1..LT [SEP] d1..dK [SEP]`; segment 0 through the first `[SEP]`.
pub fn encode_fuse_sep(
    label_texts: &[String],
    defect_text: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedInput> {
    let labels = label_ids(label_texts, vocab);
    if labels.len() + 3 >= max_len {
        return Err(Error::Config(format!(
            "{} label tokens plus 3 specials do not fit max_len {max_len}",
            labels.len()
        )));
    }
    let mut d = vocab.ids(&tokenize(defect_text));
    d.truncate(max_len - 3 - labels.len());
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(labels);
    ids.push(SEP);
    let first_seg = ids.len();
    ids.extend(d);
    ids.push(SEP);
    let mut segs = vec![0u8; first_seg];
    segs.resize(ids.len(), 1);
    Ok(finish(ids, segs, max_len, InputVariant::FuseSep))
}

pub fn encode(
    variant: InputVariant,
    label_texts: &[String],
    defect_text: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedInput> {
    match variant {
        InputVariant::Baseline => encode_baseline(defect_text, vocab, max_len),
        InputVariant::FuseNosep => encode_fuse_nosep(label_texts, defect_text, vocab, max_len),
        InputVariant::FuseSep => encode_fuse_sep(label_texts, defect_text, vocab, max_len),
    }
}

/// A dataset encoded under one vocabulary and layout, with dense targets.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub inputs: Vec<EncodedInput>,
    pub targets: Vec<Vec<u8>>,
    pub variant: InputVariant,
    pub max_len: usize,
    pub vocab_hash: String,
    pub num_labels: usize,
}

impl EncodedDataset {
    pub fn new(ds: &Dataset, vocab: &Vocab, variant: InputVariant, max_len: usize) -> Result<Self> {
        let labels = ds.registry.names();
        let inputs = ds
            .defects
            .iter()
            .map(|d| encode(variant, labels, &d.text(), vocab, max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            targets: ds.label_matrix(),
            variant,
            max_len,
            vocab_hash: vocab.hash(),
            num_labels: ds.registry.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
