//! Adversarial augmentation by embedding-neighbor word substitution.
//!
//! A word may be swapped only for a neighbor whose cosine similarity to it
//! is at least `min_cosine`. Labels are copied verbatim.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Defect, Provenance, DEFAULT_NOISE, DEFAULT_POOLS};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        let mut table = Self {
            dim,
            words: Vec::with_capacity(entries.len()),
            vectors: Vec::with_capacity(entries.len()),
            norms: Vec::with_capacity(entries.len()),
            index: HashMap::with_capacity(entries.len()),
        };
        for (word, v) in entries {
            let word = word.to_lowercase();
            if v.len() != dim {
                return Err(Error::Config(format!("embedding for \"{word}\" has dim {} not {dim}", v.len())));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Config(format!("embedding for \"{word}\" is zero or non-finite")));
            }
            if table.index.insert(word.clone(), table.words.len()).is_some() {
                return Err(Error::Config(format!("duplicate embedding word \"{word}\"")));
            }
            table.words.push(word);
            table.vectors.push(v);
            table.norms.push(norm);
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(&word.to_lowercase()).map(|i| self.vectors[*i].as_slice())
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let i = *self.index.get(&a.to_lowercase())?;
        let j = *self.index.get(&b.to_lowercase())?;
        Some(self.cos_idx(i, j))
    }

    fn cos_idx(&self, i: usize, j: usize) -> f64 {
        let dot: f64 = self.vectors[i].iter().zip(&self.vectors[j]).map(|(x, y)| x * y).sum();
        dot / (self.norms[i] * self.norms[j])
    }

    /// Reads the word2vec text layout: `"<count> <dim>"`, then one word and
    /// `dim` floats per line.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let malformed = |line: usize, message: String| Error::Malformed { path: path.to_path_buf(), line, message };
        let header =
            lines.next().ok_or_else(|| malformed(1, "missing header".into()))?.map_err(|e| Error::io(path, e))?;
        let mut parts = header.split_whitespace().map(str::parse::<usize>);
        let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
            (Some(Ok(c)), Some(Ok(d)), None) => (c, d),
            _ => return Err(malformed(1, format!("bad header \"{header}\""))),
        };
        let mut entries = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let word = it.next().expect("nonempty line").to_string();
            let v = it
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| malformed(i + 2, e.to_string()))?;
            if v.len() != dim {
                return Err(malformed(i + 2, format!("expected {dim} values, got {}", v.len())));
            }
            entries.push((word, v));
        }
        if entries.len() != count {
            return Err(malformed(1, format!("header promises {count} words, found {}", entries.len())));
        }
        Self::new(dim, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.words.len(), self.dim).map_err(io)?;
        for (word, v) in self.words.iter().zip(&self.vectors) {
            write!(w, "{word}").map_err(io)?;
            for x in v {
                // shortest repr that round-trips exactly
                write!(w, " {x:?}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Desk-scale table covering the synthetic corpus vocabulary: each
    /// synonym group is a tight cluster (pairwise cosine well above 0.8),
    /// distinct groups and singletons are far apart (cosine below 0.7).
    pub fn bundled() -> Self {
        let mut groups: Vec<Vec<String>> =
            SYNONYM_BLOCK.iter().map(|g| g.iter().map(|w| w.to_string()).collect()).collect();
        groups.extend(DEFAULT_POOLS.iter().map(|p| p.iter().map(|w| w.to_string()).collect()));
        for w in DEFAULT_NOISE {
            if !groups.iter().any(|g| g.iter().any(|x| x == w)) {
                groups.push(vec![w.to_string()]);
            }
        }
        clustered_table(&groups, BUNDLED_DIM, BUNDLED_SEED)
    }
}

pub const BUNDLED_DIM: usize = 50;
const BUNDLED_SEED: u64 = 0x5EED_0E3B;

/// Hand-curated synonym pairs for the filler vocabulary. The first three
/// mirror familiar defect-text substitutions.
pub const SYNONYM_BLOCK: &[&[&str]] = &[
    &["showing", "displaying"],
    &["cost", "prices"],
    &["nutrition", "nourishment"],
    &["wrong", "incorrect"],
    &["blank", "empty"],
    &["crash", "freeze"],
    &["broken", "faulty"],
    &["slowly", "sluggishly"],
    &["missing", "absent"],
    &["error", "failure"],
    &["issue", "problem"],
    &["customer", "shopper"],
    &["navigate", "browse"],
    &["reload", "refresh"],
    &["video", "recording"],
    &["screenshot", "capture"],
    &["overlaps", "overlapping"],
    &["large", "big"],
    &["small", "tiny"],
    &["button", "control"],
];

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Builds one cluster per group, resampling any group that lands too close
/// to an earlier one or comes out too loose.
pub fn clustered_table(groups: &[Vec<String>], dim: usize, seed: u64) -> EmbeddingTable {
    const SPREAD: f64 = 0.05;
    let mut rng = seed::stream(seed, "embedding-table");
    let mut placed: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut entries = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        loop {
            let base = unit_gaussian(&mut rng, dim);
            let members: Vec<Vec<f64>> = group
                .iter()
                .map(|_| base.iter().map(|b| b + SPREAD * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let tight = members.iter().enumerate().all(|(i, a)| members[i + 1..].iter().all(|b| cos(a, b) >= 0.85));
            let apart = members.iter().all(|m| placed.iter().all(|(_, p)| cos(m, p) < 0.7));
            if tight && apart {
                for (w, m) in group.iter().zip(members) {
                    placed.push((gi, m.clone()));
                    entries.push((w.clone(), m));
                }
                break;
            }
        }
    }
    EmbeddingTable::new(dim, entries).expect("constructed table is valid")
}

/// Up to `k` words other than `word` with cosine ≥ `min_cos`, most similar
/// first (ties by word). Empty when `word` is not in the table.
pub fn nearest_neighbors(word: &str, table: &EmbeddingTable, k: usize, min_cos: f64) -> Vec<(String, f64)> {
    let Some(&i) = table.index.get(&word.to_lowercase()) else {
        return Vec::new();
    };
    let mut hits: Vec<(String, f64)> = (0..table.len())
        .filter(|j| *j != i)
        .map(|j| (j, table.cos_idx(i, j)))
        .filter(|(_, c)| *c >= min_cos)
        .map(|(j, c)| (table.words[j].clone(), c))
        .collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    hits.truncate(k);
    hits
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub sample_fraction: f64,
    pub copies_per_defect: usize,
    pub perturb_rate: f64,
    pub min_cosine: f64,
    pub neighbor_k: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sample_fraction: 0.30,
            copies_per_defect: 2,
            perturb_rate: 0.10,
            min_cosine: 0.8,
            neighbor_k: 10,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!("sample fraction {} outside (0, 1]", self.sample_fraction)));
        }
        if !(self.perturb_rate > 0.0 && self.perturb_rate <= 1.0) {
            return Err(Error::Config(format!("perturb rate {} outside (0, 1]", self.perturb_rate)));
        }
        if !(-1.0..=1.0).contains(&self.min_cosine) {
            return Err(Error::Config(format!("min cosine {} outside [-1, 1]", self.min_cosine)));
        }
        if self.copies_per_defect < 1 || self.neighbor_k < 1 {
            return Err(Error::Config("copies and neighbor_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Words to alter per copy: `max(1, ceil(rate · words))`.
    pub fn budget(&self, word_count: usize) -> usize {
        // guard against 0.1 * 30 = 3.0000000000000004
        let raw = (self.perturb_rate * word_count as f64 - 1e-9).ceil();
        (raw.max(1.0) as usize).min(word_count.max(1))
    }
}

/// One substitution actually made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Swap {
    pub position: usize,
    pub original: String,
    pub replacement: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub copies: Vec<Defect>,
    pub swaps: Vec<Vec<Swap>>,
    pub word_count: usize,
    pub budget: usize,
    /// `budget - qualifying positions` when fewer positions qualified.
    pub shortfall: usize,
    /// Set when no position had a qualifying neighbor.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Word(String),
    Other(String),
}

fn segments(text: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for c in text.chars() {
        let w = c.is_alphanumeric();
        if w != in_word && !cur.is_empty() {
            out.push(if in_word {
                Segment::Word(std::mem::take(&mut cur))
            } else {
                Segment::Other(std::mem::take(&mut cur))
            });
        }
        in_word = w;
        cur.push(c);
    }
    if !cur.is_empty() {
        out.push(if in_word { Segment::Word(cur) } else { Segment::Other(cur) });
    }
    out
}

fn join(segs: &[Segment]) -> String {
    segs.iter()
        .map(|s| match s {
            Segment::Word(w) | Segment::Other(w) => w.as_str(),
        })
        .collect()
}

fn match_case(source: &str, replacement: &str) -> String {
    if source.chars().next().is_some_and(char::is_uppercase) {
        let mut c = replacement.chars();
        c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
    } else {
        replacement.to_string()
    }
}

type NeighborCache = HashMap<String, Vec<(String, f64)>>;

fn neighbors_cached<'a>(
    cache: &'a mut NeighborCache,
    word: &str,
    cfg: &AugmentConfig,
    table: &EmbeddingTable,
) -> &'a [(String, f64)] {
    let key = word.to_lowercase();
    cache.entry(key.clone()).or_insert_with(|| nearest_neighbors(&key, table, cfg.neighbor_k, cfg.min_cosine))
}

pub fn augment_defect<R: Rng>(
    d: &Defect,
    cfg: &AugmentConfig,
    table: &EmbeddingTable,
    rng: &mut R,
) -> Result<AugmentOutcome> {
    augment_defect_cached(d, cfg, table, rng, &mut NeighborCache::new())
}

fn augment_defect_cached<R: Rng>(
    d: &Defect,
    cfg: &AugmentConfig,
    table: &EmbeddingTable,
    rng: &mut R,
    cache: &mut NeighborCache,
) -> Result<AugmentOutcome> {
    cfg.validate()?;
    let fields = [segments(&d.title), segments(&d.description)];
    // (field, segment index) of every word, title first
    let words: Vec<(usize, usize)> = fields
        .iter()
        .enumerate()
        .flat_map(|(f, segs)| {
            segs.iter().enumerate().filter(|(_, s)| matches!(s, Segment::Word(_))).map(move |(i, _)| (f, i))
        })
        .collect();
    if words.is_empty() {
        return Err(Error::InvalidDefect { id: d.id.clone(), reason: "no words to augment".into() });
    }
    let word_at = |p: usize| -> &str {
        let (f, i) = words[p];
        match &fields[f][i] {
            Segment::Word(w) => w,
            Segment::Other(_) => unreachable!("indexed words only"),
        }
    };
    let qualifying: Vec<usize> =
        (0..words.len()).filter(|p| !neighbors_cached(cache, word_at(*p), cfg, table).is_empty()).collect();
    let budget = cfg.budget(words.len());
    let mut outcome = AugmentOutcome {
        copies: Vec::new(),
        swaps: Vec::new(),
        word_count: words.len(),
        budget,
        shortfall: budget.saturating_sub(qualifying.len()),
        skipped: qualifying.is_empty(),
    };
    if qualifying.is_empty() {
        return Ok(outcome);
    }
    let n_alter = budget.min(qualifying.len());
    for c in 0..cfg.copies_per_defect {
        let mut fields = fields.clone();
        let mut picked: Vec<usize> =
            index::sample(rng, qualifying.len(), n_alter).into_iter().map(|k| qualifying[k]).collect();
        picked.sort_unstable();
        let mut swaps = Vec::with_capacity(n_alter);
        for p in picked {
            let original = word_at(p).to_string();
            let (replacement, cosine) =
                neighbors_cached(cache, &original, cfg, table).choose(rng).expect("qualifying").clone();
            let (f, i) = words[p];
            fields[f][i] = Segment::Word(match_case(&original, &replacement));
            swaps.push(Swap { position: p, original: original.to_lowercase(), replacement, cosine });
        }
        let copy = Defect {
            id: format!("{}-aug{}", d.id, c + 1),
            title: join(&fields[0]),
            description: join(&fields[1]),
            labels: d.labels.clone(),
            provenance: Provenance::Augmented,
        };
        if copy.title == d.title && copy.description == d.description {
            continue;
        }
        outcome.copies.push(copy);
        outcome.swaps.push(swaps);
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub source_id: String,
    pub copy_id: String,
    pub word_count: usize,
    pub budget: usize,
    pub swaps: Vec<Swap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub sampled: usize,
    pub appended: usize,
    pub skipped: Vec<String>,
    pub shortfalls: Vec<(String, usize)>,
    pub swaps: Vec<SwapRecord>,
}

/// Samples `floor(fraction · N)` defects and appends their augmented copies.
/// Each source draws from its own stream keyed by its id, so a defect's
/// copies do not depend on which other defects were sampled.
pub fn augment_dataset(ds: &Dataset, cfg: &AugmentConfig, table: &EmbeddingTable) -> Result<(Dataset, AugmentReport)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Empty("cannot augment an empty dataset".into()));
    }
    let n = ds.len();
    let take = ((cfg.sample_fraction * n as f64 + 1e-9).floor() as usize).min(n);
    let mut sampled: Vec<usize> = index::sample(&mut seed::stream(cfg.seed, "augment-sample"), n, take).into_vec();
    sampled.sort_unstable();

    let mut cache = NeighborCache::new();
    let mut report = AugmentReport { sampled: take, appended: 0, skipped: vec![], shortfalls: vec![], swaps: vec![] };
    let mut extra = Vec::new();
    for i in sampled {
        let d = &ds.defects[i];
        let mut rng = seed::stream(cfg.seed, &format!("augment/{}", d.id));
        let out = augment_defect_cached(d, cfg, table, &mut rng, &mut cache)?;
        if out.skipped {
            report.skipped.push(d.id.clone());
            continue;
        }
        if out.shortfall > 0 {
            report.shortfalls.push((d.id.clone(), out.shortfall));
        }
        for (copy, swaps) in out.copies.into_iter().zip(out.swaps) {
            report.swaps.push(SwapRecord {
                source_id: d.id.clone(),
                copy_id: copy.id.clone(),
                word_count: out.word_count,
                budget: out.budget,
                swaps,
            });
            extra.push(copy);
        }
    }
    report.appended = extra.len();
    let mut out = ds.clone();
    out.extend(extra)?;
    Ok((out, report))
}
