//! Defect records, team-label registry, JSONL dataset I/O and the
//! synthetic corpus generator.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

/// Canonical index of a team label inside a [`TeamLabelRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelId(pub usize);

pub type LabelSet = BTreeSet<LabelId>;

/// Ordered, duplicate-free list of team label names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TeamLabelRegistry {
    labels: Vec<String>,
    index: HashMap<String, LabelId>,
}

impl TeamLabelRegistry {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidRegistry(format!("need at least 2 labels, got {}", labels.len())));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, name) in labels.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::InvalidRegistry(format!("label {i} is empty")));
            }
            if index.insert(name.clone(), LabelId(i)).is_some() {
                return Err(Error::InvalidRegistry(format!("duplicate label \"{name}\"")));
            }
        }
        Ok(Self { labels, index })
    }

    /// The fifteen default team labels used by the synthetic corpus.
    pub fn default_teams() -> Self {
        Self::new(DEFAULT_TEAMS.iter().copied()).expect("default registry is valid")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, id: LabelId) -> Option<&str> {
        self.labels.get(id.0).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = LabelId> {
        (0..self.labels.len()).map(LabelId)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<String> = serde_json::from_str(&text)?;
        Self::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.labels)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<Vec<String>> for TeamLabelRegistry {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TeamLabelRegistry> for Vec<String> {
    fn from(r: TeamLabelRegistry) -> Self {
        r.labels
    }
}

/// Which pipeline stage produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
    Weak,
    Augmented,
    Mlsmote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Defect {
    pub id: String,
    pub title: String,
    pub description: String,
    pub labels: LabelSet,
    pub provenance: Provenance,
}

impl Defect {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        description: impl Into<String>,
        labels: impl IntoIterator<Item = LabelId>,
        provenance: Provenance,
    ) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            description: description.into(),
            labels: labels.into_iter().collect(),
            provenance,
        }
    }

    /// Title and description joined into the single text the tokenizer sees.
    pub fn text(&self) -> String {
        build_text(self)
    }

    fn validate(&self, registry: &TeamLabelRegistry) -> Result<()> {
        if self.title.is_empty() && self.description.is_empty() {
            return Err(Error::InvalidDefect {
                id: self.id.clone(),
                reason: "title and description are both empty".into(),
            });
        }
        if let Some(bad) = self.labels.iter().find(|l| l.0 >= registry.len()) {
            return Err(Error::InvalidDefect {
                id: self.id.clone(),
                reason: format!("label id {} outside registry of {}", bad.0, registry.len()),
            });
        }
        Ok(())
    }
}

/// Joins title and description with a `" . "` sentence boundary.
pub fn build_text(d: &Defect) -> String {
    format!("{} . {}", d.title, d.description)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split \"{other}\" (train | dev | test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub registry: TeamLabelRegistry,
    pub defects: Vec<Defect>,
    pub split: Split,
}

impl Dataset {
    pub fn new(registry: TeamLabelRegistry, defects: Vec<Defect>, split: Split) -> Result<Self> {
        let mut seen = HashSet::with_capacity(defects.len());
        for d in &defects {
            d.validate(&registry)?;
            if !seen.insert(d.id.as_str()) {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self { registry, defects, split })
    }

    pub fn len(&self) -> usize {
        self.defects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defects.is_empty()
    }

    /// Appends records, re-checking id uniqueness and registry closure.
    pub fn extend(&mut self, extra: Vec<Defect>) -> Result<()> {
        let mut seen: HashSet<String> = self.defects.iter().map(|d| d.id.clone()).collect();
        for d in &extra {
            d.validate(&self.registry)?;
            if !seen.insert(d.id.clone()) {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        self.defects.extend(extra);
        Ok(())
    }

    /// Positive count per label id.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.registry.len()];
        for d in &self.defects {
            for l in &d.labels {
                counts[l.0] += 1;
            }
        }
        counts
    }

    /// Labels as a dense `N x T` 0/1 matrix.
    pub fn label_matrix(&self) -> Vec<Vec<u8>> {
        self.defects
            .iter()
            .map(|d| {
                let mut row = vec![0u8; self.registry.len()];
                for l in &d.labels {
                    row[l.0] = 1;
                }
                row
            })
            .collect()
    }
}

/// Provenance line written at the top of every JSONL artifact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Identifies the generator run the records descend from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
}

const HEADER_PREFIX: &str = "# deftri ";

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    title: String,
    description: String,
    labels: Vec<String>,
    provenance: Provenance,
}

/// Reads a JSONL dataset. Lines starting with `#` are comments; the
/// lineage header (if any) supplies the split.
pub fn load_dataset(path: &Path, registry: &TeamLabelRegistry) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut split = Split::Train;
    let mut defects = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix(HEADER_PREFIX) {
            let lineage: Lineage = serde_json::from_str(rest).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("bad lineage header: {e}"),
            })?;
            split = lineage.split;
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let rec: Record = serde_json::from_str(trimmed).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let mut labels = LabelSet::new();
        for name in &rec.labels {
            let id = registry.id(name).ok_or_else(|| Error::UnknownLabel { label: name.clone(), line: lineno })?;
            labels.insert(id);
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        let defect =
            Defect { id: rec.id, title: rec.title, description: rec.description, labels, provenance: rec.provenance };
        defect.validate(registry).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        defects.push(defect);
    }
    Ok(Dataset { registry: registry.clone(), defects, split })
}

/// Reads only the lineage header of a JSONL artifact, if present.
pub fn read_lineage(path: &Path) -> Result<Option<Lineage>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        return match trimmed.strip_prefix(HEADER_PREFIX) {
            Some(rest) => Ok(Some(serde_json::from_str(rest)?)),
            None => Ok(None),
        };
    }
    Ok(None)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    save_dataset_with_lineage(ds, path, &Lineage { split: ds.split, ..Default::default() })
}

pub fn save_dataset_with_lineage(ds: &Dataset, path: &Path, lineage: &Lineage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let lineage = Lineage { split: ds.split, ..lineage.clone() };
    let io = |e| Error::io(path, e);
    writeln!(w, "{HEADER_PREFIX}{}", serde_json::to_string(&lineage)?).map_err(io)?;
    for d in &ds.defects {
        let rec = Record {
            id: d.id.clone(),
            title: d.title.clone(),
            description: d.description.clone(),
            labels: d.labels.iter().map(|l| ds.registry.name(*l).unwrap_or_default().to_string()).collect(),
            provenance: d.provenance,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

pub const DEFAULT_TEAMS: [&str; 15] = [
    "search",
    "cart",
    "checkout",
    "payments",
    "pickup",
    "delivery",
    "pricing",
    "catalog",
    "account",
    "notifications",
    "reviews",
    "inventory",
    "promotions",
    "pharmacy",
    "membership",
];

/// Signature words per default team, in registry order.
pub const DEFAULT_POOLS: [[&str; 6]; 15] = [
    ["query", "typeahead", "autocomplete", "keyword", "facet", "relevance"],
    ["basket", "quantity", "subtotal", "minicart", "bundle", "saveforlater"],
    ["placeorder", "confirmation", "tender", "ordersummary", "billing", "guestcheckout"],
    ["creditcard", "giftcard", "paypal", "declined", "refund", "wallet"],
    ["curbside", "timeslot", "reservation", "arrival", "parking", "checkin"],
    ["courier", "shipping", "tracking", "doorstep", "dispatch", "eta"],
    ["rollback", "markdown", "clearance", "unitprice", "msrp", "surcharge"],
    ["listing", "thumbnail", "variant", "swatch", "specifications", "itempage"],
    ["profile", "password", "signin", "username", "settings", "preferences"],
    ["push", "alert", "banner", "badge", "inbox", "reminder"],
    ["rating", "stars", "feedback", "testimonial", "helpful", "reviewer"],
    ["outofstock", "backorder", "availability", "restock", "stocklevel", "unavailable"],
    ["coupon", "promo", "voucher", "discount", "deal", "offer"],
    ["prescription", "refill", "pharmacist", "dosage", "immunization", "rx"],
    ["subscription", "renewal", "trial", "perks", "plus", "enroll"],
];

/// Label-neutral filler words. Disjoint from every signature pool.
pub const DEFAULT_NOISE: &[&str] = &[
    "page",
    "app",
    "user",
    "button",
    "control",
    "screen",
    "shows",
    "showing",
    "displaying",
    "appears",
    "error",
    "failure",
    "when",
    "after",
    "before",
    "tapping",
    "clicking",
    "loads",
    "slowly",
    "sluggishly",
    "blank",
    "empty",
    "incorrect",
    "wrong",
    "missing",
    "absent",
    "text",
    "icon",
    "spacing",
    "large",
    "big",
    "small",
    "tiny",
    "layout",
    "ios",
    "android",
    "web",
    "desktop",
    "mobile",
    "tablet",
    "version",
    "latest",
    "build",
    "title",
    "tiles",
    "final",
    "cost",
    "prices",
    "weight",
    "nutrition",
    "nourishment",
    "inconsistently",
    "sometimes",
    "always",
    "see",
    "attached",
    "video",
    "recording",
    "screenshot",
    "capture",
    "expected",
    "actual",
    "steps",
    "issue",
    "problem",
    "cannot",
    "item",
    "items",
    "order",
    "details",
    "previous",
    "canceled",
    "message",
    "field",
    "value",
    "number",
    "mapping",
    "stack",
    "header",
    "footer",
    "modal",
    "popup",
    "scroll",
    "crash",
    "freeze",
    "flicker",
    "duplicate",
    "overlaps",
    "overlapping",
    "truncated",
    "alignment",
    "color",
    "font",
    "swipe",
    "refresh",
    "reload",
    "navigate",
    "browse",
    "home",
    "link",
    "broken",
    "faulty",
    "redirect",
    "timeout",
    "spinner",
    "customer",
    "shopper",
    "guest",
    "store",
    "online",
];

/// Sentence templates; `{sig}` marks the signature slot, `{noise}` a filler slot.
pub const DEFAULT_TEMPLATES: &[&str] = &[
    "{noise} {sig} {noise} {noise}",
    "{sig} {noise} {noise} on {noise} {noise}",
    "{noise} {noise} {sig} {noise}",
    "unable to {noise} {sig} {noise} {noise}",
    "{noise} {sig} is {noise} when {noise} {noise}",
    "{noise} for {sig} not {noise}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub registry: TeamLabelRegistry,
    pub size: usize,
    /// Inclusive range of labels per defect.
    pub labels_per_defect: (usize, usize),
    /// Signature words, indexed by label id.
    pub keyword_pool: Vec<Vec<String>>,
    pub noise_vocab: Vec<String>,
    pub sentence_templates: Vec<String>,
    /// Relative label frequencies; uniform when absent.
    #[serde(default)]
    pub label_weights: Option<Vec<f64>>,
    pub id_prefix: String,
    pub split: Split,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            registry: TeamLabelRegistry::default_teams(),
            size,
            labels_per_defect: (1, 3),
            keyword_pool: DEFAULT_POOLS.iter().map(|p| p.iter().map(|w| w.to_string()).collect()).collect(),
            noise_vocab: DEFAULT_NOISE.iter().map(|w| w.to_string()).collect(),
            sentence_templates: DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect(),
            label_weights: None,
            id_prefix: "d".into(),
            split: Split::Train,
            seed,
        }
    }

    /// Generator settings for one split of this corpus: its own derived seed and an
    /// id prefix naming the split, so splits never share records or ids.
    pub fn split_spec(&self, split: Split, size: usize) -> Self {
        Self {
            size,
            split,
            seed: seed::derive(self.seed, &split.to_string()),
            id_prefix: format!("{}{split}-", self.id_prefix),
            ..self.clone()
        }
    }

    /// Stable fingerprint of everything but size and split.
    pub fn corpus_id(&self) -> String {
        let base = Self { size: 0, split: Split::Train, ..self.clone() };
        let json = serde_json::to_vec(&base).expect("spec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.registry.len();
        if self.size == 0 {
            return Err(Error::Config("size 0 requested with a nonzero labels-per-defect range".into()));
        }
        let (lo, hi) = self.labels_per_defect;
        if lo < 1 || lo > hi || hi > t {
            return Err(Error::Config(format!("labels_per_defect ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {t}")));
        }
        if self.keyword_pool.len() != t {
            return Err(Error::Config(format!("keyword pool has {} entries for {t} labels", self.keyword_pool.len())));
        }
        let mut owner: HashMap<String, usize> = HashMap::new();
        for (label, pool) in self.keyword_pool.iter().enumerate() {
            if pool.len() < 5 {
                return Err(Error::Config(format!(
                    "label {label} has {} signature words, need at least 5",
                    pool.len()
                )));
            }
            for w in pool {
                let w = w.to_lowercase();
                if let Some(prev) = owner.insert(w.clone(), label) {
                    if prev != label {
                        return Err(Error::Config(format!(
                            "signature word \"{w}\" shared by labels {prev} and {label}"
                        )));
                    }
                }
            }
        }
        if self.noise_vocab.is_empty() {
            return Err(Error::Config("noise vocabulary is empty".into()));
        }
        for w in &self.noise_vocab {
            if let Some(l) = owner.get(&w.to_lowercase()) {
                return Err(Error::Config(format!("noise word \"{w}\" overlaps signature pool of label {l}")));
            }
        }
        if self.sentence_templates.is_empty() {
            return Err(Error::Config("no sentence templates".into()));
        }
        for tpl in &self.sentence_templates {
            if tpl.matches("{sig}").count() != 1 {
                return Err(Error::Config(format!("template \"{tpl}\" must contain exactly one {{sig}}")));
            }
            for word in tpl.split_whitespace() {
                if word.starts_with('{') {
                    continue;
                }
                if let Some(l) = owner.get(&word.to_lowercase()) {
                    return Err(Error::Config(format!(
                        "template word \"{word}\" overlaps signature pool of label {l}"
                    )));
                }
            }
        }
        if let Some(w) = &self.label_weights {
            if w.len() != t || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Config("label weights must be T finite nonnegative values".into()));
            }
            if w.iter().filter(|x| **x > 0.0).count() < hi {
                return Err(Error::Config("fewer positively weighted labels than labels_per_defect max".into()));
            }
        }
        Ok(())
    }

    /// Realizes one defect carrying exactly `labels`.
    pub fn realize<R: Rng>(&self, id: String, labels: &[LabelId], rng: &mut R) -> Defect {
        let sentence = |label: LabelId, rng: &mut R| -> String {
            let tpl = self.sentence_templates.choose(rng).expect("templates validated");
            let mut out = Vec::new();
            for slot in tpl.split_whitespace() {
                let word = match slot {
                    "{sig}" => self.keyword_pool[label.0].choose(rng).expect("pool validated").clone(),
                    "{noise}" => self.noise_vocab.choose(rng).expect("noise validated").clone(),
                    lit => lit.to_string(),
                };
                out.push(word);
            }
            capitalize(&out.join(" "))
        };
        let head = *labels.choose(rng).expect("at least one label");
        let title = sentence(head, rng);
        let description = labels.iter().map(|l| sentence(*l, rng)).collect::<Vec<_>>().join(". ");
        Defect::new(id, title, description, labels.iter().copied(), Provenance::Synthetic)
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Deterministic synthetic defects whose labels are exactly the labels
/// whose signature words were planted.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::stream(spec.seed, "synthetic-corpus");
    let t = spec.registry.len();
    let weights: Vec<f64> = spec.label_weights.clone().unwrap_or_else(|| vec![1.0; t]);
    let (lo, hi) = spec.labels_per_defect;
    let mut defects = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let m = rng.random_range(lo..=hi);
        let labels = weighted_sample_without_replacement(&weights, m, &mut rng);
        let id = format!("{}{:05}", spec.id_prefix, i);
        defects.push(spec.realize(id, &labels, &mut rng));
    }
    Dataset::new(spec.registry.clone(), defects, spec.split)
}

/// Synthetic defects with explicitly prescribed label sets.
pub fn generate_with_label_sets(spec: &SyntheticCorpusSpec, label_sets: &[Vec<LabelId>]) -> Result<Dataset> {
    let mut probe = spec.clone();
    probe.size = probe.size.max(1);
    probe.validate()?;
    let mut rng = seed::stream(spec.seed, "synthetic-corpus-fixed");
    let mut defects = Vec::with_capacity(label_sets.len());
    for (i, labels) in label_sets.iter().enumerate() {
        if labels.is_empty() {
            return Err(Error::Config(format!("label set {i} is empty")));
        }
        let id = format!("{}{:05}", spec.id_prefix, i);
        defects.push(spec.realize(id, labels, &mut rng));
    }
    Dataset::new(spec.registry.clone(), defects, spec.split)
}

fn weighted_sample_without_replacement<R: Rng>(weights: &[f64], m: usize, rng: &mut R) -> Vec<LabelId> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = w.iter().sum();
        let mut x = rng.random::<f64>() * total;
        let mut pick = w.iter().rposition(|v| *v > 0.0).expect("validated");
        for (j, v) in w.iter().enumerate() {
            if *v <= 0.0 {
                continue;
            }
            if x < *v {
                pick = j;
                break;
            }
            x -= v;
        }
        out.push(LabelId(pick));
        w[pick] = 0.0;
    }
    out.sort();
    out
}

/// Shuffles a dataset's record order deterministically.
pub fn shuffled(ds: &Dataset, seed: u64) -> Dataset {
    let mut out = ds.clone();
    out.defects.shuffle(&mut seed::stream(seed, "shuffle"));
    out
}
