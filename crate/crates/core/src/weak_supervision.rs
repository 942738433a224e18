//! Keyword and pattern labeling functions, their label matrix, and a
//! precision-weighted vote that turns LF outputs into weak label sets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Defect, LabelId, LabelSet, Provenance};
use crate::error::{Error, Result};
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    /// Fires when any of the words occurs as a whole token.
    Keyword(Vec<String>),
    /// `*`-wildcard pattern matched as a case-insensitive substring.
    Pattern(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelingFunction {
    pub id: String,
    pub trigger: Trigger,
    pub emits: LabelSet,
}

impl LabelingFunction {
    pub fn keyword<S: AsRef<str>>(
        id: impl Into<String>,
        words: impl IntoIterator<Item = S>,
        emits: impl IntoIterator<Item = LabelId>,
    ) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        Self::checked(id.into(), Trigger::Keyword(words), emits.into_iter().collect())
    }

    pub fn pattern(id: impl Into<String>, pattern: &str, emits: impl IntoIterator<Item = LabelId>) -> Result<Self> {
        Self::checked(id.into(), Trigger::Pattern(pattern.to_lowercase()), emits.into_iter().collect())
    }

    fn checked(id: String, trigger: Trigger, emits: LabelSet) -> Result<Self> {
        let empty_trigger = match &trigger {
            Trigger::Keyword(w) => w.is_empty() || w.iter().any(|w| w.trim().is_empty()),
            Trigger::Pattern(p) => p.chars().all(|c| c == '*'),
        };
        if empty_trigger {
            return Err(Error::Config(format!("labeling function \"{id}\" has an empty trigger")));
        }
        if emits.is_empty() {
            return Err(Error::Config(format!("labeling function \"{id}\" emits no labels")));
        }
        Ok(Self { id, trigger, emits })
    }

    /// Whether the function fires on a piece of text.
    pub fn fires(&self, text: &str) -> bool {
        match &self.trigger {
            Trigger::Keyword(words) => {
                let toks = tokenize(text);
                words.iter().any(|w| toks.iter().any(|t| t == w))
            }
            Trigger::Pattern(p) => wildcard_contains(&text.to_lowercase(), p),
        }
    }
}

/// Unanchored glob: the `*`-separated literal pieces must occur in order.
fn wildcard_contains(text: &str, pattern: &str) -> bool {
    let mut rest = text;
    for piece in pattern.split('*').filter(|p| !p.is_empty()) {
        match rest.find(piece) {
            Some(pos) => rest = &rest[pos + piece.len()..],
            None => return false,
        }
    }
    true
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LfKind {
    Keyword,
    Pattern,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TriggerSpec {
    Words(Vec<String>),
    Pattern(String),
}

#[derive(Serialize, Deserialize)]
struct LfRecord {
    id: String,
    kind: LfKind,
    trigger: TriggerSpec,
    emits: Vec<String>,
}

pub fn load_lfs(path: &Path, registry: &crate::corpus::TeamLabelRegistry) -> Result<Vec<LabelingFunction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<LfRecord> = serde_json::from_str(&text)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let emits = r
                .emits
                .iter()
                .map(|n| registry.id(n).ok_or_else(|| Error::UnknownLabel { label: n.clone(), line: i + 1 }))
                .collect::<Result<Vec<_>>>()?;
            match (r.kind, r.trigger) {
                (LfKind::Keyword, TriggerSpec::Words(w)) => LabelingFunction::keyword(r.id, w, emits),
                (LfKind::Keyword, TriggerSpec::Pattern(p)) => LabelingFunction::keyword(r.id, [p], emits),
                (LfKind::Pattern, TriggerSpec::Pattern(p)) => LabelingFunction::pattern(r.id, &p, emits),
                (LfKind::Pattern, TriggerSpec::Words(_)) => {
                    Err(Error::Config(format!("labeling function \"{}\": pattern trigger must be a string", r.id)))
                }
            }
        })
        .collect()
}

pub fn save_lfs(lfs: &[LabelingFunction], registry: &crate::corpus::TeamLabelRegistry, path: &Path) -> Result<()> {
    let records: Vec<LfRecord> = lfs
        .iter()
        .map(|lf| {
            let (kind, trigger) = match &lf.trigger {
                Trigger::Keyword(w) => (LfKind::Keyword, TriggerSpec::Words(w.clone())),
                Trigger::Pattern(p) => (LfKind::Pattern, TriggerSpec::Pattern(p.clone())),
            };
            LfRecord {
                id: lf.id.clone(),
                kind,
                trigger,
                emits: lf.emits.iter().filter_map(|l| registry.name(*l)).map(String::from).collect(),
            }
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&records)? + "\n").map_err(|e| Error::io(path, e))
}

/// One keyword LF per label, keyed to that label's signature words.
pub fn keyword_lfs_for_pools(
    registry: &crate::corpus::TeamLabelRegistry,
    pools: &[Vec<String>],
) -> Result<Vec<LabelingFunction>> {
    registry
        .ids()
        .zip(pools)
        .map(|(id, pool)| {
            let name = registry.name(id).unwrap_or_default();
            LabelingFunction::keyword(format!("kw_{name}"), pool, [id])
        })
        .collect()
}

/// `N x F` LF outputs; `None` is an abstention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    cells: Vec<Vec<Option<LabelSet>>>,
    num_lfs: usize,
}

impl LabelMatrix {
    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn num_lfs(&self) -> usize {
        self.num_lfs
    }

    pub fn cell(&self, i: usize, f: usize) -> Option<&LabelSet> {
        self.cells[i][f].as_ref()
    }

    /// Defects on which at least one LF fired.
    pub fn coverage(&self) -> usize {
        self.cells.iter().filter(|r| r.iter().any(Option::is_some)).count()
    }
}

pub fn apply_lfs(ds: &Dataset, lfs: &[LabelingFunction]) -> Result<LabelMatrix> {
    if lfs.is_empty() {
        return Err(Error::Config("no labeling functions".into()));
    }
    let cells = ds
        .defects
        .iter()
        .map(|d| {
            let text = d.text();
            lfs.iter().map(|lf| lf.fires(&text).then(|| lf.emits.clone())).collect()
        })
        .collect();
    Ok(LabelMatrix { cells, num_lfs: lfs.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelModelParams {
    pub weights: Vec<f64>,
    pub assign_threshold: f64,
}

impl LabelModelParams {
    pub fn uniform(num_lfs: usize) -> Self {
        Self { weights: vec![1.0; num_lfs], assign_threshold: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Config("LF weights must lie in [0, 1]".into()));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("LF weights sum to zero".into()));
        }
        if !(self.assign_threshold > 0.0 && self.assign_threshold < 1.0) {
            return Err(Error::Config(format!("vote threshold {} outside (0, 1)", self.assign_threshold)));
        }
        Ok(())
    }
}

/// LF weight = empirical precision on a gold dev set, where a firing is
/// correct when everything it emits is among the gold labels. LFs that
/// never fire on dev get 0.5.
pub fn fit_label_model(matrix: &LabelMatrix, dev: &Dataset) -> Result<LabelModelParams> {
    if dev.is_empty() {
        return Err(Error::Empty("dev set for label-model fitting".into()));
    }
    if matrix.rows() != dev.len() {
        return Err(Error::Shape(format!("label matrix has {} rows for {} dev defects", matrix.rows(), dev.len())));
    }
    let weights = (0..matrix.num_lfs())
        .map(|f| {
            let (mut fired, mut correct) = (0usize, 0usize);
            for (i, d) in dev.defects.iter().enumerate() {
                if let Some(emits) = matrix.cell(i, f) {
                    fired += 1;
                    if emits.is_subset(&d.labels) {
                        correct += 1;
                    }
                }
            }
            if fired == 0 {
                0.5
            } else {
                correct as f64 / fired as f64
            }
        })
        .collect();
    Ok(LabelModelParams { weights, assign_threshold: 0.5 })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakLabel {
    pub labels: LabelSet,
    /// No LF fired, or every firing LF had weight 0.
    pub excluded: bool,
}

/// `score(i, t)`: weight of firing LFs that emit `t` over the weight of all
/// firing LFs. `None` when nothing with positive weight fired.
pub fn vote_scores(
    matrix: &LabelMatrix,
    params: &LabelModelParams,
    num_labels: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    params.validate()?;
    if params.weights.len() != matrix.num_lfs() {
        return Err(Error::Shape(format!("{} weights for {} LFs", params.weights.len(), matrix.num_lfs())));
    }
    Ok((0..matrix.rows())
        .map(|i| {
            let mut total = 0.0;
            let mut score = vec![0.0; num_labels];
            for (f, w) in params.weights.iter().enumerate() {
                if let Some(emits) = matrix.cell(i, f) {
                    total += w;
                    for l in emits {
                        score[l.0] += w;
                    }
                }
            }
            (total > 0.0).then(|| score.into_iter().map(|s| s / total).collect())
        })
        .collect())
}

/// Assigns label `t` when `score(i, t)` exceeds `assign_threshold` times the
/// best label's score. Labels backed by disjoint LFs that each fire once
/// all survive, while a minority vote against a stronger label is dropped.
pub fn aggregate(matrix: &LabelMatrix, params: &LabelModelParams, num_labels: usize) -> Result<Vec<WeakLabel>> {
    Ok(vote_scores(matrix, params, num_labels)?
        .into_iter()
        .map(|scores| match scores {
            None => WeakLabel { labels: LabelSet::new(), excluded: true },
            Some(s) => {
                let top = s.iter().copied().fold(0.0, f64::max);
                let labels = s
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v > 0.0 && **v > params.assign_threshold * top)
                    .map(|(t, _)| LabelId(t))
                    .collect();
                WeakLabel { labels, excluded: false }
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelReport {
    pub defects: usize,
    pub covered: usize,
    pub excluded: usize,
    pub lf_weights: Vec<(String, f64)>,
}

/// Replaces the dataset's labels with weak labels, dropping excluded defects.
pub fn weak_label_dataset(
    ds: &Dataset,
    lfs: &[LabelingFunction],
    params: &LabelModelParams,
) -> Result<(Dataset, WeakLabelReport)> {
    let matrix = apply_lfs(ds, lfs)?;
    let weak = aggregate(&matrix, params, ds.registry.len())?;
    let defects: Vec<Defect> = ds
        .defects
        .iter()
        .zip(&weak)
        .filter(|(_, w)| !w.excluded && !w.labels.is_empty())
        .map(|(d, w)| Defect { labels: w.labels.clone(), provenance: Provenance::Weak, ..d.clone() })
        .collect();
    let report = WeakLabelReport {
        defects: ds.len(),
        covered: matrix.coverage(),
        excluded: ds.len() - defects.len(),
        lf_weights: lfs.iter().map(|l| l.id.clone()).zip(params.weights.iter().copied()).collect(),
    };
    Ok((Dataset::new(ds.registry.clone(), defects, ds.split)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, TeamLabelRegistry};

    const A: LabelId = LabelId(0);
    const B: LabelId = LabelId(1);
    const C: LabelId = LabelId(2);

    fn reg() -> TeamLabelRegistry {
        TeamLabelRegistry::new(["a", "b", "c"]).unwrap()
    }

    fn ds(items: &[(&str, &[LabelId])]) -> Dataset {
        let defects = items
            .iter()
            .enumerate()
            .map(|(i, (t, l))| Defect::new(i.to_string(), *t, "", l.iter().copied(), Provenance::Real))
            .collect();
        Dataset::new(reg(), defects, Split::Dev).unwrap()
    }

    #[test]
    fn keyword_and_pattern_matching() {
        let kw = LabelingFunction::keyword("k", ["android", "ios"], [A]).unwrap();
        assert!(kw.fires("Using ios XXX"));
        assert!(kw.fires("ANDROID crash"));
        assert!(!kw.fires("androids everywhere"));
        let pat = LabelingFunction::pattern("p", "*search*", [B, C]).unwrap();
        assert!(pat.fires("not showing on search tiles"));
        assert!(pat.fires("Research"));
        assert!(!pat.fires("seek"));
        let p2 = LabelingFunction::pattern("p2", "add*cart", [A]).unwrap();
        assert!(p2.fires("can't ADD items to my cart"));
        assert!(!p2.fires("cart add"));

        let m = apply_lfs(&ds(&[("Using ios XXX", &[]), ("androids everywhere", &[])]), &[kw]).unwrap();
        assert_eq!(m.cell(0, 0), Some(&LabelSet::from([A])));
        assert_eq!(m.cell(1, 0), None);
    }

    #[test]
    fn lf_validation() {
        assert!(LabelingFunction::keyword("k", Vec::<String>::new(), [A]).is_err());
        assert!(LabelingFunction::keyword("k", ["x"], []).is_err());
        assert!(LabelingFunction::pattern("p", "**", [A]).is_err());
        assert!(apply_lfs(&ds(&[("x", &[])]), &[]).is_err());
    }

    #[test]
    fn fit_weights_by_precision() {
        let lf = LabelingFunction::keyword("k", ["x"], [A]).unwrap();
        let never = LabelingFunction::keyword("n", ["zzz"], [B]).unwrap();
        let dev = ds(&[("x", &[A]), ("x", &[A, B]), ("x", &[A]), ("x", &[B]), ("y", &[A])]);
        let m = apply_lfs(&dev, &[lf, never]).unwrap();
        let p = fit_label_model(&m, &dev).unwrap();
        assert_eq!(p.weights, vec![0.75, 0.5]);

        let good = LabelingFunction::keyword("g", ["x"], [A]).unwrap();
        let bad = LabelingFunction::keyword("b", ["x"], [C]).unwrap();
        let dev = ds(&[("x", &[A]), ("x", &[A, B])]);
        let m = apply_lfs(&dev, &[good, bad]).unwrap();
        assert_eq!(fit_label_model(&m, &dev).unwrap().weights, vec![1.0, 0.0]);

        let empty = Dataset::new(reg(), vec![], Split::Dev).unwrap();
        let m0 = LabelMatrix { cells: vec![], num_lfs: 1 };
        assert!(fit_label_model(&m0, &empty).is_err());
    }

    #[test]
    fn aggregation_rules() {
        let lfs = vec![
            LabelingFunction::keyword("1", ["p"], [A]).unwrap(),
            LabelingFunction::keyword("2", ["q"], [A]).unwrap(),
            LabelingFunction::keyword("3", ["r"], [B]).unwrap(),
            LabelingFunction::pattern("4", "*s*", [B, C]).unwrap(),
        ];
        let d = ds(&[("p q r", &[]), ("nothing", &[]), ("s", &[])]);
        let m = apply_lfs(&d, &lfs).unwrap();
        let scores = vote_scores(&m, &LabelModelParams::uniform(4), 3).unwrap();
        let s0 = scores[0].as_ref().unwrap();
        assert!((s0[0] - 2.0 / 3.0).abs() < 1e-15 && (s0[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(scores[1], None);
        let w = aggregate(&m, &LabelModelParams::uniform(4), 3).unwrap();
        assert_eq!(w[0], WeakLabel { labels: LabelSet::from([A]), excluded: false });
        assert_eq!(w[1], WeakLabel { labels: LabelSet::new(), excluded: true });
        assert_eq!(w[2].labels, LabelSet::from([B, C]));

        let zero = LabelModelParams { weights: vec![0.0, 0.0, 0.0, 1.0], assign_threshold: 0.5 };
        let w = aggregate(&m, &zero, 3).unwrap();
        assert!(w[0].excluded);
    }

    #[test]
    fn score_monotone_in_agreeing_lfs() {
        // with uniform weights, adding LFs that emit A never lowers A's score
        let mut lfs = vec![LabelingFunction::keyword("b", ["w"], [B]).unwrap()];
        let d = ds(&[("w", &[])]);
        let mut last = -1.0;
        for k in 0..5 {
            let m = apply_lfs(&d, &lfs).unwrap();
            let score_a = vote_scores(&m, &LabelModelParams::uniform(lfs.len()), 3).unwrap()[0].as_ref().unwrap()[0];
            assert!(score_a >= last);
            last = score_a;
            lfs.push(LabelingFunction::keyword(format!("a{k}"), ["w"], [A]).unwrap());
        }
        let m = apply_lfs(&d, &lfs).unwrap();
        let w = aggregate(&m, &LabelModelParams::uniform(lfs.len()), 3).unwrap();
        assert_eq!(w[0].labels, LabelSet::from([A]));
    }

    #[test]
    fn disjoint_lfs_recover_label_sets() {
        let lfs = vec![
            LabelingFunction::keyword("a", ["alpha"], [A]).unwrap(),
            LabelingFunction::keyword("b", ["beta"], [B]).unwrap(),
            LabelingFunction::keyword("c", ["gamma"], [C]).unwrap(),
        ];
        let d = ds(&[("alpha beta gamma", &[]), ("beta gamma", &[]), ("gamma", &[])]);
        let m = apply_lfs(&d, &lfs).unwrap();
        let w = aggregate(&m, &LabelModelParams::uniform(3), 3).unwrap();
        assert_eq!(w[0].labels, LabelSet::from([A, B, C]));
        assert_eq!(w[1].labels, LabelSet::from([B, C]));
        assert_eq!(w[2].labels, LabelSet::from([C]));
        assert!(LabelModelParams { weights: vec![1.0; 3], assign_threshold: 1.0 }.validate().is_err());
    }

    #[test]
    fn lf_file_round_trip() {
        let lfs = vec![
            LabelingFunction::keyword("k", ["android", "ios"], [A]).unwrap(),
            LabelingFunction::pattern("p", "*search*", [B, C]).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lfs.json");
        save_lfs(&lfs, &reg(), &p).unwrap();
        assert_eq!(load_lfs(&p, &reg()).unwrap(), lfs);
        fs::write(&p, r#"[{"id":"x","kind":"keyword","trigger":["a"],"emits":["nope"]}]"#).unwrap();
        assert!(matches!(load_lfs(&p, &reg()), Err(Error::UnknownLabel { .. })));
    }
}
