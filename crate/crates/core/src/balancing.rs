//! Multi-label oversampling (MLSMOTE) over bag-of-token features.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Defect, LabelId, LabelSet, Provenance};
use crate::error::{Error, Result};
use crate::seed;
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    pub counts: Vec<usize>,
    /// `None` for labels with no positives.
    pub irlbl: Vec<Option<f64>>,
    pub mean_ir: f64,
}

impl ImbalanceStats {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        let max = counts.iter().copied().max().unwrap_or(0);
        if max == 0 {
            return Err(Error::Empty("every label has zero positives".into()));
        }
        let irlbl: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0).then(|| max as f64 / c as f64)).collect();
        let present: Vec<f64> = irlbl.iter().flatten().copied().collect();
        let mean_ir = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Self { counts, irlbl, mean_ir })
    }

    pub fn empty_labels(&self) -> Vec<LabelId> {
        self.irlbl.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(i, _)| LabelId(i)).collect()
    }
}

pub fn imbalance_stats(ds: &Dataset) -> Result<ImbalanceStats> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset has no defects".into()));
    }
    ImbalanceStats::from_counts(ds.label_counts())
}

pub fn minority_labels(stats: &ImbalanceStats) -> BTreeSet<LabelId> {
    stats
        .irlbl
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_some_and(|r| r > stats.mean_ir))
        .map(|(i, _)| LabelId(i))
        .collect()
}

/// Sparse token counts, sorted by feature index.
pub type Features = Vec<(usize, f64)>;

/// Token index over every token in the dataset, in lexicographic order.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl FeatureSpace {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let set: BTreeSet<String> = ds.defects.iter().flat_map(|d| tokenize(&d.text())).collect();
        if set.is_empty() {
            return Err(Error::Empty("feature vocabulary is empty".into()));
        }
        let tokens: Vec<String> = set.into_iter().collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }

    pub fn dim(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn features(&self, tokens: &[String]) -> Features {
        let mut counts = BTreeMap::new();
        for t in tokens {
            if let Some(&i) = self.index.get(t) {
                *counts.entry(i).or_insert(0.0) += 1.0;
            }
        }
        counts.into_iter().collect()
    }
}

pub fn squared_distance(a: &Features, b: &Features) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() || j < b.len() {
        let d = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) if x.0 == y.0 => {
                i += 1;
                j += 1;
                x.1 - y.1
            }
            (Some(x), Some(y)) if x.0 < y.0 => {
                i += 1;
                x.1
            }
            (Some(x), None) => {
                i += 1;
                x.1
            }
            (_, Some(y)) => {
                j += 1;
                y.1
            }
            (None, None) => unreachable!(),
        };
        acc += d * d;
    }
    acc
}

/// `f_s + r·(f_n − f_s)` over the union of supports, before rounding.
pub fn interpolate(fs: &Features, fnb: &Features, r: f64) -> Features {
    let mut out: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for &(i, v) in fs {
        out.entry(i).or_default().0 = v;
    }
    for &(i, v) in fnb {
        out.entry(i).or_default().1 = v;
    }
    out.into_iter().map(|(i, (s, n))| (i, s + r * (n - s))).collect()
}

pub fn round_counts(f: &Features) -> BTreeMap<usize, usize> {
    f.iter().map(|&(i, v)| (i, v.round_ties_even() as usize)).filter(|(_, c)| *c > 0).collect()
}

/// Emits each token up to its target count, following the source's token
/// order first and then the neighbor's for whatever remains.
pub fn realize_tokens(
    counts: &BTreeMap<usize, usize>,
    space: &FeatureSpace,
    s: &[String],
    n: &[String],
) -> Vec<String> {
    let mut left = counts.clone();
    let mut out = Vec::new();
    for t in s.iter().chain(n) {
        if let Some(c) = space.index.get(t).and_then(|i| left.get_mut(i)) {
            if *c > 0 {
                *c -= 1;
                out.push(t.clone());
            }
        }
    }
    out
}

/// Labels appearing in strictly more than half of the member labelsets.
pub fn ranking_labels<'a>(sets: impl IntoIterator<Item = &'a LabelSet>) -> LabelSet {
    let mut votes: BTreeMap<LabelId, usize> = BTreeMap::new();
    let mut members = 0;
    for set in sets {
        members += 1;
        for &l in set {
            *votes.entry(l).or_default() += 1;
        }
    }
    votes.into_iter().filter(|(_, v)| 2 * v > members).map(|(l, _)| l).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub id: String,
    pub minority_label: String,
    pub source: String,
    pub neighbor: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub labels: Vec<String>,
    pub counts_before: Vec<usize>,
    pub counts_after: Vec<usize>,
    pub mean_ir_before: f64,
    pub mean_ir_after: f64,
    pub minority: Vec<String>,
    /// Minority labels with fewer than `k + 1` bearers.
    pub skipped: Vec<String>,
    pub synthetic: Vec<SyntheticRecord>,
}

pub fn mlsmote(ds: &Dataset, k: usize, seed: u64) -> Result<(Dataset, BalanceReport)> {
    if k < 1 {
        return Err(Error::Config("mlsmote needs k >= 1".into()));
    }
    let before = imbalance_stats(ds)?;
    let space = FeatureSpace::fit(ds)?;
    let tokens: Vec<Vec<String>> = ds.defects.iter().map(|d| tokenize(&d.text())).collect();
    let feats: Vec<Features> = tokens.iter().map(|t| space.features(t)).collect();
    let name = |l: LabelId| ds.registry.name(l).unwrap_or("?").to_string();

    let minority = minority_labels(&before);
    let mut rng = seed::stream(seed, "mlsmote");
    let mut synthetic = Vec::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for &label in &minority {
        let bag: Vec<usize> = (0..ds.len()).filter(|&i| ds.defects[i].labels.contains(&label)).collect();
        if bag.len() < k + 1 {
            skipped.push(name(label));
            continue;
        }
        for &s in &bag {
            let mut near: Vec<(f64, usize)> =
                bag.iter().filter(|&&j| j != s).map(|&j| (squared_distance(&feats[s], &feats[j]), j)).collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(k);
            let n = near[rng.random_range(0..near.len())].1;
            let r: f64 = rng.random();
            let counts = round_counts(&interpolate(&feats[s], &feats[n], r));
            let text = realize_tokens(&counts, &space, &tokens[s], &tokens[n]).join(" ");
            if text.is_empty() {
                continue;
            }
            let labels = ranking_labels(
                std::iter::once(&ds.defects[s].labels).chain(near.iter().map(|(_, j)| &ds.defects[*j].labels)),
            );
            let id = format!("mlsmote-{:05}", synthetic.len());
            records.push(SyntheticRecord {
                id: id.clone(),
                minority_label: name(label),
                source: ds.defects[s].id.clone(),
                neighbor: ds.defects[n].id.clone(),
                r,
            });
            synthetic.push(Defect::new(id, text, "", labels, Provenance::Mlsmote));
        }
    }
    let mut out = ds.clone();
    out.extend(synthetic)?;
    let after = imbalance_stats(&out)?;
    let report = BalanceReport {
        labels: ds.registry.names().to_vec(),
        counts_before: before.counts,
        counts_after: after.counts,
        mean_ir_before: before.mean_ir,
        mean_ir_after: after.mean_ir,
        minority: minority.iter().map(|&l| name(l)).collect(),
        skipped,
        synthetic: records,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, Split, SyntheticCorpusSpec, TeamLabelRegistry};

    #[test]
    fn stats_examples() {
        let s = ImbalanceStats::from_counts(vec![4, 2, 1]).unwrap();
        assert_eq!(s.irlbl, vec![Some(1.0), Some(2.0), Some(4.0)]);
        assert!((s.mean_ir - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(minority_labels(&s), BTreeSet::from([LabelId(2)]));

        let s = ImbalanceStats::from_counts(vec![5, 5, 5]).unwrap();
        assert_eq!(s.mean_ir, 1.0);
        assert!(minority_labels(&s).is_empty());

        let s = ImbalanceStats::from_counts(vec![9, 1]).unwrap();
        assert_eq!(s.mean_ir, 5.0);
        assert_eq!(minority_labels(&s), BTreeSet::from([LabelId(1)]));

        let s = ImbalanceStats::from_counts(vec![0, 3]).unwrap();
        assert_eq!(s.irlbl, vec![None, Some(1.0)]);
        assert_eq!(s.empty_labels(), vec![LabelId(0)]);
        assert!(ImbalanceStats::from_counts(vec![0, 0]).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_containment() {
        let fs = vec![(0, 2.0), (3, 1.0)];
        let fnb = vec![(1, 4.0), (3, 3.0)];
        assert_eq!(interpolate(&fs, &fnb, 0.0), vec![(0, 2.0), (1, 0.0), (3, 1.0)]);
        assert_eq!(interpolate(&fs, &fnb, 1.0), vec![(0, 0.0), (1, 4.0), (3, 3.0)]);
        let mid = interpolate(&fs, &fnb, 0.5);
        assert_eq!(mid, vec![(0, 1.0), (1, 2.0), (3, 2.0)]);
        assert_eq!(round_counts(&vec![(0, 0.5), (1, 1.5), (2, 2.5)]), BTreeMap::from([(1, 2), (2, 2)]));
        assert_eq!(squared_distance(&fs, &fnb), 4.0 + 16.0 + 4.0);
    }

    #[test]
    fn ranking_rule_is_strict_majority() {
        let a = LabelSet::from([LabelId(0), LabelId(1)]);
        let b = LabelSet::from([LabelId(0)]);
        let c = LabelSet::from([LabelId(0), LabelId(2)]);
        let d = LabelSet::from([LabelId(1)]);
        assert_eq!(ranking_labels([&a, &b, &c]), LabelSet::from([LabelId(0)]));
        // 2 of 4 is not a strict majority
        assert_eq!(ranking_labels([&a, &b, &c, &d]), LabelSet::from([LabelId(0)]));
    }

    fn skewed(n: usize) -> Dataset {
        let mut spec = SyntheticCorpusSpec::new(n, 3);
        spec.registry = TeamLabelRegistry::new(["search", "cart", "checkout", "payments"]).unwrap();
        spec.keyword_pool.truncate(4);
        spec.labels_per_defect = (1, 2);
        spec.label_weights = Some(vec![8.0, 4.0, 2.0, 1.0]);
        generate_synthetic_corpus(&spec).unwrap()
    }

    #[test]
    fn skewed_corpus_gets_flatter() {
        let ds = skewed(200);
        let (out, rep) = mlsmote(&ds, 5, 1).unwrap();
        assert!(!rep.synthetic.is_empty());
        assert!(rep.mean_ir_after < rep.mean_ir_before, "{rep:?}");
        assert_eq!(&out.defects[..ds.len()], &ds.defects[..]);
        for d in &out.defects[ds.len()..] {
            assert_eq!(d.provenance, Provenance::Mlsmote);
            assert!(!d.labels.is_empty());
        }
        let (again, _) = mlsmote(&ds, 5, 1).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn balanced_and_degenerate_inputs() {
        let reg = TeamLabelRegistry::new(["a", "b"]).unwrap();
        let defects = (0..4)
            .map(|i| Defect::new(format!("d{i}"), format!("word{i}"), "", [LabelId(i % 2)], Provenance::Real))
            .collect();
        let ds = Dataset::new(reg.clone(), defects, Split::Train).unwrap();
        let (out, rep) = mlsmote(&ds, 1, 0).unwrap();
        assert_eq!(out.len(), 4);
        assert!(rep.synthetic.is_empty());
        assert!(mlsmote(&ds, 0, 0).is_err());

        // minority label with too few bearers is skipped
        let defects = (0..6)
            .map(|i| {
                Defect::new(format!("d{i}"), format!("w{i}"), "", [LabelId(usize::from(i == 0))], Provenance::Real)
            })
            .collect();
        let ds = Dataset::new(reg, defects, Split::Train).unwrap();
        let (out, rep) = mlsmote(&ds, 2, 0).unwrap();
        assert_eq!(rep.skipped, vec!["b".to_string()]);
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn realization_respects_counts_and_order() {
        let ds = skewed(20);
        let space = FeatureSpace::fit(&ds).unwrap();
        let s = tokenize(&ds.defects[0].text());
        let n = tokenize(&ds.defects[1].text());
        let fs = space.features(&s);
        let fnb = space.features(&n);
        let counts = round_counts(&interpolate(&fs, &fnb, 0.0));
        let out = realize_tokens(&counts, &space, &s, &n);
        assert_eq!(out, s);
        let counts = round_counts(&interpolate(&fs, &fnb, 0.37));
        let out = realize_tokens(&counts, &space, &s, &n);
        assert_eq!(space.features(&out), counts.iter().map(|(&i, &c)| (i, c as f64)).collect::<Features>());
    }
}
