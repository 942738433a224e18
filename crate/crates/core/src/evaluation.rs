//! Per-label confusion counts and the aggregate accuracy / macro-F1 used
//! for model selection and reporting.
//!
//! Macro-F1 here is the harmonic mean of macro-averaged precision and
//! macro-averaged recall, not the mean of per-label F1 scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl LabelCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP / (TP + FP)`, 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TP / (TP + FN)`, 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_label: Vec<LabelCounts>,
    pub n_samples: usize,
}

impl ConfusionCounts {
    pub fn num_labels(&self) -> usize {
        self.per_label.len()
    }
}

/// Counts TP/FP/FN/TN per label over `N x T` binary matrices.
pub fn confusion(preds: &[Vec<u8>], truths: &[Vec<u8>]) -> Result<ConfusionCounts> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} prediction rows vs {} truth rows", preds.len(), truths.len())));
    }
    let t = truths.first().map_or(0, Vec::len);
    let mut per_label = vec![LabelCounts::default(); t];
    for (i, (p, y)) in preds.iter().zip(truths).enumerate() {
        if p.len() != t || y.len() != t {
            return Err(Error::Shape(format!("row {i}: widths {} / {} vs {t}", p.len(), y.len())));
        }
        for (c, (pv, yv)) in per_label.iter_mut().zip(p.iter().zip(y)) {
            match (*pv != 0, *yv != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts { per_label, n_samples: preds.len() })
}

fn nonempty(c: &ConfusionCounts) -> Result<()> {
    if c.n_samples == 0 || c.per_label.is_empty() {
        return Err(Error::Empty("no samples or no labels to score".into()));
    }
    Ok(())
}

/// `(ΣTP + ΣTN) / (ΣFP + ΣFN + ΣTP + ΣTN)` summed over labels.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    nonempty(c)?;
    let (mut hit, mut all) = (0u64, 0u64);
    for l in &c.per_label {
        hit += l.tp + l.tn;
        all += l.total();
    }
    Ok(hit as f64 / all as f64)
}

/// `2 · P̄ · R̄ / (P̄ + R̄)` with `P̄`, `R̄` the label-averaged precision and
/// recall; 0 when both averages are 0.
pub fn macro_f1(c: &ConfusionCounts) -> Result<f64> {
    nonempty(c)?;
    let t = c.per_label.len() as f64;
    let p = c.per_label.iter().map(LabelCounts::precision).sum::<f64>() / t;
    let r = c.per_label.iter().map(LabelCounts::recall).sum::<f64>() / t;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub label: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_label: Vec<LabelReport>,
    pub threshold: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn from_predictions(
        preds: &[Vec<u8>],
        truths: &[Vec<u8>],
        label_names: &[String],
        threshold: f64,
    ) -> Result<Self> {
        let c = confusion(preds, truths)?;
        if c.num_labels() != label_names.len() {
            return Err(Error::Shape(format!(
                "{} label columns for {} label names",
                c.num_labels(),
                label_names.len()
            )));
        }
        let per_label = c
            .per_label
            .iter()
            .zip(label_names)
            .map(|(l, name)| LabelReport {
                label: name.clone(),
                tp: l.tp,
                fp: l.fp,
                fn_: l.fn_,
                tn: l.tn,
                precision: l.precision(),
                recall: l.recall(),
            })
            .collect();
        Ok(Self { accuracy: accuracy(&c)?, macro_f1: macro_f1(&c)?, per_label, threshold, n_samples: c.n_samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> ConfusionCounts {
        let truths = vec![vec![1, 0], vec![0, 1], vec![1, 1]];
        let preds = vec![vec![1, 0], vec![1, 1], vec![1, 0]];
        confusion(&preds, &truths).unwrap()
    }

    #[test]
    fn worked_example_counts() {
        let c = worked();
        assert_eq!(c.per_label[0], LabelCounts { tp: 2, fp: 1, fn_: 0, tn: 0 });
        assert_eq!(c.per_label[1], LabelCounts { tp: 1, fp: 0, fn_: 1, tn: 1 });
        assert!((accuracy(&c).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        let p: f64 = 5.0 / 6.0;
        let r: f64 = 3.0 / 4.0;
        let f1 = macro_f1(&c).unwrap();
        assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
        assert!((f1 - 0.7895).abs() < 1e-4);
    }

    #[test]
    fn differs_from_mean_of_per_label_f1() {
        let c = worked();
        let conventional: f64 = c
            .per_label
            .iter()
            .map(|l| {
                let (p, r) = (l.precision(), l.recall());
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            })
            .sum::<f64>()
            / 2.0;
        // per-label F1: 0.8 and 2/3 -> 0.7333
        assert!((conventional - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((macro_f1(&c).unwrap() - conventional).abs() > 0.05);
    }

    #[test]
    fn extremes() {
        let y = vec![vec![1, 0, 1], vec![0, 1, 1]];
        let c = confusion(&y, &y).unwrap();
        assert!(c.per_label.iter().all(|l| l.fp == 0 && l.fn_ == 0));
        assert_eq!(accuracy(&c).unwrap(), 1.0);
        assert_eq!(macro_f1(&c).unwrap(), 1.0);

        let ones = vec![vec![1u8; 3]; 4];
        let zeros = vec![vec![0u8; 3]; 4];
        let c = confusion(&zeros, &ones).unwrap();
        assert!(c.per_label.iter().all(|l| l.fn_ == 4 && l.tp == 0 && l.fp == 0 && l.tn == 0));

        let c = confusion(&zeros, &zeros).unwrap();
        assert_eq!(macro_f1(&c).unwrap(), 0.0);

        // single-label data, predictions complemented
        let truth = vec![vec![1, 0], vec![0, 1]];
        let pred = vec![vec![0, 1], vec![1, 0]];
        assert_eq!(accuracy(&confusion(&pred, &truth).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(confusion(&[vec![1]], &[]).is_err());
        assert!(confusion(&[vec![1, 0]], &[vec![1]]).is_err());
        let empty = confusion(&[], &[]).unwrap();
        assert!(accuracy(&empty).is_err());
        assert!(macro_f1(&empty).is_err());
    }
}
