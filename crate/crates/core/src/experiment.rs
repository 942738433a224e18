//! The six-cell model matrix and its results table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{load_dataset, read_lineage, Dataset};
use crate::error::{Error, Result};
use crate::model::{evaluate_encoded, train, HeadKind, TrainRequest};
use crate::pipeline::{run_pipeline_into, PipelineConfig, StageToggles};
use crate::tokenizer::{build_vocab, EncodedDataset, InputVariant, Vocab};

/// Vocabulary cap for experiment runs.
pub const MAX_VOCAB: usize = 30_000;

/// Cells in results-table order.
pub const MATRIX: [(InputVariant, HeadKind); 6] = [
    (InputVariant::Baseline, HeadKind::Linear),
    (InputVariant::Baseline, HeadKind::Bilstm),
    (InputVariant::FuseNosep, HeadKind::Linear),
    (InputVariant::FuseNosep, HeadKind::Bilstm),
    (InputVariant::FuseSep, HeadKind::Linear),
    (InputVariant::FuseSep, HeadKind::Bilstm),
];

pub fn model_name(variant: InputVariant, head: HeadKind) -> String {
    let encoder = match variant {
        InputVariant::Baseline => "BERT",
        InputVariant::FuseNosep => "BERT+LabelFuse w/o [SEP]",
        InputVariant::FuseSep => "BERT+LabelFuse w [SEP]",
    };
    format!("{encoder}+{}", head.display_name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub variant: InputVariant,
    pub head: HeadKind,
    pub macro_f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionDelta {
    pub head: HeadKind,
    pub variant: InputVariant,
    pub accuracy_delta: f64,
    pub macro_f1_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub without_augment: Vec<CellResult>,
    pub mean_accuracy_with: f64,
    pub mean_accuracy_without: f64,
    /// `with − without`, in accuracy points (fraction, not percent).
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub rows: Vec<CellResult>,
    pub fusion_deltas: Vec<FusionDelta>,
    pub ablation: Option<Ablation>,
    pub train_records: usize,
    pub test_records: usize,
}

/// Train, dev and test must descend from one generator run when their
/// lineage says where they came from.
pub fn check_lineage(paths: &[&Path]) -> Result<()> {
    let mut seen: Option<(String, &Path)> = None;
    let mut unmarked = Vec::new();
    for &p in paths {
        match read_lineage(p)?.and_then(|l| l.corpus) {
            Some(c) => match &seen {
                Some((first, fp)) if *first != c => {
                    return Err(Error::Lineage(format!(
                        "{} comes from corpus {c} but {} from corpus {first}",
                        p.display(),
                        fp.display()
                    )))
                }
                Some(_) => {}
                None => seen = Some((c, p)),
            },
            None => unmarked.push(p),
        }
    }
    if let (Some((c, _)), Some(p)) = (&seen, unmarked.first()) {
        return Err(Error::Lineage(format!("{} has no corpus lineage while others come from {c}", p.display())));
    }
    Ok(())
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn run_matrix(cfg: &PipelineConfig, train_ds: &Dataset, dev: &Dataset, test: &Dataset) -> Result<Vec<CellResult>> {
    let hp = cfg.train_config();
    let vocab: Vocab = build_vocab(train_ds, 1, MAX_VOCAB)?;
    let mut rows = Vec::with_capacity(MATRIX.len());
    for variant in InputVariant::ALL {
        let encoded = (|| -> Result<_> {
            Ok((
                EncodedDataset::new(train_ds, &vocab, variant, hp.max_seq_length)?,
                EncodedDataset::new(dev, &vocab, variant, hp.max_seq_length)?,
                EncodedDataset::new(test, &vocab, variant, hp.max_seq_length)?,
            ))
        })();
        for head in HeadKind::ALL {
            let outcome = encoded.as_ref().map_err(|e| e.to_string()).and_then(|(tr, dv, te)| {
                let req = TrainRequest {
                    train: tr,
                    dev: dv,
                    vocab: &vocab,
                    registry: &train_ds.registry,
                    head,
                    dims: cfg.dims,
                    hparams: &hp,
                    seed: cfg.seed,
                };
                let ckpt = train(&req).map_err(|e| e.to_string())?;
                let report = evaluate_encoded(&ckpt, te, cfg.threshold).map_err(|e| e.to_string())?;
                Ok((report, ckpt.meta.best_epoch))
            });
            let model = model_name(variant, head);
            rows.push(match outcome {
                Ok((r, epoch)) => CellResult {
                    model,
                    variant,
                    head,
                    macro_f1: Some(r.macro_f1),
                    accuracy: Some(r.accuracy),
                    best_epoch: Some(epoch),
                    error: None,
                },
                Err(e) => CellResult {
                    model,
                    variant,
                    head,
                    macro_f1: None,
                    accuracy: None,
                    best_epoch: None,
                    error: Some(e),
                },
            });
        }
    }
    // InputVariant::ALL x HeadKind::ALL is already the table order
    debug_assert!(rows.iter().zip(MATRIX).all(|(r, (v, h))| r.variant == v && r.head == h));
    Ok(rows)
}

fn fusion_deltas(rows: &[CellResult]) -> Vec<FusionDelta> {
    let find = |v, h| rows.iter().find(|r| r.variant == v && r.head == h);
    let mut out = Vec::new();
    for head in HeadKind::ALL {
        let Some(base) = find(InputVariant::Baseline, head) else { continue };
        for variant in [InputVariant::FuseNosep, InputVariant::FuseSep] {
            let Some(fused) = find(variant, head) else { continue };
            if let (Some(ba), Some(bf), Some(fa), Some(ff)) =
                (base.accuracy, base.macro_f1, fused.accuracy, fused.macro_f1)
            {
                out.push(FusionDelta { head, variant, accuracy_delta: fa - ba, macro_f1_delta: ff - bf });
            }
        }
    }
    out
}

/// Runs the data pipeline, then trains and scores all six cells. With
/// `ablation`, repeats the matrix on data generated without the augment
/// stage and reports the difference in mean accuracy.
pub fn run_experiments(cfg: &PipelineConfig, ablation: bool) -> Result<ExperimentResults> {
    cfg.validate()?;
    let paths = &cfg.paths;
    let (train_p, dev_p, test_p) = (paths.resolve(&paths.train), paths.resolve(&paths.dev), paths.resolve(&paths.test));
    check_lineage(&[&train_p, &dev_p, &test_p])?;
    let registry = cfg.registry()?;
    let dev = load_dataset(&dev_p, &registry)?;
    let test = load_dataset(&test_p, &registry)?;

    let out_dir = paths.out_dir();
    let (_, train_ds) = run_pipeline_into(cfg, &out_dir)?;
    let rows = run_matrix(cfg, &train_ds, &dev, &test)?;

    let ablation = if ablation && cfg.stages.augment {
        let plain = PipelineConfig { stages: StageToggles { augment: false, ..cfg.stages }, ..cfg.clone() };
        let (_, plain_ds) = run_pipeline_into(&plain, &out_dir.join("no-augment"))?;
        let without = run_matrix(&plain, &plain_ds, &dev, &test)?;
        let with_acc = mean(rows.iter().filter_map(|r| r.accuracy));
        let without_acc = mean(without.iter().filter_map(|r| r.accuracy));
        Some(Ablation {
            without_augment: without,
            mean_accuracy_with: with_acc,
            mean_accuracy_without: without_acc,
            delta: with_acc - without_acc,
        })
    } else {
        None
    };
    Ok(ExperimentResults {
        fusion_deltas: fusion_deltas(&rows),
        rows,
        ablation,
        train_records: train_ds.len(),
        test_records: test.len(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "FAILED".to_string(), |x| format!("{x:.4}"))
}

impl ExperimentResults {
    /// Header plus one row per cell: `Model`, `Macro-F1`, `Accuracy`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("Model\tMacro-F1\tAccuracy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}", r.model, cell(r.macro_f1), cell(r.accuracy));
        }
        s
    }

    /// Aligned table followed by the comparison deltas.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:>8}  {:>8}\n", "Model", "Macro-F1", "Accuracy");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}", r.model, cell(r.macro_f1), cell(r.accuracy));
        }
        for r in self.rows.iter().filter(|r| r.failed()) {
            let _ = writeln!(s, "failed: {}: {}", r.model, r.error.as_deref().unwrap_or(""));
        }
        s.push_str("\nLabel fusion vs baseline (same head):\n");
        for d in &self.fusion_deltas {
            let _ = writeln!(
                s,
                "  {:<width$}  accuracy {:+.4}  macro-F1 {:+.4}",
                model_name(d.variant, d.head),
                d.accuracy_delta,
                d.macro_f1_delta
            );
        }
        match &self.ablation {
            Some(a) => {
                let _ = writeln!(
                    s,
                    "\nAugmentation ablation: mean accuracy {:.4} with, {:.4} without, delta {:+.4} ({:+.2}%)",
                    a.mean_accuracy_with,
                    a.mean_accuracy_without,
                    a.delta,
                    100.0 * a.delta
                );
            }
            None => s.push_str("\nAugmentation ablation: not run\n"),
        }
        s
    }

    /// Writes `results.tsv`, `results.txt` and `results.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("results.tsv", self.to_tsv())?;
        put("results.txt", self.to_text())?;
        put("results.json", serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_table_order() {
        let names: Vec<String> = MATRIX.iter().map(|(v, h)| model_name(*v, *h)).collect();
        assert_eq!(
            names,
            [
                "BERT+Linear",
                "BERT+BiLSTM",
                "BERT+LabelFuse w/o [SEP]+Linear",
                "BERT+LabelFuse w/o [SEP]+BiLSTM",
                "BERT+LabelFuse w [SEP]+Linear",
                "BERT+LabelFuse w [SEP]+BiLSTM",
            ]
        );
    }

    fn row(v: InputVariant, h: HeadKind, acc: Option<f64>) -> CellResult {
        CellResult {
            model: model_name(v, h),
            variant: v,
            head: h,
            macro_f1: acc,
            accuracy: acc,
            best_epoch: acc.map(|_| 1),
            error: if acc.is_none() { Some("boom".into()) } else { None },
        }
    }

    #[test]
    fn tables_mark_failures_and_report_deltas() {
        let rows: Vec<CellResult> = MATRIX
            .iter()
            .enumerate()
            .map(|(i, (v, h))| row(*v, *h, if i == 3 { None } else { Some(0.9 + i as f64 / 100.0) }))
            .collect();
        let res = ExperimentResults {
            fusion_deltas: fusion_deltas(&rows),
            rows,
            ablation: None,
            train_records: 1,
            test_records: 1,
        };
        let tsv = res.to_tsv();
        assert_eq!(tsv.lines().count(), 7);
        assert!(tsv.lines().nth(4).unwrap().ends_with("FAILED\tFAILED"));
        assert_eq!(res.fusion_deltas.len(), 3);
        assert!((res.fusion_deltas[0].accuracy_delta - 0.02).abs() < 1e-12);
        let text = res.to_text();
        assert!(text.contains("failed: BERT+LabelFuse w/o [SEP]+BiLSTM: boom"));
        assert!(text.contains("ablation: not run"));
    }
}
