//! Data generation pipeline: weak labeling, then augmentation, then
//! balancing, each stage leaving a JSONL artifact and a JSON report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::{augment_dataset, AugmentConfig, EmbeddingTable};
use crate::balancing::mlsmote;
use crate::corpus::{load_dataset, read_lineage, save_dataset_with_lineage, Dataset, Lineage, TeamLabelRegistry};
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelDims, TrainConfig, DEFAULT_THRESHOLD};
use crate::seed;
use crate::tokenizer::InputVariant;
use crate::weak_supervision::{apply_lfs, fit_label_model, load_lfs, weak_label_dataset, LabelModelParams};

/// Overrides `paths.data_dir` when set.
pub const DATA_DIR_ENV: &str = "DEFTRI_DATA_DIR";

/// Relative paths resolve against `data_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePaths {
    pub data_dir: PathBuf,
    /// Default team list when absent.
    pub registry: Option<PathBuf>,
    pub lf_file: Option<PathBuf>,
    /// Bundled synonym table when absent.
    pub embeddings: Option<PathBuf>,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// `<data_dir>/artifacts` when absent.
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelinePaths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            registry: None,
            lf_file: None,
            embeddings: None,
            train: "train.jsonl".into(),
            dev: "dev.jsonl".into(),
            test: "test.jsonl".into(),
            out_dir: None,
        }
    }
}

impl PipelinePaths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.as_deref().map_or_else(|| self.data_dir.join("artifacts"), |p| self.resolve(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub weak: bool,
    pub augment: bool,
    pub balance: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { weak: true, augment: true, balance: true }
    }
}

/// One JSON document drives data generation and the experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    pub stages: StageToggles,
    /// Its `seed` field is ignored; the stage seed derives from `seed`.
    pub augment: AugmentConfig,
    pub mlsmote_k: usize,
    pub vote_threshold: f64,
    /// Fit LF weights on the dev set; uniform weights otherwise.
    pub fit_label_model: bool,
    pub model: TrainConfig,
    pub dims: ModelDims,
    pub variant: InputVariant,
    pub head: HeadKind,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PipelinePaths::default(),
            stages: StageToggles::default(),
            augment: AugmentConfig::default(),
            mlsmote_k: 5,
            vote_threshold: 0.5,
            fit_label_model: true,
            model: TrainConfig::default(),
            dims: ModelDims::default(),
            variant: InputVariant::FuseSep,
            head: HeadKind::Linear,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// The fields that determine pipeline output, hashed for lineage.
#[derive(Serialize)]
struct StageFingerprint<'a> {
    stages: &'a StageToggles,
    augment: AugmentConfig,
    mlsmote_k: usize,
    vote_threshold: f64,
    fit_label_model: bool,
    seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env();
        Ok(cfg)
    }

    /// Applies the data-directory override from the environment.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
            self.paths.data_dir = PathBuf::from(dir);
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig { seed: seed::derive(self.seed, "augment"), ..self.augment }
    }

    pub fn mlsmote_seed(&self) -> u64 {
        seed::derive(self.seed, "mlsmote")
    }

    /// Training hyperparameters with the pipeline threshold applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { threshold: self.threshold, ..self.model.clone() }
    }

    pub fn config_hash(&self) -> String {
        let fp = StageFingerprint {
            stages: &self.stages,
            augment: self.augment_config(),
            mlsmote_k: self.mlsmote_k,
            vote_threshold: self.vote_threshold,
            fit_label_model: self.fit_label_model,
            seed: self.seed,
        };
        fingerprint(&fp)
    }

    /// Checks numeric ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        if self.mlsmote_k < 1 {
            return Err(Error::Config("mlsmote_k must be at least 1".into()));
        }
        if !(self.vote_threshold > 0.0 && self.vote_threshold < 1.0) {
            return Err(Error::Config(format!("vote_threshold {} outside (0, 1)", self.vote_threshold)));
        }
        let p = &self.paths;
        let mut required = vec![p.resolve(&p.train)];
        if self.stages.weak {
            let lf =
                p.lf_file.as_ref().ok_or_else(|| Error::Config("weak stage enabled but paths.lf_file unset".into()))?;
            required.push(p.resolve(lf));
        }
        required.extend(p.registry.iter().map(|r| p.resolve(r)));
        required.extend(p.embeddings.iter().map(|e| p.resolve(e)));
        for path in required {
            if !path.is_file() {
                return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
            }
        }
        self.train_config().validate(self.registry()?.len())
    }

    pub fn registry(&self) -> Result<TeamLabelRegistry> {
        match &self.paths.registry {
            Some(p) => TeamLabelRegistry::load(&self.paths.resolve(p)),
            None => Ok(TeamLabelRegistry::default_teams()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub artifact: PathBuf,
    pub report: PathBuf,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub input: PathBuf,
    pub input_records: usize,
    pub stages: Vec<StageRecord>,
    pub output: PathBuf,
    pub output_records: usize,
    pub output_sha256: String,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Short hex digest of a value's JSON form, used as a config hash.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    hex::encode(&Sha256::digest(serde_json::to_vec(value).expect("serializable"))[..8])
}

/// Pretty JSON plus a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the enabled stages into `paths.out_dir()`; returns the report and
/// the final training set.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(PipelineReport, Dataset)> {
    run_pipeline_into(cfg, &cfg.paths.out_dir())
}

pub fn run_pipeline_into(cfg: &PipelineConfig, out_dir: &Path) -> Result<(PipelineReport, Dataset)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let registry = cfg.registry()?;
    let input_path = cfg.paths.resolve(&cfg.paths.train);
    let input = load_dataset(&input_path, &registry)?;
    let corpus = read_lineage(&input_path)?.and_then(|l| l.corpus);
    let hash = cfg.config_hash();
    let mut enabled = Vec::new();
    let lineage = |stage: &str| Lineage {
        split: input.split,
        command: Some(format!("pipeline {stage}")),
        config_hash: Some(hash.clone()),
        corpus: corpus.clone(),
    };

    let mut current = input.clone();
    let mut stages = Vec::new();
    let mut finish = |stage: &'static str, ds: &Dataset, report: serde_json::Value| -> Result<()> {
        let artifact = out_dir.join(format!("train.{stage}.jsonl"));
        let report_path = out_dir.join(format!("train.{stage}.report.json"));
        save_dataset_with_lineage(ds, &artifact, &lineage(stage))?;
        write_json(&report_path, &report)?;
        stages.push(StageRecord {
            stage: stage.into(),
            sha256: file_sha256(&artifact)?,
            artifact,
            report: report_path,
            records: ds.len(),
        });
        Ok(())
    };

    if cfg.stages.weak {
        enabled.push("weak");
        let run = || -> Result<(Dataset, serde_json::Value)> {
            let lf_path = cfg.paths.resolve(cfg.paths.lf_file.as_ref().expect("validated"));
            let lfs = load_lfs(&lf_path, &registry)?;
            let dev_path = cfg.paths.resolve(&cfg.paths.dev);
            let mut params = if cfg.fit_label_model && dev_path.is_file() {
                let dev = load_dataset(&dev_path, &registry)?;
                fit_label_model(&apply_lfs(&dev, &lfs)?, &dev)?
            } else {
                LabelModelParams::uniform(lfs.len())
            };
            params.assign_threshold = cfg.vote_threshold;
            let (ds, report) = weak_label_dataset(&current, &lfs, &params)?;
            Ok((ds, serde_json::to_value(report)?))
        };
        let (ds, report) = run().map_err(Error::in_stage("weak"))?;
        finish("weak", &ds, report)?;
        current = ds;
    }
    if cfg.stages.augment {
        enabled.push("augment");
        let run = || -> Result<(Dataset, serde_json::Value)> {
            let table = match &cfg.paths.embeddings {
                Some(p) => EmbeddingTable::load(&cfg.paths.resolve(p))?,
                None => EmbeddingTable::bundled(),
            };
            let (ds, report) = augment_dataset(&current, &cfg.augment_config(), &table)?;
            Ok((ds, serde_json::to_value(report)?))
        };
        let (ds, report) = run().map_err(Error::in_stage("augment"))?;
        finish("augment", &ds, report)?;
        current = ds;
    }
    if cfg.stages.balance {
        enabled.push("balance");
        let (ds, report) = mlsmote(&current, cfg.mlsmote_k, cfg.mlsmote_seed()).map_err(Error::in_stage("balance"))?;
        finish("balance", &ds, serde_json::to_value(report)?)?;
        current = ds;
    }

    let output = out_dir.join("train.pipeline.jsonl");
    let stage_list = if enabled.is_empty() { "none".to_string() } else { enabled.join("+") };
    save_dataset_with_lineage(&current, &output, &lineage(&stage_list))?;
    let report = PipelineReport {
        config_hash: hash.clone(),
        input: input_path,
        input_records: input.len(),
        stages,
        output_sha256: file_sha256(&output)?,
        output: output.clone(),
        output_records: current.len(),
    };
    write_json(&out_dir.join("pipeline.report.json"), &report)?;
    Ok((report, current))
}

/// File names written by [`write_synthetic_bundle`].
pub const BUNDLE_REGISTRY: &str = "registry.json";
pub const BUNDLE_LFS: &str = "lfs.json";
pub const BUNDLE_EMBEDDINGS: &str = "embeddings.txt";

/// Split sizes for a generated bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Generates train/dev/test splits of one synthetic corpus plus the
/// registry, one keyword LF per label, and the bundled embedding table.
pub fn write_synthetic_bundle(
    dir: &Path,
    spec: &crate::corpus::SyntheticCorpusSpec,
    sizes: BundleSizes,
    command: &str,
) -> Result<()> {
    use crate::corpus::{generate_synthetic_corpus, Split};
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let corpus = spec.corpus_id();
    for (split, size) in [(Split::Train, sizes.train), (Split::Dev, sizes.dev), (Split::Test, sizes.test)] {
        let ds = generate_synthetic_corpus(&spec.split_spec(split, size))?;
        let lineage =
            Lineage { split, command: Some(command.to_string()), config_hash: None, corpus: Some(corpus.clone()) };
        save_dataset_with_lineage(&ds, &dir.join(format!("{split}.jsonl")), &lineage)?;
    }
    spec.registry.save(&dir.join(BUNDLE_REGISTRY))?;
    let lfs = crate::weak_supervision::keyword_lfs_for_pools(&spec.registry, &spec.keyword_pool)?;
    crate::weak_supervision::save_lfs(&lfs, &spec.registry, &dir.join(BUNDLE_LFS))?;
    EmbeddingTable::bundled().save(&dir.join(BUNDLE_EMBEDDINGS))
}

impl PipelineConfig {
    /// Desk-scale settings over a directory written by [`write_synthetic_bundle`].
    pub fn desk(data_dir: &Path) -> Self {
        Self {
            paths: PipelinePaths {
                data_dir: data_dir.to_path_buf(),
                registry: Some(BUNDLE_REGISTRY.into()),
                lf_file: Some(BUNDLE_LFS.into()),
                embeddings: Some(BUNDLE_EMBEDDINGS.into()),
                ..PipelinePaths::default()
            },
            model: TrainConfig { max_seq_length: 64, learning_rate: 2e-3, epochs: 4, ..TrainConfig::default() },
            ..Self::default()
        }
    }
}
