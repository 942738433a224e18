//! `deftri`: data generation, training and evaluation front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use deftri_core::augmentation::{augment_dataset, AugmentConfig, EmbeddingTable};
use deftri_core::balancing::mlsmote;
use deftri_core::corpus::{
    generate_synthetic_corpus, load_dataset, read_lineage, save_dataset_with_lineage, Lineage, SyntheticCorpusSpec,
};
use deftri_core::experiment::{check_lineage, run_experiments, MAX_VOCAB};
use deftri_core::model::{evaluate, load_checkpoint, read_precision, save_checkpoint, train, ModelDims, TrainRequest};
use deftri_core::numerics::Precision;
use deftri_core::pipeline::{
    fingerprint, run_pipeline, write_json, write_synthetic_bundle, BundleSizes, PipelineConfig,
};
use deftri_core::tokenizer::build_vocab;
use deftri_core::weak_supervision::{apply_lfs, fit_label_model, load_lfs, weak_label_dataset, LabelModelParams};
use deftri_core::{Dataset, Error, HeadKind, InputVariant, Result, Split, TeamLabelRegistry, TrainConfig, Vocab};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "deftri", version, about = "Multi-label defect triage: data pipeline, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled corpus (one split, or a full bundle).
    GenCorpus(GenCorpusArgs),
    /// Replace labels with labeling-function votes.
    WeakLabel(WeakLabelArgs),
    /// Append embedding-neighbor word-swap copies of sampled defects.
    Augment(AugmentArgs),
    /// Oversample minority labels with MLSMOTE.
    Balance(BalanceArgs),
    /// Build a vocabulary from a dataset.
    BuildVocab(BuildVocabArgs),
    /// Run the enabled data stages from a config file.
    Pipeline(ConfigArgs),
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled set; prints metrics JSON.
    Eval(EvalArgs),
    /// Run the data pipeline and the six-model matrix.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct RegistryArg {
    /// Label registry JSON; the built-in 15 teams when omitted.
    #[arg(long)]
    registry: Option<PathBuf>,
}

impl RegistryArg {
    fn load(&self) -> Result<TeamLabelRegistry> {
        match &self.registry {
            Some(p) => TeamLabelRegistry::load(p),
            None => Ok(TeamLabelRegistry::default_teams()),
        }
    }
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    /// Number of defects (train split size with --bundle).
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split to generate when writing a single file.
    #[arg(long, default_value = "train")]
    split: Split,
    /// Output JSONL file.
    #[arg(long, required_unless_present = "bundle", conflicts_with = "bundle")]
    out: Option<PathBuf>,
    /// Write train/dev/test, registry, labeling functions and embeddings into this directory.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value_t = 200, requires = "bundle")]
    dev_size: usize,
    #[arg(long, default_value_t = 200, requires = "bundle")]
    test_size: usize,
}

#[derive(Args, Debug)]
struct WeakLabelArgs {
    #[arg(long)]
    input: PathBuf,
    /// Labeling-function JSON file.
    #[arg(long)]
    lfs: PathBuf,
    /// Labeled dev set used to fit LF weights; uniform weights when omitted.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Relative vote threshold in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    vote_threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Stage report JSON; `<out>.report.json` when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    registry: RegistryArg,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    /// Word-vector table in word2vec text format; bundled synonym table when omitted.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.30)]
    sample_fraction: f64,
    #[arg(long, default_value_t = 2)]
    copies: usize,
    #[arg(long, default_value_t = 0.10)]
    perturb_rate: f64,
    #[arg(long, default_value_t = 0.8)]
    min_cosine: f64,
    #[arg(long, default_value_t = 10)]
    neighbor_k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    registry: RegistryArg,
}

#[derive(Args, Debug)]
struct BalanceArgs {
    #[arg(long)]
    input: PathBuf,
    /// Neighbors per minority sample.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    registry: RegistryArg,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    #[arg(long, default_value_t = MAX_VOCAB)]
    max_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    registry: RegistryArg,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Pipeline/experiment config JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Vocabulary file; built from the training set when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value = "fuse_sep")]
    variant: InputVariant,
    #[arg(long, default_value = "linear")]
    head: HeadKind,
    /// Hyperparameter JSON (dropout, max_seq_length, batch_size, learning_rate, ...).
    #[arg(long)]
    hparams: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_seq_length: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    registry: RegistryArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = deftri_core::model::DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Skip the rerun without augmentation.
    #[arg(long)]
    no_ablation: bool,
    /// Where results.{tsv,txt,json} go; the config's output directory when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { EXIT_DATA } else { EXIT_INTERNAL })
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::WeakLabel(a) => weak_label(a),
        Command::Augment(a) => augment(a),
        Command::Balance(a) => balance(a),
        Command::BuildVocab(a) => build_vocab_cmd(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => experiment(a),
    }
}

/// Writes command output to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io { path: "<stdout>".into(), source: e }),
        _ => Ok(()),
    }
}

fn report_path(explicit: Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".report.json");
        PathBuf::from(s)
    })
}

/// Lineage for a stage output: the input's corpus id, this command and a
/// hash of its settings.
fn stage_lineage(input: &Path, ds: &Dataset, command: &str, settings: &serde_json::Value) -> Result<Lineage> {
    Ok(Lineage {
        split: ds.split,
        command: Some(command.to_string()),
        config_hash: Some(fingerprint(settings)),
        corpus: read_lineage(input)?.and_then(|l| l.corpus),
    })
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let base = SyntheticCorpusSpec::new(a.size, a.seed);
    let command = format!("gen-corpus --size {} --seed {}", a.size, a.seed);
    if let Some(dir) = a.bundle {
        let sizes = BundleSizes { train: a.size, dev: a.dev_size, test: a.test_size };
        write_synthetic_bundle(&dir, &base, sizes, &command)?;
        eprintln!("wrote bundle to {} (train {}, dev {}, test {})", dir.display(), a.size, a.dev_size, a.test_size);
        return Ok(());
    }
    let out = a.out.expect("clap enforces --out without --bundle");
    let ds = generate_synthetic_corpus(&base.split_spec(a.split, a.size))?;
    let lineage = Lineage {
        split: a.split,
        command: Some(format!("{command} --split {}", a.split)),
        config_hash: None,
        corpus: Some(base.corpus_id()),
    };
    save_dataset_with_lineage(&ds, &out, &lineage)?;
    eprintln!("wrote {} defects to {}", ds.len(), out.display());
    Ok(())
}

fn weak_label(a: WeakLabelArgs) -> Result<()> {
    let registry = a.registry.load()?;
    let input = load_dataset(&a.input, &registry)?;
    let lfs = load_lfs(&a.lfs, &registry)?;
    let mut params = match &a.dev {
        Some(dev) => {
            let dev = load_dataset(dev, &registry)?;
            fit_label_model(&apply_lfs(&dev, &lfs)?, &dev)?
        }
        None => LabelModelParams::uniform(lfs.len()),
    };
    params.assign_threshold = a.vote_threshold;
    let (ds, report) = weak_label_dataset(&input, &lfs, &params)?;
    let settings = json!({ "lf_weights": params.weights, "vote_threshold": a.vote_threshold });
    save_dataset_with_lineage(&ds, &a.out, &stage_lineage(&a.input, &ds, "weak-label", &settings)?)?;
    write_json(&report_path(a.report, &a.out), &report)?;
    eprintln!("kept {} of {} defects ({} excluded)", ds.len(), input.len(), report.excluded);
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let registry = a.registry.load()?;
    let input = load_dataset(&a.input, &registry)?;
    let table = match &a.embeddings {
        Some(p) => EmbeddingTable::load(p)?,
        None => EmbeddingTable::bundled(),
    };
    let cfg = AugmentConfig {
        sample_fraction: a.sample_fraction,
        copies_per_defect: a.copies,
        perturb_rate: a.perturb_rate,
        min_cosine: a.min_cosine,
        neighbor_k: a.neighbor_k,
        seed: a.seed,
    };
    let (ds, report) = augment_dataset(&input, &cfg, &table)?;
    let settings = serde_json::to_value(cfg)?;
    save_dataset_with_lineage(&ds, &a.out, &stage_lineage(&a.input, &ds, "augment", &settings)?)?;
    write_json(&report_path(a.report, &a.out), &report)?;
    eprintln!("sampled {}, appended {} copies", report.sampled, report.appended);
    Ok(())
}

fn balance(a: BalanceArgs) -> Result<()> {
    let registry = a.registry.load()?;
    let input = load_dataset(&a.input, &registry)?;
    let (ds, report) = mlsmote(&input, a.k, a.seed)?;
    let settings = json!({ "k": a.k, "seed": a.seed });
    save_dataset_with_lineage(&ds, &a.out, &stage_lineage(&a.input, &ds, "balance", &settings)?)?;
    write_json(&report_path(a.report, &a.out), &report)?;
    eprintln!(
        "added {} synthetic defects; MeanIR {:.4} -> {:.4}",
        report.synthetic.len(),
        report.mean_ir_before,
        report.mean_ir_after
    );
    Ok(())
}

fn build_vocab_cmd(a: BuildVocabArgs) -> Result<()> {
    let ds = load_dataset(&a.input, &a.registry.load()?)?;
    let vocab = build_vocab(&ds, a.min_freq, a.max_size)?;
    vocab.save(&a.out)?;
    emit(&format!("{}\n", json!({ "size": vocab.len(), "hash": vocab.hash() })))
}

fn pipeline(a: ConfigArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config)?;
    let (report, _) = run_pipeline(&cfg)?;
    emit(&(serde_json::to_string_pretty(&report)? + "\n"))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let registry = a.registry.load()?;
    check_lineage(&[&a.train, &a.dev])?;
    let train_ds = load_dataset(&a.train, &registry)?;
    let dev_ds = load_dataset(&a.dev, &registry)?;
    let mut hp: TrainConfig = match &a.hparams {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    hp.epochs = a.epochs.unwrap_or(hp.epochs);
    hp.learning_rate = a.learning_rate.unwrap_or(hp.learning_rate);
    hp.batch_size = a.batch_size.unwrap_or(hp.batch_size);
    hp.max_seq_length = a.max_seq_length.unwrap_or(hp.max_seq_length);
    hp.threshold = a.threshold.unwrap_or(hp.threshold);
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => build_vocab(&train_ds, 1, MAX_VOCAB)?,
    };
    let encode = |ds: &Dataset| deftri_core::tokenizer::EncodedDataset::new(ds, &vocab, a.variant, hp.max_seq_length);
    let (tr, dv) = (encode(&train_ds)?, encode(&dev_ds)?);
    let dims = ModelDims { hidden: a.hidden, layers: a.layers, heads: a.heads, ffn_dim: None };
    let req = TrainRequest {
        train: &tr,
        dev: &dv,
        vocab: &vocab,
        registry: &registry,
        head: a.head,
        dims,
        hparams: &hp,
        seed: a.seed,
    };
    let ckpt = train(&req)?;
    save_checkpoint(&ckpt, &a.out)?;
    let summary = json!({
        "checkpoint": a.out,
        "best_epoch": ckpt.meta.best_epoch,
        "history": ckpt.meta.history,
    });
    emit(&(serde_json::to_string_pretty(&summary)? + "\n"))
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = match read_precision(&a.ckpt)? {
        Precision::F32 => {
            let ckpt = load_checkpoint::<f32>(&a.ckpt)?;
            evaluate(&ckpt, &load_dataset(&a.test, &ckpt.registry)?, a.threshold)?
        }
        Precision::F64 => {
            let ckpt = load_checkpoint::<f64>(&a.ckpt)?;
            evaluate(&ckpt, &load_dataset(&a.test, &ckpt.registry)?, a.threshold)?
        }
    };
    emit(&(serde_json::to_string_pretty(&report)? + "\n"))
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config.config)?;
    let results = run_experiments(&cfg, !a.no_ablation)?;
    results.write(&a.out.unwrap_or_else(|| cfg.paths.out_dir()))?;
    emit(&results.to_text())
}
