//! Subcommand front end wiring the modules into a batch pipeline:
//! build-vocab → extend-vocab → init-model → extend-model → pretrain →
//! train-ner → eval-ner → report, plus the synthetic-data and experiment
//! runners.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error. Every
//! artifact-producing command writes `run_metadata.json` beside its outputs
//! (command line, config snapshot, seeds, input digests, version,
//! timestamp). Set `SOURCE_DATE_EPOCH` to pin the timestamp; all other
//! output bytes depend only on inputs and seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::RawCorpus;
use crate::harness::{
    generate_synthetic_pair, prepare_models, run_convergence_experiment, run_extend_experiment,
    ExperimentConfig, SynthSpec,
};
use crate::model::{extend_model, init_model, ModelConfig};
use crate::persistence::{checkpoint_id, load_checkpoint, load_checkpoint_vocab, save_checkpoint};
use crate::report::{curve_csv, generate_report, metrics_json, write_convergence_summary, write_extend_summary};
use crate::tagger::{
    finetune_ner, init_crf, load_crf, parse_conll, save_crf, to_conll, NerConfig, TagSet,
};
use crate::trainer::{pretrain, PretrainConfig};
use crate::vocab::{extend_vocabulary, induce_vocabulary, load_vocab, save_vocab};

#[derive(Parser)]
#[command(
    name = "graft",
    version,
    about = "Add a new language to a pretrained masked language model: extend its vocabulary and tied embeddings, continue pretraining, and evaluate zero-shot NER transfer."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print WordPiece tokenizations, one sentence per line, tab-separated.
    Tokenize(TokenizeArgs),
    /// Induce a WordPiece vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Induce a target-language vocabulary, filter against a base
    /// vocabulary, and append the survivors.
    ExtendVocab(ExtendVocabArgs),
    /// Initialize a fresh model checkpoint for a vocabulary.
    InitModel(InitModelArgs),
    /// Grow a checkpoint's tied embedding/decoder to an extended vocabulary.
    ExtendModel(ExtendModelArgs),
    /// Continue (or start) masked-language-model pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune the NER head (and optionally the encoder) on labeled data.
    TrainNer(TrainNerArgs),
    /// Evaluate a fine-tuned tagger on a labeled test set.
    EvalNer(EvalNerArgs),
    /// Generate a synthetic bilingual corpus pair.
    Synth(SynthArgs),
    /// Run a scripted experiment over a synthetic pair.
    Experiment(ExperimentArgs),
    /// Regenerate plots and tables from experiment results.
    Report(ReportArgs),
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, conflicts_with = "file")]
    text: Option<String>,
    #[arg(long)]
    file: Option<PathBuf>,
    /// Print token ids instead of pieces.
    #[arg(long)]
    ids: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    lowercase: bool,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    lowercase: bool,
}

#[derive(Args)]
struct ExtendVocabArgs {
    /// Base vocabulary file.
    #[arg(long)]
    base: PathBuf,
    /// Target-language corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Pre-filter candidate vocabulary size.
    #[arg(long, default_value_t = 30000)]
    new_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    lowercase: bool,
}

#[derive(Args)]
struct InitModelArgs {
    /// Model dimensions as JSON (see ModelConfigFile; desk-scale defaults
    /// apply to omitted fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtendModelArgs {
    /// Base checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Base vocabulary (must match the checkpoint).
    #[arg(long)]
    base_vocab: PathBuf,
    /// Extended vocabulary (base pieces followed by appended pieces).
    #[arg(long)]
    extended_vocab: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Vocabulary file; defaults to the checkpoint's own.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Optional PretrainConfig JSON; explicit flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Next-sentence prediction: on|off.
    #[arg(long)]
    nsp: Option<String>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    log_interval: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Loss log path (default <out>/loss.csv).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainNerArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Training sentences, CoNLL TSV.
    #[arg(long)]
    train: PathBuf,
    /// Development sentences for the post-training report.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalNerArgs {
    /// Directory produced by train-ner (checkpoint + ner_head.json).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// SynthSpec JSON; defaults apply to omitted fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(subcommand)]
    which: ExperimentKind,
}

#[derive(Subcommand)]
enum ExperimentKind {
    /// Base vs extended vs from-scratch bilingual, zero-shot NER plus
    /// source retention.
    Extend(ExperimentRunArgs),
    /// Steps to reach held-out MLM loss thresholds, extended vs scratch.
    Convergence(ExperimentRunArgs),
}

#[derive(Args)]
struct ExperimentRunArgs {
    /// Experiment spec JSON (synth + experiment + convergence sections).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Results directory holding summary files.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Model dimensions accepted by `init-model --config`; vocabulary size and
/// seed come from the command line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfigFile {
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_position: usize,
    pub dropout: f64,
}

impl Default for ModelConfigFile {
    fn default() -> Self {
        let d = ModelConfig::desk_default(5, 0);
        ModelConfigFile {
            hidden_size: d.hidden_size,
            layers: d.layers,
            heads: d.heads,
            ff_dim: d.ff_dim,
            max_position: d.max_position,
            dropout: d.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceSettings {
    pub thresholds: Vec<f64>,
    pub budget_steps: u64,
    pub eval_interval: u64,
    pub n_eval_instances: usize,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        ConvergenceSettings {
            thresholds: vec![4.5, 4.0, 3.5],
            budget_steps: 600,
            eval_interval: 50,
            n_eval_instances: 64,
        }
    }
}

/// The `experiment --spec` file: data generator settings, budgets, and the
/// convergence experiment's thresholds.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpecFile {
    pub synth: SynthSpec,
    pub experiment: ExperimentConfig,
    pub convergence: ConvergenceSettings,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
    #[error(transparent)]
    Tagger(#[from] crate::tagger::TaggerError),
    #[error(transparent)]
    Checkpoint(#[from] crate::persistence::CheckpointError),
    #[error(transparent)]
    Harness(#[from] crate::harness::HarnessError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error("{0}")]
    Usage(String),
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    std::fs::write(path, content).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_file(path)?).map_err(|source| CliError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Provenance record written beside every artifact.
#[derive(Serialize)]
struct RunMetadata {
    command: Vec<String>,
    config: serde_json::Value,
    seeds: Vec<u64>,
    input_digests: BTreeMap<String, String>,
    version: &'static str,
    timestamp_unix: u64,
}

fn timestamp_unix() -> u64 {
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(t) = epoch.parse() {
            return t;
        }
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_run_metadata(
    beside: &Path,
    argv: &[String],
    config: serde_json::Value,
    seeds: &[u64],
    inputs: &[&Path],
) -> Result<(), CliError> {
    let mut input_digests = BTreeMap::new();
    for path in inputs {
        let digest = if path.is_dir() {
            crate::digest::dir_digest(path)
        } else {
            crate::digest::file_sha256(path)
        }
        .map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        input_digests.insert(path.display().to_string(), digest);
    }
    let metadata = RunMetadata {
        command: argv.to_vec(),
        config,
        seeds: seeds.to_vec(),
        input_digests,
        version: env!("CARGO_PKG_VERSION"),
        timestamp_unix: timestamp_unix(),
    };
    let target = if beside.is_dir() {
        beside.join("run_metadata.json")
    } else {
        let mut name = beside.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        beside.with_file_name(name)
    };
    let mut text = serde_json::to_string_pretty(&metadata).expect("static shape");
    text.push('\n');
    write_text(&target, &text)
}

/// Parses argv and runs the command. Returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with success.
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    match cli.command {
        Command::Tokenize(args) => cmd_tokenize(args),
        Command::BuildVocab(args) => cmd_build_vocab(args, argv),
        Command::ExtendVocab(args) => cmd_extend_vocab(args, argv),
        Command::InitModel(args) => cmd_init_model(args, argv),
        Command::ExtendModel(args) => cmd_extend_model(args, argv),
        Command::Pretrain(args) => cmd_pretrain(args, argv),
        Command::TrainNer(args) => cmd_train_ner(args, argv),
        Command::EvalNer(args) => cmd_eval_ner(args, argv),
        Command::Synth(args) => cmd_synth(args, argv),
        Command::Experiment(args) => match args.which {
            ExperimentKind::Extend(a) => cmd_experiment_extend(a, argv),
            ExperimentKind::Convergence(a) => cmd_experiment_convergence(a, argv),
        },
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_tokenize(args: TokenizeArgs) -> Result<(), CliError> {
    let vocab = load_vocab(&args.vocab)?;
    let lines: Vec<String> = match (&args.text, &args.file) {
        (Some(text), None) => vec![text.clone()],
        (None, Some(file)) => read_file(file)?.lines().map(String::from).collect(),
        _ => {
            return Err(CliError::Usage(
                "exactly one of --text or --file is required".into(),
            ))
        }
    };
    let mut out = String::new();
    for line in &lines {
        let enc = crate::tokenizer::encode(line, &vocab, usize::MAX / 2, args.lowercase);
        // Inner pieces only; [CLS]/[SEP] are model furniture.
        let inner_pieces = &enc.tokens.pieces[1..enc.tokens.len() - 1];
        let cells: Vec<String> = if args.ids {
            enc.tokens.ids[1..enc.tokens.len() - 1]
                .iter()
                .map(|i| i.to_string())
                .collect()
        } else {
            inner_pieces.to_vec()
        };
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

fn cmd_build_vocab(args: BuildVocabArgs, argv: &[String]) -> Result<(), CliError> {
    let corpus = RawCorpus::load(&args.corpus, "corpus")?;
    let counts = crate::corpus::count_words(&corpus, args.lowercase);
    let specials: Vec<String> = crate::vocab::SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .collect();
    let induction = induce_vocabulary(&counts, args.size, &specials)?;
    save_vocab(&induction.vocabulary, &args.out)?;
    write_run_metadata(
        &args.out,
        argv,
        serde_json::json!({
            "size": args.size,
            "lowercase": args.lowercase,
            "pieces": induction.vocabulary.len(),
            "merges": induction.merges.len(),
        }),
        &[],
        &[&args.corpus],
    )
}

fn cmd_extend_vocab(args: ExtendVocabArgs, argv: &[String]) -> Result<(), CliError> {
    let base = load_vocab(&args.base)?;
    let corpus = RawCorpus::load(&args.corpus, "target")?;
    let counts = crate::corpus::count_words(&corpus, args.lowercase);
    let (extended, extension) = extend_vocabulary(&base, &counts, args.new_size)?;
    save_vocab(&extended, &args.out)?;
    write_run_metadata(
        &args.out,
        argv,
        serde_json::json!({
            "new_size_goal": args.new_size,
            "lowercase": args.lowercase,
            "base_size": extension.base_size,
            "appended_count": extension.appended_count(),
        }),
        &[],
        &[&args.base, &args.corpus],
    )
}

fn cmd_init_model(args: InitModelArgs, argv: &[String]) -> Result<(), CliError> {
    let vocab = load_vocab(&args.vocab)?;
    let file: ModelConfigFile = match &args.config {
        Some(path) => read_json(path)?,
        None => ModelConfigFile::default(),
    };
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        hidden_size: file.hidden_size,
        layers: file.layers,
        heads: file.heads,
        ff_dim: file.ff_dim,
        max_position: file.max_position,
        type_vocab: 2,
        dropout: file.dropout,
        seed: args.seed,
    };
    let params = init_model(&cfg)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("lineage".to_string(), "init".to_string());
    metadata.insert("seed".to_string(), args.seed.to_string());
    save_checkpoint(&params, &vocab, &metadata, &args.out)?;
    write_run_metadata(
        &args.out,
        argv,
        serde_json::to_value(&cfg).expect("serializable"),
        &[args.seed],
        &[&args.vocab],
    )
}

fn cmd_extend_model(args: ExtendModelArgs, argv: &[String]) -> Result<(), CliError> {
    let (params, manifest) = load_checkpoint(&args.ckpt)?;
    let base_vocab = load_vocab(&args.base_vocab)?;
    let extended_vocab = load_vocab(&args.extended_vocab)?;
    if base_vocab.len() != params.config.vocab_size {
        return Err(CliError::Usage(format!(
            "base vocab has {} pieces but checkpoint vocab_size is {}",
            base_vocab.len(),
            params.config.vocab_size
        )));
    }
    for (i, piece) in base_vocab.pieces().iter().enumerate() {
        if extended_vocab.piece(i as u32) != Some(piece.as_str()) {
            return Err(CliError::Usage(format!(
                "extended vocab does not start with the base vocab (piece {i})"
            )));
        }
    }
    let appended = extended_vocab.len() - base_vocab.len();
    let extended = extend_model(&params, base_vocab.len(), appended, args.seed)?;
    let base_id = checkpoint_id(&args.ckpt)?;
    let mut metadata = manifest.metadata.clone();
    metadata.insert("lineage".to_string(), format!("extended-from:{base_id}"));
    metadata.insert("appended_count".to_string(), appended.to_string());
    metadata.insert("extend_seed".to_string(), args.seed.to_string());
    save_checkpoint(&extended, &extended_vocab, &metadata, &args.out)?;
    write_run_metadata(
        &args.out,
        argv,
        serde_json::json!({ "appended_count": appended }),
        &[args.seed],
        &[&args.ckpt, &args.base_vocab, &args.extended_vocab],
    )
}

fn cmd_pretrain(args: PretrainArgs, argv: &[String]) -> Result<(), CliError> {
    let (params, manifest) = load_checkpoint(&args.ckpt)?;
    let vocab = match &args.vocab {
        Some(path) => load_vocab(path)?,
        None => load_checkpoint_vocab(&args.ckpt, &manifest)?,
    };
    let corpus = RawCorpus::load(&args.corpus, "corpus")?;

    let mut cfg: PretrainConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => PretrainConfig::with_budget(1000, 1e-3, 0),
    };
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.max_seq_len {
        cfg.max_seq_len = v;
    }
    if let Some(v) = args.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = args.log_interval {
        cfg.log_interval = v;
    }
    if let Some(nsp) = &args.nsp {
        cfg.nsp_enabled = match nsp.as_str() {
            "on" => true,
            "off" => false,
            other => {
                return Err(CliError::Usage(format!(
                    "--nsp expects on|off, got {other}"
                )))
            }
        };
    }

    let base_id = checkpoint_id(&args.ckpt)?;
    let (trained, loss_log) = pretrain(params, &corpus, &vocab, &cfg)?;

    let mut metadata = manifest.metadata.clone();
    metadata.insert("lineage".to_string(), format!("pretrained-from:{base_id}"));
    metadata.insert("pretrain_steps".to_string(), cfg.steps.to_string());
    metadata.insert("pretrain_seed".to_string(), cfg.seed.to_string());
    metadata.insert(
        "nsp".to_string(),
        if cfg.nsp_enabled { "on" } else { "off" }.to_string(),
    );
    save_checkpoint(&trained, &vocab, &metadata, &args.out)?;

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.join("loss.csv"));
    write_text(&log_path, &curve_csv(("step", "loss"), &loss_log))?;

    let mut inputs: Vec<&Path> = vec![&args.ckpt, &args.corpus];
    if let Some(v) = &args.vocab {
        inputs.push(v);
    }
    write_run_metadata(
        &args.out,
        argv,
        serde_json::to_value(&cfg).expect("serializable"),
        &[cfg.seed],
        &inputs,
    )
}

fn infer_tagset(sentences: &[crate::tagger::TaggedSentence]) -> TagSet {
    let mut types = std::collections::BTreeSet::new();
    for s in sentences {
        for tag in &s.tags {
            if let Some((_, ty)) = tag.split_once('-') {
                types.insert(ty.to_string());
            }
        }
    }
    if types.is_empty() {
        TagSet::default()
    } else {
        TagSet {
            entity_types: types.into_iter().collect(),
        }
    }
}

fn cmd_train_ner(args: TrainNerArgs, argv: &[String]) -> Result<(), CliError> {
    let (params, manifest) = load_checkpoint(&args.ckpt)?;
    let vocab = load_checkpoint_vocab(&args.ckpt, &manifest)?;

    let mut cfg: NerConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => NerConfig::with_budget(10, 1e-3, 0),
    };
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if args.freeze_encoder {
        cfg.freeze_encoder = true;
    }
    cfg.max_seq_len = cfg.max_seq_len.min(params.config.max_position);

    let train_text = read_file(&args.train)?;
    // Parse leniently first to infer the tag inventory, then strictly.
    let tagset = infer_tagset(&parse_conll(&train_text, &TagSet::default()).or_else(|_| {
        let all_types = TagSet {
            entity_types: train_text
                .lines()
                .filter_map(|l| l.split_once('\t'))
                .filter_map(|(_, t)| t.split_once('-').map(|(_, ty)| ty.to_string()))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        parse_conll(&train_text, &all_types)
    })?);
    let train = parse_conll(&train_text, &tagset)?;

    let crf = init_crf(params.config.hidden_size, &tagset, cfg.seed);
    let (tuned, tuned_crf, loss_log) = finetune_ner(&params, &crf, &train, &vocab, &tagset, &cfg)?;

    let mut metadata = manifest.metadata.clone();
    metadata.insert("ner_seed".to_string(), cfg.seed.to_string());
    metadata.insert(
        "freeze_encoder".to_string(),
        cfg.freeze_encoder.to_string(),
    );
    save_checkpoint(&tuned, &vocab, &metadata, &args.out)?;
    save_crf(&tuned_crf, &tagset, args.out.join("ner_head.json"))?;
    write_text(
        &args.out.join("loss.csv"),
        &curve_csv(("epoch", "loss"), &loss_log),
    )?;

    if let Some(dev) = &args.dev {
        let dev_set = parse_conll(&read_file(dev)?, &tagset)?;
        let (precision, recall, f1) = crate::harness::evaluate_tagger(
            &tuned, &tuned_crf, &vocab, &tagset, &cfg, &dev_set,
        )?;
        let value = serde_json::json!({
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "n_runs": 1,
            "f1_per_run": [f1],
        });
        let mut text = serde_json::to_string_pretty(&value).expect("static shape");
        text.push('\n');
        write_text(&args.out.join("dev_metrics.json"), &text)?;
    }

    let mut inputs: Vec<&Path> = vec![&args.ckpt, &args.train];
    if let Some(d) = &args.dev {
        inputs.push(d);
    }
    write_run_metadata(
        &args.out,
        argv,
        serde_json::to_value(&cfg).expect("serializable"),
        &[cfg.seed],
        &inputs,
    )
}

fn cmd_eval_ner(args: EvalNerArgs, argv: &[String]) -> Result<(), CliError> {
    let (params, manifest) = load_checkpoint(&args.ckpt)?;
    let vocab = load_checkpoint_vocab(&args.ckpt, &manifest)?;
    let (crf, tagset) = load_crf(args.ckpt.join("ner_head.json"))?;
    let test = parse_conll(&read_file(&args.test)?, &tagset)?;
    let cfg = NerConfig {
        max_seq_len: params.config.max_position,
        ..NerConfig::with_budget(1, 1e-3, 0)
    };
    let (precision, recall, f1) =
        crate::harness::evaluate_tagger(&params, &crf, &vocab, &tagset, &cfg, &test)?;
    let value = serde_json::json!({
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "n_runs": 1,
        "f1_per_run": [f1],
    });
    let mut text = serde_json::to_string_pretty(&value).expect("static shape");
    text.push('\n');
    std::fs::create_dir_all(&args.out).map_err(|source| CliError::Io {
        path: args.out.display().to_string(),
        source,
    })?;
    write_text(&args.out.join("metrics.json"), &text)?;
    write_run_metadata(
        &args.out,
        argv,
        serde_json::json!({}),
        &[],
        &[&args.ckpt, &args.test],
    )
}

fn cmd_synth(args: SynthArgs, argv: &[String]) -> Result<(), CliError> {
    let spec: SynthSpec = match &args.spec {
        Some(path) => read_json(path)?,
        None => SynthSpec::default(),
    };
    let pair = generate_synthetic_pair(&spec)?;
    for (name, side) in [("source", &pair.source), ("target", &pair.target)] {
        let dir = args.out.join(name);
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        side.corpus.save(dir.join("corpus.txt"))?;
        side.heldout.save(dir.join("heldout.txt"))?;
        write_text(&dir.join("ner_train.conll"), &to_conll(&side.ner_train))?;
        write_text(&dir.join("ner_dev.conll"), &to_conll(&side.ner_dev))?;
        write_text(&dir.join("ner_test.conll"), &to_conll(&side.ner_test))?;
    }
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(s) = &args.spec {
        inputs.push(s);
    }
    write_run_metadata(
        &args.out,
        argv,
        serde_json::to_value(&spec).expect("serializable"),
        &[spec.seed],
        &inputs,
    )
}

fn load_experiment_spec(path: &Option<PathBuf>) -> Result<ExperimentSpecFile, CliError> {
    match path {
        Some(p) => read_json(p),
        None => Ok(ExperimentSpecFile::default()),
    }
}

fn save_condition_checkpoint(
    dir: &Path,
    params: &crate::model::ModelParameters<f32>,
    vocab: &crate::vocab::Vocabulary,
    lineage: &str,
) -> Result<(), CliError> {
    let mut metadata = BTreeMap::new();
    metadata.insert("lineage".to_string(), lineage.to_string());
    save_checkpoint(params, vocab, &metadata, dir)?;
    Ok(())
}

fn cmd_experiment_extend(args: ExperimentRunArgs, argv: &[String]) -> Result<(), CliError> {
    let spec = load_experiment_spec(&args.spec)?;
    let pair = generate_synthetic_pair(&spec.synth)?;
    let models = prepare_models(&pair, &spec.experiment)?;

    let out = args.out.join("extend");
    // Pretrained per-condition checkpoints and loss curves.
    for (name, params, vocab, loss) in [
        ("base", &models.base_params, &models.base_vocab, &models.base_loss),
        (
            "extended",
            &models.extended_params,
            &models.extended_vocab,
            &models.extended_loss,
        ),
        (
            "scratch",
            &models.scratch_params,
            &models.scratch_vocab,
            &models.scratch_loss,
        ),
    ] {
        let cdir = out.join(name).join("pretrain");
        save_condition_checkpoint(&cdir.join("checkpoint"), params, vocab, name)?;
        write_text(&cdir.join("loss.csv"), &curve_csv(("step", "loss"), loss))?;
    }

    // Fine-tuned per-seed taggers, captured as the experiment runs.
    let mut sink_error: Option<CliError> = None;
    {
        let mut sink = |condition: &str, seed: u64, tagger: &crate::harness::FinetunedTagger| {
            if sink_error.is_some() {
                return;
            }
            let sdir = out.join(condition).join(seed.to_string());
            let vocab = match condition {
                "base" => &models.base_vocab,
                "extended" => &models.extended_vocab,
                _ => &models.scratch_vocab,
            };
            let result = save_condition_checkpoint(
                &sdir.join("checkpoint"),
                &tagger.params,
                vocab,
                &format!("finetuned:{condition}:{seed}"),
            )
            .and_then(|()| {
                save_crf(
                    &tagger.crf,
                    &pair.tagset,
                    sdir.join("checkpoint").join("ner_head.json"),
                )
                .map_err(CliError::from)
            })
            .and_then(|()| {
                write_text(
                    &sdir.join("loss.csv"),
                    &curve_csv(("epoch", "loss"), &tagger.loss_log),
                )
            });
            if let Err(e) = result {
                sink_error = Some(e);
            }
        };
        let outcome = run_extend_experiment(&pair, &spec.experiment, &models, Some(&mut sink))?;

        // Per-seed and per-condition metrics. Target-language zero-shot
        // numbers land in metrics.json; the retention evaluations on the
        // source language land in source_metrics.json beside them.
        for cond in outcome.all_conditions() {
            let dir_name = condition_dir(&cond.condition);
            let file = if cond.condition.ends_with("-source") {
                "source_metrics.json"
            } else {
                "metrics.json"
            };
            for (i, &seed) in cond.seeds.iter().enumerate() {
                let sdir = out.join(dir_name).join(seed.to_string());
                let value = serde_json::json!({
                    "precision": cond.precision_per_seed[i],
                    "recall": cond.recall_per_seed[i],
                    "f1": cond.f1_per_seed[i],
                    "n_runs": 1,
                    "f1_per_run": [cond.f1_per_seed[i]],
                });
                let mut text = serde_json::to_string_pretty(&value).expect("static shape");
                text.push('\n');
                write_text(&sdir.join(file), &text)?;
            }
            write_text(&out.join(dir_name).join(file), &metrics_json(cond))?;
        }
        write_extend_summary(&outcome, &out)?;
    }
    if let Some(e) = sink_error {
        return Err(e);
    }

    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(s) = &args.spec {
        inputs.push(s);
    }
    write_run_metadata(
        &out,
        argv,
        serde_json::to_value(&spec).expect("serializable"),
        &[spec.synth.seed, spec.experiment.seed],
        &inputs,
    )
}

fn condition_dir(condition: &str) -> &str {
    condition.split('-').next().unwrap_or(condition)
}

fn cmd_experiment_convergence(args: ExperimentRunArgs, argv: &[String]) -> Result<(), CliError> {
    let spec = load_experiment_spec(&args.spec)?;
    let pair = generate_synthetic_pair(&spec.synth)?;
    let models = prepare_models(&pair, &spec.experiment)?;
    let outcome = run_convergence_experiment(
        &pair,
        &spec.experiment,
        &models,
        &spec.convergence.thresholds,
        spec.convergence.budget_steps,
        spec.convergence.eval_interval,
        spec.convergence.n_eval_instances,
    )?;
    let out = args.out.join("convergence");
    write_convergence_summary(&outcome, &out)?;
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(s) = &args.spec {
        inputs.push(s);
    }
    write_run_metadata(
        &out,
        argv,
        serde_json::to_value(&spec).expect("serializable"),
        &[spec.synth.seed, spec.experiment.seed],
        &inputs,
    )
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let written = generate_report(&args.input, &args.out)?;
    for file in written {
        println!("{}", args.out.join(file).display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(dispatch(["graft", "tokenize", "--bogus"]), 2);
        assert_eq!(dispatch(["graft", "no-such-command"]), 2);
    }

    #[test]
    fn help_succeeds() {
        assert_eq!(dispatch(["graft", "--help"]), 0);
        assert_eq!(dispatch(["graft", "build-vocab", "--help"]), 0);
    }

    #[test]
    fn missing_file_is_a_runtime_error() {
        assert_eq!(
            dispatch([
                "graft",
                "tokenize",
                "--vocab",
                "/nonexistent/vocab.txt",
                "--text",
                "hi"
            ]),
            1
        );
    }

    #[test]
    fn experiment_spec_file_defaults_parse() {
        let spec: ExperimentSpecFile = serde_json::from_str("{}").unwrap();
        assert_eq!(spec.experiment.n_seeds, 5);
        let spec: ExperimentSpecFile =
            serde_json::from_str(r#"{"experiment": {"n_seeds": 2}}"#).unwrap();
        assert_eq!(spec.experiment.n_seeds, 2);
        assert_eq!(spec.synth.seed, SynthSpec::default().seed);
    }
}
