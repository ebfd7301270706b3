//! The `tweetaffect` command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{BaselineModel, FeatureKind, Nbow, SvmConfig, Tfidf, targets_for, train_linear_svm};
use crate::datasets::{
    EC_EMOTIONS, SynthCorpusConfig, TaskDataset, TaskId, load_dataset, synth_affect_corpus, synth_task_dataset,
    synth_task_embeddings,
};
use crate::embeddings::{EmbeddingMatrix, SgnsConfig, train_skipgram};
use crate::error::{Error, Result};
use crate::evaluation::{
    EvalReport, HeatmapFormat, averaged_eval, bias_eval, load_bias_pairs, metric_name, render_heatmap, score,
};
use crate::grad::{MODEL_STENCIL, Tensor, finite_difference_report_with};
use crate::lexicon::{
    AffectiveLexicon, SeedLexicon, build_context_model, compose_embeddings, expand_lexicon, fit_affect_model,
    select_seeds,
};
use crate::model::{Mode, Model, ModelConfig, TaskHead, Target, decode};
use crate::text::{PAD_INDEX, Vocabulary, build_vocab, encode, read_corpus, tokenize};
use crate::training::{Example, TrainConfig, TrainMode, train, transfer};

/// Every key a run config may set, with its default. `seed` has none.
const KEYS: &[(&str, &str)] = &[
    ("seed", ""),
    // model
    ("lstm_size", "250"),
    ("lstm_layers", "2"),
    ("attention_layers", "2"),
    ("attention_hidden", "500"),
    ("noise_sigma", "0.2"),
    ("embed_dropout", "0.1"),
    ("repr_dropout", "0.3"),
    // training
    ("batch_size", "32"),
    ("clip_norm", "1"),
    ("lr", "0.001"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_eps", "1e-8"),
    ("max_epochs", "50"),
    ("patience", "5"),
    ("dev_every", "10"),
    // skip-gram
    ("sgns_dim", "300"),
    ("sgns_window", "5"),
    ("sgns_negatives", "5"),
    ("sgns_min_count", "20"),
    ("sgns_epochs", "5"),
    ("sgns_lr", "0.025"),
    // lexicon
    ("lexicon_min_count", "5"),
    ("lexicon_window", "5"),
    ("lexicon_seeds", "50"),
    ("lexicon_ridge", "0.001"),
    // svm
    ("svm_c", "0.6"),
    ("svm_epochs", "200"),
    ("svm_step", "0.1"),
    ("svm_epsilon", "0.1"),
];

/// Flat `key = value` configuration: a file plus `--set` overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str, what: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(what, i + 1, format!("expected `key = value`, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::parse(what, i + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::invalid(format!("unknown config key {key:?}")));
        }
        if value.is_empty() {
            return Err(Error::invalid(format!("config key {key:?} has an empty value")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set expects key=value, got {spec:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| KEYS.iter().find(|(k, d)| *k == key && !d.is_empty()).map(|(_, d)| *d))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::invalid(format!("{key} is required (set it in --config or with --set {key}=...)")))?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("config key {key}: cannot parse {raw:?}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            if let Some(v) = self.raw(k) {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn model_config(&self, embed_dim: usize, head: TaskHead) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            embed_dim,
            lstm_size: self.get("lstm_size")?,
            lstm_layers: self.get("lstm_layers")?,
            attention_layers: self.get("attention_layers")?,
            attention_hidden: self.get("attention_hidden")?,
            noise_sigma: self.get("noise_sigma")?,
            embed_dropout: self.get("embed_dropout")?,
            repr_dropout: self.get("repr_dropout")?,
            head,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, mode: TrainMode, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.get("batch_size")?,
            clip_norm: self.get("clip_norm")?,
            lr: self.get("lr")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("adam_eps")?,
            max_epochs: self.get("max_epochs")?,
            patience: self.get("patience")?,
            seed,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sgns_config(&self) -> Result<SgnsConfig> {
        Ok(SgnsConfig {
            dim: self.get("sgns_dim")?,
            window: self.get("sgns_window")?,
            negatives: self.get("sgns_negatives")?,
            min_count: self.get("sgns_min_count")?,
            epochs: self.get("sgns_epochs")?,
            learning_rate: self.get("sgns_lr")?,
            seed: self.seed()?,
        })
    }

    pub fn svm_config(&self) -> Result<SvmConfig> {
        Ok(SvmConfig {
            c: self.get("svm_c")?,
            epochs: self.get("svm_epochs")?,
            step: self.get("svm_step")?,
            epsilon: self.get("svm_epsilon")?,
            seed: self.seed()?,
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "tweetaffect", version, about = "Affect analysis for tweets")]
pub struct Cli {
    /// Run configuration file with `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Rd,
    TlFr,
    TlFt,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rd => TrainMode::Rd,
            ModeArg::TlFr => TrainMode::TlFr,
            ModeArg::TlFt => TrainMode::TlFt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Bow,
    Nbow,
    NbowAffect,
}

impl From<KindArg> for FeatureKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Bow => FeatureKind::Bow,
            KindArg::Nbow => FeatureKind::Nbow,
            KindArg::NbowAffect => FeatureKind::NbowAffect,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Html,
    Ansi,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train skip-gram embeddings on a corpus (one document per line).
    TrainEmbeddings {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand seed lexicons to every embedding word.
    BuildLexicon {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory with one `<dimension>.tsv` seed file per dimension.
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append the ten affect norms to every embedding row.
    Compose {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network on 3-class sentiment data.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Development set; defaults to every tenth training example.
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Train on a target task, optionally starting from a pretrained encoder.
    Finetune {
        #[arg(long)]
        task: TaskId,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Score a checkpoint; prints a CSV report.
    Evaluate {
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Retrain from `--ckpt` on this data for every run instead of
        /// scoring the checkpoint as is.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tl-ft")]
        mode: ModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score an SVM baseline; prints a CSV report.
    Baseline {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Required for nbow and nbow-affect.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Required for nbow-affect.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Where to save the trained baseline.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render attention weights over a text.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value = "html")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare predictions on paired sentences; prints a CSV.
    BiasAudit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full model's gradients. `--config`
    /// takes `small` (default), `full`, or a config file of model keys.
    Gradcheck,
    /// Write synthetic data: a task dataset, `corpus` (directory with corpus,
    /// seeds and planted norms) or `embeddings` for the synthetic task words.
    Synth {
        #[arg(long)]
        what: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
    },
}

/// Resolves `--ckpt`: a directory means its `model.ckpt`.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() { p.join("model.ckpt") } else { p.to_path_buf() }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("run-config.txt"), cfg.resolved().as_bytes())
}

fn stdout_bytes(bytes: &[u8]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))
}

fn emit(bytes: &[u8], out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    match out {
        Some(path) => {
            echo_config(&parent_dir(path), cfg)?;
            write_file(path, bytes)
        }
        None => stdout_bytes(bytes),
    }
}

/// Train and dev examples: `--dev` if given, else every `dev_every`-th
/// training example is held out.
fn train_dev(data: &Path, dev: Option<&Path>, task: TaskId, vocab: &Vocabulary, cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let full = load_dataset(data, task)?;
    let (tr, dv) = match dev {
        Some(d) => (full, load_dataset(d, task)?),
        None => {
            let every: usize = cfg.get("dev_every")?;
            if every < 2 {
                return Err(Error::invalid("dev_every must be at least 2"));
            }
            full.split_every(every)
        }
    };
    if tr.is_empty() || dv.is_empty() {
        return Err(Error::invalid(format!("{}: too few examples for a train/dev split", data.display())));
    }
    Ok((tr.encode(vocab), dv.encode(vocab)))
}

fn save_training(dir: &Path, model: &Model, history: &crate::training::History, cfg: &RunConfig) -> Result<()> {
    echo_config(dir, cfg)?;
    model.save(&dir.join("model.ckpt"))?;
    history.save(&dir.join("history.csv"))
}

fn predict(model: &Model, examples: &[Example]) -> Result<Vec<Target>> {
    examples
        .iter()
        .map(|ex| Ok(decode(&model.forward(&ex.indices, Mode::Eval, 0)?.prediction, model.config.head)))
        .collect()
}

fn check_head(model: &Model, task: TaskId) -> Result<()> {
    if model.config.head != task.head() {
        return Err(Error::invalid(format!(
            "checkpoint has a {} head but {task} needs {}",
            model.config.head,
            task.head()
        )));
    }
    Ok(())
}

fn score_model(model: &Model, data: &TaskDataset) -> Result<f64> {
    let examples = data.encode(model.vocab());
    let gold: Vec<Target> = examples.iter().map(|e| e.target.clone()).collect();
    score(model.config.head, &predict(model, &examples)?, &gold)
}

fn baseline_features(
    kind: FeatureKind,
    docs: &[Vec<crate::text::Token>],
    tfidf: Option<&Tfidf>,
    nbow: Option<&Nbow>,
) -> Vec<Vec<f64>> {
    match (kind, tfidf, nbow) {
        (FeatureKind::Bow, Some(t), _) => crate::baselines::tfidf_features(docs, t),
        (_, _, Some(n)) => docs.iter().map(|d| n.features(d)).collect(),
        _ => unreachable!("features prepared for {kind}"),
    }
}

fn dimension_names(head: TaskHead) -> Vec<String> {
    match head {
        TaskHead::Regression => vec!["score".into()],
        TaskHead::Ordinal(k) => (0..k).map(|c| format!("class{c}")).collect(),
        TaskHead::Multilabel(m) if m == EC_EMOTIONS.len() => EC_EMOTIONS.iter().map(|s| s.to_string()).collect(),
        TaskHead::Multilabel(m) => (0..m).map(|c| format!("label{c}")).collect(),
    }
}

/// `base` with every model key that the config sets explicitly.
fn override_model(mut mc: ModelConfig, cfg: &RunConfig) -> Result<ModelConfig> {
    let set = |key: &str| cfg.is_set(key);
    if set("lstm_size") {
        mc.lstm_size = cfg.get("lstm_size")?;
    }
    if set("lstm_layers") {
        mc.lstm_layers = cfg.get("lstm_layers")?;
    }
    if set("attention_layers") {
        mc.attention_layers = cfg.get("attention_layers")?;
    }
    if set("attention_hidden") {
        mc.attention_hidden = cfg.get("attention_hidden")?;
    }
    if set("noise_sigma") {
        mc.noise_sigma = cfg.get("noise_sigma")?;
    }
    if set("embed_dropout") {
        mc.embed_dropout = cfg.get("embed_dropout")?;
    }
    if set("repr_dropout") {
        mc.repr_dropout = cfg.get("repr_dropout")?;
    }
    mc.validate()?;
    Ok(mc)
}

fn gradcheck(cfg_arg: Option<&Path>, overrides: &[String]) -> Result<String> {
    let mut cfg = match cfg_arg.and_then(Path::to_str) {
        None | Some("small") | Some("toy") | Some("full") => RunConfig::default(),
        Some(_) => RunConfig::load(cfg_arg.unwrap())?,
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    let full = cfg_arg.and_then(Path::to_str) == Some("full");
    let seed: u64 = if cfg.is_set("seed") { cfg.seed()? } else { 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = String::from("head,parameters,max_rel_error,failures\n");
    let mut failed = Vec::new();
    let heads = [
        (TaskHead::Regression, Target::Scalar(0.7)),
        (TaskHead::Ordinal(4), Target::Class(2)),
        (TaskHead::Multilabel(11), Target::Labels((0..11).map(|i| i % 3 == 0).collect())),
    ];
    for (head, target) in heads {
        let base = if full { ModelConfig::full(head) } else { ModelConfig::toy(head) };
        let mc = override_model(base, &cfg)?;
        let words = 12;
        let vocab = Vocabulary::from_entries((0..words).map(|i| (format!("w{i}"), 1)), 1)?;
        let rows = (0..vocab.len() * mc.embed_dim)
            .map(|i| if i / mc.embed_dim == PAD_INDEX { 0.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let emb = EmbeddingMatrix::new(vocab, mc.embed_dim, rows)?;
        let model = Model::new(mc, emb, rng.random())?;
        let indices = [2, 4, 6, 8, 10];
        let weights = match head {
            TaskHead::Ordinal(k) => Some(vec![1.25; k]),
            _ => None,
        };
        let names: Vec<String> = model.params().keys().cloned().collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let run_seed: u64 = rng.random();
        let (_, grads) = model.loss_and_gradients(&indices, &target, weights.as_deref(), Mode::Train, run_seed, &refs)?;
        let analytic: Vec<(String, Tensor)> = names.iter().cloned().zip(grads).collect();
        let r = finite_difference_report_with(model.params(), &analytic, 1e-4, MODEL_STENCIL, |params| {
            let mut probe = model.clone();
            for (n, t) in params {
                probe.set_param(n, t.clone())?;
            }
            Ok(probe.loss_and_gradients(&indices, &target, weights.as_deref(), Mode::Train, run_seed, &[])?.0)
        })?;
        let failures: Vec<&str> = r.failures().map(|e| e.name.as_str()).collect();
        let _ = writeln!(report, "{head},{},{:.3e},{}", r.entries.len(), r.max_rel_error(), failures.join(" "));
        if !r.passed() {
            failed.push(head.to_string());
        }
    }
    if failed.is_empty() {
        Ok(report)
    } else {
        print!("{report}");
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Gradcheck = cli.command {
        let report = gradcheck(cli.config.as_deref(), &cli.overrides)?;
        return stdout_bytes(report.as_bytes());
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    info!("resolved configuration:\n{}", cfg.resolved());
    match cli.command {
        Command::TrainEmbeddings { corpus, out } => {
            let sg = cfg.sgns_config()?;
            let docs = read_corpus(&corpus)?;
            let emb = train_skipgram(&docs, &sg)?;
            echo_config(&parent_dir(&out), &cfg)?;
            emb.save_text(&out)
        }
        Command::BuildLexicon {
            corpus,
            seeds,
            embeddings,
            out,
        } => {
            let docs = read_corpus(&corpus)?;
            let vocab = build_vocab(&docs, cfg.get("lexicon_min_count")?)?;
            let ctx = build_context_model(&docs, &vocab, cfg.get("lexicon_window")?)?;
            let emb = EmbeddingMatrix::load_text(&embeddings)?;
            let (n, ridge): (usize, f64) = (cfg.get("lexicon_seeds")?, cfg.get("lexicon_ridge")?);
            let models = SeedLexicon::load_dir(&seeds)?
                .iter()
                .map(|lex| fit_affect_model(lex, &select_seeds(lex, &ctx, n)?, &ctx, ridge))
                .collect::<Result<Vec<_>>>()?;
            let lexicon = expand_lexicon(emb.vocab(), &models, &ctx)?;
            info!("expanded lexicon covers {} words", lexicon.len());
            echo_config(&parent_dir(&out), &cfg)?;
            lexicon.save(&out)
        }
        Command::Compose {
            embeddings,
            lexicon,
            out,
        } => {
            let emb = EmbeddingMatrix::load_text(&embeddings)?;
            let lex = AffectiveLexicon::load(&lexicon)?;
            let composed = compose_embeddings(&emb, &lex)?;
            echo_config(&parent_dir(&out), &cfg)?;
            composed.save_text(&out)
        }
        Command::Pretrain {
            data,
            embeddings,
            out,
            dev,
        } => {
            let seed = cfg.seed()?;
            let emb = EmbeddingMatrix::load_text(&embeddings)?;
            let mc = cfg.model_config(emb.dim(), TaskId::PretrainSentiment.head())?;
            let (tr, dv) = train_dev(&data, dev.as_deref(), TaskId::PretrainSentiment, emb.vocab(), &cfg)?;
            let model = Model::new(mc, emb, seed)?;
            let (best, history) = train(&model, &tr, &dv, &cfg.train_config(TrainMode::Rd, seed)?)?;
            save_training(&out, &best, &history, &cfg)
        }
        Command::Finetune {
            task,
            mode,
            ckpt,
            data,
            out,
            dev,
        } => {
            let seed = cfg.seed()?;
            let pre = Model::load(&checkpoint_path(&ckpt))?;
            let (tr, dv) = train_dev(&data, dev.as_deref(), task, pre.vocab(), &cfg)?;
            let start = transfer(&pre, task.head(), mode.into(), seed)?;
            let (best, history) = train(&start, &tr, &dv, &cfg.train_config(mode.into(), seed)?)?;
            save_training(&out, &best, &history, &cfg)
        }
        Command::Evaluate {
            task,
            ckpt,
            data,
            runs,
            train: train_path,
            mode,
            out,
        } => {
            let seed = cfg.seed()?;
            let model = Model::load(&checkpoint_path(&ckpt))?;
            let test = load_dataset(&data, task)?;
            let report = match train_path {
                None => {
                    check_head(&model, task)?;
                    averaged_eval(task.name(), metric_name(task.head()), runs, seed, |_| score_model(&model, &test))?
                }
                Some(tp) => {
                    let (tr, dv) = train_dev(&tp, None, task, model.vocab(), &cfg)?;
                    averaged_eval(task.name(), metric_name(task.head()), runs, seed, |s| {
                        let start = transfer(&model, task.head(), mode.into(), s)?;
                        let (best, _) = train(&start, &tr, &dv, &cfg.train_config(mode.into(), s)?)?;
                        score_model(&best, &test)
                    })?
                }
            };
            emit(report.to_csv().as_bytes(), out.as_deref(), &cfg)
        }
        Command::Baseline {
            kind,
            task,
            data,
            dev,
            embeddings,
            lexicon,
            out,
        } => {
            let svm_cfg = cfg.svm_config()?;
            let kind: FeatureKind = kind.into();
            let full = load_dataset(&data, task)?;
            let (tr, dv) = match dev {
                Some(d) => (full, load_dataset(&d, task)?),
                None => full.split_every(cfg.get("dev_every")?),
            };
            if tr.is_empty() || dv.is_empty() {
                return Err(Error::invalid("too few examples for a train/dev split"));
            }
            let docs = |d: &TaskDataset| d.examples.iter().map(|e| tokenize(&e.text)).collect::<Vec<_>>();
            let (tr_docs, dv_docs) = (docs(&tr), docs(&dv));
            let tfidf = (kind == FeatureKind::Bow).then(|| Tfidf::fit(&tr_docs));
            let nbow = match kind {
                FeatureKind::Bow => None,
                _ => {
                    let path = embeddings.ok_or_else(|| Error::invalid(format!("{kind} needs --embeddings")))?;
                    let emb = EmbeddingMatrix::load_text(&path)?;
                    let lex = match (kind, lexicon) {
                        (FeatureKind::NbowAffect, Some(p)) => Some(AffectiveLexicon::load(&p)?),
                        (FeatureKind::NbowAffect, None) => return Err(Error::invalid("nbow-affect needs --lexicon")),
                        _ => None,
                    };
                    Some(Nbow::new(&emb, lex.as_ref())?)
                }
            };
            let targets: Vec<Target> = tr.examples.iter().map(|e| e.target.clone()).collect();
            let x = baseline_features(kind, &tr_docs, tfidf.as_ref(), nbow.as_ref());
            let svm = train_linear_svm(&x, &targets_for(task.head(), &targets)?, &svm_cfg)?;
            let pred = svm.predict(&baseline_features(kind, &dv_docs, tfidf.as_ref(), nbow.as_ref()))?;
            let gold: Vec<Target> = dv.examples.iter().map(|e| e.target.clone()).collect();
            let value = score(task.head(), &pred, &gold)?;
            if let Some(path) = out {
                if nbow.is_some() {
                    log::warn!("saved {kind} baselines hold only the linear model; keep the embeddings alongside");
                }
                echo_config(&parent_dir(&path), &cfg)?;
                BaselineModel { features: kind, tfidf, svm }.save(&path)?;
            }
            let report = EvalReport {
                task: format!("{}:{kind}", task.name()),
                metric: metric_name(task.head()).to_string(),
                value,
                runs: vec![value],
            };
            stdout_bytes(report.to_csv().as_bytes())
        }
        Command::Visualize { ckpt, text, format, out } => {
            let model = Model::load(&checkpoint_path(&ckpt))?;
            let tokens = tokenize(&text);
            if tokens.is_empty() {
                return Err(Error::invalid("--text has no tokens"));
            }
            let attention = model.forward(&encode(&tokens, model.vocab()), Mode::Eval, 0)?.attention;
            let labels: Vec<String> = tokens.iter().map(|t| t.surface().to_string()).collect();
            let format = match format {
                FormatArg::Html => HeatmapFormat::Html,
                FormatArg::Ansi => HeatmapFormat::Ansi,
            };
            emit(&render_heatmap(&labels, &attention, format)?, out.as_deref(), &cfg)
        }
        Command::BiasAudit { ckpt, pairs, out } => {
            let seed = cfg.seed()?;
            let model = Model::load(&checkpoint_path(&ckpt))?;
            let pairs = load_bias_pairs(&pairs)?;
            let dims = dimension_names(model.config.head);
            let scores = |text: &str| -> Result<Vec<f64>> {
                let toks = tokenize(text);
                let mut idx = encode(&toks, model.vocab());
                if idx.is_empty() {
                    idx.push(crate::text::UNK_INDEX);
                }
                Ok(model.forward(&idx, Mode::Eval, 0)?.prediction)
            };
            let mut by_context: BTreeMap<&str, (Vec<Vec<f64>>, Vec<Vec<f64>>)> = BTreeMap::new();
            for p in &pairs {
                let entry = by_context.entry(p.context.as_str()).or_default();
                entry.0.push(scores(&p.sentence_a)?);
                entry.1.push(scores(&p.sentence_b)?);
            }
            let mut csv = String::from("context,dimension,pairs,avg_diff,p_value\n");
            for (context, (a, b)) in &by_context {
                for (d, name) in dims.iter().enumerate() {
                    let col = |v: &[Vec<f64>]| v.iter().map(|r| r[d]).collect::<Vec<_>>();
                    let r = bias_eval(&col(a), &col(b), seed)?;
                    let _ = writeln!(csv, "{context},{name},{},{},{}", r.pairs, r.avg_diff, r.p_value);
                }
            }
            emit(csv.as_bytes(), out.as_deref(), &cfg)
        }
        Command::Synth { what, out, size, dim } => {
            let seed = cfg.seed()?;
            echo_config(&if what == "corpus" { out.clone() } else { parent_dir(&out) }, &cfg)?;
            match what.as_str() {
                "corpus" => {
                    let sc = SynthCorpusConfig {
                        seed,
                        ..SynthCorpusConfig::default()
                    };
                    synth_affect_corpus(&sc, &out).map(|_| ())
                }
                "embeddings" => synth_task_embeddings(dim, seed)?.save_text(&out),
                task => synth_task_dataset(task.parse()?, size, seed)?.save(&out),
            }
        }
        Command::Gradcheck => unreachable!("handled above"),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses arguments, runs, and returns the process exit code: 0 on success,
/// 1 for user errors, 2 for internal failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first} (see --help)");
            return 1;
        }
    };
    init_logging(cli.verbose);
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_user_error() { 1 } else { 2 }
        }
        Err(_) => 2,
    }
}
