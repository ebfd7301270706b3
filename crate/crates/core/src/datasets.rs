//! Task datasets in SemEval-style TSV layouts plus the synthetic corpora
//! and toy tasks used by the tests.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::lexicon::{AffectDimension, AffectiveLexicon, NUM_DIMENSIONS, SeedLexicon};
use crate::model::{TaskHead, Target};
use crate::text::{PAD_INDEX, UNK_INDEX, Vocabulary, encode, tokenize};
use crate::training::Example;

/// Label order of the multi-label emotion task.
pub const EC_EMOTIONS: [&str; 11] = [
    "anger",
    "anticipation",
    "disgust",
    "fear",
    "joy",
    "love",
    "optimism",
    "pessimism",
    "sadness",
    "surprise",
    "trust",
];

pub const EI_EMOTIONS: [&str; 4] = ["joy", "fear", "sadness", "anger"];

pub const SENTIMENTS: [&str; 3] = ["negative", "neutral", "positive"];

/// Offset between stored V-oc classes (0..6) and file values (-3..3).
pub const VOC_OFFSET: i64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskId {
    EiReg,
    EiOc,
    VReg,
    VOc,
    Ec,
    PretrainSentiment,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::EiReg,
        TaskId::EiOc,
        TaskId::VReg,
        TaskId::VOc,
        TaskId::Ec,
        TaskId::PretrainSentiment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::EiReg => "EI-reg",
            TaskId::EiOc => "EI-oc",
            TaskId::VReg => "V-reg",
            TaskId::VOc => "V-oc",
            TaskId::Ec => "E-c",
            TaskId::PretrainSentiment => "pretrain-sentiment",
        }
    }

    pub fn head(self) -> TaskHead {
        match self {
            TaskId::EiReg | TaskId::VReg => TaskHead::Regression,
            TaskId::EiOc => TaskHead::Ordinal(4),
            TaskId::VOc => TaskHead::Ordinal(7),
            TaskId::Ec => TaskHead::Multilabel(EC_EMOTIONS.len()),
            TaskId::PretrainSentiment => TaskHead::Ordinal(SENTIMENTS.len()),
        }
    }

    fn has_dimension(self) -> bool {
        matches!(self, TaskId::EiReg | TaskId::EiOc | TaskId::VReg | TaskId::VOc)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = TaskId::ALL.iter().map(|t| t.name()).collect();
                Error::invalid(format!("unknown task {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: TaskId,
    /// Emotion for EI tasks, `valence` for V tasks.
    pub dimension: Option<String>,
    pub examples: Vec<LabeledExample>,
}

fn check_target(task: TaskId, target: &Target) -> std::result::Result<(), String> {
    match (task.head(), target) {
        (TaskHead::Regression, Target::Scalar(v)) if (0.0..=1.0).contains(v) => Ok(()),
        (TaskHead::Regression, Target::Scalar(v)) => Err(format!("score {v} outside [0, 1]")),
        (TaskHead::Ordinal(k), Target::Class(c)) if *c < k => Ok(()),
        (TaskHead::Ordinal(k), Target::Class(c)) => Err(format!("class {c} outside 0..{k}")),
        (TaskHead::Multilabel(m), Target::Labels(l)) if l.len() == m => Ok(()),
        (_, t) => Err(format!("target {t:?} does not fit task {task}")),
    }
}

fn check_dimension(task: TaskId, dim: &str) -> std::result::Result<(), String> {
    match task {
        TaskId::EiReg | TaskId::EiOc if EI_EMOTIONS.contains(&dim) => Ok(()),
        TaskId::EiReg | TaskId::EiOc => Err(format!("unknown emotion {dim:?} (expected joy, fear, sadness or anger)")),
        TaskId::VReg | TaskId::VOc if dim == "valence" => Ok(()),
        TaskId::VReg | TaskId::VOc => Err(format!("dimension {dim:?} should be valence")),
        _ => Ok(()),
    }
}

/// Leading integer of an ordinal field; accepts both `2` and
/// `2: moderate amount of joy can be inferred`.
fn parse_class_int(field: &str) -> Option<i64> {
    let head = field.split(':').next().unwrap_or("").trim();
    head.parse().ok()
}

impl TaskDataset {
    pub fn new(task: TaskId, dimension: Option<String>, examples: Vec<LabeledExample>) -> Result<Self> {
        if task.has_dimension() != dimension.is_some() {
            return Err(Error::invalid(format!("task {task} dimension tag mismatch")));
        }
        if let Some(d) = &dimension {
            check_dimension(task, d).map_err(Error::invalid)?;
        }
        for ex in &examples {
            check_target(task, &ex.target).map_err(|m| Error::invalid(format!("example {:?}: {m}", ex.id)))?;
            if ex.text.contains(['\t', '\n', '\r']) || ex.id.contains(['\t', '\n', '\r']) {
                return Err(Error::invalid(format!("example {:?} contains a tab or newline", ex.id)));
            }
        }
        Ok(TaskDataset {
            task,
            dimension,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn head(&self) -> TaskHead {
        self.task.head()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        match self.task {
            TaskId::EiReg | TaskId::VReg => writeln!(w, "ID\tTweet\tAffect Dimension\tIntensity Score")?,
            TaskId::EiOc | TaskId::VOc => writeln!(w, "ID\tTweet\tAffect Dimension\tIntensity Class")?,
            TaskId::Ec => writeln!(w, "ID\tTweet\t{}", EC_EMOTIONS.join("\t"))?,
            TaskId::PretrainSentiment => writeln!(w, "ID\tTweet\tSentiment")?,
        }
        let dim = self.dimension.as_deref().unwrap_or("");
        for ex in &self.examples {
            write!(w, "{}\t{}", ex.id, ex.text)?;
            match (&ex.target, self.task) {
                (Target::Scalar(v), _) => write!(w, "\t{dim}\t{v}")?,
                (Target::Class(c), TaskId::VOc) => write!(w, "\t{dim}\t{}", *c as i64 - VOC_OFFSET)?,
                (Target::Class(c), TaskId::PretrainSentiment) => write!(w, "\t{}", SENTIMENTS[*c])?,
                (Target::Class(c), _) => write!(w, "\t{dim}\t{c}")?,
                (Target::Labels(l), _) => {
                    for b in l {
                        write!(w, "\t{}", u8::from(*b))?;
                    }
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_tsv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    /// Tokenizes and indexes every example. A tweet without tokens becomes
    /// a single `<unk>`.
    pub fn encode(&self, vocab: &Vocabulary) -> Vec<Example> {
        self.examples
            .iter()
            .map(|ex| {
                let mut indices = encode(&tokenize(&ex.text), vocab);
                if indices.is_empty() {
                    indices.push(UNK_INDEX);
                }
                Example {
                    indices,
                    target: ex.target.clone(),
                }
            })
            .collect()
    }

    /// Splits off every `k`-th example (starting with the last of each
    /// block of `k`) as a held-out set.
    pub fn split_every(&self, k: usize) -> (TaskDataset, TaskDataset) {
        let (mut keep, mut held) = (Vec::new(), Vec::new());
        for (i, ex) in self.examples.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                held.push(ex.clone());
            } else {
                keep.push(ex.clone());
            }
        }
        let part = |examples| TaskDataset {
            task: self.task,
            dimension: self.dimension.clone(),
            examples,
        };
        (part(keep), part(held))
    }
}

pub fn load_dataset(path: &Path, task: TaskId) -> Result<TaskDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, task, &path.display().to_string())
}

pub fn read_dataset<R: std::io::Read>(reader: R, task: TaskId, what: &str) -> Result<TaskDataset> {
    let mut examples = Vec::new();
    let mut dimension: Option<String> = None;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(what, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if i == 0 && f[0] == "ID" {
            continue;
        }
        let expected = match task {
            TaskId::Ec => 2 + EC_EMOTIONS.len(),
            TaskId::PretrainSentiment => 3,
            _ => 4,
        };
        if f.len() != expected {
            return Err(Error::parse(what, n, format!("expected {expected} tab-separated columns, found {}", f.len())));
        }
        if task.has_dimension() {
            check_dimension(task, f[2]).map_err(|m| Error::parse(what, n, m))?;
            match &dimension {
                None => dimension = Some(f[2].to_string()),
                Some(d) if d != f[2] => {
                    return Err(Error::parse(what, n, format!("dimension {:?} differs from earlier {d:?}", f[2])));
                }
                Some(_) => {}
            }
        }
        let target = match task {
            TaskId::EiReg | TaskId::VReg => {
                let v: f64 = f[3]
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(what, n, format!("bad score {:?}", f[3])))?;
                Target::Scalar(v)
            }
            TaskId::EiOc => {
                let c = parse_class_int(f[3]).ok_or_else(|| Error::parse(what, n, format!("bad class {:?}", f[3])))?;
                if !(0..4).contains(&c) {
                    return Err(Error::parse(what, n, format!("class {c} outside 0..3")));
                }
                Target::Class(c as usize)
            }
            TaskId::VOc => {
                let c = parse_class_int(f[3]).ok_or_else(|| Error::parse(what, n, format!("bad class {:?}", f[3])))?;
                if !(-VOC_OFFSET..=VOC_OFFSET).contains(&c) {
                    return Err(Error::parse(what, n, format!("class {c} outside -3..3")));
                }
                Target::Class((c + VOC_OFFSET) as usize)
            }
            TaskId::Ec => Target::Labels(
                f[2..]
                    .iter()
                    .map(|v| match v.trim() {
                        "0" => Ok(false),
                        "1" => Ok(true),
                        other => Err(Error::parse(what, n, format!("label column must be 0 or 1, found {other:?}"))),
                    })
                    .collect::<Result<_>>()?,
            ),
            TaskId::PretrainSentiment => {
                let c = SENTIMENTS
                    .iter()
                    .position(|s| *s == f[2].trim())
                    .ok_or_else(|| Error::parse(what, n, format!("unknown sentiment {:?}", f[2])))?;
                Target::Class(c)
            }
        };
        check_target(task, &target).map_err(|m| Error::parse(what, n, m))?;
        examples.push(LabeledExample {
            id: f[0].to_string(),
            text: f[1].to_string(),
            target,
        });
    }
    if task.has_dimension() && dimension.is_none() {
        dimension = Some(if matches!(task, TaskId::VReg | TaskId::VOc) { "valence" } else { "joy" }.to_string());
    }
    Ok(TaskDataset {
        task,
        dimension,
        examples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpusConfig {
    pub clusters: usize,
    pub words_per_cluster: usize,
    pub docs: usize,
    /// Annotated words per cluster written to the seed files; the rest are
    /// left for expansion.
    pub seeds_per_cluster: usize,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            clusters: 2,
            words_per_cluster: 20,
            docs: 500,
            seeds_per_cluster: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: PathBuf,
    /// Directory holding one `<dimension>.tsv` seed file per dimension.
    pub seeds_dir: PathBuf,
    /// Every cluster word with its planted norms.
    pub planted: AffectiveLexicon,
    pub planted_path: PathBuf,
    /// Word lists per cluster.
    pub clusters: Vec<Vec<String>>,
    /// Words written to the seed files.
    pub seed_words: Vec<String>,
}

pub fn cluster_word(cluster: usize, i: usize) -> String {
    format!("c{cluster}w{i}")
}

/// Neutral filler words shared by every cluster.
pub const FILLERS: [&str; 4] = ["the", "a", "and", "of"];

/// Writes `corpus.txt`, `planted.tsv` and `seeds/<dimension>.tsv` under
/// `out_dir`. Documents draw 6 to 12 tokens from one cluster plus fillers.
/// Every dimension plants one sign per cluster (valence alternates
/// +, −, +, ...) and a magnitude `0.6 + 0.3u` per word.
pub fn synth_affect_corpus(cfg: &SynthCorpusConfig, out_dir: &Path) -> Result<SynthCorpus> {
    if cfg.clusters < 2 {
        return Err(Error::invalid("synthetic corpus needs at least 2 clusters"));
    }
    if cfg.words_per_cluster < 2 || cfg.seeds_per_cluster < 1 || cfg.seeds_per_cluster > cfg.words_per_cluster {
        return Err(Error::invalid("need 2+ words per cluster and 1..=words_per_cluster seeds"));
    }
    if cfg.docs == 0 {
        return Err(Error::invalid("docs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clusters: Vec<Vec<String>> = (0..cfg.clusters)
        .map(|c| (0..cfg.words_per_cluster).map(|i| cluster_word(c, i)).collect())
        .collect();

    let signs: Vec<[f64; NUM_DIMENSIONS]> = (0..cfg.clusters)
        .map(|c| {
            let mut s = [0.0; NUM_DIMENSIONS];
            for (d, v) in s.iter_mut().enumerate() {
                *v = if d == AffectDimension::Valence.index() {
                    if c % 2 == 0 { 1.0 } else { -1.0 }
                } else if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                };
            }
            s
        })
        .collect();
    let mut planted = Vec::new();
    for (c, words) in clusters.iter().enumerate() {
        for w in words {
            let mut norms = [0.0; NUM_DIMENSIONS];
            for d in 0..NUM_DIMENSIONS {
                norms[d] = signs[c][d] * (0.6 + 0.3 * rng.random::<f64>());
            }
            planted.push((w.clone(), norms));
        }
    }

    let mut lines = Vec::with_capacity(cfg.docs);
    for _ in 0..cfg.docs {
        let c = rng.random_range(0..cfg.clusters);
        let len = rng.random_range(6..=12);
        let mut doc: Vec<&str> = (0..len)
            .map(|_| {
                if rng.random::<f64>() < 0.2 {
                    *FILLERS.choose(&mut rng).expect("fillers")
                } else {
                    clusters[c].choose(&mut rng).expect("cluster words").as_str()
                }
            })
            .collect();
        doc.shuffle(&mut rng);
        lines.push(doc.join(" "));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus = out_dir.join("corpus.txt");
    std::fs::write(&corpus, lines.join("\n") + "\n").map_err(|e| Error::io(&corpus, e))?;
    let planted = AffectiveLexicon::new(planted)?;
    let planted_path = out_dir.join("planted.tsv");
    planted.save(&planted_path)?;

    let seeds_dir = out_dir.join("seeds");
    std::fs::create_dir_all(&seeds_dir).map_err(|e| Error::io(&seeds_dir, e))?;
    let seed_words: Vec<String> = clusters
        .iter()
        .flat_map(|words| words[..cfg.seeds_per_cluster].iter().cloned())
        .collect();
    for dim in AffectDimension::ALL {
        let ratings: BTreeMap<String, f64> = seed_words
            .iter()
            .map(|w| (w.clone(), planted.get(w).expect("planted word")[dim.index()]))
            .collect();
        SeedLexicon::new(dim, ratings)?.save(&seeds_dir.join(format!("{}.tsv", dim.name())))?;
    }
    Ok(SynthCorpus {
        corpus,
        seeds_dir,
        planted,
        planted_path,
        clusters,
        seed_words,
    })
}

/// Word lists of the synthetic tasks.
pub fn positive_words() -> Vec<String> {
    (0..8).map(|i| format!("p{i}")).collect()
}

pub fn negative_words() -> Vec<String> {
    (0..8).map(|i| format!("n{i}")).collect()
}

pub fn neutral_words() -> Vec<String> {
    (0..16).map(|i| format!("u{i}")).collect()
}

pub fn emotion_word(label: usize, j: usize) -> String {
    format!("{}{j}", EC_EMOTIONS[label])
}

struct Draw {
    words: Vec<String>,
    pos: usize,
    neg: usize,
}

fn draw_tokens(rng: &mut ChaCha8Rng, len: usize, pos_share: f64, neg_share: f64) -> Draw {
    let (p, n, u) = (positive_words(), negative_words(), neutral_words());
    let mut out = Draw {
        words: Vec::with_capacity(len),
        pos: 0,
        neg: 0,
    };
    for _ in 0..len {
        let r = rng.random::<f64>();
        if r < pos_share {
            out.words.push(p.choose(rng).expect("words").clone());
            out.pos += 1;
        } else if r < pos_share + neg_share {
            out.words.push(n.choose(rng).expect("words").clone());
            out.neg += 1;
        } else {
            out.words.push(u.choose(rng).expect("words").clone());
        }
    }
    out
}

fn valence_of(d: &Draw) -> f64 {
    0.5 + 0.5 * (d.pos as f64 - d.neg as f64) / d.words.len() as f64
}

fn intensity_of(d: &Draw) -> f64 {
    d.pos as f64 / d.words.len() as f64
}

fn ordinal(score: f64, k: usize) -> usize {
    ((score * k as f64).floor() as usize).min(k - 1)
}

/// A learnable toy dataset of `size` examples. EI tasks score the share
/// of "strong" words `p*`; V tasks score `0.5 + 0.5 (pos − neg) / len`;
/// ordinal variants bin the score into equal-width classes, every class
/// occurring; pretrain-sentiment labels the sign of `pos − neg`; E-c
/// labels the emotions whose words occur.
pub fn synth_task_dataset(task: TaskId, size: usize, seed: u64) -> Result<TaskDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = match task.head() {
        TaskHead::Ordinal(k) => k,
        _ => 0,
    };
    if k > 0 && size < k {
        return Err(Error::invalid(format!("{task} needs at least {k} examples to cover every class")));
    }
    let mut examples = Vec::with_capacity(size);
    for i in 0..size {
        let (words, target) = match task {
            TaskId::EiReg | TaskId::VReg => {
                let len = rng.random_range(3..=9);
                let share = rng.random::<f64>();
                let d = if task == TaskId::EiReg {
                    draw_tokens(&mut rng, len, share, 0.0)
                } else {
                    draw_tokens(&mut rng, len, share * 0.8, (1.0 - share) * 0.8)
                };
                let score = if task == TaskId::EiReg { intensity_of(&d) } else { valence_of(&d) };
                (d.words, Target::Scalar(score))
            }
            TaskId::EiOc | TaskId::VOc | TaskId::PretrainSentiment => {
                let want = i % k;
                loop {
                    let len = rng.random_range(k.max(4)..=12);
                    let share = rng.random::<f64>();
                    let (d, class) = match task {
                        TaskId::EiOc => {
                            let d = draw_tokens(&mut rng, len, share, 0.0);
                            let c = ordinal(intensity_of(&d), k);
                            (d, c)
                        }
                        TaskId::VOc => {
                            let d = draw_tokens(&mut rng, len, share * 0.8, (1.0 - share) * 0.8);
                            let c = ordinal(valence_of(&d), k);
                            (d, c)
                        }
                        _ => {
                            let d = draw_tokens(&mut rng, len, share * 0.6, (1.0 - share) * 0.6);
                            let c = match d.pos.cmp(&d.neg) {
                                std::cmp::Ordering::Less => 0,
                                std::cmp::Ordering::Equal => 1,
                                std::cmp::Ordering::Greater => 2,
                            };
                            (d, c)
                        }
                    };
                    if class == want {
                        break (d.words, Target::Class(class));
                    }
                }
            }
            TaskId::Ec => {
                let len = rng.random_range(3..=8);
                let mut words = draw_tokens(&mut rng, len, 0.0, 0.0).words;
                let mut labels = vec![false; EC_EMOTIONS.len()];
                for _ in 0..rng.random_range(0..=3) {
                    let l = rng.random_range(0..EC_EMOTIONS.len());
                    labels[l] = true;
                    let at = rng.random_range(0..=words.len());
                    words.insert(at, emotion_word(l, rng.random_range(0..2)));
                }
                (words, Target::Labels(labels))
            }
        };
        examples.push(LabeledExample {
            id: format!("{}-{i:05}", task.name()),
            text: words.join(" "),
            target,
        });
    }
    let dimension = match task {
        TaskId::EiReg | TaskId::EiOc => Some("joy".to_string()),
        TaskId::VReg | TaskId::VOc => Some("valence".to_string()),
        _ => None,
    };
    TaskDataset::new(task, dimension, examples)
}

/// Every word the synthetic tasks can emit.
pub fn synth_task_words() -> Vec<String> {
    let mut out = positive_words();
    out.extend(negative_words());
    out.extend(neutral_words());
    for l in 0..EC_EMOTIONS.len() {
        out.extend((0..2).map(|j| emotion_word(l, j)));
    }
    out
}

/// Embeddings for the synthetic task words: uniform noise in `±0.5`, with
/// coordinate 0 set to +1 for positive words and −1 for negative words and
/// coordinate 1 keyed to the emotion label. Needs `dim ≥ 2`.
pub fn synth_task_embeddings(dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if dim < 2 {
        return Err(Error::invalid("synthetic task embeddings need at least 2 dimensions"));
    }
    let vocab = Vocabulary::from_entries(synth_task_words().into_iter().map(|w| (w, 1)), 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = vec![0.0; vocab.len() * dim];
    for i in 0..vocab.len() {
        if i == PAD_INDEX {
            continue;
        }
        let row = &mut rows[i * dim..(i + 1) * dim];
        for v in row.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let w = vocab.token(i);
        if w.starts_with('p') && w[1..].parse::<u32>().is_ok() {
            row[0] = 1.0;
        } else if w.starts_with('n') && w[1..].parse::<u32>().is_ok() {
            row[0] = -1.0;
        } else if let Some(l) = EC_EMOTIONS.iter().position(|e| w.starts_with(e)) {
            row[1] = -1.0 + 2.0 * l as f64 / (EC_EMOTIONS.len() - 1) as f64;
        }
    }
    EmbeddingMatrix::new(vocab, dim, rows)
}
