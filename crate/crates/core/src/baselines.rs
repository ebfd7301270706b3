//! TF-IDF and NBOW features fed to linear max-margin models.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::embeddings::{EmbeddingMatrix, centroid};
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::lexicon::{AffectiveLexicon, compose_embeddings};
use crate::model::{TaskHead, Target, argmax};
use crate::text::{Token, encode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Bow,
    Nbow,
    NbowAffect,
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bow" => Ok(FeatureKind::Bow),
            "nbow" => Ok(FeatureKind::Nbow),
            "nbow-affect" | "nbow-affective" => Ok(FeatureKind::NbowAffect),
            _ => Err(Error::invalid(format!("unknown baseline {s:?} (expected bow, nbow or nbow-affect)"))),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Bow => "bow",
            FeatureKind::Nbow => "nbow",
            FeatureKind::NbowAffect => "nbow-affect",
        })
    }
}

/// Unigram TF-IDF statistics of a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Tfidf {
    columns: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

impl Tfidf {
    /// `idf = ln((1 + n_docs) / (1 + df)) + 1`.
    pub fn fit<S: AsRef<[Token]>>(corpus: &[S]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            let mut seen: Vec<&str> = doc.as_ref().iter().map(Token::surface).collect();
            seen.sort_unstable();
            seen.dedup();
            for w in seen {
                *df.entry(w.to_string()).or_default() += 1;
            }
        }
        let n = corpus.len() as f64;
        let idf = df.values().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        let columns = df.into_keys().enumerate().map(|(i, w)| (w, i)).collect();
        Tfidf { columns, idf }
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    pub fn idf(&self, word: &str) -> Option<f64> {
        self.columns.get(word).map(|&c| self.idf[c])
    }

    /// Raw counts times idf, L2-normalized. Words unseen in training are
    /// dropped.
    pub fn transform(&self, doc: &[Token]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for t in doc {
            if let Some(&c) = self.columns.get(t.surface()) {
                v[c] += self.idf[c];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }

    fn to_parts(&self) -> (Vec<(String, u64)>, Tensor) {
        let tokens = self.columns.keys().map(|w| (w.clone(), 0)).collect();
        (tokens, Tensor::vector(self.idf.clone()))
    }

    fn from_parts(tokens: &[(String, u64)], idf: &Tensor) -> Result<Self> {
        if tokens.len() != idf.len() {
            return Err(Error::invalid("tf-idf vocabulary and idf lengths differ"));
        }
        let columns = tokens.iter().enumerate().map(|(i, (w, _))| (w.clone(), i)).collect();
        Ok(Tfidf {
            columns,
            idf: idf.data().to_vec(),
        })
    }
}

pub fn tfidf_features<S: AsRef<[Token]>>(corpus: &[S], model: &Tfidf) -> Vec<Vec<f64>> {
    corpus.iter().map(|d| model.transform(d.as_ref())).collect()
}

/// Centroid of the word rows, over `D + 10` composed rows when a lexicon is
/// given. All-OOV input gives the zero vector.
pub fn nbow_features(tokens: &[Token], embeddings: &EmbeddingMatrix, lexicon: Option<&AffectiveLexicon>) -> Result<Vec<f64>> {
    match lexicon {
        Some(lex) => Ok(Nbow::new(embeddings, Some(lex))?.features(tokens)),
        None => Ok(centroid(&encode(tokens, embeddings.vocab()), embeddings).vector),
    }
}

/// Reusable NBOW featurizer; composes the affective rows once.
#[derive(Debug, Clone)]
pub struct Nbow {
    rows: EmbeddingMatrix,
}

impl Nbow {
    pub fn new(embeddings: &EmbeddingMatrix, lexicon: Option<&AffectiveLexicon>) -> Result<Self> {
        let rows = match lexicon {
            Some(lex) => compose_embeddings(embeddings, lex)?,
            None => embeddings.clone(),
        };
        Ok(Nbow { rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.dim()
    }

    pub fn features(&self, tokens: &[Token]) -> Vec<f64> {
        centroid(&encode(tokens, self.rows.vocab()), &self.rows).vector
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
    /// Initial step size; halved whenever an epoch would raise the
    /// objective.
    pub step: f64,
    /// Width of the insensitive tube for regression.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 0.6,
            epochs: 200,
            step: 0.1,
            epsilon: 0.1,
            seed: 0,
        }
    }
}

/// Training labels for [`train_linear_svm`].
#[derive(Debug, Clone, PartialEq)]
pub enum SvmTargets {
    Classes { labels: Vec<usize>, k: usize },
    Multilabel(Vec<Vec<bool>>),
    Scores(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Loss {
    Hinge,
    EpsInsensitive(f64),
}

/// One linear scorer `w·x + b`.
#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: Vec<f64>,
    b: f64,
}

impl Linear {
    fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b
    }
}

/// `0.5 ||w||² + C Σ loss_i`.
fn objective(m: &Linear, x: &[Vec<f64>], y: &[f64], c: f64, loss: Loss) -> f64 {
    let reg = 0.5 * m.w.iter().map(|v| v * v).sum::<f64>();
    let data: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| match loss {
            Loss::Hinge => (1.0 - yi * m.score(xi)).max(0.0),
            Loss::EpsInsensitive(eps) => ((yi - m.score(xi)).abs() - eps).max(0.0),
        })
        .sum();
    reg + c * data
}

/// Shuffled per-example subgradient passes; a pass is kept only if it does
/// not raise the objective, otherwise it is undone and the step halved.
/// Returns the model and the objective after every epoch.
fn fit_binary(x: &[Vec<f64>], y: &[f64], loss: Loss, cfg: &SvmConfig, seed: u64) -> (Linear, Vec<f64>) {
    let dim = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    let mut model = Linear { w: vec![0.0; dim], b: 0.0 };
    let mut current = objective(&model, x, y, cfg.c, loss);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = cfg.step;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut cand = model.clone();
        for &i in &order {
            let s = cand.score(&x[i]);
            let g = match loss {
                Loss::Hinge if y[i] * s < 1.0 => -y[i],
                Loss::EpsInsensitive(eps) if (y[i] - s).abs() > eps => (s - y[i]).signum(),
                _ => 0.0,
            };
            for (w, xv) in cand.w.iter_mut().zip(&x[i]) {
                *w -= step * (*w / n + cfg.c * g * xv);
            }
            cand.b -= step * cfg.c * g;
        }
        let obj = objective(&cand, x, y, cfg.c, loss);
        if obj <= current {
            model = cand;
            current = obj;
        } else {
            step *= 0.5;
        }
        trace.push(current);
    }
    (model, trace)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SvmKind {
    /// One-vs-rest over `k` classes.
    Classifier(usize),
    Multilabel(usize),
    Regressor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub kind: SvmKind,
    pub dim: usize,
    scorers: Vec<Linear>,
    /// Objective after each epoch, per scorer.
    pub objective_trace: Vec<Vec<f64>>,
}

fn check_matrix(x: &[Vec<f64>]) -> Result<usize> {
    let dim = x.first().map(Vec::len).ok_or_else(|| Error::invalid("no training examples"))?;
    if let Some(i) = x.iter().position(|r| r.len() != dim) {
        return Err(Error::invalid(format!("feature vector {i} has {} entries, expected {dim}", x[i].len())));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    Ok(dim)
}

pub fn train_linear_svm(x: &[Vec<f64>], y: &SvmTargets, cfg: &SvmConfig) -> Result<LinearSvm> {
    let dim = check_matrix(x)?;
    if !(cfg.c >= 0.0 && cfg.c.is_finite()) || !(cfg.step > 0.0) {
        return Err(Error::invalid("C must be nonnegative and the step positive"));
    }
    let sign = |b: bool| if b { 1.0 } else { -1.0 };
    let (kind, problems): (SvmKind, Vec<(Vec<f64>, Loss)>) = match y {
        SvmTargets::Classes { labels, k } => {
            if labels.len() != x.len() {
                return Err(Error::invalid("labels and features differ in length"));
            }
            if let Some(l) = labels.iter().find(|&&l| l >= *k) {
                return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
            }
            let mut distinct = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 {
                return Err(Error::invalid("classifier needs at least 2 distinct classes"));
            }
            let probs = (0..*k)
                .map(|c| (labels.iter().map(|&l| sign(l == c)).collect(), Loss::Hinge))
                .collect();
            (SvmKind::Classifier(*k), probs)
        }
        SvmTargets::Multilabel(sets) => {
            if sets.len() != x.len() {
                return Err(Error::invalid("labels and features differ in length"));
            }
            let m = sets[0].len();
            if sets.iter().any(|s| s.len() != m) {
                return Err(Error::invalid("label sets differ in width"));
            }
            let probs = (0..m)
                .map(|j| (sets.iter().map(|s| sign(s[j])).collect(), Loss::Hinge))
                .collect();
            (SvmKind::Multilabel(m), probs)
        }
        SvmTargets::Scores(s) => {
            if s.len() != x.len() {
                return Err(Error::invalid("scores and features differ in length"));
            }
            if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("regression scores must lie in [0, 1]"));
            }
            (SvmKind::Regressor, vec![(s.clone(), Loss::EpsInsensitive(cfg.epsilon))])
        }
    };
    let mut scorers = Vec::with_capacity(problems.len());
    let mut trace = Vec::with_capacity(problems.len());
    for (j, (targets, loss)) in problems.iter().enumerate() {
        let (m, t) = fit_binary(x, targets, *loss, cfg, cfg.seed.wrapping_add(j as u64));
        scorers.push(m);
        trace.push(t);
    }
    Ok(LinearSvm {
        kind,
        dim,
        scorers,
        objective_trace: trace,
    })
}

impl LinearSvm {
    pub fn decision_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!("feature vector has {} entries, model expects {}", x.len(), self.dim)));
        }
        Ok(self.scorers.iter().map(|s| s.score(x)).collect())
    }

    /// Argmax class (ties to the lowest index), labels with positive score,
    /// or the regression score clipped to `[0, 1]`.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<Target>> {
        x.iter()
            .map(|row| {
                let d = self.decision_values(row)?;
                Ok(match self.kind {
                    SvmKind::Classifier(_) => Target::Class(argmax(&d)),
                    SvmKind::Multilabel(_) => Target::Labels(d.iter().map(|v| *v > 0.0).collect()),
                    SvmKind::Regressor => Target::Scalar(d[0].clamp(0.0, 1.0)),
                })
            })
            .collect()
    }

    pub fn weights(&self, scorer: usize) -> (&[f64], f64) {
        (&self.scorers[scorer].w, self.scorers[scorer].b)
    }
}

pub fn targets_for(head: TaskHead, targets: &[Target]) -> Result<SvmTargets> {
    let bad = |t: &Target| Error::invalid(format!("target {t:?} does not fit a {head} task"));
    match head {
        TaskHead::Regression => Ok(SvmTargets::Scores(
            targets
                .iter()
                .map(|t| if let Target::Scalar(v) = t { Ok(*v) } else { Err(bad(t)) })
                .collect::<Result<_>>()?,
        )),
        TaskHead::Ordinal(k) => Ok(SvmTargets::Classes {
            labels: targets
                .iter()
                .map(|t| if let Target::Class(c) = t { Ok(*c) } else { Err(bad(t)) })
                .collect::<Result<_>>()?,
            k,
        }),
        TaskHead::Multilabel(_) => Ok(SvmTargets::Multilabel(
            targets
                .iter()
                .map(|t| if let Target::Labels(l) = t { Ok(l.clone()) } else { Err(bad(t)) })
                .collect::<Result<_>>()?,
        )),
    }
}

/// A trained baseline: its features plus the linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub features: FeatureKind,
    pub tfidf: Option<Tfidf>,
    pub svm: LinearSvm,
}

impl BaselineModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new("baseline");
        c.set("features", self.features);
        let (kind, width) = match self.svm.kind {
            SvmKind::Classifier(k) => ("classifier", k),
            SvmKind::Multilabel(m) => ("multilabel", m),
            SvmKind::Regressor => ("regressor", 1),
        };
        c.set("svm", kind);
        c.set("width", width);
        c.set("dim", self.svm.dim);
        if let Some(t) = &self.tfidf {
            let (tokens, idf) = t.to_parts();
            c.tokens = tokens;
            c.tensors.push(("idf".into(), idf));
        }
        let w: Vec<f64> = self.svm.scorers.iter().flat_map(|s| s.w.iter().copied()).collect();
        let b: Vec<f64> = self.svm.scorers.iter().map(|s| s.b).collect();
        c.tensors.push(("w".into(), Tensor::matrix(self.svm.scorers.len(), self.svm.dim, w)?));
        c.tensors.push(("b".into(), Tensor::vector(b)));
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != "baseline" {
            return Err(Error::invalid(format!("{}: expected a baseline model, found {:?}", path.display(), c.kind)));
        }
        let features: FeatureKind = c.require("features")?;
        let width: usize = c.require("width")?;
        let dim: usize = c.require("dim")?;
        let kind = match c.require::<String>("svm")?.as_str() {
            "classifier" => SvmKind::Classifier(width),
            "multilabel" => SvmKind::Multilabel(width),
            "regressor" => SvmKind::Regressor,
            other => return Err(Error::invalid(format!("unknown svm kind {other:?}"))),
        };
        let w = c.tensor("w").ok_or_else(|| Error::invalid("baseline model has no weights"))?;
        let b = c.tensor("b").ok_or_else(|| Error::invalid("baseline model has no biases"))?;
        if w.shape() != [width, dim] || b.len() != width {
            return Err(Error::invalid("baseline weight shapes do not match the header"));
        }
        let scorers = (0..width)
            .map(|j| Linear {
                w: w.data()[j * dim..(j + 1) * dim].to_vec(),
                b: b.data()[j],
            })
            .collect();
        let tfidf = match c.tensor("idf") {
            Some(idf) => Some(Tfidf::from_parts(&c.tokens, idf)?),
            None => None,
        };
        Ok(BaselineModel {
            features,
            tfidf,
            svm: LinearSvm {
                kind,
                dim,
                scorers,
                objective_trace: Vec::new(),
            },
        })
    }
}
