//! Affective lexicon expansion.
//!
//! A word's rating along one affect dimension is modelled as
//! `alpha_0 + sum_i alpha_i * rating(seed_i) * S(seed_i, word)`, where `S`
//! is the cosine between PPMI-weighted co-occurrence rows. The coefficients
//! are fit by ridge least squares over every annotated word in the corpus
//! vocabulary, and predictions are clamped to `[-1, 1]`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::text::{encode, Token, Vocabulary, PAD_INDEX, UNK_INDEX};

pub const NUM_DIMENSIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AffectDimension {
    Valence,
    Dominance,
    Arousal,
    Pleasantness,
    Anger,
    Sadness,
    Fear,
    Disgust,
    Concreteness,
    Familiarity,
}

impl AffectDimension {
    /// Canonical order used by every norm vector and file.
    pub const ALL: [AffectDimension; NUM_DIMENSIONS] = [
        AffectDimension::Valence,
        AffectDimension::Dominance,
        AffectDimension::Arousal,
        AffectDimension::Pleasantness,
        AffectDimension::Anger,
        AffectDimension::Sadness,
        AffectDimension::Fear,
        AffectDimension::Disgust,
        AffectDimension::Concreteness,
        AffectDimension::Familiarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AffectDimension::Valence => "valence",
            AffectDimension::Dominance => "dominance",
            AffectDimension::Arousal => "arousal",
            AffectDimension::Pleasantness => "pleasantness",
            AffectDimension::Anger => "anger",
            AffectDimension::Sadness => "sadness",
            AffectDimension::Fear => "fear",
            AffectDimension::Disgust => "disgust",
            AffectDimension::Concreteness => "concreteness",
            AffectDimension::Familiarity => "familiarity",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AffectDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AffectDimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AffectDimension::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown affect dimension {s:?}")))
    }
}

/// Manually annotated ratings for one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedLexicon {
    dimension: AffectDimension,
    ratings: BTreeMap<String, f64>,
}

impl SeedLexicon {
    pub fn new(dimension: AffectDimension, ratings: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((w, r)) = ratings.iter().find(|(_, r)| !(-1.0..=1.0).contains(*r)) {
            return Err(Error::invalid(format!("{dimension} rating {r} for {w:?} is outside [-1, 1]")));
        }
        if ratings.len() < 2 {
            return Err(Error::invalid(format!("{dimension} lexicon needs at least 2 annotated words")));
        }
        Ok(SeedLexicon { dimension, ratings })
    }

    pub fn dimension(&self) -> AffectDimension {
        self.dimension
    }

    pub fn ratings(&self) -> &BTreeMap<String, f64> {
        &self.ratings
    }

    pub fn rating(&self, word: &str) -> Option<f64> {
        self.ratings.get(word).copied()
    }

    /// Reads `word<TAB>rating` lines.
    pub fn load(path: &Path, dimension: AffectDimension) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let what = path.display().to_string();
        let mut ratings = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (word, rating) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&what, i + 1, "expected word<TAB>rating"))?;
            let rating: f64 = rating
                .trim()
                .parse()
                .map_err(|_| Error::parse(&what, i + 1, format!("bad rating {rating:?}")))?;
            if !(-1.0..=1.0).contains(&rating) {
                return Err(Error::parse(&what, i + 1, format!("rating {rating} outside [-1, 1]")));
            }
            if ratings.insert(word.to_string(), rating).is_some() {
                return Err(Error::parse(&what, i + 1, format!("duplicate word {word:?}")));
            }
        }
        SeedLexicon::new(dimension, ratings).map_err(|e| Error::parse(&what, 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (w, r) in &self.ratings {
            out.push_str(&format!("{w}\t{r}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads every `<dimension>.tsv` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Vec<SeedLexicon>> {
        let mut out = Vec::new();
        for dim in AffectDimension::ALL {
            let path = dir.join(format!("{}.tsv", dim.name()));
            if path.exists() {
                out.push(SeedLexicon::load(&path, dim)?);
            }
        }
        Ok(out)
    }
}

/// PPMI-weighted word × context-word matrix, one sparse row per vocabulary
/// entry.
#[derive(Debug, Clone)]
pub struct ContextModel {
    vocab: Vocabulary,
    rows: Vec<Vec<(usize, f64)>>,
    norms: Vec<f64>,
    window: usize,
}

/// `max(0, ln(c(w,f) T / (c(w) c(f))))` for a dense count matrix with words
/// as rows and features as columns.
pub fn ppmi(counts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n_features = counts.first().map_or(0, Vec::len);
    let row_sums: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
    let mut col_sums = vec![0.0; n_features];
    for row in counts {
        for (acc, c) in col_sums.iter_mut().zip(row) {
            *acc += c;
        }
    }
    let total: f64 = row_sums.iter().sum();
    counts
        .iter()
        .zip(&row_sums)
        .map(|(row, rs)| {
            row.iter()
                .zip(&col_sums)
                .map(|(&c, cs)| if c > 0.0 { (c * total / (rs * cs)).ln().max(0.0) } else { 0.0 })
                .collect()
        })
        .collect()
}

impl ContextModel {
    /// Wraps precomputed (nonnegative) feature rows, one per vocabulary entry.
    pub fn from_rows(vocab: Vocabulary, rows: Vec<Vec<f64>>, window: usize) -> Result<Self> {
        if rows.len() != vocab.len() {
            return Err(Error::invalid(format!("{} feature rows for {} words", rows.len(), vocab.len())));
        }
        let rows: Vec<Vec<(usize, f64)>> = rows
            .into_iter()
            .map(|r| r.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect())
            .collect();
        if rows.iter().flatten().any(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("context features must be finite and nonnegative"));
        }
        let norms = rows
            .iter()
            .map(|r| r.iter().map(|(_, v)| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(ContextModel {
            vocab,
            rows,
            norms,
            window,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn row(&self, index: usize) -> &[(usize, f64)] {
        &self.rows[index]
    }

    /// Cosine of two feature rows; 0 when either row is empty.
    pub fn similarity_by_index(&self, a: usize, b: usize) -> f64 {
        let (na, nb) = (self.norms[a], self.norms[b]);
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let (ra, rb) = (&self.rows[a], &self.rows[b]);
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < ra.len() && j < rb.len() {
            match ra[i].0.cmp(&rb[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += ra[i].1 * rb[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        (dot / (na * nb)).clamp(0.0, 1.0)
    }

    fn index_of(&self, word: &str) -> Result<usize> {
        self.vocab
            .get(word)
            .ok_or_else(|| Error::invalid(format!("word {word:?} is not in the context vocabulary")))
    }

    pub fn semantic_similarity(&self, w1: &str, w2: &str) -> Result<f64> {
        Ok(self.similarity_by_index(self.index_of(w1)?, self.index_of(w2)?))
    }
}

/// Counts co-occurrences within a symmetric `window` and applies PPMI.
/// `<unk>` and `<pad>` occurrences are ignored.
pub fn build_context_model(corpus: &[Vec<Token>], vocab: &Vocabulary, window: usize) -> Result<ContextModel> {
    if window == 0 {
        return Err(Error::invalid("context window must be at least 1"));
    }
    let mut counts: Vec<HashMap<usize, f64>> = vec![HashMap::new(); vocab.len()];
    for doc in corpus {
        let ids = encode(doc, vocab);
        for (pos, &w) in ids.iter().enumerate() {
            if w == UNK_INDEX || w == PAD_INDEX {
                continue;
            }
            let lo = pos.saturating_sub(window);
            let hi = (pos + window + 1).min(ids.len());
            for (q, &f) in ids.iter().enumerate().take(hi).skip(lo) {
                if q != pos && f != UNK_INDEX && f != PAD_INDEX {
                    *counts[w].entry(f).or_default() += 1.0;
                }
            }
        }
    }
    let row_sums: Vec<f64> = counts.iter().map(|r| r.values().sum()).collect();
    // symmetric windows make column marginals equal to row marginals
    let total: f64 = row_sums.iter().sum();
    let rows: Vec<Vec<(usize, f64)>> = counts
        .into_iter()
        .enumerate()
        .map(|(w, row)| {
            let mut entries: Vec<(usize, f64)> = row
                .into_iter()
                .map(|(f, c)| (f, (c * total / (row_sums[w] * row_sums[f])).ln().max(0.0)))
                .filter(|(_, v)| *v > 0.0)
                .collect();
            entries.sort_by_key(|(f, _)| *f);
            entries
        })
        .collect();
    let norms = rows
        .iter()
        .map(|r| r.iter().map(|(_, v)| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(ContextModel {
        vocab: vocab.clone(),
        rows,
        norms,
        window,
    })
}

/// The `n` annotated in-vocabulary words with the largest absolute rating;
/// ties are broken lexicographically.
pub fn select_seeds(lexicon: &SeedLexicon, ctx: &ContextModel, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::invalid("seed count must be at least 1"));
    }
    let mut usable: Vec<(&String, f64)> = lexicon
        .ratings
        .iter()
        .filter(|(w, _)| ctx.vocab.get(w).is_some())
        .map(|(w, r)| (w, *r))
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid(format!("no usable seeds for {}", lexicon.dimension)));
    }
    usable.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(b.0)));
    Ok(usable.into_iter().take(n).map(|(w, _)| w.clone()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffectModel {
    pub dimension: AffectDimension,
    pub seeds: Vec<String>,
    pub seed_ratings: Vec<f64>,
    pub alpha0: f64,
    pub alphas: Vec<f64>,
    pub ridge: f64,
}

impl AffectModel {
    fn raw_by_index(&self, ctx: &ContextModel, seed_ids: &[usize], w: usize) -> f64 {
        self.alpha0
            + self
                .alphas
                .iter()
                .zip(&self.seed_ratings)
                .zip(seed_ids)
                .map(|((a, r), &t)| a * r * ctx.similarity_by_index(t, w))
                .sum::<f64>()
    }

    fn seed_ids(&self, ctx: &ContextModel) -> Result<Vec<usize>> {
        self.seeds.iter().map(|s| ctx.index_of(s)).collect()
    }

    /// Unclamped model output for `word`.
    pub fn predict_raw(&self, word: &str, ctx: &ContextModel) -> Result<f64> {
        let w = ctx.index_of(word)?;
        Ok(self.raw_by_index(ctx, &self.seed_ids(ctx)?, w))
    }
}

/// Design matrix row for word `w`: `[1, rating(t_1) S(t_1, w), ...]`.
fn design_row(ctx: &ContextModel, seed_ids: &[usize], seed_ratings: &[f64], w: usize) -> Vec<f64> {
    std::iter::once(1.0)
        .chain(seed_ids.iter().zip(seed_ratings).map(|(&t, r)| r * ctx.similarity_by_index(t, w)))
        .collect()
}

/// Ridge-regularized least squares for the intercept and seed weights over
/// all annotated in-vocabulary words. The intercept is not penalized.
pub fn fit_affect_model(lexicon: &SeedLexicon, seeds: &[String], ctx: &ContextModel, ridge: f64) -> Result<AffectModel> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::invalid("ridge must be a finite nonnegative number"));
    }
    let seed_ids: Vec<usize> = seeds.iter().map(|s| ctx.index_of(s)).collect::<Result<_>>()?;
    let seed_ratings: Vec<f64> = seeds
        .iter()
        .map(|s| {
            lexicon
                .rating(s)
                .ok_or_else(|| Error::invalid(format!("seed {s:?} has no {} rating", lexicon.dimension)))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (word, rating) in &lexicon.ratings {
        if let Some(w) = ctx.vocab.get(word) {
            rows.push(design_row(ctx, &seed_ids, &seed_ratings, w));
            targets.push(*rating);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("no annotated {} words in the vocabulary", lexicon.dimension)));
    }
    let cols = seeds.len() + 1;
    if ridge > 0.0 {
        let s = ridge.sqrt();
        for j in 1..cols {
            let mut r = vec![0.0; cols];
            r[j] = s;
            rows.push(r);
            targets.push(0.0);
        }
    }
    let coef = least_squares_qr(&rows, &targets).map_err(|_| {
        Error::Numerical(format!(
            "{} regression is singular; use a ridge greater than 0",
            lexicon.dimension
        ))
    })?;
    Ok(AffectModel {
        dimension: lexicon.dimension,
        seeds: seeds.to_vec(),
        seed_ratings,
        alpha0: coef[0],
        alphas: coef[1..].to_vec(),
        ridge,
    })
}

/// Minimizes `||A x - b||` by Householder QR. Fails on rank deficiency.
fn least_squares_qr(a: &[Vec<f64>], b: &[f64]) -> std::result::Result<Vec<f64>, ()> {
    let m = a.len();
    let n = a[0].len();
    if m < n {
        return Err(());
    }
    let mut r: Vec<Vec<f64>> = a.to_vec();
    let mut y = b.to_vec();
    let scale = a.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for k in 0..n {
        let norm = (k..m).map(|i| r[i][k] * r[i][k]).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale {
            return Err(());
        }
        let alpha = if r[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| r[i][k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..n {
                let proj: f64 = (k..m).map(|i| v[i - k] * r[i][j]).sum::<f64>() * 2.0 / vnorm2;
                for i in k..m {
                    r[i][j] -= proj * v[i - k];
                }
            }
            let proj: f64 = (k..m).map(|i| v[i - k] * y[i]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..m {
                y[i] -= proj * v[i - k];
            }
        }
        if r[k][k].abs() <= 1e-10 * scale {
            return Err(());
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = ((k + 1)..n).map(|j| r[k][j] * x[j]).sum();
        x[k] = (y[k] - s) / r[k][k];
    }
    Ok(x)
}

/// Model prediction for `word`, clamped to `[-1, 1]`.
pub fn predict_norm(word: &str, model: &AffectModel, ctx: &ContextModel) -> Result<f64> {
    Ok(model.predict_raw(word, ctx)?.clamp(-1.0, 1.0))
}

/// Ten-dimensional norms per word, in canonical dimension order.
#[derive(Debug, Clone, PartialEq)]
pub struct AffectiveLexicon {
    words: Vec<String>,
    norms: Vec<[f64; NUM_DIMENSIONS]>,
    index: HashMap<String, usize>,
}

impl AffectiveLexicon {
    pub fn new(entries: Vec<(String, [f64; NUM_DIMENSIONS])>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut words = Vec::with_capacity(entries.len());
        let mut norms = Vec::with_capacity(entries.len());
        for (w, n) in entries {
            if n.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("norms of {w:?} leave [-1, 1]")));
            }
            if index.insert(w.clone(), words.len()).is_some() {
                return Err(Error::invalid(format!("duplicate word {w:?}")));
            }
            words.push(w);
            norms.push(n);
        }
        Ok(AffectiveLexicon { words, norms, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64; NUM_DIMENSIONS]> {
        self.index.get(word).map(|&i| &self.norms[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64; NUM_DIMENSIONS])> {
        self.words.iter().map(String::as_str).zip(&self.norms)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<&str> = AffectDimension::ALL.iter().map(|d| d.name()).collect();
        writeln!(w, "word\t{}", header.join("\t"))?;
        for (word, norms) in self.iter() {
            w.write_all(word.as_bytes())?;
            for v in norms {
                write!(w, "\t{v}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_tsv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let what = path.display().to_string();
        let mut lines = BufReader::new(file).lines();
        let expected: Vec<&str> = std::iter::once("word")
            .chain(AffectDimension::ALL.iter().map(|d| d.name()))
            .collect();
        match lines.next() {
            Some(h) => {
                let h = h.map_err(|e| Error::io(path, e))?;
                if h.trim_end_matches('\r').split('\t').collect::<Vec<_>>() != expected {
                    return Err(Error::parse(&what, 1, "header must name word and the ten dimensions"));
                }
            }
            None => return Err(Error::parse(&what, 1, "missing header")),
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != NUM_DIMENSIONS + 1 {
                return Err(Error::parse(&what, lineno, format!("expected 11 columns, found {}", fields.len())));
            }
            let mut norms = [0.0; NUM_DIMENSIONS];
            for (n, f) in norms.iter_mut().zip(&fields[1..]) {
                *n = f
                    .parse()
                    .map_err(|_| Error::parse(&what, lineno, format!("bad value {f:?}")))?;
                if !(-1.0..=1.0).contains(n) {
                    return Err(Error::parse(&what, lineno, format!("value {n} outside [-1, 1]")));
                }
            }
            entries.push((fields[0].to_string(), norms));
        }
        AffectiveLexicon::new(entries).map_err(|e| Error::parse(&what, 0, e.to_string()))
    }
}

/// Predicts all ten norms for every vocabulary word known to `ctx`, in
/// vocabulary order. `<unk>`, `<pad>` and words never seen in the context
/// corpus get no entry.
pub fn expand_lexicon(vocab: &Vocabulary, models: &[AffectModel], ctx: &ContextModel) -> Result<AffectiveLexicon> {
    let mut ordered: Vec<&AffectModel> = Vec::with_capacity(NUM_DIMENSIONS);
    for dim in AffectDimension::ALL {
        let model = models
            .iter()
            .find(|m| m.dimension == dim)
            .ok_or_else(|| Error::invalid(format!("missing model for dimension {dim}")))?;
        ordered.push(model);
    }
    let seed_ids: Vec<Vec<usize>> = ordered.iter().map(|m| m.seed_ids(ctx)).collect::<Result<_>>()?;
    let mut entries = Vec::new();
    for (i, word) in vocab.tokens().enumerate() {
        if i == UNK_INDEX || i == PAD_INDEX {
            continue;
        }
        let Some(w) = ctx.vocab.get(word) else { continue };
        if ctx.vocab.count(w) == 0 {
            continue;
        }
        let mut norms = [0.0; NUM_DIMENSIONS];
        for (d, model) in ordered.iter().enumerate() {
            norms[d] = model.raw_by_index(ctx, &seed_ids[d], w).clamp(-1.0, 1.0);
        }
        entries.push((word.to_string(), norms));
    }
    AffectiveLexicon::new(entries)
}

/// Appends the ten norms to every embedding row; words without norms get
/// zeros.
pub fn compose_embeddings(embeddings: &EmbeddingMatrix, lexicon: &AffectiveLexicon) -> Result<EmbeddingMatrix> {
    let dim = embeddings.dim() + NUM_DIMENSIONS;
    let mut rows = Vec::with_capacity(embeddings.len() * dim);
    for (i, word) in embeddings.vocab().tokens().enumerate() {
        rows.extend_from_slice(embeddings.row(i));
        match lexicon.get(word) {
            Some(n) if i != PAD_INDEX => rows.extend_from_slice(n),
            _ => rows.extend_from_slice(&[0.0; NUM_DIMENSIONS]),
        }
    }
    EmbeddingMatrix::new(embeddings.vocab().clone(), dim, rows)
}
