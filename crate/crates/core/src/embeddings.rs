//! Skip-gram with negative sampling, the word-vector text format, and the
//! vector helpers (cosine, centroid) shared by the other modules.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::sigmoid;
use crate::text::{build_vocab, encode, Token, Vocabulary, PAD_INDEX, UNK_INDEX};

/// One row per vocabulary entry. The `<pad>` row is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    vocab: Vocabulary,
    dim: usize,
    rows: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(vocab: Vocabulary, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if rows.len() != vocab.len() * dim {
            return Err(Error::invalid(format!(
                "{} values do not form {} rows of dimension {dim}",
                rows.len(),
                vocab.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        if rows[PAD_INDEX * dim..(PAD_INDEX + 1) * dim].iter().any(|v| *v != 0.0) {
            return Err(Error::invalid("the <pad> row must be zero"));
        }
        Ok(EmbeddingMatrix { vocab, dim, rows })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.rows[index * self.dim..(index + 1) * self.dim]
    }

    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.vocab.get(token).map(|i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.vocab.len(), self.dim)?;
        for (i, token) in self.vocab.tokens().enumerate() {
            w.write_all(token.as_bytes())?;
            for v in self.row(i) {
                write!(w, " {}", format_sig8(*v))?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_text(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parses the `"<count> <dim>"` + `"word v1 .. vD"` format. `what` names
    /// the source in error messages.
    pub fn read_text<R: Read>(reader: R, what: &str) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = match lines.next() {
            Some(line) => line.map_err(|e| Error::io(what, e))?,
            None => return Err(Error::parse(what, 1, "missing header")),
        };
        let header = header.trim_end_matches('\r');
        let fields: Vec<&str> = header.split(' ').collect();
        let (count, dim) = match fields[..] {
            [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
                (Ok(c), Ok(d)) if d > 0 => (c, d),
                _ => return Err(Error::parse(what, 1, format!("malformed header {header:?}"))),
            },
            _ => return Err(Error::parse(what, 1, format!("malformed header {header:?}"))),
        };

        let mut words: Vec<(String, Vec<f64>)> = Vec::with_capacity(count);
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(what, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let word = parts.next().unwrap_or_default().to_string();
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|_| Error::parse(what, lineno, format!("bad number {p:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(Error::parse(what, lineno, format!("expected {dim} values, found {}", values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(what, lineno, "non-finite value"));
            }
            if !seen.insert(word.clone()) {
                return Err(Error::parse(what, lineno, format!("duplicate word {word:?}")));
            }
            words.push((word, values));
        }
        if words.len() != count {
            return Err(Error::parse(what, 1, format!("header announces {count} rows, found {}", words.len())));
        }

        let vocab = Vocabulary::from_entries(words.iter().map(|(w, _)| (w.clone(), 0)), 1)
            .map_err(|e| Error::parse(what, 0, e.to_string()))?;
        let mut rows = vec![0.0; vocab.len() * dim];
        for (word, values) in words {
            let i = vocab.get(&word).expect("word was just inserted");
            if i == PAD_INDEX {
                continue;
            }
            rows[i * dim..(i + 1) * dim].copy_from_slice(&values);
        }
        EmbeddingMatrix::new(vocab, dim, rows)
    }

    pub fn load_text(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        EmbeddingMatrix::read_text(file, &path.display().to_string())
    }
}

/// Eight significant digits in scientific notation.
fn format_sig8(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.7e}")
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("cosine of vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numerical("undefined cosine: zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroid {
    pub vector: Vec<f64>,
    /// No usable row contributed; `vector` is zero.
    pub all_oov: bool,
}

/// Mean of the rows of in-vocabulary indices, skipping `<unk>`, `<pad>` and
/// out-of-range indices.
pub fn centroid(indices: &[usize], embeddings: &EmbeddingMatrix) -> Centroid {
    let mut vector = vec![0.0; embeddings.dim()];
    let mut n = 0usize;
    for &i in indices {
        if i == UNK_INDEX || i == PAD_INDEX || i >= embeddings.len() {
            continue;
        }
        n += 1;
        // running mean; exact when the same row repeats
        for (acc, v) in vector.iter_mut().zip(embeddings.row(i)) {
            *acc += (v - *acc) / n as f64;
        }
    }
    Centroid { vector, all_oov: n == 0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub min_count: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 300,
            window: 5,
            negatives: 5,
            min_count: 20,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

impl SgnsConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.negatives == 0 || self.min_count == 0 || self.epochs == 0 {
            return Err(Error::invalid("skip-gram dim, window, negatives, min_count and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("skip-gram learning rate must be positive"));
        }
        Ok(())
    }
}

/// Input (published) and output vectors of a trained skip-gram model.
#[derive(Debug, Clone)]
pub struct SgnsModel {
    pub input: EmbeddingMatrix,
    output: Vec<f64>,
    noise: NoiseDistribution,
    negatives: usize,
    window: usize,
}

impl SgnsModel {
    /// Expected negative-sampling loss per (center, context) pair, with the
    /// sampled negatives replaced by their expectation under the noise
    /// distribution.
    pub fn expected_loss(&self, corpus: &[Vec<Token>]) -> f64 {
        let dim = self.input.dim();
        let sentences = encode_trainable(corpus, self.input.vocab(), &self.noise);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for_each_pair(&sentences, self.window, |c, o| {
            let v = self.input.row(c);
            let u = |i: usize| &self.output[i * dim..(i + 1) * dim];
            total -= log_sigmoid(dot(u(o), v));
            for (n, p) in self.noise.probabilities() {
                total -= self.negatives as f64 * p * log_sigmoid(-dot(u(n), v));
            }
            pairs += 1;
        });
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

/// Unigram counts raised to 0.75, normalized, over the trainable indices.
#[derive(Debug, Clone)]
struct NoiseDistribution {
    indices: Vec<usize>,
    cumulative: Vec<f64>,
    trainable: Vec<bool>,
}

impl NoiseDistribution {
    fn new(vocab: &Vocabulary) -> Self {
        let mut trainable = vec![false; vocab.len()];
        let mut indices = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for i in 0..vocab.len() {
            if i == UNK_INDEX || i == PAD_INDEX || vocab.count(i) < vocab.min_count() {
                continue;
            }
            trainable[i] = true;
            acc += (vocab.count(i) as f64).powf(0.75);
            indices.push(i);
            cumulative.push(acc);
        }
        cumulative.iter_mut().for_each(|c| *c /= acc);
        NoiseDistribution {
            indices,
            cumulative,
            trainable,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let k = self.cumulative.partition_point(|&c| c <= u).min(self.indices.len() - 1);
        self.indices[k]
    }

    fn probabilities(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let mut prev = 0.0;
        self.indices.iter().zip(&self.cumulative).map(move |(&i, &c)| {
            let p = c - prev;
            prev = c;
            (i, p)
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn encode_trainable(corpus: &[Vec<Token>], vocab: &Vocabulary, noise: &NoiseDistribution) -> Vec<Vec<usize>> {
    corpus
        .iter()
        .map(|doc| encode(doc, vocab).into_iter().filter(|&i| noise.trainable[i]).collect())
        .collect()
}

fn for_each_pair(sentences: &[Vec<usize>], window: usize, mut f: impl FnMut(usize, usize)) {
    for s in sentences {
        for (pos, &center) in s.iter().enumerate() {
            let lo = pos.saturating_sub(window);
            let hi = (pos + window + 1).min(s.len());
            for (ctx_pos, &context) in s.iter().enumerate().take(hi).skip(lo) {
                if ctx_pos != pos {
                    f(center, context);
                }
            }
        }
    }
}

pub fn train_skipgram(corpus: &[Vec<Token>], cfg: &SgnsConfig) -> Result<EmbeddingMatrix> {
    Ok(train_skipgram_with_history(corpus, cfg, false)?.0.input)
}

/// Serial, seed-deterministic SGNS training. When `track_loss` is set the
/// expected loss is recorded before training and after every epoch.
pub fn train_skipgram_with_history(
    corpus: &[Vec<Token>],
    cfg: &SgnsConfig,
    track_loss: bool,
) -> Result<(SgnsModel, Vec<f64>)> {
    cfg.validate()?;
    let vocab = build_vocab(corpus, cfg.min_count)?;
    let noise = NoiseDistribution::new(&vocab);
    if noise.indices.is_empty() {
        return Err(Error::invalid("no trainable tokens"));
    }
    let dim = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input = vec![0.0; vocab.len() * dim];
    for &i in &noise.indices {
        for v in &mut input[i * dim..(i + 1) * dim] {
            *v = (rng.random::<f64>() - 0.5) / dim as f64;
        }
    }
    let mut output = vec![0.0; vocab.len() * dim];
    let sentences = encode_trainable(corpus, &vocab, &noise);

    let mut pairs_per_epoch = 0usize;
    for_each_pair(&sentences, cfg.window, |_, _| pairs_per_epoch += 1);
    let total_steps = (pairs_per_epoch * cfg.epochs).max(1) as f64;

    let mut model = SgnsModel {
        input: EmbeddingMatrix::new(vocab.clone(), dim, input.clone())?,
        output: Vec::new(),
        noise: noise.clone(),
        negatives: cfg.negatives,
        window: cfg.window,
    };
    let mut history = Vec::new();
    let snapshot = |input: &[f64], output: &[f64], model: &mut SgnsModel| {
        model.input.rows.copy_from_slice(input);
        model.output = output.to_vec();
    };
    if track_loss {
        snapshot(&input, &output, &mut model);
        history.push(model.expected_loss(corpus));
    }

    let mut step = 0usize;
    let mut grad_center = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        for_each_pair(&sentences, cfg.window, |center, context| {
            let progress = step as f64 / total_steps;
            let lr = cfg.learning_rate * (1.0 - progress * (1.0 - 1e-4));
            step += 1;
            grad_center.iter_mut().for_each(|g| *g = 0.0);
            let v = center * dim..(center + 1) * dim;
            for k in 0..=cfg.negatives {
                let (target, label) = if k == 0 {
                    (context, 1.0)
                } else {
                    let n = noise.sample(&mut rng);
                    if n == context {
                        continue;
                    }
                    (n, 0.0)
                };
                let u = target * dim..(target + 1) * dim;
                let score = sigmoid(dot(&output[u.clone()], &input[v.clone()]));
                let g = lr * (label - score);
                for ((gc, o), x) in grad_center.iter_mut().zip(&mut output[u]).zip(&input[v.clone()]) {
                    *gc += g * *o;
                    *o += g * x;
                }
            }
            for (x, gc) in input[v].iter_mut().zip(&grad_center) {
                *x += gc;
            }
        });
        if track_loss {
            snapshot(&input, &output, &mut model);
            history.push(model.expected_loss(corpus));
        }
    }
    snapshot(&input, &output, &mut model);
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn toy_matrix() -> EmbeddingMatrix {
        let vocab = build_vocab(&[tokenize("a b b c c c")], 1).unwrap();
        let dim = 3;
        let mut rows = vec![0.0; vocab.len() * dim];
        for (i, v) in rows.iter_mut().enumerate() {
            if i / dim != PAD_INDEX {
                *v = (i as f64 * 0.37).sin();
            }
        }
        EmbeddingMatrix::new(vocab, dim, rows).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn centroid_examples() {
        let e = toy_matrix();
        let a = e.vocab().get("a").unwrap();
        let b = e.vocab().get("b").unwrap();
        let single = centroid(&[a], &e);
        assert_eq!(single.vector, e.row(a));
        assert!(!single.all_oov);
        assert_eq!(centroid(&[a, a, a], &e).vector, e.row(a));
        let pair = centroid(&[a, b], &e);
        for d in 0..e.dim() {
            assert!((pair.vector[d] - (e.row(a)[d] + e.row(b)[d]) / 2.0).abs() < 1e-15);
        }
        let oov = centroid(&[UNK_INDEX, PAD_INDEX], &e);
        assert!(oov.all_oov);
        assert_eq!(oov.vector, vec![0.0; 3]);
        assert!(centroid(&[], &e).all_oov);
    }

    #[test]
    fn text_round_trip() {
        let e = toy_matrix();
        let mut buf = Vec::new();
        e.write_text(&mut buf).unwrap();
        let back = EmbeddingMatrix::read_text(&buf[..], "mem").unwrap();
        assert_eq!(back.vocab().tokens().collect::<Vec<_>>(), e.vocab().tokens().collect::<Vec<_>>());
        for (a, b) in back.as_slice().iter().zip(e.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_header() {
        let err = EmbeddingMatrix::read_text(&b""[..], "e.txt").unwrap_err();
        assert!(err.to_string().contains("missing header"), "{err}");
    }

    #[test]
    fn short_row_names_its_line() {
        let mut text = String::from("2 10\nfoo");
        text.push_str(&" 0.5".repeat(10));
        text.push_str("\nbar");
        text.push_str(&" 0.5".repeat(9));
        text.push('\n');
        let err = EmbeddingMatrix::read_text(text.as_bytes(), "e.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_word_names_its_line() {
        let err = EmbeddingMatrix::read_text(&b"2 1\nx 1\nx 2\n"[..], "e.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(EmbeddingMatrix::read_text(&b"1 2 3\n"[..], "e.txt").is_err());
        assert!(EmbeddingMatrix::read_text(&b"one 2\n"[..], "e.txt").is_err());
    }

    #[test]
    fn foreign_file_gets_specials() {
        let e = EmbeddingMatrix::read_text(&b"2 2\nhappy 1 0\nsad -1 0.5\n"[..], "e.txt").unwrap();
        assert_eq!(e.vocab().get("happy"), Some(5));
        assert_eq!(e.lookup("sad").unwrap(), [-1.0, 0.5]);
        assert_eq!(e.row(PAD_INDEX), [0.0, 0.0]);
    }

    fn small_cfg(seed: u64) -> SgnsConfig {
        SgnsConfig {
            dim: 8,
            window: 2,
            negatives: 3,
            min_count: 2,
            epochs: 3,
            learning_rate: 0.025,
            seed,
        }
    }

    #[test]
    fn rare_words_are_dropped() {
        let corpus = vec![tokenize("a b a b a b rare")];
        let e = train_skipgram(&corpus, &small_cfg(1)).unwrap();
        assert!(e.vocab().get("rare").is_none());
        assert!(e.vocab().get("a").is_some());
    }

    #[test]
    fn no_trainable_tokens() {
        let corpus = vec![tokenize("a b c")];
        let err = train_skipgram(&corpus, &small_cfg(1)).unwrap_err();
        assert!(err.to_string().contains("no trainable tokens"));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let corpus: Vec<_> = (0..20).map(|i| tokenize(&format!("w{} w{} w{} x y", i % 3, i % 5, i % 2))).collect();
        let a = train_skipgram(&corpus, &small_cfg(9)).unwrap();
        let b = train_skipgram(&corpus, &small_cfg(9)).unwrap();
        let c = train_skipgram(&corpus, &small_cfg(10)).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn loss_is_non_increasing_at_small_learning_rate() {
        // 100 tokens from a 10-word vocabulary with strong local structure
        let words: Vec<String> = (0..100).map(|i| format!("w{}", (i * 7 + i / 10) % 10)).collect();
        let corpus: Vec<Vec<Token>> = words.chunks(10).map(|c| tokenize(&c.join(" "))).collect();
        let cfg = SgnsConfig {
            dim: 10,
            window: 2,
            negatives: 5,
            min_count: 1,
            epochs: 10,
            learning_rate: 0.01,
            seed: 3,
        };
        let (_, history) = train_skipgram_with_history(&corpus, &cfg, true).unwrap();
        assert_eq!(history.len(), 11);
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{history:?}");
        }
        assert!(history.last().unwrap() < &history[0]);
    }

    #[test]
    fn pad_row_stays_zero() {
        let corpus: Vec<_> = (0..10).map(|_| tokenize("a b a b c c")).collect();
        let e = train_skipgram(&corpus, &small_cfg(2)).unwrap();
        assert!(e.row(PAD_INDEX).iter().all(|v| *v == 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn self_cosine_is_one(u in proptest::collection::vec(-1e3f64..1e3, 1..30)) {
                prop_assume!(u.iter().any(|v| *v != 0.0));
                prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
