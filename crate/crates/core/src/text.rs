//! Tweet tokenization and vocabulary construction.
//!
//! Tokenization rules, applied per whitespace-separated chunk:
//!
//! 1. chunks starting with `http://`, `https://` or `www.` become `<url>`;
//! 2. `@name` becomes `<user>`;
//! 3. `#tag` becomes the word `tag` with kind [`TokenKind::Hashtag`];
//! 4. decimal numerals become `<number>`;
//! 5. everything else is lower-cased, leading/trailing ASCII punctuation is
//!    split off into single-character tokens and emoji become standalone
//!    tokens.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const URL: &str = "<url>";
pub const USER: &str = "<user>";
pub const NUMBER: &str = "<number>";

/// Special tokens in their reserved index order.
pub const SPECIALS: [&str; 5] = [UNK, PAD, URL, USER, NUMBER];

pub const UNK_INDEX: usize = 0;
pub const PAD_INDEX: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Word,
    Hashtag,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    surface: String,
    kind: TokenKind,
}

impl Token {
    pub fn word(surface: impl Into<String>) -> Self {
        Token {
            surface: surface.into(),
            kind: TokenKind::Word,
        }
    }

    pub fn hashtag(surface: impl Into<String>) -> Self {
        Token {
            surface: surface.into(),
            kind: TokenKind::Hashtag,
        }
    }

    fn special(surface: &'static str) -> Self {
        Token {
            surface: surface.to_string(),
            kind: TokenKind::Special,
        }
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

/// Rough emoji test covering the pictographic blocks that show up in tweets.
fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF
        | 0x2600..=0x27BF
        | 0x2B00..=0x2BFF
        | 0x2300..=0x23FF
        | 0xFE0F
        | 0x200D)
}

fn is_numeral(s: &str) -> bool {
    let mut parts = s.splitn(2, ['.', ',']);
    let int = parts.next().unwrap_or("");
    let frac = parts.next();
    !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
}

fn push_core(core: &str, out: &mut Vec<Token>) {
    if core.is_empty() {
        return;
    }
    if core.len() > 1 && core.starts_with('@') {
        out.push(Token::special(USER));
        return;
    }
    if core.len() > 1 && core.starts_with('#') {
        out.push(Token::hashtag(core[1..].to_lowercase()));
        return;
    }
    if is_numeral(core) {
        out.push(Token::special(NUMBER));
        return;
    }
    let mut word = String::new();
    for c in core.chars() {
        if is_emoji(c) {
            if !word.is_empty() {
                out.push(Token::word(std::mem::take(&mut word).to_lowercase()));
            }
            // joiners and variation selectors carry no content on their own
            if c != '\u{FE0F}' && c != '\u{200D}' {
                out.push(Token::word(c.to_string()));
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(Token::word(word.to_lowercase()));
    }
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_ascii_lowercase();
        if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.") {
            out.push(Token::special(URL));
            continue;
        }
        let body = chunk.trim_end_matches(|c: char| c.is_ascii_punctuation());
        let trailing = &chunk[body.len()..];
        let core = body.trim_start_matches(|c: char| c.is_ascii_punctuation() && c != '@' && c != '#');
        let leading = &body[..body.len() - core.len()];

        out.extend(leading.chars().map(|c| Token::word(c.to_string())));
        push_core(core, &mut out);
        out.extend(trailing.chars().map(|c| Token::word(c.to_string())));
    }
    out
}

/// Token to index map with corpus frequencies.
///
/// Specials occupy indices `0..5` in the order of [`SPECIALS`]; the rest are
/// sorted by descending count with lexicographic tie-breaking.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    entries: Vec<(String, u64)>,
    index: HashMap<String, usize>,
    min_count: u64,
}

impl Vocabulary {
    /// Builds a vocabulary whose non-special order is given by the caller.
    /// Used when reading persisted vocabularies and embedding files.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, u64)>, min_count: u64) -> Result<Self> {
        let mut all: Vec<(String, u64)> = SPECIALS.iter().map(|s| (s.to_string(), 0)).collect();
        let mut index: HashMap<String, usize> =
            SPECIALS.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect();
        for (token, count) in entries {
            if token.is_empty() {
                return Err(Error::invalid("empty token in vocabulary"));
            }
            if let Some(&i) = index.get(&token) {
                if i < SPECIALS.len() {
                    all[i].1 = count;
                    continue;
                }
                return Err(Error::invalid(format!("duplicate token {token:?}")));
            }
            index.insert(token.clone(), all.len());
            all.push((token, count));
        }
        Ok(Vocabulary {
            entries: all,
            index,
            min_count: min_count.max(1),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn count(&self, index: usize) -> u64 {
        self.entries[index].1
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    pub fn is_special(index: usize) -> bool {
        index < SPECIALS.len()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (token, count) in &self.entries {
            writeln!(w, "{token}\t{count}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_tsv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let what = path.display().to_string();
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (token, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&what, i + 1, "expected token<TAB>count"))?;
            let count: u64 = count
                .parse()
                .map_err(|_| Error::parse(&what, i + 1, format!("bad count {count:?}")))?;
            entries.push((token.to_string(), count));
        }
        let min_count = entries
            .iter()
            .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
            .map(|(_, c)| *c)
            .min()
            .unwrap_or(1);
        Vocabulary::from_entries(entries, min_count).map_err(|e| Error::parse(&what, 0, e.to_string()))
    }
}

pub fn build_vocab<S: AsRef<[Token]>>(corpus: &[S], min_count: u64) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::invalid("min_count must be at least 1"));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for doc in corpus {
        for tok in doc.as_ref() {
            *counts.entry(tok.surface()).or_default() += 1;
        }
    }
    let mut special_counts = [0u64; SPECIALS.len()];
    let mut words: Vec<(String, u64)> = Vec::new();
    for (tok, c) in counts {
        if let Some(i) = SPECIALS.iter().position(|s| *s == tok) {
            special_counts[i] = c;
        } else if c >= min_count {
            words.push((tok.to_string(), c));
        }
    }
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let specials = SPECIALS.iter().zip(special_counts).map(|(s, c)| (s.to_string(), c));
    Vocabulary::from_entries(specials.chain(words), min_count)
}

pub fn encode(tokens: &[Token], vocab: &Vocabulary) -> Vec<usize> {
    tokens
        .iter()
        .map(|t| vocab.get(t.surface()).unwrap_or(UNK_INDEX))
        .collect()
}

/// Reads a one-tweet-per-line corpus and tokenizes every line.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<Token>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| {
        Error::invalid(format!("{}: invalid UTF-8 at byte {}", path.display(), e.utf8_error().valid_up_to()))
    })?;
    Ok(text.lines().map(tokenize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfaces(text: &str) -> Vec<String> {
        tokenize(text).into_iter().map(|t| t.surface).collect()
    }

    fn toks(words: &[&str]) -> Vec<Token> {
        words.iter().map(|w| Token::word(*w)).collect()
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t\n").is_empty());
    }

    #[test]
    fn lowercases_words() {
        assert_eq!(surfaces("Hello World"), ["hello", "world"]);
    }

    #[test]
    fn users_hashtags_urls() {
        let t = tokenize("@bob loves #Joy http://t.co/x");
        assert_eq!(
            t,
            vec![
                Token::special(USER),
                Token::word("loves"),
                Token::hashtag("joy"),
                Token::special(URL),
            ]
        );
        assert_eq!(surfaces("see www.Example.com now"), ["see", "<url>", "now"]);
        assert_eq!(surfaces("HTTPS://x.y"), ["<url>"]);
    }

    #[test]
    fn numbers() {
        assert_eq!(surfaces("got 3 of 4.5 and 1,000"), ["got", "<number>", "of", "<number>", "and", "<number>"]);
        assert_eq!(surfaces("3rd"), ["3rd"]);
    }

    #[test]
    fn punctuation_is_split_off() {
        assert_eq!(surfaces("wow!!"), ["wow", "!", "!"]);
        assert_eq!(surfaces("(#happy)"), ["(", "happy", ")"]);
        assert_eq!(surfaces("\"quoted\","), ["\"", "quoted", "\"", ","]);
        assert_eq!(surfaces("don't"), ["don't"]);
        assert_eq!(surfaces("@bob:"), ["<user>", ":"]);
        assert_eq!(surfaces("#"), ["#"]);
        assert_eq!(surfaces("<url>"), ["<", "url", ">"]);
    }

    #[test]
    fn emoji_are_standalone() {
        assert_eq!(surfaces("love😂😂"), ["love", "😂", "😂"]);
        assert_eq!(surfaces("❤️"), ["❤"]);
    }

    #[test]
    fn vocab_filters_by_min_count() {
        let v = build_vocab(&[toks(&["a", "b", "a"])], 2).unwrap();
        assert_eq!(v.len(), SPECIALS.len() + 1);
        assert_eq!(v.get("a"), Some(SPECIALS.len()));
        assert_eq!(v.count(SPECIALS.len()), 2);
        assert_eq!(v.get("b"), None);
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let corpus = [toks(&["b"]), toks(&["a"]), toks(&["b"]), toks(&["a"])];
        let v = build_vocab(&corpus, 1).unwrap();
        let words: Vec<_> = v.tokens().skip(SPECIALS.len()).collect();
        assert_eq!(words, ["a", "b"]);
    }

    #[test]
    fn vocab_orders_by_count() {
        let corpus = [toks(&["z", "z", "z", "m", "a", "a"])];
        let v = build_vocab(&corpus, 1).unwrap();
        let words: Vec<_> = v.tokens().skip(SPECIALS.len()).collect();
        assert_eq!(words, ["z", "a", "m"]);
    }

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = build_vocab::<Vec<Token>>(&[], 1).unwrap();
        assert_eq!(v.tokens().collect::<Vec<_>>(), SPECIALS);
        assert_eq!(v.get(UNK), Some(0));
        assert_eq!(v.get(PAD), Some(1));
    }

    #[test]
    fn zero_min_count_rejected() {
        assert!(build_vocab::<Vec<Token>>(&[], 0).is_err());
    }

    #[test]
    fn specials_are_counted() {
        let v = build_vocab(&[tokenize("@a @b http://x")], 5).unwrap();
        assert_eq!(v.count(v.get(USER).unwrap()), 2);
        assert_eq!(v.count(v.get(URL).unwrap()), 1);
        assert_eq!(v.len(), SPECIALS.len());
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let v = build_vocab(&[toks(&["hello"])], 1).unwrap();
        assert_eq!(encode(&toks(&["hello"]), &v), [5]);
        assert_eq!(encode(&toks(&["zzz"]), &v), [UNK_INDEX]);
        assert!(encode(&[], &v).is_empty());
    }

    #[test]
    fn tsv_round_trip() {
        let v = build_vocab(&[tokenize("a a b c c c #d")], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.entries(), v.entries());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tokenize_is_pure(s in "\\PC{0,60}") {
                prop_assert_eq!(tokenize(&s), tokenize(&s));
                for t in tokenize(&s) {
                    prop_assert!(!t.surface().is_empty());
                }
            }

            #[test]
            fn encode_preserves_length(s in "[a-e !#@]{0,40}", q in "[a-h !#@]{0,40}") {
                let v = build_vocab(&[tokenize(&s)], 1).unwrap();
                let toks = tokenize(&q);
                prop_assert_eq!(encode(&toks, &v).len(), toks.len());
            }

            #[test]
            fn index_is_bijection(docs in proptest::collection::vec("[a-f ]{0,20}", 0..6), min in 1u64..3) {
                let corpus: Vec<_> = docs.iter().map(|d| tokenize(d)).collect();
                let v = build_vocab(&corpus, min).unwrap();
                for (i, (tok, count)) in v.entries().iter().enumerate() {
                    prop_assert_eq!(v.get(tok), Some(i));
                    if !Vocabulary::is_special(i) {
                        prop_assert!(*count >= min);
                    }
                }
            }
        }
    }
}
