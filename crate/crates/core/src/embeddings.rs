//! Sentence segmentation, the sentence-encoder interface, the built-in hashed
//! bag-of-tokens encoder and the per-document embedding record.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 512;
pub const HASHED_PROVIDER: &str = "hashed-bow";

const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "st.", "jr.", "sr.", "prof.", "etc.", "e.g.", "i.e.", "vs.",
];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSplit {
    pub sentences: Vec<String>,
    /// Character (not byte) offsets `[start, end)` of each sentence.
    pub offsets: Vec<(usize, usize)>,
}

impl SentenceSplit {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '@' | '\u{201c}' | '\u{2018}')
}

fn ends_with_abbreviation(chars: &[char], dot: usize) -> bool {
    let mut start = dot;
    while start > 0 && !chars[start - 1].is_whitespace() {
        start -= 1;
    }
    while start < dot && is_opener(chars[start]) {
        start += 1;
    }
    let word: String = chars[start..=dot].iter().collect::<String>().to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Rule-based splitter. A sentence ends after `.`, `?` or `!` (plus any
/// trailing closing quotes) when followed by whitespace and an uppercase
/// letter, or by the end of the text. A newline that ends a non-empty line
/// always ends a sentence. Common abbreviations never end one.
pub fn segment_sentences(text: &str) -> SentenceSplit {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut cuts = Vec::new();
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if c == '\n' {
            cuts.push(i);
            i += 1;
            continue;
        }
        if !is_terminator(c) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < n && (is_terminator(chars[j]) || is_closer(chars[j])) {
            j += 1;
        }
        if c == '.' && j == i + 1 && ends_with_abbreviation(&chars, i) {
            i = j;
            continue;
        }
        let mut k = j;
        while k < n && chars[k].is_whitespace() && chars[k] != '\n' {
            k += 1;
        }
        if k == n || (k > j && chars[k] == '\n') {
            cuts.push(j);
        } else if k > j {
            while k < n && is_opener(chars[k]) {
                k += 1;
            }
            if k < n && chars[k].is_uppercase() {
                cuts.push(j);
            }
        }
        i = j;
    }
    cuts.push(n);

    let mut out = SentenceSplit::default();
    let mut start = 0;
    for cut in cuts {
        if cut <= start {
            start = start.max(cut);
            continue;
        }
        let mut a = start;
        let mut b = cut;
        while a < b && chars[a].is_whitespace() {
            a += 1;
        }
        while b > a && chars[b - 1].is_whitespace() {
            b -= 1;
        }
        if b > a {
            out.sentences.push(chars[a..b].iter().collect());
            out.offsets.push((a, b));
        }
        start = cut;
    }
    out
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Maps one sentence to a fixed-width vector.
pub trait SentenceEncoder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn encode(&self, sentence: &str) -> Result<Vec<f64>>;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Deterministic stand-in encoder: each token is hashed to one coordinate
/// and a sign, the signed one-hots are summed and the sum is L2-normalised.
/// It ignores word order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedProvider {
    pub seed: u64,
    pub dim: usize,
}

impl HashedProvider {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSpec("embedding dimension must be >= 1".into()));
        }
        Ok(Self { seed, dim })
    }

    fn slot(&self, token: &str) -> (usize, f64) {
        let h = fnv1a(fnv1a(FNV_OFFSET, &self.seed.to_le_bytes()), token.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        ((h % self.dim as u64) as usize, sign)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokens {
            let (i, s) = self.slot(t.as_ref());
            v[i] += s;
        }
        let norm = Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm == 0.0 {
            let (i, s) = self.slot("\u{0}empty");
            v.iter_mut().for_each(|x| *x = 0.0);
            v[i] = s;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl SentenceEncoder for HashedProvider {
    fn id(&self) -> String {
        format!("{}:seed={}:dim={}", HASHED_PROVIDER, self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, sentence: &str) -> Result<Vec<f64>> {
        Ok(self.encode_tokens(&tokenize(sentence)))
    }
}

/// One row per sentence. Fails if a row is non-finite or the encoder's width
/// differs from `expected_dim`.
pub fn embed_sentences<S: AsRef<str>>(
    encoder: &dyn SentenceEncoder,
    sentences: &[S],
    expected_dim: Option<usize>,
) -> Result<Tensor> {
    let d = encoder.dim();
    if let Some(e) = expected_dim {
        if e != d {
            return Err(Error::DimMismatch { expected: e, got: d });
        }
    }
    let mut data = Vec::with_capacity(sentences.len() * d);
    for s in sentences {
        let v = encoder.encode(s.as_ref())?;
        if v.len() != d {
            return Err(Error::DimMismatch { expected: d, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite embedding for `{}`", s.as_ref())));
        }
        data.extend(v);
    }
    Tensor::matrix(sentences.len(), d, data)
}

/// One line of an embedding file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedDocument {
    pub id: String,
    pub sentences: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub dim: usize,
    pub provider: String,
}

impl EmbeddedDocument {
    pub fn from_text(encoder: &dyn SentenceEncoder, id: &str, text: &str) -> Result<Self> {
        let split = segment_sentences(text);
        let m = embed_sentences(encoder, &split.sentences, None)?;
        let d = encoder.dim();
        Ok(Self {
            id: id.to_string(),
            vectors: (0..m.rows()).map(|r| m.row(r).to_vec()).collect(),
            sentences: split.sentences,
            dim: d,
            provider: encoder.id(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.vectors.len() != self.sentences.len() {
            return Err(Error::LengthMismatch(self.vectors.len(), self.sentences.len()));
        }
        for v in &self.vectors {
            if v.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidTensor(format!("document {}: non-finite vector", self.id)));
            }
        }
        Ok(())
    }

    /// `n_sentences x dim` matrix.
    pub fn matrix(&self) -> Result<Tensor> {
        self.validate()?;
        Tensor::matrix(self.vectors.len(), self.dim, self.vectors.concat())
    }
}

/// `u.v / sqrt(|u|^2 |v|^2)`, or 0 if either vector is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    if u == v {
        return 1.0;
    }
    uv / Float::sqrt(uu * vv)
}

/// Surface statistics fed to the passage-conditioned scorer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssayStats {
    pub sentences: f64,
    pub tokens: f64,
    pub mean_sentence_tokens: f64,
    pub type_token_ratio: f64,
}

impl EssayStats {
    pub const COUNT: usize = 4;

    pub fn of(text: &str) -> Self {
        let split = segment_sentences(text);
        let toks = tokenize(text);
        let mut types: Vec<&str> = toks.iter().map(String::as_str).collect();
        types.sort_unstable();
        types.dedup();
        let n_sent = split.len() as f64;
        let n_tok = toks.len() as f64;
        Self {
            sentences: n_sent,
            tokens: n_tok,
            mean_sentence_tokens: if n_sent > 0.0 { n_tok / n_sent } else { 0.0 },
            type_token_ratio: if n_tok > 0.0 { types.len() as f64 / n_tok } else { 0.0 },
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [
            self.sentences,
            self.tokens,
            self.mean_sentence_tokens,
            self.type_token_ratio,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(t: &str) -> Vec<String> {
        segment_sentences(t).sentences
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(split("Hello. World."), ["Hello.", "World."]);
        assert!(split("").is_empty());
        assert!(split("  \n\t ").is_empty());
        assert_eq!(split("Dr. Smith left. He ran."), ["Dr. Smith left.", "He ran."]);
    }

    #[test]
    fn segmentation_rules() {
        assert_eq!(split("It costs 3.5 dollars. Ok"), ["It costs 3.5 dollars.", "Ok"]);
        assert_eq!(split("Fruit, e.g. Apples. Yes"), ["Fruit, e.g. Apples.", "Yes"]);
        assert_eq!(split("he said \"stop.\" Then left"), ["he said \"stop.\"", "Then left"]);
        assert_eq!(split("wait... what? Really! ok"), ["wait... what?", "Really! ok"]);
        assert_eq!(split("Dear @CAPS1. @PERSON2 agrees."), ["Dear @CAPS1.", "@PERSON2 agrees."]);
        assert_eq!(split("first line\nsecond line"), ["first line", "second line"]);
        assert_eq!(split("no split. lowercase next"), ["no split. lowercase next"]);
    }

    #[test]
    fn offsets_are_char_positions() {
        let t = "Café au lait. Très bien.";
        let s = segment_sentences(t);
        let chars: Vec<char> = t.chars().collect();
        for (sent, &(a, b)) in s.sentences.iter().zip(&s.offsets) {
            assert_eq!(&chars[a..b].iter().collect::<String>(), sent);
        }
        assert_eq!(s.offsets, [(0, 13), (14, 24)]);
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("Hello, WORLD-42!"), ["hello", "world", "42"]);
        assert!(tokenize("...").is_empty());
    }

    #[test]
    fn hashed_provider_contract() {
        let p = HashedProvider::new(11, 64).unwrap();
        let a = p.encode("the cat sat on the mat").unwrap();
        assert_eq!(a, p.encode("the cat sat on the mat").unwrap());
        assert_eq!(a, p.encode("mat the on sat cat the").unwrap());
        for s in ["", "x", "a b c d e f g"] {
            let v = p.encode(s).unwrap();
            let n: f64 = v.iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-9);
        }
        assert_eq!(cosine(&a, &a), 1.0);
        let q = HashedProvider::new(12, 64).unwrap();
        assert_ne!(a, q.encode("the cat sat on the mat").unwrap());
    }

    #[test]
    fn dim_mismatch() {
        let p = HashedProvider::new(1, 8).unwrap();
        assert_eq!(
            embed_sentences(&p, &["a"], Some(16)),
            Err(Error::DimMismatch { expected: 16, got: 8 })
        );
        let m = embed_sentences(&p, &["a", "b c"], Some(8)).unwrap();
        assert_eq!(m.shape(), &[2, 8]);
    }

    #[test]
    fn document_from_text() {
        let p = HashedProvider::new(1, 16).unwrap();
        let d = EmbeddedDocument::from_text(&p, "e1", "One here. Two there.").unwrap();
        assert_eq!(d.sentences.len(), 2);
        assert_eq!(d.matrix().unwrap().shape(), &[2, 16]);
        let mut bad = d.clone();
        bad.vectors.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cosine_zero_vector() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0])).abs() < 1e-15);
    }

    #[test]
    fn stats() {
        let s = EssayStats::of("The cat. The dog ran.");
        assert_eq!(s.to_array(), [2.0, 5.0, 2.5, 0.8]);
    }
}
