//! Greedy longest-match-first subword tokenization.
//!
//! Text is normalized (Unicode NFC, lowercase, outer whitespace trimmed) and
//! consumed left to right: at each position the longest vocabulary entry that
//! is a prefix of the remainder becomes the next piece. A character that
//! starts no vocabulary entry becomes a one-character `[UNK]` piece. A word
//! split into several pieces has its bounding box divided horizontally in
//! proportion to the pieces' character counts.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::data::{BBox, Document};
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const DEFAULT_VOCAB_SIZE: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// Longest entry in characters, bounding the prefix search.
    max_chars: usize,
}

impl Vocabulary {
    /// Builds from an ordered token list whose first two entries are `[PAD]`
    /// and `[UNK]`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD || tokens[1] != UNK {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with {PAD} and {UNK}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidArgument(format!("empty vocabulary entry at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let max_chars = tokens[2..].iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Vocabulary {
            tokens,
            index,
            max_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        // The reserved markers are never produced by matching text.
        match self.index.get(token) {
            Some(&id) if id > UNK_ID => Some(id),
            _ => None,
        }
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens = BufReader::new(File::open(path)?)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?;
        Vocabulary::from_tokens(tokens)
    }
}

pub fn normalize(text: &str) -> String {
    text.nfc().collect::<String>().to_lowercase().trim().to_string()
}

/// Corpus vocabulary: whole words by descending frequency (ties broken
/// lexicographically), then the single characters of the corpus alphabet in
/// the same order, truncated so the total including `[PAD]` and `[UNK]` is at
/// most `max_size`.
pub fn build_vocab(corpus: &[Document], max_size: usize) -> Result<Vocabulary> {
    build_vocab_min_count(corpus, max_size, 1)
}

/// As [`build_vocab`], keeping only whole words seen at least `min_count`
/// times. Rarer words are left to be spelled out by character pieces.
pub fn build_vocab_min_count(corpus: &[Document], max_size: usize, min_count: usize) -> Result<Vocabulary> {
    if max_size < 3 {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size {max_size} leaves no room beside {PAD} and {UNK}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut words: HashMap<String, usize> = HashMap::new();
    let mut chars: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for t in &doc.tokens {
            for w in normalize(&t.text).split_whitespace() {
                *words.entry(w.to_string()).or_insert(0) += 1;
                for c in w.chars() {
                    *chars.entry(c.to_string()).or_insert(0) += 1;
                }
            }
        }
    }
    words.retain(|_, n| *n >= min_count);
    let by_frequency = |m: HashMap<String, usize>| {
        let mut v: Vec<(String, usize)> = m.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.into_iter().map(|(s, _)| s)
    };
    let mut tokens = vec![PAD.to_string(), UNK.to_string()];
    let mut seen = std::collections::HashSet::new();
    for t in by_frequency(words).chain(by_frequency(chars)) {
        if tokens.len() >= max_size {
            break;
        }
        if t != PAD && t != UNK && seen.insert(t.clone()) {
            tokens.push(t);
        }
    }
    Vocabulary::from_tokens(tokens)
}

/// Greedy longest-match tokenization of normalized `text` into `(piece, id)`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<(String, u32)> {
    let norm = normalize(text);
    let chars: Vec<(usize, char)> = norm.char_indices().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let longest = (1..=vocab.max_chars.min(chars.len() - i)).rev().find_map(|len| {
            let end = chars.get(i + len).map_or(norm.len(), |c| c.0);
            vocab.id(&norm[start..end]).map(|id| (len, end, id))
        });
        match longest {
            Some((len, end, id)) => {
                pieces.push((norm[start..end].to_string(), id));
                i += len;
            }
            None => {
                let end = chars.get(i + 1).map_or(norm.len(), |c| c.0);
                pieces.push((norm[start..end].to_string(), UNK_ID));
                i += 1;
            }
        }
    }
    pieces
}

/// Splits `bbox` horizontally into abutting boxes whose widths are
/// proportional to `piece_lengths`. The last box ends exactly at `x_right`.
pub fn split_bbox(bbox: &BBox, piece_lengths: &[usize]) -> Vec<BBox> {
    if piece_lengths.len() <= 1 {
        return vec![*bbox];
    }
    let total: usize = piece_lengths.iter().sum();
    let width = bbox.width();
    let mut out = Vec::with_capacity(piece_lengths.len());
    let mut consumed = 0;
    let mut left = bbox.x_left;
    for (k, &len) in piece_lengths.iter().enumerate() {
        consumed += len;
        let right = if k + 1 == piece_lengths.len() {
            bbox.x_right
        } else {
            bbox.x_left + width * consumed as f64 / total.max(1) as f64
        };
        out.push(BBox {
            x_left: left,
            y_top: bbox.y_top,
            x_right: right,
            y_bottom: bbox.y_bottom,
        });
        left = right;
    }
    out
}

/// A subword unit placed in image space.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPiece {
    pub text: String,
    pub id: u32,
    pub bbox: BBox,
    /// Index of the source token in its document.
    pub token_index: usize,
    /// Position of this piece within its source token.
    pub piece_index: usize,
}

/// Tokenizes every token of a document, in token order.
pub fn tokenize_document(doc: &Document, vocab: &Vocabulary) -> Vec<TokenPiece> {
    let mut out = Vec::new();
    for (ti, tok) in doc.tokens.iter().enumerate() {
        let pieces = tokenize(&tok.text, vocab);
        let lengths: Vec<usize> = pieces.iter().map(|(p, _)| p.chars().count()).collect();
        let boxes = split_bbox(&tok.bbox, &lengths);
        for (pi, ((text, id), bbox)) in pieces.into_iter().zip(boxes).enumerate() {
            out.push(TokenPiece {
                text,
                id,
                bbox,
                token_index: ti,
                piece_index: pi,
            });
        }
    }
    out
}
