//! Tokenizers mapping text into the traced model's token space.
//!
//! Two implementations are provided: a whitespace tokenizer over a vocabulary
//! file (used for fixtures and plain-word corpora) and a GPT-2 style
//! byte-level BPE driven by `vocab.json` + `merges.txt`.
//!
//! Spec strings: `whitespace:PATH` or `bpe:VOCAB_JSON,MERGES_TXT`.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::seq::TokenId;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read tokenizer file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unrecognised tokenizer spec {0:?}; expected whitespace:PATH or bpe:VOCAB,MERGES")]
    Spec(String),
    #[error("bad vocabulary file {path}: {msg}")]
    Vocab { path: PathBuf, msg: String },
    #[error("bad merges file {path} line {line}: {msg}")]
    Merges {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, ids: &[TokenId]) -> String;
    /// Number of ids with a known surface.
    fn vocab_size(&self) -> usize;
    /// Stable description used in fingerprints and reports.
    fn describe(&self) -> String;
}

/// Parse a tokenizer spec string and load the referenced files.
pub fn load_tokenizer(spec: &str) -> Result<Arc<dyn Tokenizer>, TokenizerError> {
    if let Some(path) = spec.strip_prefix("whitespace:") {
        return Ok(Arc::new(WhitespaceTokenizer::from_file(Path::new(path))?));
    }
    if let Some(rest) = spec.strip_prefix("bpe:") {
        let (vocab, merges) = rest
            .split_once(',')
            .ok_or_else(|| TokenizerError::Spec(spec.to_owned()))?;
        return Ok(Arc::new(BpeTokenizer::from_files(Path::new(vocab), Path::new(merges))?));
    }
    Err(TokenizerError::Spec(spec.to_owned()))
}

fn read(path: &Path) -> Result<String, TokenizerError> {
    fs::read_to_string(path).map_err(|source| TokenizerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// 32-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Splits on Unicode whitespace; one vocabulary line per id.
///
/// Out-of-vocabulary words hash into the id range above the vocabulary so that
/// distinct unknown words still compare unequal. They decode as `<unk:ID>`,
/// which encodes back to the same id.
#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
    source: String,
}

impl WhitespaceTokenizer {
    pub fn new(words: Vec<String>) -> Self {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self {
            words,
            ids,
            source: "inline".into(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, TokenizerError> {
        let text = read(path)?;
        let words: Vec<String> = text.lines().map(str::to_owned).collect();
        if let Some(i) = words.iter().position(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(TokenizerError::Vocab {
                path: path.to_path_buf(),
                msg: format!("line {} is empty or contains whitespace", i + 1),
            });
        }
        let mut tok = Self::new(words);
        tok.source = path.display().to_string();
        Ok(tok)
    }

    fn word_id(&self, w: &str) -> TokenId {
        if let Some(&id) = self.ids.get(w) {
            return id;
        }
        let v = self.words.len() as u64;
        if let Some(n) = w.strip_prefix("<unk:").and_then(|r| r.strip_suffix('>')) {
            if let Ok(id) = n.parse::<TokenId>() {
                if u64::from(id) >= v {
                    return id;
                }
            }
        }
        let span = u64::from(u32::MAX) - v;
        (v + u64::from(fnv1a(w.as_bytes())) % span) as TokenId
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        let parts: Vec<String> = ids
            .iter()
            .map(|&id| match self.words.get(id as usize) {
                Some(w) => w.clone(),
                None => format!("<unk:{id}>"),
            })
            .collect();
        parts.join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn describe(&self) -> String {
        format!("whitespace:{}", self.source)
    }
}

/// GPT-2 byte-level BPE.
///
/// Pre-tokenization follows the GPT-2 pattern (contractions, optional-space
/// letter runs, digit runs, symbol runs, whitespace runs) with Unicode
/// alphabetic/numeric classes standing in for `\p{L}`/`\p{N}`.
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, TokenId>,
    decoder: HashMap<TokenId, String>,
    ranks: HashMap<(String, String), usize>,
    byte_enc: [char; 256],
    byte_dec: HashMap<char, u8>,
    source: String,
}

/// The reversible byte -> printable-char table used by GPT-2 vocabularies.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(256 + extra).expect("valid code point");
            extra += 1;
            c
        };
    }
    table
}

impl BpeTokenizer {
    pub fn new(encoder: HashMap<String, TokenId>, merges: Vec<(String, String)>) -> Self {
        let byte_enc = bytes_to_unicode();
        let byte_dec = byte_enc.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let decoder = encoder.iter().map(|(k, &v)| (v, k.clone())).collect();
        let ranks = merges.into_iter().enumerate().map(|(i, p)| (p, i)).collect();
        Self {
            encoder,
            decoder,
            ranks,
            byte_enc,
            byte_dec,
            source: "inline".into(),
        }
    }

    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self, TokenizerError> {
        let encoder: HashMap<String, TokenId> =
            serde_json::from_str(&read(vocab)?).map_err(|e| TokenizerError::Vocab {
                path: vocab.to_path_buf(),
                msg: e.to_string(),
            })?;
        let mut pairs = Vec::new();
        for (i, line) in read(merges)?.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| TokenizerError::Merges {
                path: merges.to_path_buf(),
                line: i + 1,
                msg: "expected two space-separated symbols".into(),
            })?;
            pairs.push((a.to_owned(), b.to_owned()));
        }
        let mut tok = Self::new(encoder, pairs);
        tok.source = format!("{},{}", vocab.display(), merges.display());
        Ok(tok)
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let (a, b) = (parts[i].clone(), parts[i + 1].clone());
            // Merge every non-overlapping occurrence of the best pair, left to right.
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == a && parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    fn symbol_id(&self, sym: &str) -> TokenId {
        match self.encoder.get(sym) {
            Some(&id) => id,
            None => {
                let v = self.encoder.len() as u64;
                let span = u64::from(u32::MAX) - v;
                (v + u64::from(fnv1a(sym.as_bytes())) % span) as TokenId
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Other,
}

fn class(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Digit
    } else {
        Class::Other
    }
}

/// Splits text into GPT-2 pre-tokens.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c == '\'' {
            let rest = &text[start + 1..];
            let hit = ["re", "ve", "ll", "s", "t", "m", "d"]
                .iter()
                .find(|s| rest.starts_with(*s));
            if let Some(s) = hit {
                let len = 1 + s.chars().count();
                out.push(&text[start..end_of(i + len)]);
                i += len;
                continue;
            }
        }
        let mut j = i;
        let mut k = class(c);
        if c == ' ' && i + 1 < chars.len() && class(chars[i + 1].1) != Class::Space {
            j += 1;
            k = class(chars[j].1);
        }
        if k == Class::Space {
            let mut e = i;
            while e < chars.len() && class(chars[e].1) == Class::Space {
                e += 1;
            }
            // Leave one trailing whitespace char for the following word, as
            // the `\s+(?!\S)` alternative does.
            if e < chars.len() && e - i > 1 {
                e -= 1;
            }
            out.push(&text[start..end_of(e)]);
            i = e;
            continue;
        }
        let mut e = j;
        while e < chars.len() && class(chars[e].1) == k {
            e += 1;
        }
        out.push(&text[start..end_of(e)]);
        i = e;
    }
    out
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for piece in pretokenize(text) {
            let mapped: String = piece.bytes().map(|b| self.byte_enc[b as usize]).collect();
            ids.extend(self.bpe(&mapped).iter().map(|s| self.symbol_id(s)));
        }
        ids
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        let mut bytes = Vec::new();
        for id in ids {
            match self.decoder.get(id) {
                Some(s) => bytes.extend(s.chars().filter_map(|c| self.byte_dec.get(&c))),
                None => bytes.extend(format!("<unk:{id}>").bytes()),
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn describe(&self) -> String {
        format!("bpe:{}", self.source)
    }
}
