use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::ExampleRecord;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const CLS: u32 = 4;
pub const DOC: u32 = 5;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[CLS]", "[DOC]"];

/// Ids that never carry content: everything reserved except `[UNK]`.
pub fn is_structural(id: u32) -> bool {
    id < RESERVED.len() as u32 && id != UNK
}

/// Lowercases and splits on whitespace; inside each chunk, runs of
/// alphanumerics form one token and every other character stands alone.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Ingestion(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Ingestion(format!("reserved token {r} must have id {i}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Keeps the most frequent tokens of every text field, ties broken
    /// lexicographically. `max_size` counts the reserved tokens.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a ExampleRecord>,
        max_size: usize,
        min_freq: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen = 0usize;
        for rec in corpus {
            seen += 1;
            let texts = std::iter::once(&rec.source_abstract)
                .chain(&rec.ref_abstracts)
                .chain(std::iter::once(&rec.target));
            for text in texts {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if seen == 0 {
            return Err(Error::Ingestion("cannot build a vocabulary from an empty corpus".into()));
        }
        Self::from_counts(counts, max_size, min_freq)
    }

    pub fn build_from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_freq: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen = 0usize;
        for text in texts {
            seen += 1;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if seen == 0 {
            return Err(Error::Ingestion("cannot build a vocabulary from an empty corpus".into()));
        }
        Self::from_counts(counts, max_size, min_freq)
    }

    fn from_counts(counts: HashMap<String, usize>, max_size: usize, min_freq: usize) -> Result<Self> {
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(RESERVED.len());
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of `text`, out-of-vocabulary tokens mapped to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.id_of(t).unwrap_or(UNK))
            .collect()
    }

    /// Content tokens of `ids`; structural tokens are dropped, `[UNK]` kept.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !is_structural(i))
            .filter_map(|&i| self.token_of(i).map(str::to_string))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        self.decode(ids).join(" ")
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        let tokens = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens).map_err(|e| Error::Format {
            path: path.as_ref().to_path_buf(),
            message: e.to_string(),
        })
    }
}
