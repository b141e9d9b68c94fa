use super::vocab::{Vocabulary, BOS, CLS, DOC, EOS};
use super::ExampleRecord;

/// Token ids plus per-position global-attention flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub global: Vec<bool>,
    /// Content tokens dropped by truncation.
    pub truncated: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }

    /// All positions local.
    pub fn plain(ids: Vec<u32>) -> Self {
        let global = vec![false; ids.len()];
        Self {
            ids,
            global,
            truncated: 0,
        }
    }
}

/// `[CLS] abstract [DOC] ref_1 [DOC] ref_2 …`, at most `max_len` long.
///
/// When over length, the longest remaining reference loses its last token
/// first; a reference cut to nothing is dropped with its `[DOC]`; the source
/// abstract is cut only once no references remain.
pub fn encode_query(rec: &ExampleRecord, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut source = vocab.encode(&rec.source_abstract);
    let mut refs: Vec<Vec<u32>> = rec.ref_abstracts.iter().map(|r| vocab.encode(r)).collect();

    let total = |source: &[u32], refs: &[Vec<u32>]| {
        1 + source.len() + refs.iter().map(|r| r.len() + 1).sum::<usize>()
    };
    let mut truncated = 0;
    let mut excess = total(&source, &refs).saturating_sub(max_len.max(1));
    while excess > 0 {
        let longest = refs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .map(|(i, r)| (i, r.len()));
        match longest {
            Some((i, len)) if len > 0 => {
                refs[i].pop();
                truncated += 1;
                excess -= 1;
                if refs[i].is_empty() {
                    refs.remove(i);
                    excess = excess.saturating_sub(1);
                }
            }
            Some((i, _)) => {
                refs.remove(i);
                excess -= 1;
            }
            None => {
                let cut = excess.min(source.len());
                source.truncate(source.len() - cut);
                truncated += cut;
                excess = 0;
            }
        }
    }

    let mut ids = Vec::with_capacity(total(&source, &refs));
    let mut global = Vec::with_capacity(ids.capacity());
    ids.push(CLS);
    global.push(true);
    ids.extend_from_slice(&source);
    global.resize(ids.len(), false);
    for r in &refs {
        ids.push(DOC);
        global.push(true);
        ids.extend_from_slice(r);
        global.resize(ids.len(), false);
    }
    TokenSequence {
        ids,
        global,
        truncated,
    }
}

/// `[BOS] target [EOS]`; `[EOS]` survives truncation.
pub fn encode_target(rec: &ExampleRecord, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    encode_target_text(&rec.target, vocab, max_len)
}

pub fn encode_target_text(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut body = vocab.encode(text);
    let room = max_len.max(2) - 2;
    let truncated = body.len().saturating_sub(room);
    body.truncate(room);
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(BOS);
    ids.extend(body);
    ids.push(EOS);
    TokenSequence {
        global: vec![false; ids.len()],
        ids,
        truncated,
    }
}

/// Knowledge-base document layout: `[CLS] text`.
pub fn encode_memory(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut body = vocab.encode(text);
    let room = max_len.max(1) - 1;
    let truncated = body.len().saturating_sub(room);
    body.truncate(room);
    let mut ids = Vec::with_capacity(body.len() + 1);
    ids.push(CLS);
    ids.extend(body);
    let mut global = vec![false; ids.len()];
    global[0] = true;
    TokenSequence {
        ids,
        global,
        truncated,
    }
}
