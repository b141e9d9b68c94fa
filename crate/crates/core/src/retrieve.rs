//! Knowledge-base construction and refresh, and training-time retrieval
//! with differentiable score recomputation.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{relevance_score_var, EncoderStack};
use crate::error::{Error, Result};
use crate::index::{IndexEntry, MemoryIndex, SearchHit};
use crate::math::{ParamStore, Tape, Var};
use crate::model::Model;
use crate::text::vocab::{CLS, DOC};
use crate::text::{encode_memory, ExampleRecord, TokenSequence, Vocabulary};

/// A knowledge-base document before encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryDoc {
    pub id: u64,
    pub key: String,
    pub tokens: Vec<u32>,
}

/// The knowledge base built from the records' target summaries; each
/// document is keyed by its record id.
pub fn memory_corpus(records: &[ExampleRecord], vocab: &Vocabulary, max_len: usize) -> Vec<MemoryDoc> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| MemoryDoc {
            id: i as u64,
            key: r.id.clone(),
            tokens: encode_memory(&r.target, vocab, max_len).ids,
        })
        .collect()
}

/// Rebuilds the global flags of a stored token list.
pub fn stored_sequence(tokens: &[u32]) -> TokenSequence {
    TokenSequence {
        ids: tokens.to_vec(),
        global: tokens.iter().map(|&t| t == CLS || t == DOC).collect(),
        truncated: 0,
    }
}

fn embed_all(encoder: &EncoderStack, store: &ParamStore, docs: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
    docs.par_iter()
        .map(|tokens| {
            let doc = encoder.encode_detached(store, &stored_sequence(tokens))?;
            Ok(doc.cls_unit.iter().map(|&v| v as f32).collect())
        })
        .collect()
}

pub fn build_index(docs: &[MemoryDoc], encoder: &EncoderStack, store: &ParamStore) -> Result<MemoryIndex> {
    if docs.is_empty() {
        return Err(Error::Ingestion("memory corpus is empty".into()));
    }
    let mut seen = HashSet::with_capacity(docs.len());
    for d in docs {
        if !seen.insert(d.id) {
            return Err(Error::Ingestion(format!("duplicate memory document id {}", d.id)));
        }
    }
    let token_lists: Vec<&[u32]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
    let embeddings = embed_all(encoder, store, &token_lists)?;
    let entries = docs
        .iter()
        .zip(embeddings)
        .map(|(d, embedding)| IndexEntry {
            id: d.id,
            key: d.key.clone(),
            tokens: d.tokens.clone(),
            embedding,
        })
        .collect();
    MemoryIndex::new(encoder.d_model(), entries, 0)
}

/// Re-encodes every entry with the current encoder parameters, retrains a
/// present quantizer and advances the epoch.
pub fn refresh(index: &mut MemoryIndex, encoder: &EncoderStack, store: &ParamStore) -> Result<()> {
    let token_lists: Vec<&[u32]> = index.entries().iter().map(|e| e.tokens.as_slice()).collect();
    let embeddings = embed_all(encoder, store, &token_lists)?;
    index.replace_embeddings(embeddings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Exact,
    Approx { n_probe: usize },
}

pub fn search(index: &MemoryIndex, query: &[f64], k: usize, mode: SearchMode) -> Result<Vec<SearchHit>> {
    match mode {
        SearchMode::Exact => index.search_exact(query, k),
        SearchMode::Approx { n_probe } => index.search_approx(query, k, n_probe),
    }
}

/// One of the top-k, re-encoded on the current tape.
#[derive(Debug, Clone)]
pub struct RetrievedCandidate {
    pub doc_id: u64,
    pub key: String,
    /// Score from the (possibly stale) index.
    pub stale_score: f64,
    /// `1×1` relevance of the live query against the freshly encoded document.
    pub score: Var,
    /// `L × d_model` retrieved-encoder token states.
    pub states: Var,
    pub token_ids: Vec<u32>,
}

/// Searches for `k` documents outside `exclusions` and re-encodes each one
/// with the memory encoder (for a differentiable score against
/// `query_unit`) and the retrieved encoder (for its token states). The
/// result is ordered by recomputed score, ties by ascending id.
pub fn retrieve_candidates(
    tape: &mut Tape,
    model: &Model,
    index: &MemoryIndex,
    query_unit: Var,
    k: usize,
    exclusions: &HashSet<u64>,
    mode: SearchMode,
) -> Result<Vec<RetrievedCandidate>> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let query = tape.value(query_unit).data().to_vec();
    let wanted = (k + exclusions.len()).min(index.len());
    let hits = search(index, &query, wanted, mode)?;
    let kept: Vec<SearchHit> = hits.into_iter().filter(|h| !exclusions.contains(&h.id)).take(k).collect();
    if kept.len() < k {
        return Err(Error::RetrievalUnderflow {
            requested: k,
            shortfall: k - kept.len(),
        });
    }
    let mut out = Vec::with_capacity(k);
    for hit in kept {
        let entry = index
            .entry(hit.id)
            .ok_or_else(|| Error::Retrieval(format!("hit {} missing from index", hit.id)))?;
        let seq = stored_sequence(&entry.tokens);
        let mem = model.memory.encode(tape, &seq)?;
        let score = relevance_score_var(tape, query_unit, mem.cls_unit)?;
        let states = model.retrieved.encode(tape, &seq)?.states;
        out.push(RetrievedCandidate {
            doc_id: entry.id,
            key: entry.key.clone(),
            stale_score: hit.score,
            score,
            states,
            token_ids: entry.tokens.clone(),
        });
    }
    out.sort_by(|a, b| {
        let (sa, sb) = (tape.value(a.score).data()[0], tape.value(b.score).data()[0]);
        sb.total_cmp(&sa).then(a.doc_id.cmp(&b.doc_id))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::encode_query;

    fn setup() -> (Model, Vocabulary, Vec<ExampleRecord>) {
        let records: Vec<ExampleRecord> = (0..6)
            .map(|i| ExampleRecord::new(format!("r{i}"), format!("alpha {i} beta"), vec![], format!("gamma {i} delta w{i}")))
            .collect();
        let vocab = Vocabulary::build(&records, 100, 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            heads: 2,
            layers: 1,
            max_len: 16,
            max_target_len: 16,
            init_std: 0.2,
            ..ModelConfig::default()
        };
        (Model::new(cfg, 3).unwrap(), vocab, records)
    }

    #[test]
    fn fresh_index_scores_match_recomputed_scores() {
        let (model, vocab, records) = setup();
        let docs = memory_corpus(&records, &vocab, 16);
        let index = build_index(&docs, &model.memory, &model.params).unwrap();
        let mut tape = Tape::new(&model.params);
        let q = model.query.encode(&mut tape, &encode_query(&records[0], &vocab, 16)).unwrap();
        let cands = retrieve_candidates(&mut tape, &model, &index, q.cls_unit, 3, &HashSet::new(), SearchMode::Exact).unwrap();
        assert_eq!(cands.len(), 3);
        for c in &cands {
            // stored embeddings are f32
            assert!((c.stale_score - tape.item(c.score).unwrap()).abs() < 1e-6);
        }
        let scores: Vec<f64> = cands.iter().map(|c| tape.item(c.score).unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn refresh_tracks_parameter_updates() {
        let (mut model, vocab, records) = setup();
        let docs = memory_corpus(&records, &vocab, 16);
        let mut index = build_index(&docs, &model.memory, &model.params).unwrap();
        let before = index.entries()[0].embedding.clone();
        let id = model.params.id("memory.block0.ff.up.w").unwrap();
        for (i, v) in model.params.value_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.05 * (i as f64).sin();
        }
        refresh(&mut index, &model.memory, &model.params).unwrap();
        assert_eq!(index.epoch(), 1);
        assert_ne!(index.entries()[0].embedding, before);
        let mut tape = Tape::new(&model.params);
        let q = model.query.encode(&mut tape, &encode_query(&records[1], &vocab, 16)).unwrap();
        let cands = retrieve_candidates(&mut tape, &model, &index, q.cls_unit, 2, &HashSet::new(), SearchMode::Exact).unwrap();
        for c in &cands {
            assert!((c.stale_score - tape.item(c.score).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn exclusions_and_underflow() {
        let (model, vocab, records) = setup();
        let docs = memory_corpus(&records, &vocab, 16);
        let index = build_index(&docs, &model.memory, &model.params).unwrap();
        let mut tape = Tape::new(&model.params);
        let q = model.query.encode(&mut tape, &encode_query(&records[2], &vocab, 16)).unwrap();
        let gold: HashSet<u64> = index.id_for_key("r2").into_iter().collect();
        let cands = retrieve_candidates(&mut tape, &model, &index, q.cls_unit, 5, &gold, SearchMode::Exact).unwrap();
        assert!(cands.iter().all(|c| c.key != "r2"));
        let err = retrieve_candidates(&mut tape, &model, &index, q.cls_unit, 6, &gold, SearchMode::Exact);
        assert!(matches!(err, Err(Error::RetrievalUnderflow { requested: 6, shortfall: 1 })));
    }

    #[test]
    fn duplicate_document_ids_are_rejected() {
        let (model, vocab, records) = setup();
        let mut docs = memory_corpus(&records, &vocab, 16);
        docs[1].id = docs[0].id;
        assert!(matches!(build_index(&docs, &model.memory, &model.params), Err(Error::Ingestion(_))));
    }
}
