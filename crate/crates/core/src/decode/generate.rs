use std::collections::HashSet;

use crate::encoder::relevance_score;
use crate::error::{Error, Result};
use crate::generator::{CandidateSet, DecodeOptions, MixtureDistribution};
use crate::index::MemoryIndex;
use crate::math::{Tape, Tensor};
use crate::model::Model;
use crate::retrieve::{search, stored_sequence, RetrievedCandidate, SearchMode};
use crate::text::TokenSequence;

use super::beam::{beam_search, BeamOutput, DecodeConfig, StepModel};

/// A retrieved document encoded once, outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedCandidate {
    pub doc_id: u64,
    pub key: String,
    pub score: f64,
    pub states: Tensor,
    pub token_ids: Vec<u32>,
}

/// Everything decoding needs that does not change between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationContext {
    pub source: Tensor,
    pub candidates: Vec<FixedCandidate>,
}

/// Encodes the source and retrieves up to `k` candidates outside
/// `exclusions`. Without an index, or with `k = 0`, decoding runs without
/// candidates.
pub fn prepare_context(
    model: &Model,
    query: &TokenSequence,
    index: Option<&MemoryIndex>,
    k: usize,
    mode: SearchMode,
    exclusions: &HashSet<u64>,
) -> Result<GenerationContext> {
    let source = model.source.encode_detached(&model.params, query)?.states;
    let mut candidates = Vec::new();
    if let Some(index) = index.filter(|_| k > 0) {
        let q = model.query.encode_detached(&model.params, query)?.cls_unit;
        let wanted = (k + exclusions.len()).min(index.len());
        let hits = search(index, &q, wanted, mode)?;
        for hit in hits.into_iter().filter(|h| !exclusions.contains(&h.id)).take(k) {
            let entry = index
                .entry(hit.id)
                .ok_or_else(|| Error::Retrieval(format!("hit {} missing from index", hit.id)))?;
            let seq = stored_sequence(&entry.tokens);
            let mem = model.memory.encode_detached(&model.params, &seq)?;
            candidates.push(FixedCandidate {
                doc_id: entry.id,
                key: entry.key.clone(),
                score: relevance_score(&q, &mem.cls_unit)?,
                states: model.retrieved.encode_detached(&model.params, &seq)?.states,
                token_ids: entry.tokens.clone(),
            });
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
    }
    Ok(GenerationContext { source, candidates })
}

/// Runs the generator over a fixed context, one fresh tape per step.
pub struct ModelStepper<'a> {
    pub model: &'a Model,
    pub context: &'a GenerationContext,
    pub options: DecodeOptions,
}

impl ModelStepper<'_> {
    pub fn distribution(&self, prefix: &[u32]) -> Result<MixtureDistribution> {
        let mut tape = Tape::new(&self.model.params);
        let source = tape.constant(self.context.source.clone());
        let retrieved: Vec<RetrievedCandidate> = self
            .context
            .candidates
            .iter()
            .map(|c| RetrievedCandidate {
                doc_id: c.doc_id,
                key: c.key.clone(),
                stale_score: c.score,
                score: tape.constant(Tensor::scalar(c.score)),
                states: tape.constant(c.states.clone()),
                token_ids: c.token_ids.clone(),
            })
            .collect();
        let set = CandidateSet::from_candidates(&mut tape, &retrieved)?;
        self.model
            .generator
            .decode_step(&mut tape, prefix, source, set.as_ref(), self.options)
    }
}

impl StepModel for ModelStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.model.generator.vocab_size
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(self.distribution(prefix)?.probs.into_iter().map(f64::ln).collect())
    }
}

/// Beam search with `max_len` capped at the decoder's position limit.
pub fn generate(model: &Model, context: &GenerationContext, config: &DecodeConfig) -> Result<BeamOutput> {
    let mut config = *config;
    let limit = model.generator.decoder.max_len();
    if config.max_len > limit {
        log::debug!("max_len {} capped at decoder length {limit}", config.max_len);
        config.max_len = limit;
    }
    let stepper = ModelStepper {
        model,
        context,
        options: DecodeOptions::default(),
    };
    beam_search(&stepper, &config)
}
