use crate::error::{Error, Result};
use crate::math::{Tape, Tensor, Var};
use crate::model::Model;
use crate::text::{encode_memory, encode_query, ExampleRecord, TokenSequence, Vocabulary};

/// A query-side input and its paired memory-side document.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainPair {
    pub query: TokenSequence,
    pub memory: TokenSequence,
}

/// Source documents (query layout) paired with the record's summary.
pub fn pretrain_pairs(records: &[ExampleRecord], vocab: &Vocabulary, max_len: usize) -> Vec<PretrainPair> {
    records
        .iter()
        .map(|r| PretrainPair {
            query: encode_query(r, vocab, max_len),
            memory: encode_memory(&r.target, vocab, max_len),
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct InfoNce {
    /// `1×1` sum of the per-row losses.
    pub total: Var,
    /// `N×1`, row `i` is `−log softmax(scores_i / τ)_i`.
    pub per_row: Var,
}

/// In-batch contrastive loss over an `N×N` score matrix whose diagonal holds
/// the positive pairs.
pub fn info_nce(tape: &mut Tape, scores: Var, temperature: f64) -> Result<InfoNce> {
    let (n, m) = tape.value(scores).dims2()?;
    if n != m {
        return Err(Error::dim("info_nce", &[n, m], &[n, n]));
    }
    if n < 2 {
        return Err(Error::Configuration("contrastive loss needs at least two pairs per batch".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Configuration(format!("temperature must be positive, got {temperature}")));
    }
    let scaled = tape.scale(scores, 1.0 / temperature);
    let log_p = tape.log_softmax(scaled);
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.pick_rows(log_p, &diag)?;
    let per_row = tape.scale(picked, -1.0);
    let total = tape.sum(per_row);
    Ok(InfoNce { total, per_row })
}

/// Encodes every pair and returns the loss with the `N×N` score matrix.
pub fn contrastive_loss(tape: &mut Tape, model: &Model, pairs: &[PretrainPair], temperature: f64) -> Result<(InfoNce, Var)> {
    if pairs.len() < 2 {
        return Err(Error::Configuration("contrastive loss needs at least two pairs per batch".into()));
    }
    let mut queries = Vec::with_capacity(pairs.len());
    let mut docs = Vec::with_capacity(pairs.len());
    for p in pairs {
        queries.push(model.query.encode(tape, &p.query)?.cls_unit);
        docs.push(model.memory.encode(tape, &p.memory)?.cls_unit);
    }
    let a = tape.concat_rows(&queries)?;
    let b = tape.concat_rows(&docs)?;
    let scores = tape.matmul_bt(a, b)?;
    Ok((info_nce(tape, scores, temperature)?, scores))
}

/// Fraction of rows whose diagonal entry ranks first (lowest column wins ties).
pub fn in_batch_accuracy(scores: &Tensor) -> f64 {
    let (n, c) = (scores.rows(), scores.cols());
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = scores.row_slice(i);
            let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == i
        })
        .count();
    hits as f64 / n as f64
}
