use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::vocab::{BOS, EOS};

/// Anything that yields next-token log-probabilities for a prefix starting
/// with `[BOS]`.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub length_penalty: f64,
    /// Size of the n-grams that may not repeat; 0 disables blocking.
    pub no_repeat_ngram: usize,
    /// Most tokens generated after `[BOS]`, `[EOS]` included.
    pub max_len: usize,
    /// `[EOS]` is blocked until this many tokens have been generated.
    pub min_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            length_penalty: 1.0,
            no_repeat_ngram: 3,
            max_len: 256,
            min_len: 8,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Configuration("beam must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Configuration("max_len must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Configuration("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Starts with `[BOS]`.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    /// Ended by hitting the length limit rather than `[EOS]`.
    pub forced: bool,
    ngrams: HashSet<Vec<u32>>,
}

impl BeamHypothesis {
    fn start() -> Self {
        Self {
            tokens: vec![BOS],
            log_prob: 0.0,
            finished: false,
            forced: false,
            ngrams: HashSet::new(),
        }
    }

    /// Tokens generated after `[BOS]`.
    pub fn generated(&self) -> &[u32] {
        &self.tokens[1..]
    }

    pub fn score(&self, length_penalty: f64) -> f64 {
        length_score(self.log_prob, self.generated().len(), length_penalty)
    }

    fn repeats(&self, token: u32, n: usize) -> bool {
        if n == 0 || self.tokens.len() + 1 < n {
            return false;
        }
        let mut gram = self.tokens[self.tokens.len() + 1 - n..].to_vec();
        gram.push(token);
        self.ngrams.contains(&gram)
    }

    fn extend(&self, token: u32, log_prob: f64, n: usize) -> Self {
        let mut next = self.clone();
        next.tokens.push(token);
        next.log_prob = log_prob;
        next.finished = token == EOS;
        if n > 0 && next.tokens.len() >= n {
            next.ngrams.insert(next.tokens[next.tokens.len() - n..].to_vec());
        }
        next
    }
}

/// `log_prob / length^penalty`.
pub fn length_score(log_prob: f64, length: usize, penalty: f64) -> f64 {
    log_prob / (length.max(1) as f64).powf(penalty)
}

/// Higher score first, then the lexicographically smaller token sequence.
fn better(a: &BeamHypothesis, b: &BeamHypothesis, penalty: f64) -> Ordering {
    b.score(penalty).total_cmp(&a.score(penalty)).then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub best: BeamHypothesis,
    pub score: f64,
    /// All finished hypotheses, best first.
    pub finished: Vec<BeamHypothesis>,
}

/// Beam search from `[BOS]`. A continuation that would repeat an n-gram of
/// its own hypothesis is dropped; candidates tie-break by token id. Search
/// ends once `beam` hypotheses have emitted `[EOS]` from within the top
/// `beam` candidates of a step, or after `max_len` tokens, in which case the
/// survivors are force-finished.
pub fn beam_search(model: &impl StepModel, config: &DecodeConfig) -> Result<BeamOutput> {
    config.validate()?;
    let n = config.no_repeat_ngram;
    let vocab = model.vocab_size();
    let mut live = vec![BeamHypothesis::start()];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for step in 0..config.max_len {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (h_idx, h) in live.iter().enumerate() {
            let lp = model.log_probs(&h.tokens)?;
            if lp.len() != vocab {
                return Err(Error::dim("step log-probs", &[vocab], &[lp.len()]));
            }
            for (tok, &l) in lp.iter().enumerate() {
                let tok = tok as u32;
                if tok == EOS && step < config.min_len {
                    continue;
                }
                if l == f64::NEG_INFINITY || h.repeats(tok, n) {
                    continue;
                }
                if l.is_nan() {
                    return Err(Error::Numeric(format!("NaN log-probability for token {tok}")));
                }
                cands.push((h.log_prob + l, h_idx, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        let mut next = Vec::with_capacity(config.beam);
        for (rank, &(lp, h_idx, tok)) in cands.iter().enumerate() {
            if next.len() == config.beam {
                break;
            }
            let h = live[h_idx].extend(tok, lp, n);
            if h.finished {
                if rank < config.beam {
                    finished.push(h);
                }
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= config.beam {
            break;
        }
    }
    if finished.len() < config.beam {
        for mut h in live {
            h.finished = true;
            h.forced = true;
            finished.push(h);
        }
    }
    if finished.is_empty() {
        return Err(Error::Degenerate("every continuation was blocked".into()));
    }
    finished.sort_by(|a, b| better(a, b, config.length_penalty));
    let best = finished[0].clone();
    Ok(BeamOutput {
        score: best.score(config.length_penalty),
        best,
        finished,
    })
}

/// Repeated argmax (lowest id on ties) under the same length and n-gram
/// constraints as [`beam_search`].
pub fn greedy(model: &impl StepModel, config: &DecodeConfig) -> Result<BeamHypothesis> {
    let n = config.no_repeat_ngram;
    let mut h = BeamHypothesis::start();
    for step in 0..config.max_len {
        let lp = model.log_probs(&h.tokens)?;
        let mut best: Option<(u32, f64)> = None;
        for (tok, &l) in lp.iter().enumerate() {
            let tok = tok as u32;
            if (tok == EOS && step < config.min_len) || l == f64::NEG_INFINITY || h.repeats(tok, n) {
                continue;
            }
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((tok, l));
            }
        }
        let Some((tok, l)) = best else { break };
        h = h.extend(tok, h.log_prob + l, n);
        if h.finished {
            return Ok(h);
        }
    }
    h.finished = true;
    h.forced = true;
    Ok(h)
}

/// Whether any n-gram occurs twice in `tokens`.
pub fn has_repeated_ngram(tokens: &[u32], n: usize) -> bool {
    if n == 0 || tokens.len() < n {
        return false;
    }
    let mut seen = HashSet::new();
    tokens.windows(n).any(|w| !seen.insert(w))
}
