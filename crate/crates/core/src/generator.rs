//! Decoder with cross-attention over the source states and a single-head
//! copy layer over retrieved-candidate tokens.
//!
//! The copy layer attends from each decoder state `h` to every candidate
//! token state `r` with logits `h·W_a·rᵀ + β·s` (the relevance score `s` of
//! the token's document, shared by all its tokens). The attention-pooled
//! tokens, projected by `W_c`, give the context `c`. The vocabulary
//! distribution `softmax((h + c)·W_d + b_d)` is mixed with the copy
//! distribution (attention weights scattered onto token ids) through a
//! gate `λ = σ([h; c]·w_g + b_g)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Embeddings, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::math::{Mask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::retrieve::RetrievedCandidate;
use crate::text::vocab::{is_structural, BOS, PAD};
use crate::text::TokenSequence;

/// Floor on probabilities inside the log-likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderShape {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub gate_bias_init: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct DecoderStack {
    embeddings: Embeddings,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
}

impl DecoderStack {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, shape: &DecoderShape, rng: &mut R) -> Result<Self> {
        let std = shape.init_std;
        let d = shape.d_model;
        let mut blocks = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let p = format!("{name}.block{l}");
            blocks.push(DecoderBlock {
                norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), d, shape.eps),
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, shape.heads, std, rng)?,
                norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), d, shape.eps),
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, shape.heads, std, rng)?,
                norm_ff: LayerNorm::new(store, &format!("{p}.norm_ff"), d, shape.eps),
                ff: FeedForward::new(store, &format!("{p}.ff"), d, shape.d_ff, std, rng),
            });
        }
        Ok(Self {
            embeddings: Embeddings::new(store, name, shape.vocab_size, shape.max_len, d, std, rng),
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d, shape.eps),
        })
    }

    pub fn max_len(&self) -> usize {
        self.embeddings.max_len
    }

    /// Hidden states for every prefix position, each seeing only itself and
    /// earlier positions.
    pub fn forward(&self, tape: &mut Tape, prefix: &[u32], source: Var) -> Result<Var> {
        let ids: Vec<usize> = prefix.iter().map(|&i| i as usize).collect();
        let mut x = self.embeddings.forward(tape, &ids)?;
        let causal = Mask::causal(ids.len());
        for b in &self.blocks {
            let h = b.norm_self.forward(tape, x)?;
            let a = b.self_attn.forward(tape, h, h, Some(&causal))?;
            x = tape.add(x, a)?;
            let h = b.norm_cross.forward(tape, x)?;
            let a = b.cross_attn.forward(tape, h, source, None)?;
            x = tape.add(x, a)?;
            let h = b.norm_ff.forward(tape, x)?;
            let f = b.ff.forward(tape, h)?;
            x = tape.add(x, f)?;
        }
        self.final_norm.forward(tape, x)
    }
}

#[derive(Debug, Clone)]
pub struct CopyLayer {
    pub w_a: ParamId,
    pub w_c: ParamId,
    pub beta: ParamId,
    pub gate: Linear,
}

impl CopyLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, shape: &DecoderShape, rng: &mut R) -> Self {
        let d = shape.d_model;
        let gate = Linear {
            w: store.normal(format!("{name}.gate.w"), &[2 * d, 1], shape.init_std, rng),
            b: store.constant(format!("{name}.gate.b"), &[1], shape.gate_bias_init),
        };
        Self {
            w_a: store.normal(format!("{name}.w_a"), &[d, d], shape.init_std, rng),
            w_c: store.normal(format!("{name}.w_c"), &[d, d], shape.init_std, rng),
            beta: store.constant(format!("{name}.beta"), &[1, 1], 0.0),
            gate,
        }
    }
}

/// The flattened token set of all retrieved candidates, on a tape.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    /// `N × d_model`, rows in candidate order.
    pub states: Var,
    /// `1 × k` relevance scores.
    pub scores: Var,
    pub token_ids: Vec<usize>,
    pub doc_of_token: Vec<usize>,
    pub copyable: Vec<bool>,
}

impl CandidateSet {
    /// `None` when no candidate is supplied.
    pub fn from_candidates(tape: &mut Tape, cands: &[RetrievedCandidate]) -> Result<Option<Self>> {
        if cands.is_empty() {
            return Ok(None);
        }
        let states: Vec<Var> = cands.iter().map(|c| c.states).collect();
        let scores: Vec<Var> = cands.iter().map(|c| c.score).collect();
        let mut token_ids = Vec::new();
        let mut doc_of_token = Vec::new();
        for (i, c) in cands.iter().enumerate() {
            if tape.value(c.states).rows() != c.token_ids.len() {
                return Err(Error::dim(
                    "candidate states",
                    tape.value(c.states).shape(),
                    &[c.token_ids.len()],
                ));
            }
            token_ids.extend(c.token_ids.iter().map(|&t| t as usize));
            doc_of_token.extend(std::iter::repeat_n(i, c.token_ids.len()));
        }
        let copyable = token_ids.iter().map(|&t| !is_structural(t as u32)).collect();
        Ok(Some(Self {
            states: tape.concat_rows(&states)?,
            scores: tape.concat_cols(&scores)?,
            token_ids,
            doc_of_token,
            copyable,
        }))
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Copy-attention weights over all candidate tokens (`T × N`) and the
/// projected context (`T × d_model`) for each decoder row of `h`.
pub fn copy_attention(tape: &mut Tape, h: Var, cands: &CandidateSet, layer: &CopyLayer) -> Result<(Var, Var)> {
    if !cands.copyable.iter().any(|&c| c) {
        return Err(Error::Degenerate("no copyable candidate token".into()));
    }
    let w_a = tape.param(layer.w_a);
    let w_c = tape.param(layer.w_c);
    let beta = tape.param(layer.beta);
    let query = tape.matmul(h, w_a)?;
    let per_token = tape.gather_cols(cands.scores, &cands.doc_of_token)?;
    let bias = tape.scale_by(per_token, beta)?;
    let rows = tape.value(h).rows();
    let mask = Mask::broadcast_row(rows, &cands.copyable);
    let (pooled, alpha) =
        tape.attention_scaled(query, cands.states, cands.states, Some(&mask), Some(bias), 1.0)?;
    let context = tape.matmul(pooled, w_c)?;
    Ok((alpha, context))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecodeOptions {
    /// Replaces the learned gate with a constant λ.
    pub gate_override: Option<f64>,
}

/// Per-position distributions on a tape.
#[derive(Debug, Clone)]
pub struct MixtureVars {
    /// `T × V` final next-token probabilities.
    pub probs: Var,
    /// `T × V` vocabulary softmax.
    pub p_dec: Var,
    /// `T × 1` gate values; absent without candidates.
    pub lambda: Option<Var>,
    pub alpha: Option<Var>,
    pub context: Option<Var>,
}

/// Next-token distribution at one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDistribution {
    pub probs: Vec<f64>,
    pub p_dec: Vec<f64>,
    /// Zero when no candidates were supplied.
    pub lambda: f64,
    pub alpha: Vec<f64>,
    pub context: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CopyGenerator {
    pub decoder: DecoderStack,
    pub copy: CopyLayer,
    pub output: Linear,
    pub vocab_size: usize,
}

impl CopyGenerator {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, shape: &DecoderShape, rng: &mut R) -> Result<Self> {
        Ok(Self {
            decoder: DecoderStack::new(store, &format!("{name}.decoder"), shape, rng)?,
            copy: CopyLayer::new(store, &format!("{name}.copy"), shape, rng),
            output: Linear::new(store, &format!("{name}.out"), shape.d_model, shape.vocab_size, shape.init_std, rng),
            vocab_size: shape.vocab_size,
        })
    }

    /// Distributions for every position of `prefix`.
    pub fn distributions(
        &self,
        tape: &mut Tape,
        prefix: &[u32],
        source: Var,
        cands: Option<&CandidateSet>,
        opts: DecodeOptions,
    ) -> Result<MixtureVars> {
        let h = self.decoder.forward(tape, prefix, source)?;
        let Some(cands) = cands else {
            let logits = self.output.forward(tape, h)?;
            let p_dec = tape.softmax(logits, None)?;
            return Ok(MixtureVars {
                probs: p_dec,
                p_dec,
                lambda: None,
                alpha: None,
                context: None,
            });
        };
        let (alpha, context) = copy_attention(tape, h, cands, &self.copy)?;
        let mixed = tape.add(h, context)?;
        let logits = self.output.forward(tape, mixed)?;
        let p_dec = tape.softmax(logits, None)?;
        let copy = tape.scatter_cols(alpha, &cands.token_ids, self.vocab_size)?;
        let lambda = match opts.gate_override {
            Some(l) => tape.constant(Tensor::full(&[prefix.len(), 1], l)),
            None => {
                let gate_in = tape.concat_cols(&[h, context])?;
                let g = self.copy.gate.forward(tape, gate_in)?;
                tape.sigmoid(g)
            }
        };
        let keep = tape.one_minus(lambda);
        let from_dec = tape.mul_col(p_dec, keep)?;
        let from_copy = tape.mul_col(copy, lambda)?;
        let probs = tape.add(from_dec, from_copy)?;
        Ok(MixtureVars {
            probs,
            p_dec,
            lambda: Some(lambda),
            alpha: Some(alpha),
            context: Some(context),
        })
    }

    /// Distribution over the token following `prefix`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        prefix: &[u32],
        source: Var,
        cands: Option<&CandidateSet>,
        opts: DecodeOptions,
    ) -> Result<MixtureDistribution> {
        match prefix.first() {
            None => return Err(Error::Contract("decode_step needs a non-empty prefix".into())),
            Some(&t) if t != BOS => {
                return Err(Error::Contract("decode_step prefix must start with [BOS]".into()))
            }
            _ => {}
        }
        let m = self.distributions(tape, prefix, source, cands, opts)?;
        let last = prefix.len() - 1;
        let row = |tape: &Tape, v: Var| tape.value(v).row_slice(last).to_vec();
        Ok(MixtureDistribution {
            probs: row(tape, m.probs),
            p_dec: row(tape, m.p_dec),
            lambda: m.lambda.map_or(0.0, |l| tape.value(l).data()[last]),
            alpha: m.alpha.map_or_else(Vec::new, |a| row(tape, a)),
            context: m.context.map_or_else(Vec::new, |c| row(tape, c)),
        })
    }

    /// Teacher-forced mean per-token negative log-likelihood of one target.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        target: &TokenSequence,
        source: Var,
        cands: Option<&CandidateSet>,
    ) -> Result<RecordLoss> {
        let ids = &target.ids;
        if ids.len() < 2 {
            return Err(Error::Contract("target needs at least [BOS] and one token".into()));
        }
        let inputs = &ids[..ids.len() - 1];
        let gold: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
        let m = self.distributions(tape, inputs, source, cands, DecodeOptions::default())?;
        let picked = tape.pick_rows(m.probs, &gold)?;
        let logp = tape.log(picked, PROB_FLOOR);
        let weights: Vec<f64> = gold.iter().map(|&g| if g == PAD as usize { 0.0 } else { 1.0 }).collect();
        let count = weights.iter().sum::<f64>();
        if count == 0.0 {
            return Err(Error::Contract("target has no non-padding positions".into()));
        }
        let w = tape.constant(Tensor::new(vec![gold.len(), 1], weights)?);
        let masked = tape.mul(logp, w)?;
        let total = tape.sum(masked);
        let loss = tape.scale(total, -1.0 / count);
        let value = tape.item(loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite sequence loss {value}")));
        }
        Ok(RecordLoss {
            loss,
            lambda: m.lambda,
            tokens: count as usize,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RecordLoss {
    pub loss: Var,
    pub lambda: Option<Var>,
    pub tokens: usize,
}

/// One record's inputs to [`sequence_loss`].
pub struct LossInput<'a> {
    pub target: &'a TokenSequence,
    pub source: Var,
    pub candidates: Option<&'a CandidateSet>,
}

/// Mean over the batch of each record's per-token negative log-likelihood.
pub fn sequence_loss(tape: &mut Tape, generator: &CopyGenerator, batch: &[LossInput<'_>]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        losses.push(generator.record_loss(tape, item.target, item.source, item.candidates)?.loss);
    }
    let stacked = tape.concat_rows(&losses)?;
    Ok(tape.mean(stacked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::EOS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;
    const V: usize = 20;

    fn setup(seed: u64) -> (ParamStore, CopyGenerator) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let shape = DecoderShape {
            vocab_size: V,
            d_model: D,
            heads: 2,
            layers: 1,
            d_ff: 16,
            max_len: 16,
            init_std: 0.3,
            gate_bias_init: -2.0,
            eps: 1e-5,
        };
        let g = CopyGenerator::new(&mut store, "gen", &shape, &mut rng).unwrap();
        (store, g)
    }

    fn random(rows: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, D, (0..rows * D).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn candidate(tape: &mut Tape, states: Tensor, score: f64, tokens: Vec<u32>) -> RetrievedCandidate {
        RetrievedCandidate {
            doc_id: 0,
            key: String::new(),
            stale_score: score,
            score: tape.constant(Tensor::scalar(score)),
            states: tape.constant(states),
            token_ids: tokens,
        }
    }

    #[test]
    fn identical_tokens_with_zero_beta_attend_uniformly() {
        let (store, g) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new(&store);
        let row = random(1, &mut rng);
        let states = Tensor::from_rows(&vec![row.data().to_vec(); 4]).unwrap();
        let c = candidate(&mut tape, states, 0.7, vec![10, 11, 12, 13]);
        let set = CandidateSet::from_candidates(&mut tape, &[c]).unwrap().unwrap();
        let h = tape.constant(random(3, &mut rng));
        let (alpha, _) = copy_attention(&mut tape, h, &set, &g.copy).unwrap();
        for v in tape.value(alpha).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_gets_all_weight() {
        let (store, g) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new(&store);
        let c = candidate(&mut tape, random(1, &mut rng), 0.2, vec![9]);
        let set = CandidateSet::from_candidates(&mut tape, &[c]).unwrap().unwrap();
        let h = tape.constant(random(2, &mut rng));
        let (alpha, _) = copy_attention(&mut tape, h, &set, &g.copy).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0, 1.0]);
    }

    #[test]
    fn relevance_bias_shifts_weight_to_the_better_document() {
        let (mut store, g) = setup(1);
        store.value_mut(g.copy.beta).data_mut()[0] = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new(&store);
        let r = random(1, &mut rng);
        let a = candidate(&mut tape, r.clone(), 1.0, vec![10]);
        let b = candidate(&mut tape, r, -1.0, vec![11]);
        let set = CandidateSet::from_candidates(&mut tape, &[a, b]).unwrap().unwrap();
        let h = tape.constant(random(1, &mut rng));
        let (alpha, _) = copy_attention(&mut tape, h, &set, &g.copy).unwrap();
        let w = tape.value(alpha).data();
        let expected = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((w[0] - expected).abs() < 1e-12);
        assert!((w[0] - 0.982).abs() < 1e-3 && (w[1] - 0.018).abs() < 1e-3);
    }

    fn step(store: &ParamStore, g: &CopyGenerator, prefix: &[u32], cands: bool, opts: DecodeOptions) -> MixtureDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new(store);
        let source = tape.constant(random(5, &mut rng));
        let list = if cands {
            vec![
                candidate(&mut tape, random(3, &mut rng), 0.4, vec![4, 12, 13]),
                candidate(&mut tape, random(2, &mut rng), 0.1, vec![13, 14]),
            ]
        } else {
            vec![]
        };
        let set = CandidateSet::from_candidates(&mut tape, &list).unwrap();
        g.decode_step(&mut tape, prefix, source, set.as_ref(), opts).unwrap()
    }

    #[test]
    fn mixture_is_a_distribution() {
        let (store, g) = setup(7);
        let d = step(&store, &g, &[BOS, 12, 7], true, DecodeOptions::default());
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.lambda > 0.0 && d.lambda < 1.0);
        // the [CLS] position is never copied
        assert_eq!(d.alpha[0], 0.0);
    }

    #[test]
    fn gate_extremes() {
        let (store, g) = setup(7);
        let off = step(&store, &g, &[BOS, 12], true, DecodeOptions { gate_override: Some(0.0) });
        assert_eq!(off.probs, off.p_dec);
        let on = step(&store, &g, &[BOS, 12], true, DecodeOptions { gate_override: Some(1.0) });
        let mut copy = vec![0.0; V];
        for (a, t) in on.alpha.iter().zip([4usize, 12, 13, 13, 14]) {
            copy[t] += a;
        }
        for (p, c) in on.probs.iter().zip(&copy) {
            assert!((p - c).abs() < 1e-15);
        }
    }

    #[test]
    fn no_candidates_is_plain_softmax() {
        let (store, g) = setup(8);
        let prefix = [BOS, 15, 16];
        let d = step(&store, &g, &prefix, false, DecodeOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new(&store);
        let source = tape.constant(random(5, &mut rng));
        let h = g.decoder.forward(&mut tape, &prefix, source).unwrap();
        let w = tape.param(g.output.w);
        let b = tape.param(g.output.b);
        let logits = tape.affine(h, w, b).unwrap();
        let p = tape.softmax(logits, None).unwrap();
        assert_eq!(d.probs, tape.value(p).row_slice(2));
        assert_eq!(d.lambda, 0.0);
    }

    #[test]
    fn positions_do_not_see_the_future() {
        let (store, g) = setup(9);
        let short = step(&store, &g, &[BOS, 12], true, DecodeOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new(&store);
        let source = tape.constant(random(5, &mut rng));
        let list = vec![
            candidate(&mut tape, random(3, &mut rng), 0.4, vec![4, 12, 13]),
            candidate(&mut tape, random(2, &mut rng), 0.1, vec![13, 14]),
        ];
        let set = CandidateSet::from_candidates(&mut tape, &list).unwrap();
        let m = g.distributions(&mut tape, &[BOS, 12, 17, 18], source, set.as_ref(), DecodeOptions::default()).unwrap();
        let row = tape.value(m.probs).row_slice(1);
        for (a, b) in row.iter().zip(&short.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prefix_must_start_with_bos() {
        let (store, g) = setup(1);
        let mut tape = Tape::new(&store);
        let source = tape.constant(Tensor::zeros(&[1, D]));
        assert!(matches!(g.decode_step(&mut tape, &[], source, None, DecodeOptions::default()), Err(Error::Contract(_))));
        assert!(matches!(g.decode_step(&mut tape, &[12], source, None, DecodeOptions::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_matches_per_position_oracle() {
        let (store, g) = setup(10);
        let target = TokenSequence::plain(vec![BOS, 12, 13, 14, EOS]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new(&store);
        let source = tape.constant(random(5, &mut rng));
        let list = vec![
            candidate(&mut tape, random(3, &mut rng), 0.4, vec![4, 12, 13]),
            candidate(&mut tape, random(2, &mut rng), 0.1, vec![13, 14]),
        ];
        let set = CandidateSet::from_candidates(&mut tape, &list).unwrap();
        let rl = g.record_loss(&mut tape, &target, source, set.as_ref()).unwrap();
        let loss = tape.item(rl.loss).unwrap();
        let m = g.distributions(&mut tape, &target.ids[..4], source, set.as_ref(), DecodeOptions::default()).unwrap();
        let p = tape.value(m.probs);
        let oracle = -(0..4).map(|t| p.get(t, target.ids[t + 1] as usize).max(PROB_FLOOR).ln()).sum::<f64>() / 4.0;
        assert!((loss - oracle).abs() < 1e-12);
        assert_eq!(rl.tokens, 4);

        let batch = [
            LossInput { target: &target, source, candidates: set.as_ref() },
            LossInput { target: &target, source, candidates: None },
        ];
        let plain = g.record_loss(&mut tape, &target, source, None).unwrap();
        let plain = tape.item(plain.loss).unwrap();
        let mean = sequence_loss(&mut tape, &g, &batch).unwrap();
        assert!((tape.item(mean).unwrap() - (loss + plain) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn padding_positions_do_not_count() {
        let (store, g) = setup(10);
        let mut tape = Tape::new(&store);
        let source = tape.constant(Tensor::full(&[2, D], 0.1));
        let clean = TokenSequence::plain(vec![BOS, 12, EOS]);
        let padded = TokenSequence::plain(vec![BOS, 12, EOS, PAD, PAD]);
        let a = g.record_loss(&mut tape, &clean, source, None).unwrap();
        let b = g.record_loss(&mut tape, &padded, source, None).unwrap();
        assert_eq!(b.tokens, 2);
        assert!((tape.item(a.loss).unwrap() - tape.item(b.loss).unwrap()).abs() < 1e-12);
    }
}
