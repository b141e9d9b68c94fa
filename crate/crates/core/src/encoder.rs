//! Transformer encoders with `[CLS]` pooling and unit normalization for
//! relevance scoring.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Embeddings, FeedForward, LayerNorm, MultiHeadAttention};
use crate::math::{dot, l2_norm, Mask, ParamStore, Tape, Tensor, Var};
use crate::text::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderShape {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Local attention half-width; `None` is full attention.
    pub window: Option<usize>,
    pub init_std: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub name: String,
    embeddings: Embeddings,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    window: Option<usize>,
    d_model: usize,
}

/// Encoder outputs as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub states: Var,
    pub cls_raw: Var,
    pub cls_unit: Var,
}

/// Encoder outputs detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDocument {
    pub states: Tensor,
    pub cls_raw: Vec<f64>,
    pub cls_unit: Vec<f64>,
}

impl EncodedDocument {
    pub fn from_vars(tape: &Tape, vars: &EncodedVars) -> Self {
        Self {
            states: tape.value(vars.states).clone(),
            cls_raw: tape.value(vars.cls_raw).data().to_vec(),
            cls_unit: tape.value(vars.cls_unit).data().to_vec(),
        }
    }
}

/// Self-attention mask: `|i − j| <= w`, plus full rows and columns for
/// global positions. Without a window every pair is allowed.
pub fn attention_mask(global: &[bool], window: Option<usize>) -> Mask {
    let n = global.len();
    match window {
        None => Mask::full(n, n),
        Some(w) => Mask::from_fn(n, n, |i, j| i.abs_diff(j) <= w || global[i] || global[j]),
    }
}

impl EncoderStack {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, shape: &EncoderShape, rng: &mut R) -> Result<Self> {
        let std = shape.init_std;
        let embeddings = Embeddings::new(store, name, shape.vocab_size, shape.max_len, shape.d_model, std, rng);
        let mut blocks = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let p = format!("{name}.block{l}");
            blocks.push(EncoderBlock {
                norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), shape.d_model, shape.eps),
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), shape.d_model, shape.heads, std, rng)?,
                norm_ff: LayerNorm::new(store, &format!("{p}.norm_ff"), shape.d_model, shape.eps),
                ff: FeedForward::new(store, &format!("{p}.ff"), shape.d_model, shape.d_ff, std, rng),
            });
        }
        Ok(Self {
            name: name.to_string(),
            embeddings,
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), shape.d_model, shape.eps),
            window: shape.window,
            d_model: shape.d_model,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_len(&self) -> usize {
        self.embeddings.max_len
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn set_window(&mut self, window: Option<usize>) {
        self.window = window;
    }

    pub fn encode(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<EncodedVars> {
        let mut x = self.embeddings.forward(tape, &seq.ids_usize())?;
        let mask = attention_mask(&seq.global, self.window);
        let mask = (!mask.is_full()).then_some(mask);
        for block in &self.blocks {
            let h = block.norm_attn.forward(tape, x)?;
            let a = block.attn.forward(tape, h, h, mask.as_ref())?;
            x = tape.add(x, a)?;
            let h = block.norm_ff.forward(tape, x)?;
            let f = block.ff.forward(tape, h)?;
            x = tape.add(x, f)?;
        }
        let states = self.final_norm.forward(tape, x)?;
        let cls_raw = tape.slice_rows(states, 0, 1)?;
        let norm = l2_norm(tape.value(cls_raw).data());
        if norm < crate::math::NORM_FLOOR {
            return Err(Error::Numeric(format!(
                "{} encoder produced a zero-norm [CLS] vector",
                self.name
            )));
        }
        let cls_unit = tape.normalize_rows(cls_raw);
        Ok(EncodedVars {
            states,
            cls_raw,
            cls_unit,
        })
    }

    /// Encodes on a throwaway tape.
    pub fn encode_detached(&self, store: &ParamStore, seq: &TokenSequence) -> Result<EncodedDocument> {
        let mut tape = Tape::new(store);
        let vars = self.encode(&mut tape, seq)?;
        Ok(EncodedDocument::from_vars(&tape, &vars))
    }
}

const UNIT_TOLERANCE: f64 = 1e-6;

/// Inner product of two unit vectors, i.e. their cosine similarity.
pub fn relevance_score(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("relevance_score", &[x.len()], &[y.len()]));
    }
    for (name, v) in [("x", x), ("y", y)] {
        let n = l2_norm(v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!(
                "relevance_score input {name} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(dot(x, y))
}

/// Differentiable relevance score between two `1×d` unit rows.
pub fn relevance_score_var(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    tape.matmul_bt(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::CLS;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(window: Option<usize>) -> EncoderShape {
        EncoderShape {
            vocab_size: 20,
            d_model: 8,
            heads: 2,
            layers: 2,
            d_ff: 16,
            max_len: 12,
            window,
            init_std: 0.3,
            eps: 1e-5,
        }
    }

    #[test]
    fn full_attention_without_window() {
        let m = attention_mask(&[false; 5], None);
        assert!(m.is_full());
    }

    #[test]
    fn window_two_enumerated() {
        let m = attention_mask(&[false; 6], Some(2));
        let row0: Vec<usize> = (0..6).filter(|&j| m.allowed(0, j)).collect();
        assert_eq!(row0, vec![0, 1, 2]);
        // by definition, for every pair
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.allowed(i, j), i.abs_diff(j) <= 2);
            }
        }
    }

    #[test]
    fn global_cls_row_and_column() {
        let mut g = vec![false; 6];
        g[0] = true;
        let m = attention_mask(&g, Some(1));
        for j in 0..6 {
            assert!(m.allowed(0, j));
            assert!(m.allowed(j, 0));
        }
        assert!(!m.allowed(2, 5));
    }

    #[test]
    fn relevance_examples() {
        let x = [0.6, 0.8];
        assert!((relevance_score(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((relevance_score(&x, &[-0.6, -0.8]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(relevance_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(relevance_score(&[2.0, 0.0], &[1.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn cls_unit_has_unit_norm_and_encode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = EncoderStack::new(&mut store, "enc", &shape(None), &mut rng).unwrap();
        let seq = TokenSequence::plain(vec![CLS, 7, 8, 9, 10]);
        let a = enc.encode_detached(&store, &seq).unwrap();
        let b = enc.encode_detached(&store, &seq).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(&a.cls_unit) - 1.0).abs() < 1e-9);
        assert_eq!(a.states.shape(), &[5, 8]);
    }

    #[test]
    fn mask_equivalence_full_vs_all_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mut enc = EncoderStack::new(&mut store, "enc", &shape(None), &mut rng).unwrap();
        let seq = TokenSequence::plain(vec![CLS, 3, 11, 12, 13, 14, 15]);
        let full = enc.encode_detached(&store, &seq).unwrap();
        enc.set_window(Some(12));
        let mut all_global = seq.clone();
        all_global.global = vec![true; seq.len()];
        let windowed = enc.encode_detached(&store, &all_global).unwrap();
        for (a, b) in full.states.data().iter().zip(windowed.states.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        // a real window does change the result
        enc.set_window(Some(1));
        let local = enc.encode_detached(&store, &seq).unwrap();
        assert_ne!(local.states, full.states);
    }

    #[test]
    fn over_long_sequence_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = EncoderStack::new(&mut store, "enc", &shape(None), &mut rng).unwrap();
        let seq = TokenSequence::plain(vec![CLS; 13]);
        assert!(matches!(enc.encode_detached(&store, &seq), Err(Error::Contract(_))));
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = l2_norm(&v).max(1e-3);
        v.into_iter().map(|x| x / n).collect()
    }

    proptest! {
        #[test]
        fn score_symmetric_and_bounded(
            a in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            prop_assume!(l2_norm(&a) > 1e-3 && l2_norm(&b) > 1e-3);
            let (x, y) = (unit(a), unit(b));
            let s = relevance_score(&x, &y).unwrap();
            prop_assert_eq!(s, relevance_score(&y, &x).unwrap());
            prop_assert!(s.abs() <= 1.0 + 1e-9);
        }
    }
}
