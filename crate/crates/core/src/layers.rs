//! Transformer building blocks shared by the encoders and the decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{Mask, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.normal(format!("{name}.w"), &[d_in, d_out], std, rng),
            b: store.constant(format!("{name}.b"), &[d_out], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.affine(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gamma: store.constant(format!("{name}.gamma"), &[d], 1.0),
            beta: store.constant(format!("{name}.beta"), &[d], 0.0),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Configuration(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, std, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, std, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, std, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, std, rng),
            heads,
        })
    }

    /// Queries from `x`, keys and values from `memory`.
    pub fn forward(&self, tape: &mut Tape, x: Var, memory: Var, mask: Option<&Mask>) -> Result<Var> {
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, memory)?;
        let v = self.value.forward(tape, memory)?;
        let d = tape.value(q).cols();
        let dh = d / self.heads;
        let merged = if self.heads == 1 {
            tape.attention(q, k, v, mask, None)?.0
        } else {
            let mut outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                outs.push(tape.attention(qh, kh, vh, mask, None)?.0);
            }
            tape.concat_cols(&outs)?
        };
        self.output.forward(tape, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, std, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, std, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Token plus learned position embeddings.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub max_len: usize,
}

impl Embeddings {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        d_model: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            tokens: store.normal(format!("{name}.tok_emb"), &[vocab_size, d_model], std, rng),
            positions: store.normal(format!("{name}.pos_emb"), &[max_len, d_model], std, rng),
            max_len,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot embed an empty sequence".into()));
        }
        if ids.len() > self.max_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.max_len
            )));
        }
        let tok = tape.param(self.tokens);
        let pos = tape.param(self.positions);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let te = tape.embed(tok, ids)?;
        let pe = tape.embed(pos, &positions)?;
        tape.add(te, pe)
    }
}
