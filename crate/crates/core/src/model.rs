//! The full retrieval-augmented summarizer: four encoders and the copy
//! generator over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderShape, EncoderStack};
use crate::error::{Error, Result};
use crate::generator::{CopyGenerator, DecoderShape};
use crate::math::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width; `None` means `4 · d_model`.
    pub d_ff: Option<usize>,
    pub max_len: usize,
    pub max_target_len: usize,
    pub window: Option<usize>,
    /// Query and memory encoders share one set of weights.
    pub tie_query_memory: bool,
    pub init_std: f64,
    pub gate_bias_init: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            heads: 4,
            layers: 2,
            d_ff: None,
            max_len: 512,
            max_target_len: 256,
            window: None,
            tie_query_memory: false,
            init_std: 0.02,
            gate_bias_init: -2.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Configuration("vocab_size must be positive".into()));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Configuration(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 2 || self.max_target_len < 2 {
            return Err(Error::Configuration("max lengths must be at least 2".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Configuration("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff(),
            max_len: self.max_len,
            window: self.window,
            init_std: self.init_std,
            eps: self.layer_norm_eps,
        }
    }

    fn decoder_shape(&self) -> DecoderShape {
        DecoderShape {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff(),
            max_len: self.max_target_len,
            init_std: self.init_std,
            gate_bias_init: self.gate_bias_init,
            eps: self.layer_norm_eps,
        }
    }
}

pub const QUERY: &str = "query";
pub const MEMORY: &str = "memory";
pub const SOURCE: &str = "source";
pub const RETRIEVED: &str = "retrieved";
pub const GENERATOR: &str = "generator";

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub query: EncoderStack,
    pub memory: EncoderStack,
    pub source: EncoderStack,
    pub retrieved: EncoderStack,
    pub generator: CopyGenerator,
}

impl Model {
    /// Fresh parameters from a seeded normal initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let enc = config.encoder_shape();
        let query = EncoderStack::new(&mut params, QUERY, &enc, &mut rng)?;
        let memory = if config.tie_query_memory {
            query.clone()
        } else {
            EncoderStack::new(&mut params, MEMORY, &enc, &mut rng)?
        };
        let source = EncoderStack::new(&mut params, SOURCE, &enc, &mut rng)?;
        let retrieved = EncoderStack::new(&mut params, RETRIEVED, &enc, &mut rng)?;
        let generator = CopyGenerator::new(&mut params, GENERATOR, &config.decoder_shape(), &mut rng)?;
        Ok(Self {
            config,
            params,
            query,
            memory,
            source,
            retrieved,
            generator,
        })
    }

    /// Parameter-name prefix of the memory encoder (the query encoder's when tied).
    pub fn memory_prefix(&self) -> String {
        format!("{}.", self.memory.name)
    }

    pub fn freeze_memory_encoder(&mut self, frozen: bool) {
        let prefix = self.memory_prefix();
        self.params.set_frozen_prefix(&prefix, frozen);
    }
}
