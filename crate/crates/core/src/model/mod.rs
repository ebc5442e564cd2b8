//! Architecture description, weights and the baseline forward pass.

mod cache;
mod config;
pub(crate) mod forward;
pub(crate) mod weights;

pub use cache::{KvCache, LayerCache};
pub use config::{kv_dim, Activation, FfnKind, Layout, ModelConfig, NormKind, PosEncoding};
pub use forward::{attention_block, ffn_block, norm_row, norm_rows, QkvInput};
pub use weights::{Expert, FfnWeights, LayerWeights, ModelWeights, Norm, INIT_SCALE};

pub(crate) use weights::{validate_ffn, validate_layer};

use serde::{Deserialize, Serialize};

use crate::metering::Meter;
use crate::numerics::{self, Tensor2};
use crate::{Error, Result};

/// Anything that maps token ids to logits with a KV cache.
pub trait Engine {
    fn config(&self) -> &ModelConfig;

    /// Run `tokens` at positions `cache.len()..`, extending the cache.
    /// Returns `tokens.len() x vocab_size` logits.
    fn forward(&self, tokens: &[u32], cache: &mut KvCache, meter: Option<&mut Meter>) -> Result<Tensor2>;

    fn new_cache(&self) -> KvCache {
        KvCache::new(self.config())
    }

    /// Process a whole prompt from an empty cache.
    fn prefill(&self, tokens: &[u32]) -> Result<(Tensor2, KvCache)> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token list".into()));
        }
        let mut cache = self.new_cache();
        let logits = self.forward(tokens, &mut cache, None)?;
        Ok((logits, cache))
    }

    /// One autoregressive step at position `cache.len()`.
    fn decode(&self, token: u32, cache: &mut KvCache) -> Result<Vec<f32>> {
        Ok(self.forward(&[token], cache, None)?.into_data())
    }
}

/// A baseline model: config plus dense weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        if config.precomputed {
            return Err(Error::Config("baseline model config is flagged precomputed".into()));
        }
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::random(&config, seed)?;
        Self::new(config, weights)
    }
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!("token {t} out of range for vocab of {}", config.vocab_size)));
    }
    Ok(())
}

impl Engine for Model {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, tokens: &[u32], cache: &mut KvCache, mut meter: Option<&mut Meter>) -> Result<Tensor2> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty token list".into()));
        }
        check_tokens(cfg, tokens)?;
        cache.reserve(tokens.len())?;
        let start = cache.len();

        let mut rows = Vec::with_capacity(tokens.len());
        for (r, &t) in tokens.iter().enumerate() {
            let mut row = self.weights.embed(t)?.to_vec();
            if let Some(m) = meter.as_deref_mut() {
                m.read_input(cfg.dim as u64);
            }
            if cfg.pos_encoding == PosEncoding::Absolute {
                let pe = numerics::sinusoidal_pe(start + r, cfg.dim, cfg.rope_base);
                for (x, p) in row.iter_mut().zip(pe) {
                    *x += p;
                }
            }
            rows.push(row);
        }
        let mut x = Tensor2::from_rows(cfg.dim, &rows)?;
        for (i, layer) in self.weights.layers.iter().enumerate() {
            let m = if i == 0 { meter.as_deref_mut() } else { None };
            x = forward::layer_forward(cfg, layer, &x, start, cache.layer_mut(i), m)?;
        }
        cache.advance(tokens.len());
        forward::head(cfg, &self.weights.final_norm, &self.weights.output_embeddings, &x)
    }
}

/// Prefill `tokens` with the baseline model.
pub fn forward_prefill(model: &Model, tokens: &[u32]) -> Result<(Tensor2, KvCache)> {
    model.prefill(tokens)
}

/// Decode one token with the baseline model.
pub fn forward_decode(model: &Model, token: u32, cache: &mut KvCache) -> Result<Vec<f32>> {
    model.decode(token, cache)
}

/// Weight counts from the closed-form formulas: Q+P `2d²`, K+V `2de`,
/// FFN `2·d·hidden·n_experts`, embeddings `2·d·vocab`. Norms, biases,
/// routers and SwiGLU's third matrix are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightCount {
    pub qp_per_layer: u64,
    pub kv_per_layer: u64,
    pub ffn_per_layer: u64,
    pub embed_total: u64,
    pub total: u64,
}

pub fn count_weights(config: &ModelConfig) -> Result<WeightCount> {
    let e = kv_dim(config)? as u64;
    let d = config.dim as u64;
    let qp_per_layer = 2 * d * d;
    let kv_per_layer = 2 * d * e;
    let ffn_per_layer = 2 * d * config.hidden_dim as u64 * config.n_experts as u64;
    let embed_total = 2 * d * config.vocab_size as u64;
    let total = embed_total + config.n_layers as u64 * (qp_per_layer + kv_per_layer + ffn_per_layer);
    Ok(WeightCount { qp_per_layer, kv_per_layer, ffn_per_layer, embed_total, total })
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}
