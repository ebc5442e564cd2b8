use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How attention and FFN are arranged inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// One shared pre-norm feeds both branches; both add into one residual.
    Parallel,
    /// Attention residual first, then a second norm and the FFN residual.
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    Rope,
    /// Sinusoidal encoding added to the token embedding.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rmsnorm,
    Layernorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    /// `down(act(up(x)))`
    Mlp2,
    /// `down(silu(gate(x)) * up(x))`
    Swiglu,
}

/// Activation used by [`FfnKind::Mlp2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Silu,
}

fn default_eps() -> f32 {
    1e-5
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_top_k() -> usize {
    1
}

fn default_experts() -> usize {
    1
}

/// Architecture descriptor. Serialized as the JSON config blob of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_experts")]
    pub n_experts: usize,
    #[serde(default = "default_top_k")]
    pub experts_top_k: usize,
    pub vocab_size: usize,
    pub layout: Layout,
    pub pos_encoding: PosEncoding,
    pub norm_kind: NormKind,
    pub ffn_kind: FfnKind,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub max_seq_len: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
    /// Set on transformed models whose first layer reads the precompute table.
    #[serde(default)]
    pub precomputed: bool,
}

impl ModelConfig {
    /// A small RoPE model; callers adjust fields as needed.
    pub fn toy(layout: Layout) -> Self {
        Self {
            name: format!("toy-{}", match layout {
                Layout::Parallel => "parallel",
                Layout::Serial => "serial",
            }),
            dim: 64,
            n_layers: 3,
            n_heads: 4,
            n_kv_heads: 2,
            hidden_dim: 128,
            n_experts: 1,
            experts_top_k: 1,
            vocab_size: 97,
            layout,
            pos_encoding: PosEncoding::Rope,
            norm_kind: NormKind::Rmsnorm,
            ffn_kind: FfnKind::Mlp2,
            activation: Activation::Silu,
            rope_base: 10_000.0,
            max_seq_len: 64,
            norm_eps: 1e-5,
            precomputed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.n_layers == 0 || self.hidden_dim == 0 || self.vocab_size == 0 {
            return fail("dim, n_layers, hidden_dim and vocab_size must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return fail(format!("dim {} not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.pos_encoding == PosEncoding::Rope && !self.head_dim().is_multiple_of(2) {
            return fail(format!("rope needs an even head dim, got {}", self.head_dim()));
        }
        if self.n_experts == 0 || self.experts_top_k == 0 || self.experts_top_k > self.n_experts {
            return fail(format!(
                "need 1 <= experts_top_k ({}) <= n_experts ({})",
                self.experts_top_k, self.n_experts
            ));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        if !(self.rope_base > 0.0) {
            return fail("rope_base must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// `e`, the K/V projection width. Callers must have validated the config.
    pub fn kv_dim(&self) -> usize {
        self.dim * self.n_kv_heads / self.n_heads
    }

    pub fn is_moe(&self) -> bool {
        self.n_experts > 1
    }

    /// Width of one precompute table row, `2(d + e)`.
    pub fn table_row_width(&self) -> usize {
        2 * (self.dim + self.kv_dim())
    }
}

/// `e = d * n_kv_heads / n_heads`, covering MHA, MQA and GQA.
pub fn kv_dim(config: &ModelConfig) -> Result<usize> {
    if config.n_heads == 0 || config.n_kv_heads == 0 {
        return Err(Error::Config("head counts must be positive".into()));
    }
    if !config.dim.is_multiple_of(config.n_heads) || !config.n_heads.is_multiple_of(config.n_kv_heads) {
        return Err(Error::Config(format!(
            "dim {} / n_heads {} / n_kv_heads {} do not divide evenly",
            config.dim, config.n_heads, config.n_kv_heads
        )));
    }
    Ok(config.kv_dim())
}
