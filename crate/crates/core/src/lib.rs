//! First-layer precompute for transformers with rotary position embeddings.
//!
//! For a RoPE model the inputs of the first layer's Q, K and V projections
//! (and, with a parallel attention/FFN layout, the FFN and its skip
//! connection) depend only on the token id. They can be evaluated once per
//! vocabulary entry and stored in place of the input embedding table.
//!
//! The crate contains:
//! - [`numerics`]: small dense kernels (matmul, norms, softmax, RoPE).
//! - [`model`]: configuration, weights, KV cache and the baseline forward pass.
//! - [`precompute`]: table construction, the transformed model and its
//!   forward pass, and an equivalence checker against the baseline.
//! - [`analyzer`]: closed-form weight, read and memory accounting.
//! - [`metering`]: instrumented runs that count scalar reads and FLOPs.
//! - [`checkpoint`]: the `L1PC` binary checkpoint format.

pub mod analyzer;
pub mod checkpoint;
mod error;
pub mod metering;
pub mod model;
pub mod numerics;
pub mod precompute;
pub mod rng;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use metering::Meter;
pub use model::{
    count_weights, kv_dim, Engine, KvCache, Model, ModelConfig, ModelWeights, WeightCount,
};
pub use numerics::Tensor2;
pub use precompute::{transform_model, verify_equivalence, PrecomputeTable, TransformedModel};
