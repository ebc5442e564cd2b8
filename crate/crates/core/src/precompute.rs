//! First-layer precompute.
//!
//! With RoPE the first layer's Q, K and V projections see only the
//! normalized token embedding, because rotation happens after the
//! projection. Each vocabulary entry therefore gets one table row
//! `[q | k | v | skip]` of width `2(d + e)`:
//!
//! - `q`, `k`, `v`: `norm1(embed(t))` projected through `W_Q`, `W_K`, `W_V`,
//!   stored before rotation; the position is applied at run time.
//! - `skip`: for the parallel layout `embed(t) + FFN(norm1(embed(t)))`, for
//!   the serial layout `embed(t)` itself.
//!
//! The table replaces the input embeddings together with layer 0's
//! `norm1`, `W_Q`, `W_K`, `W_V` and, for the parallel layout, its FFN.

use serde::Serialize;

use crate::analyzer;
use crate::metering::Meter;
use crate::model::forward::{self, QkvInput};
use crate::model::weights::{expect_norm, expect_shape};
use crate::model::{
    self, attention_block, ffn_block, norm_rows, Engine, FfnWeights, KvCache, Layout, LayerWeights, Model,
    ModelConfig, Norm, PosEncoding,
};
use crate::numerics::{matmul, Tensor2};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Per-token rows `[q | k | v | skip]`, `vocab_size x 2(d + e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputeTable {
    dim: usize,
    kv_dim: usize,
    rows: Tensor2,
}

/// Borrowed view of one table row.
#[derive(Debug, Clone, Copy)]
pub struct TableRow<'a> {
    pub q: &'a [f32],
    pub k: &'a [f32],
    pub v: &'a [f32],
    pub skip: &'a [f32],
}

impl PrecomputeTable {
    pub fn from_tensor(config: &ModelConfig, rows: Tensor2) -> Result<Self> {
        let want = (config.vocab_size, config.table_row_width());
        if rows.shape() != want {
            return Err(Error::Shape(format!("precompute table is {:?}, expected {want:?}", rows.shape())));
        }
        Ok(Self { dim: config.dim, kv_dim: config.kv_dim(), rows })
    }

    pub fn tensor(&self) -> &Tensor2 {
        &self.rows
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.rows()
    }

    /// `2(d + e)`
    pub fn row_width(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, token: u32) -> TableRow<'_> {
        let (d, e) = (self.dim, self.kv_dim);
        let r = self.rows.row(token as usize);
        TableRow { q: &r[..d], k: &r[d..d + e], v: &r[d + e..d + 2 * e], skip: &r[d + 2 * e..] }
    }

    #[cfg(test)]
    pub(crate) fn row_mut(&mut self, token: u32) -> &mut [f32] {
        self.rows.row_mut(token as usize)
    }
}

fn check_eligible(config: &ModelConfig) -> Result<()> {
    if config.pos_encoding == PosEncoding::Absolute {
        return Err(Error::IneligibleArchitecture(
            "absolute positional encodings are added to the embeddings before the first layer, \
             so its inputs depend on the position and cannot be precomputed per token"
                .into(),
        ));
    }
    if config.precomputed {
        return Err(Error::Config("model is already precomputed".into()));
    }
    Ok(())
}

/// Evaluate layer 0's position-independent part for every vocabulary token.
pub fn build_table(model: &Model) -> Result<PrecomputeTable> {
    let cfg = &model.config;
    check_eligible(cfg)?;
    let layer0 = &model.weights.layers[0];
    let x = &model.weights.input_embeddings;
    let n1 = norm_rows(cfg, &layer0.norm1, x);
    let q = matmul(&n1, &layer0.wq)?;
    let k = matmul(&n1, &layer0.wk)?;
    let v = matmul(&n1, &layer0.wv)?;
    let skip = match cfg.layout {
        Layout::Parallel => x.add(&ffn_block(cfg, &layer0.ffn, &n1, None, false)?)?,
        Layout::Serial => x.clone(),
    };
    let width = cfg.table_row_width();
    let mut data = Vec::with_capacity(cfg.vocab_size * width);
    for t in 0..cfg.vocab_size {
        data.extend_from_slice(q.row(t));
        data.extend_from_slice(k.row(t));
        data.extend_from_slice(v.row(t));
        data.extend_from_slice(skip.row(t));
    }
    PrecomputeTable::from_tensor(cfg, Tensor2::new(cfg.vocab_size, width, data)?)
}

/// What remains of layer 0 after the transform.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstLayerRemainder {
    pub wp: Tensor2,
    /// Serial layout only: the post-attention norm and FFN are kept.
    pub norm2: Option<Norm>,
    pub ffn: Option<FfnWeights>,
}

/// Scalars removed by the transform under two accountings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Elimination {
    /// Q, K, V and (parallel) FFN by the closed-form formulas.
    pub cost_model: u64,
    /// Every deleted layer-0 scalar: also norm1, routers and gate matrices.
    pub actual: u64,
}

/// Deleted layer-0 scalars, derived from the config alone.
pub fn actual_eliminated(config: &ModelConfig) -> u64 {
    let (d, e, h) = (config.dim as u64, config.kv_dim() as u64, config.hidden_dim as u64);
    let norm = match config.norm_kind {
        model::NormKind::Rmsnorm => d,
        model::NormKind::Layernorm => 2 * d,
    };
    let mut total = d * d + 2 * d * e + norm;
    if config.layout == Layout::Parallel {
        let mats = match config.ffn_kind {
            model::FfnKind::Mlp2 => 2,
            model::FfnKind::Swiglu => 3,
        };
        let router = if config.is_moe() { d * config.n_experts as u64 } else { 0 };
        total += mats * d * h * config.n_experts as u64 + router;
    }
    total
}

/// A model whose first layer reads the precompute table.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedModel {
    config: ModelConfig,
    table: PrecomputeTable,
    first: FirstLayerRemainder,
    /// Layers 1.. unchanged.
    layers: Vec<LayerWeights>,
    final_norm: Norm,
    output_embeddings: Tensor2,
}

impl TransformedModel {
    pub fn new(
        config: ModelConfig,
        table: PrecomputeTable,
        first: FirstLayerRemainder,
        layers: Vec<LayerWeights>,
        final_norm: Norm,
        output_embeddings: Tensor2,
    ) -> Result<Self> {
        config.validate()?;
        if !config.precomputed {
            return Err(Error::Config("transformed model config must be flagged precomputed".into()));
        }
        if config.pos_encoding != PosEncoding::Rope {
            return Err(Error::Config("transformed model must use rope".into()));
        }
        let table = PrecomputeTable::from_tensor(&config, table.rows)?;
        expect_shape("layer0.wp", &first.wp, config.dim, config.dim)?;
        match (config.layout, &first.norm2, &first.ffn) {
            (Layout::Serial, Some(n2), Some(ffn)) => {
                expect_norm("layer0.norm2", n2, &config)?;
                model::validate_ffn(&config, 0, ffn)?;
            }
            (Layout::Parallel, None, None) => {}
            (layout, _, _) => {
                return Err(Error::Shape(format!("layer0 remainder does not match {layout:?} layout")))
            }
        }
        if layers.len() + 1 != config.n_layers {
            return Err(Error::Shape(format!(
                "{} layers, config says {}",
                layers.len() + 1,
                config.n_layers
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            model::validate_layer(&config, i + 1, l)?;
        }
        expect_norm("norm.final", &final_norm, &config)?;
        expect_shape("embed.out", &output_embeddings, config.dim, config.vocab_size)?;
        Ok(Self { config, table, first, layers, final_norm, output_embeddings })
    }

    pub fn table(&self) -> &PrecomputeTable {
        &self.table
    }

    pub fn first_layer(&self) -> &FirstLayerRemainder {
        &self.first
    }

    /// Layers 1.. of the original model.
    pub fn later_layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> &Norm {
        &self.final_norm
    }

    pub fn output_embeddings(&self) -> &Tensor2 {
        &self.output_embeddings
    }

    pub fn eliminated(&self) -> Elimination {
        Elimination {
            cost_model: analyzer::eliminated_weights(&self.config).expect("validated rope config"),
            actual: actual_eliminated(&self.config),
        }
    }

    #[cfg(test)]
    pub(crate) fn table_mut(&mut self) -> &mut PrecomputeTable {
        &mut self.table
    }
}

/// Build the table and drop the weights it replaces.
pub fn transform_model(model: &Model) -> Result<TransformedModel> {
    let table = build_table(model)?;
    let mut layers = model.weights.layers.clone();
    let layer0 = layers.remove(0);
    let first = match model.config.layout {
        Layout::Parallel => FirstLayerRemainder { wp: layer0.wp, norm2: None, ffn: None },
        Layout::Serial => FirstLayerRemainder { wp: layer0.wp, norm2: layer0.norm2, ffn: Some(layer0.ffn) },
    };
    let config = ModelConfig { precomputed: true, ..model.config.clone() };
    TransformedModel::new(
        config,
        table,
        first,
        layers,
        model.weights.final_norm.clone(),
        model.weights.output_embeddings.clone(),
    )
}

impl Engine for TransformedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, tokens: &[u32], cache: &mut KvCache, mut meter: Option<&mut Meter>) -> Result<Tensor2> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty token list".into()));
        }
        model::check_tokens(cfg, tokens)?;
        cache.reserve(tokens.len())?;
        let start = cache.len();
        let (d, e) = (cfg.dim, cfg.kv_dim());

        let n = tokens.len();
        let (mut q, mut k, mut v, mut skip) =
            (Vec::with_capacity(n * d), Vec::with_capacity(n * e), Vec::with_capacity(n * e), Vec::with_capacity(n * d));
        for &t in tokens {
            let row = self.table.row(t);
            if let Some(m) = meter.as_deref_mut() {
                m.read_input(self.table.row_width() as u64);
            }
            q.extend_from_slice(row.q);
            k.extend_from_slice(row.k);
            v.extend_from_slice(row.v);
            skip.extend_from_slice(row.skip);
        }
        let input = QkvInput::Precomputed { q: Tensor2::new(n, d, q)?, k: Tensor2::new(n, e, k)?, v: Tensor2::new(n, e, v)? };
        let skip = Tensor2::new(n, d, skip)?;
        let attn = attention_block(cfg, input, &self.first.wp, start, cache.layer_mut(0), meter.as_deref_mut())?;
        let h = skip.add(&attn)?;
        let mut x = match (&self.first.ffn, cfg.layout) {
            (Some(ffn), Layout::Serial) => forward::serial_ffn_residual(cfg, self.first.norm2.as_ref(), ffn, h, meter)?,
            _ => h,
        };
        debug_assert_eq!(cache.n_layers(), self.layers.len() + 1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = forward::layer_forward(cfg, layer, &x, start, cache.layer_mut(i + 1), None)?;
        }
        cache.advance(n);
        forward::head(cfg, &self.final_norm, &self.output_embeddings, &x)
    }
}

/// Result of comparing baseline and precomputed logits.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub prompts: usize,
    pub max_seq_len: usize,
    pub tol: f64,
    pub max_abs_diff: f64,
    pub max_abs_baseline: f64,
    /// `max_abs_diff / (1 + max_abs_baseline)`
    pub max_rel_diff: f64,
    pub prefill_max_rel_diff: f64,
    pub decode_max_rel_diff: f64,
    pub pass: bool,
}

#[derive(Default)]
struct DiffAcc {
    max_abs: f64,
    max_base: f64,
}

impl DiffAcc {
    fn add(&mut self, base: &[f32], fast: &[f32]) {
        for (b, f) in base.iter().zip(fast) {
            let diff = if b.is_finite() && f.is_finite() { (*b as f64 - *f as f64).abs() } else { f64::INFINITY };
            self.max_abs = self.max_abs.max(diff);
            self.max_base = self.max_base.max((*b as f64).abs());
        }
    }

    fn rel(&self) -> f64 {
        self.max_abs / (1.0 + self.max_base)
    }
}

/// Run both engines on seeded prompts (lengths `1..=seq_len`) via prefill
/// and via step-by-step decode. Passes iff every `|Δ| <= tol (1 + max|baseline|)`.
pub fn verify_equivalence(
    baseline: &Model,
    transformed: &TransformedModel,
    n_prompts: usize,
    seq_len: usize,
    seed: u64,
    tol: f64,
) -> Result<EquivalenceReport> {
    let mut base_cfg = baseline.config.clone();
    base_cfg.precomputed = true;
    if &base_cfg != transformed.config() {
        return Err(Error::Config("baseline and transformed configs differ".into()));
    }
    if seq_len == 0 {
        return Err(Error::Input("seq_len must be positive".into()));
    }
    let vocab = baseline.config.vocab_size as u64;
    let mut rng = SplitMix64::new(seed);
    let (mut prefill, mut decode) = (DiffAcc::default(), DiffAcc::default());
    for _ in 0..n_prompts {
        let len = 1 + rng.below(seq_len as u64) as usize;
        let tokens: Vec<u32> = (0..len).map(|_| rng.below(vocab) as u32).collect();

        let (lb, _) = baseline.prefill(&tokens)?;
        let (lf, _) = transformed.prefill(&tokens)?;
        prefill.add(lb.data(), lf.data());

        let (mut cb, mut cf) = (baseline.new_cache(), transformed.new_cache());
        for &t in &tokens {
            let b = baseline.decode(t, &mut cb)?;
            let f = transformed.decode(t, &mut cf)?;
            decode.add(&b, &f);
        }
    }
    let max_abs_diff = prefill.max_abs.max(decode.max_abs);
    let max_abs_baseline = prefill.max_base.max(decode.max_base);
    let max_rel_diff = max_abs_diff / (1.0 + max_abs_baseline);
    Ok(EquivalenceReport {
        prompts: n_prompts,
        max_seq_len: seq_len,
        tol,
        max_abs_diff,
        max_abs_baseline,
        max_rel_diff,
        prefill_max_rel_diff: prefill.rel(),
        decode_max_rel_diff: decode.rel(),
        pass: max_abs_diff <= tol * (1.0 + max_abs_baseline),
    })
}
