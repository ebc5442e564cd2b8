//! Closed-form cost model of the first-layer precompute.
//!
//! Reads are counted in scalars per batch step of `B` tokens:
//!
//! | | without precompute | with precompute |
//! |---|---|---|
//! | per token | `d` embedding values | `2(d + e)` table values |
//! | per batch | eliminable weights, once | nothing |
//!
//! For serial layouts only Q, K and V are eliminable. The rest of layer 0
//! (P, norm2, FFN) is read by both variants and is left out of both counts.
//! Norm parameters, biases, routers and SwiGLU gate matrices are not part
//! of any formula here.

pub mod expected;

use std::fmt::Write as _;

use num_integer::Integer;
use serde::Serialize;

use crate::model::{count_weights, kv_dim, Activation, FfnKind, Layout, ModelConfig, NormKind, PosEncoding};
use crate::{Error, Result};

pub use expected::{expectation, Expectation, EXPECTATIONS};

pub const DEFAULT_BATCHES: [u64; 4] = [1, 16, 256, 1024];

fn require_rope(config: &ModelConfig) -> Result<()> {
    if config.pos_encoding == PosEncoding::Absolute {
        return Err(Error::IneligibleArchitecture(format!(
            "{}: absolute positional encoding blocks the first-layer precompute, so there is no cost to model",
            if config.name.is_empty() { "config" } else { &config.name }
        )));
    }
    Ok(())
}

/// `d² + 2de`, plus `2·d·hidden·n_experts` for the parallel layout.
pub fn eliminated_weights(config: &ModelConfig) -> Result<u64> {
    require_rope(config)?;
    let e = kv_dim(config)? as u64;
    let d = config.dim as u64;
    let mut n = d * d + 2 * d * e;
    if config.layout == Layout::Parallel {
        n += 2 * d * config.hidden_dim as u64 * config.n_experts as u64;
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Reads {
    pub without: u64,
    pub with_: u64,
}

pub fn reads(config: &ModelConfig, batch: u64) -> Result<Reads> {
    let eliminated = eliminated_weights(config)?;
    let d = config.dim as u64;
    let e = kv_dim(config)? as u64;
    Ok(Reads { without: batch * d + eliminated, with_: batch * 2 * (d + e) })
}

/// Reduced fraction `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den != 0, "zero denominator");
        let g = num.gcd(&den).max(1);
        Self { num: num / g, den: den / g }
    }

    /// Nearest integer, halves rounded up.
    pub fn rounded(self) -> u64 {
        ((2 * self.num as u128 + self.den as u128) / (2 * self.den as u128)) as u64
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReductionFactor {
    pub exact: Ratio,
    pub rounded: u64,
}

pub fn reduction_factor(config: &ModelConfig, batch: u64) -> Result<ReductionFactor> {
    if batch == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let r = reads(config, batch)?;
    let exact = Ratio::new(r.without, r.with_);
    Ok(ReductionFactor { exact, rounded: exact.rounded() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryDelta {
    /// `(d + 2e) · vocab_size`: table rows minus the embedding rows they replace.
    pub embed_increase: u64,
    pub abs_delta: i64,
    /// `abs_delta / total_weights` in percent, nearest integer.
    pub rel_delta_pct: i64,
    pub total_weights: u64,
}

/// `n / d * 100` to the nearest integer, halves away from zero.
fn percent_nearest(n: i128, d: i128) -> i64 {
    let mag = (2 * 100 * n.abs() + d) / (2 * d);
    (n.signum() * mag) as i64
}

pub fn memory_delta(config: &ModelConfig) -> Result<MemoryDelta> {
    let eliminated = eliminated_weights(config)?;
    let d = config.dim as u64;
    let e = kv_dim(config)? as u64;
    let embed_increase = (d + 2 * e) * config.vocab_size as u64;
    let abs_delta = embed_increase as i64 - eliminated as i64;
    let total_weights = count_weights(config)?.total;
    Ok(MemoryDelta {
        embed_increase,
        abs_delta,
        rel_delta_pct: percent_nearest(abs_delta as i128, total_weights as i128),
        total_weights,
    })
}

fn preset_base(name: &str) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        dim: 4096,
        n_layers: 32,
        n_heads: 32,
        n_kv_heads: 8,
        hidden_dim: 14_336,
        n_experts: 1,
        experts_top_k: 1,
        vocab_size: 32_000,
        layout: Layout::Serial,
        pos_encoding: PosEncoding::Rope,
        norm_kind: NormKind::Rmsnorm,
        ffn_kind: FfnKind::Swiglu,
        activation: Activation::Silu,
        rope_base: 10_000.0,
        max_seq_len: 32_768,
        norm_eps: 1e-5,
        precomputed: false,
    }
}

/// Pythia-6.9B, Mistral-7B, Mixtral-8x7B and a Mixtral variant with
/// parallel attention/FFN.
pub fn paper_presets() -> Vec<ModelConfig> {
    let pythia = ModelConfig {
        n_kv_heads: 32,
        hidden_dim: 16_384,
        vocab_size: 50_400,
        layout: Layout::Parallel,
        norm_kind: NormKind::Layernorm,
        ffn_kind: FfnKind::Mlp2,
        activation: Activation::Gelu,
        max_seq_len: 2048,
        ..preset_base("pythia-6.9b")
    };
    let mistral = preset_base("mistral-7b");
    let mixtral = ModelConfig { n_experts: 8, experts_top_k: 2, rope_base: 1e6, ..preset_base("mixtral-8x7b") };
    let mixtral_parallel =
        ModelConfig { name: "mixtral-8x7b-parallel".into(), layout: Layout::Parallel, ..mixtral.clone() };
    vec![pythia, mistral, mixtral, mixtral_parallel]
}

pub fn preset(name: &str) -> Option<ModelConfig> {
    paper_presets().into_iter().find(|p| p.name == name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchCost {
    pub batch: u64,
    pub reads_without: u64,
    pub reads_with: u64,
    pub factor_exact_num: u64,
    pub factor_exact_den: u64,
    pub factor_rounded: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub config: String,
    pub e: u64,
    pub eliminated_weights: u64,
    pub batches: Vec<BatchCost>,
    pub embed_mem_increase: u64,
    pub mem_delta_abs: i64,
    pub mem_delta_rel: i64,
    pub total_weights: u64,
}

pub fn report(config: &ModelConfig, batch_sizes: &[u64]) -> Result<CostReport> {
    config.validate()?;
    let eliminated = eliminated_weights(config)?;
    let mem = memory_delta(config)?;
    let batches = batch_sizes
        .iter()
        .map(|&b| {
            let r = reads(config, b)?;
            let f = reduction_factor(config, b)?;
            Ok(BatchCost {
                batch: b,
                reads_without: r.without,
                reads_with: r.with_,
                factor_exact_num: f.exact.num,
                factor_exact_den: f.exact.den,
                factor_rounded: f.rounded,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport {
        config: config.name.clone(),
        e: config.kv_dim() as u64,
        eliminated_weights: eliminated,
        batches,
        embed_mem_increase: mem.embed_increase,
        mem_delta_abs: mem.abs_delta,
        mem_delta_rel: mem.rel_delta_pct,
        total_weights: mem.total_weights,
    })
}

/// `1234567` → `"1,234,567"`; negatives keep their sign.
pub fn thousands(v: i128) -> String {
    let digits = v.unsigned_abs().to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3 + 1);
    if v < 0 {
        out.push('-');
    }
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn signed(v: i128) -> String {
    if v > 0 {
        format!("+{}", thousands(v))
    } else {
        thousands(v)
    }
}

/// Side-by-side text table, one column per report. All reports must share
/// the same batch sizes.
pub fn render_text(reports: &[CostReport]) -> String {
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let col = |f: &dyn Fn(&CostReport) -> String| reports.iter().map(f).collect::<Vec<_>>();
    rows.push(("e (K/V width)".into(), col(&|r| thousands(r.e as i128))));
    rows.push(("weights eliminated".into(), col(&|r| thousands(r.eliminated_weights as i128))));
    let batches: Vec<u64> = reports.first().map(|r| r.batches.iter().map(|b| b.batch).collect()).unwrap_or_default();
    for (i, b) in batches.iter().enumerate() {
        rows.push((format!("reads without precompute, B={b}"), col(&|r| thousands(r.batches[i].reads_without as i128))));
        rows.push((format!("reads with precompute, B={b}"), col(&|r| thousands(r.batches[i].reads_with as i128))));
    }
    for (i, b) in batches.iter().enumerate() {
        rows.push((format!("reduction factor, B={b}"), col(&|r| format!("{}x", thousands(r.batches[i].factor_rounded as i128)))));
    }
    rows.push(("embedding memory increase (d+2e)*vocab".into(), col(&|r| signed(r.embed_mem_increase as i128))));
    rows.push(("eliminated weight memory".into(), col(&|r| thousands(-(r.eliminated_weights as i128)))));
    rows.push(("total memory change".into(), col(&|r| signed(r.mem_delta_abs as i128))));
    rows.push(("total memory change (relative)".into(), col(&|r| format!("{}%", signed(r.mem_delta_rel as i128)))));
    rows.push(("total weights".into(), col(&|r| thousands(r.total_weights as i128))));

    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let col_w: Vec<usize> = (0..reports.len())
        .map(|c| rows.iter().map(|(_, v)| v[c].len()).chain([reports[c].config.len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let _ = write!(s, "{:<label_w$}", "");
    for (r, w) in reports.iter().zip(&col_w) {
        let _ = write!(s, "  {:>w$}", r.config);
    }
    s.push('\n');
    for (label, vals) in &rows {
        let _ = write!(s, "{label:<label_w$}");
        for (v, w) in vals.iter().zip(&col_w) {
            let _ = write!(s, "  {v:>w$}");
        }
        s.push('\n');
    }
    s
}

pub const CSV_HEADER: &str = "config,batch,reads_without,reads_with,factor_exact_num,factor_exact_den,factor_rounded";

pub fn render_csv(reports: &[CostReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        for b in &r.batches {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.config, b.batch, b.reads_without, b.reads_with, b.factor_exact_num, b.factor_exact_den, b.factor_rounded
            );
        }
    }
    s
}

/// A single report renders as an object, several as an array.
pub fn render_json(reports: &[CostReport]) -> String {
    let out = match reports {
        [one] => serde_json::to_string_pretty(one),
        many => serde_json::to_string_pretty(many),
    };
    out.expect("cost reports serialize")
}

/// One compared quantity of the reference check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckLine {
    pub preset: String,
    pub quantity: String,
    pub expected: i128,
    pub got: i128,
}

impl CheckLine {
    pub fn ok(&self) -> bool {
        self.expected == self.got
    }
}

/// Compare a preset's computed weights and costs with the reference table.
pub fn paper_check(preset_name: &str) -> Result<Vec<CheckLine>> {
    let exp = expectation(preset_name)
        .ok_or_else(|| Error::Config(format!("no reference values for preset '{preset_name}'")))?;
    let config = preset(preset_name).ok_or_else(|| Error::Config(format!("unknown preset '{preset_name}'")))?;
    let mut lines = Vec::new();
    let mut push = |q: String, expected: i128, got: i128| {
        lines.push(CheckLine { preset: preset_name.into(), quantity: q, expected, got })
    };
    if let Some(w) = exp.weights {
        let got = count_weights(&config)?;
        push("Q+P weights per layer".into(), w.qp_per_layer as i128, got.qp_per_layer as i128);
        push("K+V weights per layer".into(), w.kv_per_layer as i128, got.kv_per_layer as i128);
        push("FFN weights per layer".into(), w.ffn_per_layer as i128, got.ffn_per_layer as i128);
        push("input+output embeddings".into(), w.embed_total as i128, got.embed_total as i128);
        push("total weights".into(), w.total as i128, got.total as i128);
    }
    if let Some(c) = exp.costs {
        let batches: Vec<u64> = c.factors.iter().map(|(b, _)| *b).collect();
        let r = report(&config, &batches)?;
        push("weights eliminated".into(), c.eliminated as i128, r.eliminated_weights as i128);
        push("reads without precompute, B=1".into(), c.reads_without_b1 as i128, r.batches[0].reads_without as i128);
        push("reads with precompute, B=1".into(), c.reads_with_b1 as i128, r.batches[0].reads_with as i128);
        for ((b, f), got) in c.factors.iter().zip(&r.batches) {
            push(format!("reduction factor, B={b}"), *f as i128, got.factor_rounded as i128);
        }
        push("embedding memory increase".into(), c.embed_increase as i128, r.embed_mem_increase as i128);
        push("total memory change".into(), c.abs_delta as i128, r.mem_delta_abs as i128);
        push("total memory change (%)".into(), c.rel_delta_pct as i128, r.mem_delta_rel as i128);
    }
    Ok(lines)
}
