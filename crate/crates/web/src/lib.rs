//! Browser bindings for the cost model and a toy equivalence check.
//!
//! Every export takes and returns JSON strings so the same functions are
//! callable from native tests.

use l1pc::analyzer::{self, CostReport};
use l1pc::metering::metered_forward;
use l1pc::model::Layout;
use l1pc::{transform_model, verify_equivalence, Model, ModelConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Batch sizes sampled for the reduction-factor curve.
pub const CURVE_BATCHES: [u64; 13] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096];

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn parse_batches(s: &str) -> Result<Vec<u64>, String> {
    let batches = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u64>().map_err(|_| format!("bad batch size '{t}'")))
        .collect::<Result<Vec<_>, _>>()?;
    if batches.is_empty() || batches.contains(&0) {
        return Err("batch sizes must be positive".into());
    }
    Ok(batches)
}

/// The built-in model configs as a JSON array.
#[wasm_bindgen]
pub fn presets() -> Result<String, String> {
    json(&analyzer::paper_presets())
}

#[derive(Serialize)]
struct CurvePoint {
    batch: u64,
    factor: f64,
}

#[derive(Serialize)]
struct Analysis {
    report: CostReport,
    curve: Vec<CurvePoint>,
    text: String,
}

/// Cost report for a JSON config at comma-separated batch sizes, plus the
/// exact reduction factor sampled over `CURVE_BATCHES`.
#[wasm_bindgen]
pub fn analyze(config_json: &str, batches: &str) -> Result<String, String> {
    let cfg: ModelConfig = serde_json::from_str(config_json).map_err(|e| format!("config: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;
    let report = analyzer::report(&cfg, &parse_batches(batches)?).map_err(|e| e.to_string())?;
    let curve = CURVE_BATCHES
        .iter()
        .map(|&b| {
            analyzer::reduction_factor(&cfg, b).map(|f| CurvePoint { batch: b, factor: f.exact.to_f64() })
        })
        .collect::<l1pc::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let text = analyzer::render_text(std::slice::from_ref(&report));
    json(&Analysis { report, curve, text })
}

#[derive(Serialize)]
struct Demo {
    config: ModelConfig,
    prompts: usize,
    max_rel_diff: f64,
    pass: bool,
    table_rows: usize,
    table_width: usize,
    eliminated_cost_model: u64,
    eliminated_actual: u64,
    baseline_reads_per_step: u64,
    precomputed_reads_per_step: u64,
}

/// Build a seeded toy model, transform it, compare logits on `prompts`
/// prompts of length up to 16 and meter one batch of `batch` decode steps.
#[wasm_bindgen]
pub fn equivalence_demo(
    layout: &str,
    kv_heads: usize,
    experts: usize,
    seed: u32,
    prompts: usize,
    batch: usize,
) -> Result<String, String> {
    let layout = match layout {
        "serial" => Layout::Serial,
        "parallel" => Layout::Parallel,
        other => return Err(format!("unknown layout '{other}'")),
    };
    let base_cfg = ModelConfig::toy(layout);
    let cfg = ModelConfig {
        name: format!("toy-{seed}"),
        n_kv_heads: kv_heads,
        n_experts: experts,
        experts_top_k: experts.min(2),
        ..base_cfg
    };
    if batch == 0 {
        return Err("batch must be positive".into());
    }
    let seed = u64::from(seed);
    let err = |e: l1pc::Error| e.to_string();
    let base = Model::random(cfg.clone(), seed).map_err(err)?;
    let fast = transform_model(&base).map_err(err)?;
    let r = verify_equivalence(&base, &fast, prompts, 16, seed, 1e-4).map_err(err)?;
    let mb = metered_forward(&base, batch, 4, seed).map_err(err)?;
    let mf = metered_forward(&fast, batch, 4, seed).map_err(err)?;
    let elim = fast.eliminated();
    json(&Demo {
        config: cfg,
        prompts,
        max_rel_diff: r.max_rel_diff,
        pass: r.pass,
        table_rows: fast.table().vocab_size(),
        table_width: fast.table().row_width(),
        eliminated_cost_model: elim.cost_model,
        eliminated_actual: elim.actual,
        baseline_reads_per_step: mb.reads_per_step(),
        precomputed_reads_per_step: mf.reads_per_step(),
    })
}
