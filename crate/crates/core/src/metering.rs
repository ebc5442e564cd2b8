//! Scalar-read and FLOP counters for the first layer.
//!
//! The counters follow the batch model of the cost analysis: a batch step
//! runs one token for each of `B` sequences, input rows (embedding or
//! precompute table) are read once per token, and a weight tensor of the
//! eliminable region is read once per batch step no matter how many
//! tokens use it. The raw per-token traversal count is kept alongside.
//! KV-cache traffic is not counted.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::model::{Engine, KvCache};
use crate::rng::SplitMix64;
use crate::Result;

#[derive(Debug, Clone, Default)]
pub struct Meter {
    input_reads: u64,
    region_reads: u64,
    region_raw_reads: u64,
    flops_layer1: u64,
    fetched: BTreeSet<String>,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start a new batch step: region weights will be counted again on first use.
    pub fn begin_batch(&mut self) {
        self.fetched.clear();
    }

    pub(crate) fn read_input(&mut self, scalars: u64) {
        self.input_reads += scalars;
    }

    pub(crate) fn read_region_weights(&mut self, tensor: &str, scalars: u64) {
        self.region_raw_reads += scalars;
        if !self.fetched.contains(tensor) {
            self.fetched.insert(tensor.to_owned());
            self.region_reads += scalars;
        }
    }

    pub(crate) fn add_flops(&mut self, n: u64) {
        self.flops_layer1 += n;
    }

    /// Embedding-row reads (baseline) or table-row reads (precomputed).
    pub fn input_reads(&self) -> u64 {
        self.input_reads
    }

    /// Eliminable-region weight reads, once per tensor per batch step.
    pub fn region_reads(&self) -> u64 {
        self.region_reads
    }

    /// Eliminable-region weight reads, once per tensor per token.
    pub fn region_raw_reads(&self) -> u64 {
        self.region_raw_reads
    }

    /// Multiply and add counted separately, over the first layer's
    /// projections, FFN and attention core.
    pub fn flops_layer1(&self) -> u64 {
        self.flops_layer1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Precomputed,
}

impl Variant {
    pub fn of(engine: &impl Engine) -> Self {
        if engine.config().precomputed {
            Variant::Precomputed
        } else {
            Variant::Baseline
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Precomputed => "precomputed",
        }
    }
}

/// Totals over `steps` batch steps of `batch` sequences each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeterReport {
    pub variant: Variant,
    pub batch: u64,
    pub steps: u64,
    pub embedding_or_table_scalar_reads: u64,
    pub layer1_eliminated_region_weight_reads: u64,
    pub layer1_eliminated_region_raw_reads: u64,
    pub flops_layer1: u64,
    /// Wall time of the decode phase; `None` where no clock is available.
    pub wall_time_ns: Option<u64>,
}

impl MeterReport {
    /// Input reads of one batch step.
    pub fn input_reads_per_step(&self) -> u64 {
        self.embedding_or_table_scalar_reads / self.steps.max(1)
    }

    /// Region weight reads of one batch step.
    pub fn region_reads_per_step(&self) -> u64 {
        self.layer1_eliminated_region_weight_reads / self.steps.max(1)
    }

    /// Everything the read model counts for one batch step.
    pub fn reads_per_step(&self) -> u64 {
        self.input_reads_per_step() + self.region_reads_per_step()
    }

    /// Same counters and run parameters, ignoring wall time.
    pub fn same_counts(&self, other: &MeterReport) -> bool {
        let strip = |r: &MeterReport| MeterReport { wall_time_ns: None, ..r.clone() };
        strip(self) == strip(other)
    }

    pub const CSV_HEADER: &'static str =
        "variant,batch,steps,input_reads,region_reads,region_raw_reads,flops_layer1,wall_time_ns";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.variant.as_str(),
            self.batch,
            self.steps,
            self.embedding_or_table_scalar_reads,
            self.layer1_eliminated_region_weight_reads,
            self.layer1_eliminated_region_raw_reads,
            self.flops_layer1,
            self.wall_time_ns.map(|n| n.to_string()).unwrap_or_default(),
        )
    }

    pub fn to_text(&self) -> String {
        use crate::analyzer::thousands;
        let mut s = String::new();
        let _ = writeln!(s, "{} (batch {}, {} steps)", self.variant.as_str(), self.batch, self.steps);
        let rows = [
            ("embedding/table reads", self.embedding_or_table_scalar_reads),
            ("region weight reads (per batch)", self.layer1_eliminated_region_weight_reads),
            ("region weight reads (per token)", self.layer1_eliminated_region_raw_reads),
            ("layer-1 flops", self.flops_layer1),
        ];
        for (label, v) in rows {
            let _ = writeln!(s, "  {label:<34}{:>18}", thousands(v as i128));
        }
        s
    }
}

pub(crate) fn now_ns() -> Option<u128> {
    #[cfg(not(target_arch = "wasm32"))]
    {
        use std::sync::OnceLock;
        use std::time::Instant;
        static START: OnceLock<Instant> = OnceLock::new();
        Some(START.get_or_init(Instant::now).elapsed().as_nanos())
    }
    #[cfg(target_arch = "wasm32")]
    {
        None
    }
}

/// Seeded random prompts: `count` sequences of `len` tokens.
pub fn random_sequences(vocab: usize, count: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.below(vocab as u64) as u32).collect())
        .collect()
}

/// Decode `batch` seeded sequences of `seq_len` tokens, one batch step per
/// position, with the meter attached to the first layer.
pub fn metered_forward(engine: &impl Engine, batch: usize, seq_len: usize, seed: u64) -> Result<MeterReport> {
    let cfg = engine.config();
    let seqs = random_sequences(cfg.vocab_size, batch, seq_len, seed);
    let mut caches: Vec<KvCache> = (0..batch).map(|_| engine.new_cache()).collect();
    let mut meter = Meter::new();
    let t0 = now_ns();
    for step in 0..seq_len {
        meter.begin_batch();
        for (seq, cache) in seqs.iter().zip(caches.iter_mut()) {
            engine.forward(&[seq[step]], cache, Some(&mut meter))?;
        }
    }
    let wall = t0.zip(now_ns()).map(|(a, b)| (b - a) as u64);
    Ok(MeterReport {
        variant: Variant::of(engine),
        batch: batch as u64,
        steps: seq_len as u64,
        embedding_or_table_scalar_reads: meter.input_reads(),
        layer1_eliminated_region_weight_reads: meter.region_reads(),
        layer1_eliminated_region_raw_reads: meter.region_raw_reads(),
        flops_layer1: meter.flops_layer1(),
        wall_time_ns: wall,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub variant: Variant,
    /// Median wall time of one batch step; `None` without a clock.
    pub median_step_ns: Option<u64>,
    pub reads_per_step: u64,
    pub meter: MeterReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub steps: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        use crate::analyzer::thousands;
        let mut s = String::new();
        let _ = writeln!(s, "batch {}, {} decode steps", self.batch, self.steps);
        let _ = writeln!(s, "{:<12}{:>16}{:>18}{:>18}", "variant", "median ns/step", "reads/step", "layer-1 flops");
        for r in &self.rows {
            let ns = r.median_step_ns.map(|n| thousands(n as i128)).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<12}{:>16}{:>18}{:>18}",
                r.variant.as_str(),
                ns,
                thousands(r.reads_per_step as i128),
                thousands(r.meter.flops_layer1 as i128)
            );
        }
        s
    }
}

fn median(mut v: Vec<u64>) -> Option<u64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    Some(v[v.len() / 2])
}

fn timed_steps(engine: &impl Engine, batch: usize, steps: usize, seed: u64) -> Result<Vec<u64>> {
    let seqs = random_sequences(engine.config().vocab_size, batch, steps, seed);
    let mut caches: Vec<KvCache> = (0..batch).map(|_| engine.new_cache()).collect();
    let mut times = Vec::with_capacity(steps);
    for step in 0..steps {
        let t0 = now_ns();
        for (seq, cache) in seqs.iter().zip(caches.iter_mut()) {
            engine.forward(&[seq[step]], cache, None)?;
        }
        if let Some((a, b)) = t0.zip(now_ns()) {
            times.push((b - a) as u64);
        }
    }
    Ok(times)
}

/// Wall-time comparison of decode steps. Informational only.
pub fn bench(
    baseline: &impl Engine,
    transformed: &impl Engine,
    batch: usize,
    steps: usize,
    seed: u64,
) -> Result<BenchReport> {
    let mut rows = Vec::new();
    for (variant, times, meter) in [
        (Variant::of(baseline), timed_steps(baseline, batch, steps, seed)?, metered_forward(baseline, batch, steps, seed)?),
        (
            Variant::of(transformed),
            timed_steps(transformed, batch, steps, seed)?,
            metered_forward(transformed, batch, steps, seed)?,
        ),
    ] {
        rows.push(BenchRow { variant, median_step_ns: median(times), reads_per_step: meter.reads_per_step(), meter });
    }
    Ok(BenchReport { batch, steps, rows })
}
