//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use l1pc::analyzer;
use l1pc::checkpoint::{self, Checkpoint};
use l1pc::metering::metered_forward;
use l1pc::model::{Layout, PosEncoding};
use l1pc::numerics::rope_rotate;
use l1pc::rng::SplitMix64;
use l1pc::{count_weights, transform_model, verify_equivalence, Engine, Error, Model, ModelConfig};

const BIN: &str = env!("CARGO_BIN_EXE_l1pc");

const EQUIV_TOL: f64 = 1e-4;
const EQUIV_PROMPTS: usize = 100;
const EQUIV_MAX_LEN: usize = 32;
const EQUIV_BUDGET: Duration = Duration::from_secs(60);
const ANALYZE_BUDGET: Duration = Duration::from_secs(1);
const DECODE_TOL: f64 = 1e-5;
const ROPE_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy(layout: Layout) -> ModelConfig {
    ModelConfig::toy(layout)
}

fn moe_toy() -> ModelConfig {
    ModelConfig { n_experts: 4, experts_top_k: 2, ..toy(Layout::Parallel) }
}

struct Costs {
    preset: &'static str,
    eliminated: u64,
    reads_without_b1: u64,
    reads_with_b1: u64,
    factors: [u64; 4],
    embed_increase: u64,
    abs_delta: i64,
    rel_pct: i64,
}

const COSTS: [Costs; 3] = [
    Costs {
        preset: "pythia-6.9b",
        eliminated: 184_549_376,
        reads_without_b1: 184_553_472,
        reads_with_b1: 16_384,
        factors: [11_264, 704, 44, 11],
        embed_increase: 619_315_200,
        abs_delta: 434_765_824,
        rel_pct: 6,
    },
    Costs {
        preset: "mistral-7b",
        eliminated: 25_165_824,
        reads_without_b1: 25_169_920,
        reads_with_b1: 10_240,
        factors: [2_458, 154, 10, 3],
        embed_increase: 196_608_000,
        abs_delta: 171_442_176,
        rel_pct: 3,
    },
    Costs {
        preset: "mixtral-8x7b-parallel",
        eliminated: 964_689_920,
        reads_without_b1: 964_694_016,
        reads_with_b1: 10_240,
        factors: [94_208, 5_888, 368, 92],
        embed_increase: 196_608_000,
        abs_delta: -768_081_920,
        rel_pct: -2,
    },
];

fn table_reproduction() -> Outcome {
    let t0 = Instant::now();
    let out = Command::new(BIN)
        .args(["analyze", "--preset", "all", "--paper-check"])
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.code() == Some(0), || format!("analyze --paper-check exited {:?}", out.status.code()))?;
    ensure(!stdout.contains("MISMATCH"), || "paper check reported a mismatch".into())?;
    ensure(elapsed < ANALYZE_BUDGET, || format!("analyze took {elapsed:?}"))?;

    let json = Command::new(BIN)
        .args(["analyze", "--preset", "all", "--format", "json"])
        .output()
        .map_err(|e| e.to_string())?;
    let reports: serde_json::Value = serde_json::from_slice(&json.stdout).map_err(|e| e.to_string())?;
    let mut cells = 0;
    for c in &COSTS {
        let r = reports
            .as_array()
            .and_then(|a| a.iter().find(|r| r["config"] == c.preset))
            .ok_or_else(|| format!("no report for {}", c.preset))?;
        let u = |k: &str| r[k].as_u64().unwrap_or(u64::MAX);
        let i = |k: &str| r[k].as_i64().unwrap_or(i64::MAX);
        let b = |idx: usize, k: &str| r["batches"][idx][k].as_u64().unwrap_or(u64::MAX);
        let mut checks = vec![
            ("eliminated", c.eliminated as i128, u("eliminated_weights") as i128),
            ("reads without, B=1", c.reads_without_b1 as i128, b(0, "reads_without") as i128),
            ("reads with, B=1", c.reads_with_b1 as i128, b(0, "reads_with") as i128),
            ("embed increase", c.embed_increase as i128, u("embed_mem_increase") as i128),
            ("total delta", c.abs_delta as i128, i("mem_delta_abs") as i128),
            ("relative delta", c.rel_pct as i128, i("mem_delta_rel") as i128),
        ];
        for (idx, (batch, f)) in [1u64, 16, 256, 1024].iter().zip(c.factors).enumerate() {
            ensure(b(idx, "batch") == *batch, || format!("{}: batch order", c.preset))?;
            checks.push(("factor", f as i128, b(idx, "factor_rounded") as i128));
        }
        for (what, want, got) in checks {
            ensure(want == got, || format!("{} {what}: expected {want}, got {got}", c.preset))?;
            cells += 1;
        }
    }
    Ok(format!("{cells} cells exact, analyze --paper-check in {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

fn weight_counts() -> Outcome {
    // qp, kv, ffn, embeddings, total
    let expected: [(&str, [u64; 5]); 3] = [
        ("pythia-6.9b", [33_554_432, 33_554_432, 134_217_728, 412_876_800, 6_855_327_744]),
        ("mistral-7b", [33_554_432, 8_388_608, 117_440_512, 262_144_000, 5_362_417_664]),
        ("mixtral-8x7b", [33_554_432, 8_388_608, 939_524_096, 262_144_000, 31_669_092_352]),
    ];
    for (name, want) in expected {
        let cfg = analyzer::preset(name).ok_or_else(|| format!("missing preset {name}"))?;
        let w = count_weights(&cfg).map_err(|e| e.to_string())?;
        let got = [w.qp_per_layer, w.kv_per_layer, w.ffn_per_layer, w.embed_total, w.total];
        ensure(got == want, || format!("{name}: expected {want:?}, got {got:?}"))?;
    }
    Ok("3 presets x 5 rows exact".into())
}

fn equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let configs = [("serial", toy(Layout::Serial)), ("parallel", toy(Layout::Parallel)), ("moe", moe_toy())];
    for (i, (label, cfg)) in configs.into_iter().enumerate() {
        let base = Model::random(cfg, 100 + i as u64).map_err(|e| e.to_string())?;
        let fast = transform_model(&base).map_err(|e| e.to_string())?;
        let r = verify_equivalence(&base, &fast, EQUIV_PROMPTS, EQUIV_MAX_LEN, 7 + i as u64, EQUIV_TOL)
            .map_err(|e| e.to_string())?;
        ensure(r.pass && r.max_rel_diff <= EQUIV_TOL, || format!("{label}: max rel diff {:.3e}", r.max_rel_diff))?;
        worst = worst.max(r.max_rel_diff);
    }
    let elapsed = t0.elapsed();
    ensure(elapsed < EQUIV_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("3 toys x {EQUIV_PROMPTS} prompts, max rel diff {worst:.2e}, {:.1} s", elapsed.as_secs_f64()))
}

fn metering() -> Outcome {
    let mut runs = 0;
    for (i, cfg) in [toy(Layout::Serial), toy(Layout::Parallel)].into_iter().enumerate() {
        let base = Model::random(cfg.clone(), 40 + i as u64).map_err(|e| e.to_string())?;
        let fast = transform_model(&base).map_err(|e| e.to_string())?;
        let (d, e) = (cfg.dim as u64, cfg.kv_dim() as u64);
        let elim = analyzer::eliminated_weights(&cfg).map_err(|e| e.to_string())?;
        for batch in [1u64, 2, 8, 16] {
            let steps = 3;
            let b = metered_forward(&base, batch as usize, steps, batch).map_err(|e| e.to_string())?;
            let f = metered_forward(&fast, batch as usize, steps, batch).map_err(|e| e.to_string())?;
            let reads = analyzer::reads(&cfg, batch).map_err(|e| e.to_string())?;
            let label = format!("{:?} B={batch}", cfg.layout);
            ensure(f.input_reads_per_step() == batch * 2 * (d + e), || format!("{label}: table reads {}", f.input_reads_per_step()))?;
            ensure(f.region_reads_per_step() == 0, || format!("{label}: transformed touched eliminated weights"))?;
            ensure(f.reads_per_step() == reads.with_, || format!("{label}: transformed vs analyzer"))?;
            ensure(b.reads_per_step() == elim + batch * d, || format!("{label}: baseline reads {}", b.reads_per_step()))?;
            ensure(b.reads_per_step() == reads.without, || format!("{label}: baseline vs analyzer"))?;
            runs += 1;
        }
    }
    Ok(format!("{runs} (layout, B) runs exact"))
}

fn eligibility(dir: &Path) -> Outcome {
    let base = dir.join("abs.l1pc");
    let out = dir.join("abs.pc");
    let gen = Command::new(BIN)
        .args(["gen-toy", "--seed", "5", "--pos", "absolute", "--out"])
        .arg(&base)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(gen.status.success(), || "gen-toy failed".into())?;
    let t = Command::new(BIN).arg("transform").arg("--in").arg(&base).arg("--out").arg(&out).output().map_err(|e| e.to_string())?;
    ensure(t.status.code() == Some(2), || format!("transform exited {:?}", t.status.code()))?;
    let stderr = String::from_utf8_lossy(&t.stderr);
    ensure(stderr.contains("ineligible"), || format!("stderr: {stderr}"))?;
    ensure(!out.exists(), || "transform wrote an output file".into())?;

    let cfg = ModelConfig { pos_encoding: PosEncoding::Absolute, ..toy(Layout::Parallel) };
    let model = Model::random(cfg, 5).map_err(|e| e.to_string())?;
    ensure(matches!(transform_model(&model), Err(Error::IneligibleArchitecture(_))), || "library transform accepted".into())?;
    let (logits, _) = model.prefill(&[1, 2, 3]).map_err(|e| e.to_string())?;
    ensure(logits.is_finite(), || "baseline logits not finite".into())?;
    let run = Command::new(BIN).arg("run").arg("--ckpt").arg(&base).args(["--tokens", "1,2,3", "--steps", "2"]).output();
    ensure(run.map(|o| o.status.success()).unwrap_or(false), || "run on baseline failed".into())?;
    Ok("exit 2 with IneligibleArchitecture, baseline still runs".into())
}

fn round_trip(dir: &Path) -> Outcome {
    let prompt = [4u32, 90, 0, 17, 33];
    let mut n = 0;
    for (i, cfg) in [toy(Layout::Serial), toy(Layout::Parallel), moe_toy()].into_iter().enumerate() {
        let base = Model::random(cfg, 60 + i as u64).map_err(|e| e.to_string())?;
        let fast = transform_model(&base).map_err(|e| e.to_string())?;
        let (pb, pf) = (dir.join(format!("rt{i}.l1pc")), dir.join(format!("rt{i}.pc")));
        checkpoint::save_model(&base, &pb).map_err(|e| e.to_string())?;
        checkpoint::save_transformed(&fast, &pf).map_err(|e| e.to_string())?;
        let Ok(Checkpoint::Baseline(lb)) = checkpoint::load(&pb) else { return Err("baseline reload".into()) };
        let Ok(Checkpoint::Transformed(lf)) = checkpoint::load(&pf) else { return Err("transformed reload".into()) };
        ensure(lb == base && lf == fast, || format!("config {i}: loaded weights differ"))?;
        let bits = |e: &dyn Fn() -> l1pc::Result<Vec<f32>>| e().map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let a = bits(&|| fast.prefill(&prompt).map(|(l, _)| l.into_data())).map_err(|e| e.to_string())?;
        let b = bits(&|| lf.prefill(&prompt).map(|(l, _)| l.into_data())).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("config {i}: transformed forward differs after reload"))?;
        let a = bits(&|| base.prefill(&prompt).map(|(l, _)| l.into_data())).map_err(|e| e.to_string())?;
        let b = bits(&|| lb.prefill(&prompt).map(|(l, _)| l.into_data())).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("config {i}: baseline forward differs after reload"))?;
        n += 1;
    }
    Ok(format!("{n} configs, weights and logits bitwise equal"))
}

fn consistency() -> Outcome {
    let mut rng = SplitMix64::new(2024);
    let mut worst_decode: f64 = 0.0;
    for (i, cfg) in [toy(Layout::Serial), toy(Layout::Parallel), moe_toy()].into_iter().enumerate() {
        let base = Model::random(cfg.clone(), 80 + i as u64).map_err(|e| e.to_string())?;
        let fast = transform_model(&base).map_err(|e| e.to_string())?;
        for trial in 0..10 {
            let len = 1 + rng.below(EQUIV_MAX_LEN as u64) as usize;
            let tokens: Vec<u32> = (0..len).map(|_| rng.below(cfg.vocab_size as u64) as u32).collect();
            for engine in [&base as &dyn Engine, &fast as &dyn Engine] {
                let (full, _) = engine.prefill(&tokens).map_err(|e| e.to_string())?;
                let mut cache = engine.new_cache();
                for (pos, &t) in tokens.iter().enumerate() {
                    let step = engine.decode(t, &mut cache).map_err(|e| e.to_string())?;
                    for (a, b) in step.iter().zip(full.row(pos)) {
                        worst_decode = worst_decode.max((*a as f64 - *b as f64).abs());
                    }
                }
                let cut = 1 + trial % len;
                let (prefix, _) = engine.prefill(&tokens[..cut]).map_err(|e| e.to_string())?;
                let same = prefix.data().iter().zip(full.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, || format!("config {i}: prefix logits changed by later tokens"))?;
            }
        }
    }
    ensure(worst_decode <= DECODE_TOL, || format!("prefill/decode diff {worst_decode:.3e}"))?;

    let (mut worst_id, mut worst_norm): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let width = 2 * (1 + rng.below(64) as usize);
        let x: Vec<f32> = (0..width).map(|_| rng.symmetric(1.0)).collect();
        let at0 = rope_rotate(&x, 0, 10_000.0).map_err(|e| e.to_string())?;
        for (a, b) in at0.iter().zip(&x) {
            worst_id = worst_id.max((a - b).abs() as f64);
        }
        let pos = rng.below(100_000) as usize;
        let base = if rng.below(2) == 0 { 10_000.0 } else { 1_000_000.0 };
        let r = rope_rotate(&x, pos, base).map_err(|e| e.to_string())?;
        for (p, q) in x.chunks(2).zip(r.chunks(2)) {
            let before = (p[0] as f64).hypot(p[1] as f64);
            let after = (q[0] as f64).hypot(q[1] as f64);
            worst_norm = worst_norm.max((before - after).abs());
        }
    }
    ensure(worst_id <= ROPE_TOL, || format!("rope position 0 diff {worst_id:.3e}"))?;
    ensure(worst_norm <= ROPE_TOL, || format!("rope pair norm diff {worst_norm:.3e}"))?;
    Ok(format!(
        "decode vs prefill {worst_decode:.2e}, causality bitwise, rope identity {worst_id:.1e}, pair norm {worst_norm:.2e}"
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let criteria: [(&str, Check); 7] = [
        ("1 table reproduction", Box::new(table_reproduction)),
        ("2 weight counts", Box::new(weight_counts)),
        ("3 equivalence", Box::new(equivalence)),
        ("4 metering agreement", Box::new(metering)),
        ("5 eligibility", Box::new(|| eligibility(dir.path()))),
        ("6 round-trip fidelity", Box::new(|| round_trip(dir.path()))),
        ("7 consistency properties", Box::new(consistency)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
