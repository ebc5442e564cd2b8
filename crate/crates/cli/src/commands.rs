use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use l1pc::analyzer::{self, CheckLine};
use l1pc::checkpoint::{self, Checkpoint, CheckpointError};
use l1pc::metering::{self, Variant};
use l1pc::model::{argmax, Activation, FfnKind, Layout, NormKind, PosEncoding};
use l1pc::{transform_model, verify_equivalence, Engine, Meter, Model, ModelConfig, TransformedModel};

use crate::{ActArg, AnalyzeArgs, BenchArgs, FfnArg, Format, GenToyArgs, LayoutArg, NormArg, PosArg, RunArgs};
use crate::{TransformArgs, VerifyArgs};

pub const OK: i32 = 0;
pub const VERIFY_FAILED: i32 = 1;
pub const USAGE: i32 = 2;
pub const IO: i32 = 3;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return IO;
        }
        match cause.downcast_ref::<l1pc::Error>() {
            Some(l1pc::Error::Checkpoint(_)) => return IO,
            Some(_) => return USAGE,
            None => {}
        }
        if cause.is::<CheckpointError>() {
            return IO;
        }
    }
    USAGE
}

/// The error chain joined by ": ", skipping causes already spelled out by
/// the message above them.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn load(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path).with_context(|| format!("reading {}", path.display()))
}

fn load_baseline(path: &Path) -> Result<Model> {
    match load(path)? {
        Checkpoint::Baseline(m) => Ok(m),
        Checkpoint::Transformed(_) => {
            Err(l1pc::Error::Config(format!("{} holds a transformed model, expected a baseline", path.display())).into())
        }
    }
}

fn load_transformed(path: &Path) -> Result<TransformedModel> {
    match load(path)? {
        Checkpoint::Transformed(t) => Ok(t),
        Checkpoint::Baseline(_) => {
            Err(l1pc::Error::Config(format!("{} holds a baseline model, expected a transformed one", path.display())).into())
        }
    }
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| l1pc::Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_line(l: &CheckLine) -> String {
    format!(
        "{:<8}{:<24}{:<34}expected {:>16}  got {:>16}",
        if l.ok() { "ok" } else { "MISMATCH" },
        l.preset,
        l.quantity,
        analyzer::thousands(l.expected),
        analyzer::thousands(l.got)
    )
}

pub fn analyze(args: AnalyzeArgs) -> Result<i32> {
    if args.batches.is_empty() || args.batches.contains(&0) {
        bail!(l1pc::Error::Config("batch sizes must be positive".into()));
    }
    let configs = match (&args.preset, &args.config) {
        (Some(p), _) if p == "all" => analyzer::paper_presets(),
        (Some(p), _) => vec![analyzer::preset(p).ok_or_else(|| {
            let names: Vec<String> = analyzer::paper_presets().into_iter().map(|c| c.name).collect();
            l1pc::Error::Config(format!("unknown preset '{p}' (known: {}, all)", names.join(", ")))
        })?],
        (None, Some(path)) => vec![read_config(path)?],
        (None, None) => unreachable!("clap requires --preset or --config"),
    };
    let reports = configs
        .iter()
        .map(|c| analyzer::report(c, &args.batches))
        .collect::<l1pc::Result<Vec<_>>>()?;
    let out = match args.format {
        Format::Text => analyzer::render_text(&reports),
        Format::Csv => analyzer::render_csv(&reports),
        Format::Json => analyzer::render_json(&reports),
    };
    print!("{out}");
    if !out.ends_with('\n') {
        println!();
    }

    if !args.paper_check {
        return Ok(OK);
    }
    if args.config.is_some() {
        bail!(l1pc::Error::Config("--paper-check needs --preset".into()));
    }
    let mut failed = 0;
    println!();
    for c in &configs {
        for line in analyzer::paper_check(&c.name)? {
            if !line.ok() {
                failed += 1;
            }
            println!("{}", check_line(&line));
        }
    }
    if failed > 0 {
        println!("paper check: {failed} mismatches");
        Ok(VERIFY_FAILED)
    } else {
        println!("paper check: all values match");
        Ok(OK)
    }
}

pub fn gen_toy(a: GenToyArgs) -> Result<i32> {
    let top_k = a.top_k.unwrap_or(a.experts.min(2));
    let cfg = ModelConfig {
        name: format!("toy-{}", a.seed),
        dim: a.dim,
        n_layers: a.layers,
        n_heads: a.heads,
        n_kv_heads: a.kv_heads,
        hidden_dim: a.hidden,
        n_experts: a.experts,
        experts_top_k: top_k,
        vocab_size: a.vocab,
        layout: match a.layout {
            LayoutArg::Serial => Layout::Serial,
            LayoutArg::Parallel => Layout::Parallel,
        },
        pos_encoding: match a.pos {
            PosArg::Rope => PosEncoding::Rope,
            PosArg::Absolute => PosEncoding::Absolute,
        },
        norm_kind: match a.norm {
            NormArg::Rmsnorm => NormKind::Rmsnorm,
            NormArg::Layernorm => NormKind::Layernorm,
        },
        ffn_kind: match a.ffn {
            FfnArg::Mlp2 => FfnKind::Mlp2,
            FfnArg::Swiglu => FfnKind::Swiglu,
        },
        activation: match a.activation {
            ActArg::Gelu => Activation::Gelu,
            ActArg::Silu => Activation::Silu,
        },
        rope_base: a.rope_base,
        max_seq_len: a.max_seq_len,
        ..ModelConfig::toy(Layout::Parallel)
    };
    let model = Model::random(cfg, a.seed)?;
    checkpoint::save_model(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} ({} parameters, seed {})",
        a.out.display(),
        analyzer::thousands(checkpoint::baseline_tensors(&model).iter().map(|t| t.data.len()).sum::<usize>() as i128),
        a.seed
    );
    Ok(OK)
}

pub fn transform(a: TransformArgs) -> Result<i32> {
    let model = load_baseline(&a.input)?;
    let t = transform_model(&model)?;
    checkpoint::save_transformed(&t, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let elim = t.eliminated();
    let table = t.table();
    println!("wrote {}", a.out.display());
    println!("weights eliminated (cost model)  {}", analyzer::thousands(elim.cost_model as i128));
    println!("weights eliminated (actual)      {}", analyzer::thousands(elim.actual as i128));
    println!(
        "precompute table                 {} x {} = {} values",
        table.vocab_size(),
        table.row_width(),
        analyzer::thousands((table.vocab_size() * table.row_width()) as i128)
    );
    Ok(OK)
}

pub fn verify(a: VerifyArgs) -> Result<i32> {
    let base = load_baseline(&a.baseline)?;
    let fast = load_transformed(&a.transformed)?;
    let r = verify_equivalence(&base, &fast, a.prompts, a.len, a.seed, a.tol)?;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&r)?),
        Format::Csv => {
            println!("prompts,max_seq_len,tol,max_abs_diff,max_abs_baseline,max_rel_diff,prefill_max_rel_diff,decode_max_rel_diff,pass");
            println!(
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{}",
                r.prompts,
                r.max_seq_len,
                r.tol,
                r.max_abs_diff,
                r.max_abs_baseline,
                r.max_rel_diff,
                r.prefill_max_rel_diff,
                r.decode_max_rel_diff,
                r.pass
            );
        }
        Format::Text => {
            println!("prompts {} (lengths 1..={}), tol {:e}", r.prompts, r.max_seq_len, r.tol);
            println!("max |diff|            {:.3e}", r.max_abs_diff);
            println!("max |baseline logit|  {:.3e}", r.max_abs_baseline);
            println!("max rel diff          {:.3e} (prefill {:.3e}, decode {:.3e})", r.max_rel_diff, r.prefill_max_rel_diff, r.decode_max_rel_diff);
            println!("{}", if r.pass { "PASS" } else { "FAIL" });
        }
    }
    Ok(if r.pass { OK } else { VERIFY_FAILED })
}

fn parse_tokens(s: &str) -> Result<Vec<u32>> {
    let tokens = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|e| l1pc::Error::Input(format!("bad token '{t}': {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if tokens.is_empty() {
        bail!(l1pc::Error::Input("empty prompt".into()));
    }
    Ok(tokens)
}

fn generate(engine: &impl Engine, prompt: &[u32], steps: usize, meter: bool) -> Result<()> {
    let mut cache = engine.new_cache();
    let mut m = Meter::new();
    let report = |label: String, m: &mut Meter, before: (u64, u64)| {
        if meter {
            println!(
                "  {label:<10} input reads {:>10}   region weight reads {:>10}",
                m.input_reads() - before.0,
                m.region_reads() - before.1
            );
        }
    };
    if meter {
        println!("{} first-layer reads", Variant::of(engine).as_str());
    }
    m.begin_batch();
    let logits = engine.forward(prompt, &mut cache, Some(&mut m))?;
    report("prefill".into(), &mut m, (0, 0));
    let mut next = argmax(logits.row(logits.rows() - 1));
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        out.push(next);
        if step + 1 == steps {
            break;
        }
        let before = (m.input_reads(), m.region_reads());
        m.begin_batch();
        let logits = engine.forward(&[next], &mut cache, Some(&mut m))?;
        report(format!("step {}", step + 1), &mut m, before);
        next = argmax(logits.row(0));
    }
    let text: Vec<String> = out.iter().map(|t| t.to_string()).collect();
    println!("{}", text.join(","));
    Ok(())
}

pub fn run(a: RunArgs) -> Result<i32> {
    let prompt = parse_tokens(&a.tokens)?;
    match load(&a.ckpt)? {
        Checkpoint::Baseline(m) => generate(&m, &prompt, a.steps, a.meter)?,
        Checkpoint::Transformed(t) => generate(&t, &prompt, a.steps, a.meter)?,
    }
    Ok(OK)
}

pub fn bench(a: BenchArgs) -> Result<i32> {
    let base = load_baseline(&a.baseline)?;
    let fast = load_transformed(&a.transformed)?;
    if a.batch == 0 || a.steps == 0 {
        bail!(l1pc::Error::Config("--batch and --steps must be positive".into()));
    }
    let r = metering::bench(&base, &fast, a.batch, a.steps, a.seed)?;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&r)?),
        Format::Csv => {
            println!("{}", metering::MeterReport::CSV_HEADER);
            for row in &r.rows {
                println!("{}", row.meter.to_csv_row());
            }
        }
        Format::Text => print!("{}", r.to_text()),
    }
    Ok(OK)
}
