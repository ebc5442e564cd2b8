//! Building blocks of a pre-norm decoder layer. Every block works on a
//! block of `n` consecutive positions starting at `start_pos`, so prefill
//! (`n = seq`) and decode (`n = 1`) share the same code.

use crate::metering::Meter;
use crate::model::cache::LayerCache;
use crate::model::config::{Activation, FfnKind, Layout, ModelConfig, NormKind, PosEncoding};
use crate::model::weights::{Expert, FfnWeights, LayerWeights, Norm};
use crate::numerics::{self, matmul, Tensor2};
use crate::Result;

/// `x · w`. With a meter attached, counts FLOPs and, when `region` names
/// an eliminable tensor, one full traversal of `w` per input row.
pub(crate) fn linear(
    x: &Tensor2,
    w: &Tensor2,
    meter: Option<&mut Meter>,
    region: Option<&str>,
) -> Result<Tensor2> {
    let y = matmul(x, w)?;
    if let Some(m) = meter {
        m.add_flops(2 * (x.rows() * w.len()) as u64);
        if let Some(tag) = region {
            for _ in 0..x.rows() {
                m.read_region_weights(tag, w.len() as u64);
            }
        }
    }
    Ok(y)
}

pub fn norm_row(config: &ModelConfig, norm: &Norm, x: &[f32]) -> Vec<f32> {
    match (config.norm_kind, &norm.bias) {
        (NormKind::Layernorm, Some(bias)) => numerics::layernorm(x, &norm.gain, bias, config.norm_eps),
        // Bias presence is checked at load time; fall back to zero bias.
        (NormKind::Layernorm, None) => {
            numerics::layernorm(x, &norm.gain, &vec![0.0; x.len()], config.norm_eps)
        }
        (NormKind::Rmsnorm, _) => numerics::rmsnorm(x, &norm.gain, config.norm_eps),
    }
}

pub fn norm_rows(config: &ModelConfig, norm: &Norm, x: &Tensor2) -> Tensor2 {
    let rows: Vec<Vec<f32>> = (0..x.rows()).map(|r| norm_row(config, norm, x.row(r))).collect();
    Tensor2::from_rows(x.cols(), &rows).expect("norm preserves width")
}

/// Source of the query/key/value projections for [`attention_block`].
pub enum QkvInput<'a> {
    /// Project a normalized input through `wq`, `wk`, `wv`.
    Normed { x: &'a Tensor2, wq: &'a Tensor2, wk: &'a Tensor2, wv: &'a Tensor2 },
    /// Projections fetched from the precompute table, not yet rotated.
    Precomputed { q: Tensor2, k: Tensor2, v: Tensor2 },
}

/// Causal GQA attention followed by the output projection `wp`.
///
/// RoPE models rotate each query head and each key head in place before
/// the keys are cached. Appends `n` rows to `cache`.
pub fn attention_block(
    config: &ModelConfig,
    input: QkvInput<'_>,
    wp: &Tensor2,
    start_pos: usize,
    cache: &mut LayerCache,
    mut meter: Option<&mut Meter>,
) -> Result<Tensor2> {
    let (mut q, mut k, v) = match input {
        QkvInput::Normed { x, wq, wk, wv } => (
            linear(x, wq, meter.as_deref_mut(), Some("layer0.wq"))?,
            linear(x, wk, meter.as_deref_mut(), Some("layer0.wk"))?,
            linear(x, wv, meter.as_deref_mut(), Some("layer0.wv"))?,
        ),
        QkvInput::Precomputed { q, k, v } => (q, k, v),
    };
    let hd = config.head_dim();
    let n = q.rows();
    if config.pos_encoding == PosEncoding::Rope {
        for r in 0..n {
            let pos = start_pos + r;
            for head in q.row_mut(r).chunks_exact_mut(hd) {
                numerics::rope_rotate_in_place(head, pos, config.rope_base)?;
            }
            for head in k.row_mut(r).chunks_exact_mut(hd) {
                numerics::rope_rotate_in_place(head, pos, config.rope_base)?;
            }
        }
    }
    debug_assert_eq!(cache.len(), start_pos);
    for r in 0..n {
        cache.push(k.row(r), v.row(r));
    }

    let group = config.n_heads / config.n_kv_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = Tensor2::zeros(n, config.dim);
    let mut scores = Vec::with_capacity(start_pos + n);
    for r in 0..n {
        let pos = start_pos + r;
        for h in 0..config.n_heads {
            let kv = h / group;
            let qh = &q.row(r)[h * hd..(h + 1) * hd];
            scores.clear();
            for t in 0..=pos {
                let kt = &cache.key(t)[kv * hd..(kv + 1) * hd];
                scores.push(numerics::dot(qh, kt) * scale);
            }
            numerics::softmax_in_place(&mut scores);
            let oh = &mut out.row_mut(r)[h * hd..(h + 1) * hd];
            for (t, &w) in scores.iter().enumerate() {
                let vt = &cache.value(t)[kv * hd..(kv + 1) * hd];
                for (o, &x) in oh.iter_mut().zip(vt) {
                    *o += w * x;
                }
            }
        }
        if let Some(m) = meter.as_deref_mut() {
            m.add_flops((4 * config.n_heads * hd * (pos + 1)) as u64);
        }
    }
    linear(&out, wp, meter, None)
}

fn expert_forward(
    config: &ModelConfig,
    expert: &Expert,
    x: &Tensor2,
    mut meter: Option<&mut Meter>,
    tag: Option<&str>,
) -> Result<Tensor2> {
    let name = |suffix: &str| tag.map(|t| format!("{t}.{suffix}"));
    let up = linear(x, &expert.up, meter.as_deref_mut(), name("up").as_deref())?;
    let act = match (config.ffn_kind, &expert.gate) {
        (FfnKind::Swiglu, Some(gate)) => {
            let g = linear(x, gate, meter.as_deref_mut(), name("gate").as_deref())?;
            let data = g.data().iter().zip(up.data()).map(|(g, u)| numerics::silu(*g) * u).collect();
            Tensor2::new(up.rows(), up.cols(), data)?
        }
        _ => {
            let f = match config.activation {
                Activation::Gelu => numerics::gelu,
                Activation::Silu => numerics::silu,
            };
            let data = up.data().iter().map(|v| f(*v)).collect();
            Tensor2::new(up.rows(), up.cols(), data)?
        }
    };
    linear(&act, &expert.down, meter, name("down").as_deref())
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub(crate) fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Dense FFN, or a routed mixture when a router is present: softmax over
/// all expert scores, keep the top-k, renormalize their weights to sum to 1.
pub fn ffn_block(
    config: &ModelConfig,
    ffn: &FfnWeights,
    x: &Tensor2,
    mut meter: Option<&mut Meter>,
    region: bool,
) -> Result<Tensor2> {
    let Some(router) = &ffn.router else {
        let tag = region.then_some("layer0.ffn");
        return expert_forward(config, &ffn.experts[0], x, meter, tag);
    };
    let scores = linear(x, router, meter.as_deref_mut(), region.then_some("layer0.ffn.router"))?;
    let mut out = Tensor2::zeros(x.rows(), config.dim);
    for r in 0..x.rows() {
        let probs = numerics::softmax_row(scores.row(r));
        let chosen = top_k(&probs, config.experts_top_k.min(probs.len()));
        let mut total = 0.0f32;
        for &j in &chosen {
            total += probs[j];
        }
        let row = Tensor2::new(1, x.cols(), x.row(r).to_vec())?;
        let acc = out.row_mut(r);
        for &j in &chosen {
            let tag = region.then(|| format!("layer0.ffn.expert{j}"));
            let y = expert_forward(config, &ffn.experts[j], &row, meter.as_deref_mut(), tag.as_deref())?;
            let w = probs[j] / total;
            for (a, v) in acc.iter_mut().zip(y.data()) {
                *a += w * v;
            }
        }
    }
    Ok(out)
}

/// One full baseline layer. `meter` is only passed for layer 0.
pub(crate) fn layer_forward(
    config: &ModelConfig,
    layer: &LayerWeights,
    x: &Tensor2,
    start_pos: usize,
    cache: &mut LayerCache,
    mut meter: Option<&mut Meter>,
) -> Result<Tensor2> {
    let n1 = norm_rows(config, &layer.norm1, x);
    let input = QkvInput::Normed { x: &n1, wq: &layer.wq, wk: &layer.wk, wv: &layer.wv };
    let attn = attention_block(config, input, &layer.wp, start_pos, cache, meter.as_deref_mut())?;
    match config.layout {
        Layout::Parallel => {
            let ffn = ffn_block(config, &layer.ffn, &n1, meter, true)?;
            x.add(&attn)?.add(&ffn)
        }
        Layout::Serial => {
            let h = x.add(&attn)?;
            serial_ffn_residual(config, layer.norm2.as_ref(), &layer.ffn, h, meter)
        }
    }
}

/// `h + FFN(norm2(h))`; the serial layout's second half.
pub(crate) fn serial_ffn_residual(
    config: &ModelConfig,
    norm2: Option<&Norm>,
    ffn: &FfnWeights,
    h: Tensor2,
    meter: Option<&mut Meter>,
) -> Result<Tensor2> {
    let norm2 = norm2.ok_or_else(|| crate::Error::Shape("serial layer without norm2".into()))?;
    let n2 = norm_rows(config, norm2, &h);
    let f = ffn_block(config, ffn, &n2, meter, false)?;
    h.add(&f)
}

/// Final norm and output projection.
pub(crate) fn head(
    config: &ModelConfig,
    final_norm: &Norm,
    output: &Tensor2,
    x: &Tensor2,
) -> Result<Tensor2> {
    matmul(&norm_rows(config, final_norm, x), output)
}
