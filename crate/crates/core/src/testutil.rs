//! f64 scalar reference of the baseline forward pass, written without the
//! crate's kernels. Test-only.

use crate::model::{Activation, Expert, FfnKind, FfnWeights, Layout, Model, ModelConfig, Norm, NormKind, PosEncoding};
use crate::numerics::Tensor2;

fn vecmat(x: &[f64], w: &Tensor2) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|k| x[k] * w.get(k, j) as f64).sum())
        .collect()
}

fn norm(cfg: &ModelConfig, n: &Norm, x: &[f64]) -> Vec<f64> {
    let len = x.len() as f64;
    let eps = cfg.norm_eps as f64;
    match cfg.norm_kind {
        NormKind::Rmsnorm => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / len;
            x.iter().zip(&n.gain).map(|(v, g)| *g as f64 * v / (ms + eps).sqrt()).collect()
        }
        NormKind::Layernorm => {
            let mean = x.iter().sum::<f64>() / len;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
            let bias = n.bias.as_ref().unwrap();
            (0..x.len())
                .map(|i| n.gain[i] as f64 * (x[i] - mean) / (var + eps).sqrt() + bias[i] as f64)
                .collect()
        }
    }
}

fn rotate(x: &mut [f64], pos: usize, base: f64) {
    let h = x.len();
    for i in 0..h / 2 {
        let th = pos as f64 / base.powf(2.0 * i as f64 / h as f64);
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * th.cos() - b * th.sin();
        x[2 * i + 1] = a * th.sin() + b * th.cos();
    }
}

fn expert(cfg: &ModelConfig, e: &Expert, x: &[f64]) -> Vec<f64> {
    let up = vecmat(x, &e.up);
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let act: Vec<f64> = match cfg.ffn_kind {
        FfnKind::Swiglu => {
            let g = vecmat(x, e.gate.as_ref().unwrap());
            g.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect()
        }
        FfnKind::Mlp2 => up
            .iter()
            .map(|&v| match cfg.activation {
                Activation::Silu => silu(v),
                Activation::Gelu => {
                    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
                }
            })
            .collect(),
    };
    vecmat(&act, &e.down)
}

pub(crate) fn ffn(cfg: &ModelConfig, f: &FfnWeights, x: &[f64]) -> Vec<f64> {
    let Some(router) = &f.router else {
        return expert(cfg, &f.experts[0], x);
    };
    let scores = vecmat(x, router);
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let probs: Vec<f64> = exp.iter().map(|e| e / sum).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|a, b| probs[*b].partial_cmp(&probs[*a]).unwrap());
    let chosen = &order[..cfg.experts_top_k];
    let total: f64 = chosen.iter().map(|&j| probs[j]).sum();
    let mut out = vec![0.0; cfg.dim];
    for &j in chosen {
        for (o, v) in out.iter_mut().zip(expert(cfg, &f.experts[j], x)) {
            *o += probs[j] / total * v;
        }
    }
    out
}

/// Logits for every position of `tokens`.
pub(crate) fn reference_logits(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let w = &model.weights;
    let (d, hd) = (cfg.dim, cfg.head_dim());
    let group = cfg.n_heads / cfg.n_kv_heads;
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            let mut x: Vec<f64> = w.input_embeddings.row(t as usize).iter().map(|&v| v as f64).collect();
            if cfg.pos_encoding == PosEncoding::Absolute {
                for (j, v) in x.iter_mut().enumerate() {
                    let ang = pos as f64 / cfg.rope_base.powf(2.0 * (j / 2) as f64 / d as f64);
                    *v += if j % 2 == 0 { ang.sin() } else { ang.cos() };
                }
            }
            x
        })
        .collect();
    for layer in &w.layers {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| norm(cfg, &layer.norm1, x)).collect();
        let mut qs: Vec<Vec<f64>> = normed.iter().map(|n| vecmat(n, &layer.wq)).collect();
        let mut ks: Vec<Vec<f64>> = normed.iter().map(|n| vecmat(n, &layer.wk)).collect();
        let vs: Vec<Vec<f64>> = normed.iter().map(|n| vecmat(n, &layer.wv)).collect();
        if cfg.pos_encoding == PosEncoding::Rope {
            for pos in 0..tokens.len() {
                for h in qs[pos].chunks_mut(hd) {
                    rotate(h, pos, cfg.rope_base);
                }
                for h in ks[pos].chunks_mut(hd) {
                    rotate(h, pos, cfg.rope_base);
                }
            }
        }
        let mut next = Vec::with_capacity(xs.len());
        for pos in 0..tokens.len() {
            let mut att = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let kv = h / group;
                let q = &qs[pos][h * hd..(h + 1) * hd];
                let scores: Vec<f64> = (0..=pos)
                    .map(|t| {
                        let k = &ks[t][kv * hd..(kv + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = e.iter().sum();
                for t in 0..=pos {
                    for j in 0..hd {
                        att[h * hd + j] += e[t] / sum * vs[t][kv * hd + j];
                    }
                }
            }
            let proj = vecmat(&att, &layer.wp);
            let x = &xs[pos];
            let y: Vec<f64> = match cfg.layout {
                Layout::Parallel => {
                    let f = ffn(cfg, &layer.ffn, &normed[pos]);
                    (0..d).map(|i| x[i] + proj[i] + f[i]).collect()
                }
                Layout::Serial => {
                    let h: Vec<f64> = (0..d).map(|i| x[i] + proj[i]).collect();
                    let f = ffn(cfg, &layer.ffn, &norm(cfg, layer.norm2.as_ref().unwrap(), &h));
                    (0..d).map(|i| h[i] + f[i]).collect()
                }
            };
            next.push(y);
        }
        xs = next;
    }
    xs.iter().map(|x| vecmat(&norm(cfg, &w.final_norm, x), &w.output_embeddings)).collect()
}

/// Small config with every dimension overridable in one place.
pub(crate) fn small(layout: Layout, dim: usize, heads: usize, kv: usize) -> ModelConfig {
    ModelConfig {
        dim,
        n_heads: heads,
        n_kv_heads: kv,
        hidden_dim: 2 * dim,
        vocab_size: 13,
        n_layers: 2,
        max_seq_len: 16,
        ..ModelConfig::toy(layout)
    }
}

pub(crate) fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}
