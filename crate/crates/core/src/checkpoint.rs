//! `L1PC` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "L1PC"
//! version      u32      1
//! config_len   u64
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! tensor*      until end of file:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8       0 = f32
//!   rank       u8
//!   dims       rank x u64
//!   payload    prod(dims) x f32
//! ```
//!
//! Tensor names: `embed.in`, `embed.out`, `norm.final`, `layer{i}.{wq,wk,wv,wp}`,
//! `layer{i}.norm{1,2}` (gain) and `layer{i}.norm{1,2}.bias` (layernorm),
//! `layer{i}.ffn.{up,down,gate}` for a single expert, or
//! `layer{i}.ffn.router` and `layer{i}.ffn.expert{j}.{up,down,gate}` for a
//! mixture. Precomputed files carry `layer0.precompute` of shape
//! `[vocab_size, 2(d+e)]` with columns `[q | k | v | skip]` and omit
//! `embed.in`, `layer0.{wq,wk,wv,norm1}` and, for the parallel layout,
//! every `layer0.ffn.*` tensor.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use thiserror::Error;

use crate::model::{Expert, FfnKind, FfnWeights, Layout, LayerWeights, Model, ModelConfig, ModelWeights, Norm, NormKind};
use crate::numerics::Tensor2;
use crate::precompute::{FirstLayerRemainder, PrecomputeTable, TransformedModel};
use crate::Result;

pub const MAGIC: [u8; 4] = *b"L1PC";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"L1PC\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found}, expected {VERSION}")]
    VersionMismatch { found: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),

    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, found: Vec<u64>, expected: Vec<u64> },

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("invalid utf-8 in {0}")]
    Utf8(String),

    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config inconsistent with tensors: {0}")]
    Inconsistent(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A tensor as stored in a file: name, dims and f32 payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

/// Either kind of model a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Baseline(Model),
    Transformed(TransformedModel),
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Checkpoint::Baseline(m) => &m.config,
            Checkpoint::Transformed(t) => crate::Engine::config(t),
        }
    }
}

fn matrix(out: &mut Vec<RawTensor>, name: impl Into<String>, t: &Tensor2) {
    out.push(RawTensor { name: name.into(), dims: vec![t.rows() as u64, t.cols() as u64], data: t.data().to_vec() });
}

fn vector(out: &mut Vec<RawTensor>, name: impl Into<String>, v: &[f32]) {
    out.push(RawTensor { name: name.into(), dims: vec![v.len() as u64], data: v.to_vec() });
}

fn norm(out: &mut Vec<RawTensor>, name: &str, n: &Norm) {
    vector(out, name, &n.gain);
    if let Some(b) = &n.bias {
        vector(out, format!("{name}.bias"), b);
    }
}

fn ffn(out: &mut Vec<RawTensor>, prefix: &str, f: &FfnWeights) {
    let mut expert = |p: String, e: &Expert| {
        matrix(out, format!("{p}.up"), &e.up);
        if let Some(g) = &e.gate {
            matrix(out, format!("{p}.gate"), g);
        }
        matrix(out, format!("{p}.down"), &e.down);
    };
    match &f.router {
        None => expert(format!("{prefix}.ffn"), &f.experts[0]),
        Some(r) => {
            for (j, e) in f.experts.iter().enumerate() {
                expert(format!("{prefix}.ffn.expert{j}"), e);
            }
            matrix(out, format!("{prefix}.ffn.router"), r);
        }
    }
}

fn layer(out: &mut Vec<RawTensor>, i: usize, l: &LayerWeights) {
    let p = format!("layer{i}");
    norm(out, &format!("{p}.norm1"), &l.norm1);
    matrix(out, format!("{p}.wq"), &l.wq);
    matrix(out, format!("{p}.wk"), &l.wk);
    matrix(out, format!("{p}.wv"), &l.wv);
    matrix(out, format!("{p}.wp"), &l.wp);
    if let Some(n2) = &l.norm2 {
        norm(out, &format!("{p}.norm2"), n2);
    }
    ffn(out, &p, &l.ffn);
}

/// Tensors of a baseline model in file order.
pub fn baseline_tensors(model: &Model) -> Vec<RawTensor> {
    let w = &model.weights;
    let mut out = Vec::new();
    matrix(&mut out, "embed.in", &w.input_embeddings);
    for (i, l) in w.layers.iter().enumerate() {
        layer(&mut out, i, l);
    }
    norm(&mut out, "norm.final", &w.final_norm);
    matrix(&mut out, "embed.out", &w.output_embeddings);
    out
}

/// Tensors of a transformed model in file order.
pub fn transformed_tensors(model: &TransformedModel) -> Vec<RawTensor> {
    let mut out = Vec::new();
    matrix(&mut out, "layer0.precompute", model.table().tensor());
    let first = model.first_layer();
    matrix(&mut out, "layer0.wp", &first.wp);
    if let Some(n2) = &first.norm2 {
        norm(&mut out, "layer0.norm2", n2);
    }
    if let Some(f) = &first.ffn {
        ffn(&mut out, "layer0", f);
    }
    for (i, l) in model.later_layers().iter().enumerate() {
        layer(&mut out, i + 1, l);
    }
    norm(&mut out, "norm.final", model.final_norm());
    matrix(&mut out, "embed.out", model.output_embeddings());
    out
}

/// Serialize a config and tensors. Byte output depends only on the inputs.
pub fn encode(config: &ModelConfig, tensors: &[RawTensor]) -> Vec<u8> {
    let json = serde_json::to_vec(config).expect("config serializes");
    let payload: usize = tensors.iter().map(|t| 14 + t.name.len() + 8 * t.dims.len() + 4 * t.data.len()).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + payload);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(t.dims.len() as u8);
        for d in &t.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    encode(&model.config, &baseline_tensors(model))
}

pub fn encode_transformed(model: &TransformedModel) -> Vec<u8> {
    encode(crate::Engine::config(model), &transformed_tensors(model))
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(CheckpointError::from)?;
    Ok(())
}

pub fn save_transformed(model: &TransformedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_transformed(model)).map_err(CheckpointError::from)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated(what.to_owned()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parse the container without interpreting tensor names.
pub fn decode_raw(bytes: &[u8]) -> Result<(ModelConfig, Vec<RawTensor>), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let len = r.u64("config length")?;
    let json = r.take(usize::try_from(len).unwrap_or(usize::MAX), "config")?;
    let config: ModelConfig = serde_json::from_slice(json)?;

    let mut tensors = Vec::new();
    let mut seen = HashSet::new();
    while !r.at_end() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::Utf8("tensor name".into()))?
            .to_owned();
        let dtype = r.u8(&name)?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::UnsupportedDtype(dtype));
        }
        let rank = r.u8(&name)? as usize;
        let dims = (0..rank).map(|_| r.u64(&name)).collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, d| acc.checked_mul(*d))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| CheckpointError::Truncated(name.clone()))?;
        let payload = r.take(count, &name)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateTensor(name));
        }
        tensors.push(RawTensor { name, dims, data });
    }
    Ok((config, tensors))
}

/// Look up tensors by name, checking shape, and report leftovers.
struct TensorSet {
    map: BTreeMap<String, RawTensor>,
}

impl TensorSet {
    fn take(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>, CheckpointError> {
        let t = self.map.remove(name).ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
        let expected: Vec<u64> = dims.iter().map(|&d| d as u64).collect();
        if t.dims != expected {
            return Err(CheckpointError::ShapeMismatch { name: name.into(), found: t.dims, expected });
        }
        Ok(t.data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor2, CheckpointError> {
        let data = self.take(name, &[rows, cols])?;
        Ok(Tensor2::new(rows, cols, data).expect("shape checked"))
    }

    fn norm(&mut self, name: &str, config: &ModelConfig) -> Result<Norm, CheckpointError> {
        let gain = self.take(name, &[config.dim])?;
        let bias = match config.norm_kind {
            NormKind::Layernorm => Some(self.take(&format!("{name}.bias"), &[config.dim])?),
            NormKind::Rmsnorm => None,
        };
        Ok(Norm { gain, bias })
    }

    fn expert(&mut self, prefix: &str, config: &ModelConfig) -> Result<Expert, CheckpointError> {
        let (d, h) = (config.dim, config.hidden_dim);
        let up = self.matrix(&format!("{prefix}.up"), d, h)?;
        let gate = match config.ffn_kind {
            FfnKind::Swiglu => Some(self.matrix(&format!("{prefix}.gate"), d, h)?),
            FfnKind::Mlp2 => None,
        };
        let down = self.matrix(&format!("{prefix}.down"), h, d)?;
        Ok(Expert { up, gate, down })
    }

    fn ffn(&mut self, prefix: &str, config: &ModelConfig) -> Result<FfnWeights, CheckpointError> {
        if config.is_moe() {
            let experts = (0..config.n_experts)
                .map(|j| self.expert(&format!("{prefix}.ffn.expert{j}"), config))
                .collect::<Result<Vec<_>, _>>()?;
            let router = self.matrix(&format!("{prefix}.ffn.router"), config.dim, config.n_experts)?;
            Ok(FfnWeights { router: Some(router), experts })
        } else {
            Ok(FfnWeights { router: None, experts: vec![self.expert(&format!("{prefix}.ffn"), config)?] })
        }
    }

    fn layer(&mut self, i: usize, config: &ModelConfig) -> Result<LayerWeights, CheckpointError> {
        let (d, e) = (config.dim, config.kv_dim());
        let p = format!("layer{i}");
        Ok(LayerWeights {
            norm1: self.norm(&format!("{p}.norm1"), config)?,
            wq: self.matrix(&format!("{p}.wq"), d, d)?,
            wk: self.matrix(&format!("{p}.wk"), d, e)?,
            wv: self.matrix(&format!("{p}.wv"), d, e)?,
            wp: self.matrix(&format!("{p}.wp"), d, d)?,
            norm2: match config.layout {
                Layout::Serial => Some(self.norm(&format!("{p}.norm2"), config)?),
                Layout::Parallel => None,
            },
            ffn: self.ffn(&p, config)?,
        })
    }

    fn finish(self) -> Result<(), CheckpointError> {
        match self.map.into_keys().next() {
            Some(extra) => Err(CheckpointError::UnexpectedTensor(extra)),
            None => Ok(()),
        }
    }
}

fn inconsistent(e: crate::Error) -> crate::Error {
    match e {
        crate::Error::Checkpoint(c) => crate::Error::Checkpoint(c),
        other => CheckpointError::Inconsistent(other.to_string()).into(),
    }
}

/// Decode a checkpoint of either kind, validating every tensor against the config.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (config, tensors) = decode_raw(bytes)?;
    config.validate().map_err(inconsistent)?;
    let mut set = TensorSet { map: tensors.into_iter().map(|t| (t.name.clone(), t)).collect() };
    let (d, v) = (config.dim, config.vocab_size);
    if config.precomputed {
        let table = set.matrix("layer0.precompute", v, config.table_row_width())?;
        let wp = set.matrix("layer0.wp", d, d)?;
        let (norm2, ffn) = match config.layout {
            Layout::Serial => (Some(set.norm("layer0.norm2", &config)?), Some(set.ffn("layer0", &config)?)),
            Layout::Parallel => (None, None),
        };
        let layers = (1..config.n_layers).map(|i| set.layer(i, &config)).collect::<Result<Vec<_>, _>>()?;
        let final_norm = set.norm("norm.final", &config)?;
        let output = set.matrix("embed.out", d, v)?;
        set.finish()?;
        let table = PrecomputeTable::from_tensor(&config, table).map_err(inconsistent)?;
        let first = FirstLayerRemainder { wp, norm2, ffn };
        let model = TransformedModel::new(config, table, first, layers, final_norm, output).map_err(inconsistent)?;
        Ok(Checkpoint::Transformed(model))
    } else {
        let input = set.matrix("embed.in", v, d)?;
        let layers = (0..config.n_layers).map(|i| set.layer(i, &config)).collect::<Result<Vec<_>, _>>()?;
        let final_norm = set.norm("norm.final", &config)?;
        let output = set.matrix("embed.out", d, v)?;
        set.finish()?;
        let weights = ModelWeights { input_embeddings: input, layers, final_norm, output_embeddings: output };
        Ok(Checkpoint::Baseline(Model::new(config, weights).map_err(inconsistent)?))
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(CheckpointError::from)?;
    decode(&bytes)
}
