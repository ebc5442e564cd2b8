use crate::model::config::{FfnKind, Layout, ModelConfig, NormKind};
use crate::numerics::Tensor2;
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Half-width of the uniform init range for toy models.
pub const INIT_SCALE: f32 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f32>,
    /// Present for layernorm only.
    pub bias: Option<Vec<f32>>,
}

impl Norm {
    pub fn param_count(&self) -> usize {
        self.gain.len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub up: Tensor2,
    /// SwiGLU only.
    pub gate: Option<Tensor2>,
    pub down: Tensor2,
}

impl Expert {
    pub fn param_count(&self) -> usize {
        self.up.len() + self.down.len() + self.gate.as_ref().map_or(0, Tensor2::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    /// `d x n_experts`; present when the FFN routes between experts.
    pub router: Option<Tensor2>,
    pub experts: Vec<Expert>,
}

impl FfnWeights {
    pub fn param_count(&self) -> usize {
        self.router.as_ref().map_or(0, Tensor2::len)
            + self.experts.iter().map(Expert::param_count).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: Norm,
    pub wq: Tensor2,
    pub wk: Tensor2,
    pub wv: Tensor2,
    pub wp: Tensor2,
    /// Pre-FFN norm of the serial layout.
    pub norm2: Option<Norm>,
    pub ffn: FfnWeights,
}

/// Dense parameters of a baseline model. Input and output embeddings are untied.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub input_embeddings: Tensor2,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Norm,
    pub output_embeddings: Tensor2,
}

pub(crate) struct Init {
    rng: SplitMix64,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self { rng: SplitMix64::new(seed) }
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Tensor2 {
        Tensor2::from_fn(rows, cols, |_, _| self.rng.symmetric(INIT_SCALE))
    }

    pub(crate) fn norm(&mut self, config: &ModelConfig) -> Norm {
        let d = config.dim;
        let gain = (0..d).map(|_| 1.0 + self.rng.symmetric(INIT_SCALE)).collect();
        let bias = match config.norm_kind {
            NormKind::Layernorm => Some((0..d).map(|_| self.rng.symmetric(INIT_SCALE)).collect()),
            NormKind::Rmsnorm => None,
        };
        Norm { gain, bias }
    }

    pub(crate) fn ffn(&mut self, config: &ModelConfig) -> FfnWeights {
        let (d, h) = (config.dim, config.hidden_dim);
        let router = config.is_moe().then(|| self.matrix(d, config.n_experts));
        let experts = (0..config.n_experts)
            .map(|_| {
                let up = self.matrix(d, h);
                let gate = (config.ffn_kind == FfnKind::Swiglu).then(|| self.matrix(d, h));
                let down = self.matrix(h, d);
                Expert { up, gate, down }
            })
            .collect();
        FfnWeights { router, experts }
    }
}

impl ModelWeights {
    /// Seeded uniform init in `[-0.05, 0.05]`; norm gains are `1 + U(-0.05, 0.05)`.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, e) = (config.dim, config.kv_dim());
        let mut init = Init::new(seed);
        let input_embeddings = init.matrix(config.vocab_size, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                norm1: init.norm(config),
                wq: init.matrix(d, d),
                wk: init.matrix(d, e),
                wv: init.matrix(d, e),
                wp: init.matrix(d, d),
                norm2: match config.layout {
                    Layout::Serial => Some(init.norm(config)),
                    Layout::Parallel => None,
                },
                ffn: init.ffn(config),
            })
            .collect();
        let final_norm = init.norm(config);
        let output_embeddings = init.matrix(d, config.vocab_size);
        let weights = Self { input_embeddings, layers, final_norm, output_embeddings };
        weights.validate(config)?;
        Ok(weights)
    }

    /// Row `token` of the input embedding table.
    pub fn embed(&self, token: u32) -> Result<&[f32]> {
        let t = token as usize;
        if t >= self.input_embeddings.rows() {
            return Err(Error::Input(format!(
                "token {token} out of range for vocab of {}",
                self.input_embeddings.rows()
            )));
        }
        Ok(self.input_embeddings.row(t))
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (d, v) = (config.dim, config.vocab_size);
        expect_shape("embed.in", &self.input_embeddings, v, d)?;
        expect_shape("embed.out", &self.output_embeddings, d, v)?;
        expect_norm("norm.final", &self.final_norm, config)?;
        if self.layers.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            validate_layer(config, i, layer)?;
        }
        Ok(())
    }
}

pub(crate) fn validate_layer(config: &ModelConfig, i: usize, layer: &LayerWeights) -> Result<()> {
    let (d, e) = (config.dim, config.kv_dim());
    expect_norm(&format!("layer{i}.norm1"), &layer.norm1, config)?;
    expect_shape(&format!("layer{i}.wq"), &layer.wq, d, d)?;
    expect_shape(&format!("layer{i}.wk"), &layer.wk, d, e)?;
    expect_shape(&format!("layer{i}.wv"), &layer.wv, d, e)?;
    expect_shape(&format!("layer{i}.wp"), &layer.wp, d, d)?;
    match (config.layout, &layer.norm2) {
        (Layout::Serial, Some(n)) => expect_norm(&format!("layer{i}.norm2"), n, config)?,
        (Layout::Parallel, None) => {}
        (layout, _) => {
            return Err(Error::Shape(format!("layer{i}.norm2 presence does not match {layout:?} layout")))
        }
    }
    validate_ffn(config, i, &layer.ffn)
}

pub(crate) fn validate_ffn(config: &ModelConfig, i: usize, ffn: &FfnWeights) -> Result<()> {
    let (d, h) = (config.dim, config.hidden_dim);
    if ffn.experts.len() != config.n_experts {
        return Err(Error::Shape(format!(
            "layer{i}.ffn has {} experts, config says {}",
            ffn.experts.len(),
            config.n_experts
        )));
    }
    match &ffn.router {
        Some(r) => expect_shape(&format!("layer{i}.ffn.router"), r, d, config.n_experts)?,
        None if config.is_moe() => {
            return Err(Error::Shape(format!("layer{i}.ffn.router missing for {} experts", config.n_experts)))
        }
        None => {}
    }
    for (j, ex) in ffn.experts.iter().enumerate() {
        expect_shape(&format!("layer{i}.ffn.expert{j}.up"), &ex.up, d, h)?;
        expect_shape(&format!("layer{i}.ffn.expert{j}.down"), &ex.down, h, d)?;
        match (config.ffn_kind, &ex.gate) {
            (FfnKind::Swiglu, Some(g)) => expect_shape(&format!("layer{i}.ffn.expert{j}.gate"), g, d, h)?,
            (FfnKind::Mlp2, None) => {}
            (kind, _) => {
                return Err(Error::Shape(format!("layer{i}.ffn.expert{j}.gate does not match {kind:?}")))
            }
        }
    }
    Ok(())
}

pub(crate) fn expect_shape(name: &str, t: &Tensor2, rows: usize, cols: usize) -> Result<()> {
    if t.shape() != (rows, cols) {
        return Err(Error::Shape(format!("{name} is {:?}, expected ({rows}, {cols})", t.shape())));
    }
    Ok(())
}

pub(crate) fn expect_norm(name: &str, n: &Norm, config: &ModelConfig) -> Result<()> {
    let d = config.dim;
    let ok = n.gain.len() == d
        && match config.norm_kind {
            NormKind::Layernorm => n.bias.as_ref().is_some_and(|b| b.len() == d),
            NormKind::Rmsnorm => n.bias.is_none(),
        };
    if !ok {
        return Err(Error::Shape(format!("{name} does not match {:?} of width {d}", config.norm_kind)));
    }
    Ok(())
}
