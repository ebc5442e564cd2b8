use crate::model::ModelConfig;
use crate::{Error, Result};

/// Rotated keys and values of one layer, `len x width` each, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    width: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl LayerCache {
    fn new(width: usize, capacity: usize) -> Self {
        Self {
            width,
            keys: Vec::with_capacity(width * capacity),
            values: Vec::with_capacity(width * capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, pos: usize) -> &[f32] {
        &self.keys[pos * self.width..(pos + 1) * self.width]
    }

    pub fn value(&self, pos: usize) -> &[f32] {
        &self.values[pos * self.width..(pos + 1) * self.width]
    }

    pub(crate) fn push(&mut self, key: &[f32], value: &[f32]) {
        debug_assert_eq!(key.len(), self.width);
        debug_assert_eq!(value.len(), self.width);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
    }
}

/// Per-layer KV history of one generation session.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    len: usize,
    max_seq_len: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let e = config.kv_dim();
        Self {
            layers: (0..config.n_layers).map(|_| LayerCache::new(e, config.max_seq_len)).collect(),
            len: 0,
            max_seq_len: config.max_seq_len,
        }
    }

    /// Number of positions already cached; also the position of the next token.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn layer(&self, i: usize) -> &LayerCache {
        &self.layers[i]
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut LayerCache {
        &mut self.layers[i]
    }

    pub(crate) fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub(crate) fn reserve(&self, n: usize) -> Result<()> {
        if self.len + n > self.max_seq_len {
            return Err(Error::CacheOverflow { needed: self.len + n, max: self.max_seq_len });
        }
        Ok(())
    }

    pub(crate) fn advance(&mut self, n: usize) {
        self.len += n;
        debug_assert!(self.layers.iter().all(|l| l.len() == self.len));
    }
}
