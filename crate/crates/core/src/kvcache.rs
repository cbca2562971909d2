//! Key/value caches for incremental decoding.
//!
//! [`KvCache`] allocates every layer's K and V storage up front and writes one
//! token slot per append. [`NaiveKvCache`] reallocates and copies its whole
//! history on every append; it exists as a reference for equivalence tests.
//!
//! Layout is token-major: a layer's K buffer is `capacity x heads x head_dim`.
//! Each layer tracks its own fill level so a prefill can run layer by layer;
//! the cache length is the number of tokens every layer has stored.

use crate::error::{Error, Result};

/// Read-only view of one layer's cached prefix.
#[derive(Debug, Clone, Copy)]
pub struct KvView<'a> {
    pub keys: &'a [f32],
    pub values: &'a [f32],
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl<'a> KvView<'a> {
    #[inline]
    pub fn key(&self, pos: usize, head: usize) -> &'a [f32] {
        let start = (pos * self.heads + head) * self.head_dim;
        &self.keys[start..start + self.head_dim]
    }

    #[inline]
    pub fn value(&self, pos: usize, head: usize) -> &'a [f32] {
        let start = (pos * self.heads + head) * self.head_dim;
        &self.values[start..start + self.head_dim]
    }
}

/// Storage interface the runtime decodes against.
pub trait KvStore {
    fn layers(&self) -> usize;
    fn heads(&self) -> usize;
    fn head_dim(&self) -> usize;
    fn capacity(&self) -> usize;
    /// Tokens stored in every layer.
    fn len(&self) -> usize;
    /// Tokens stored in `layer` (may run ahead of [`KvStore::len`] mid-step).
    fn layer_len(&self, layer: usize) -> Result<usize>;
    /// Stores one token's `heads x head_dim` key and value for `layer` and
    /// returns the position written.
    fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<usize>;
    /// The stored prefix of `layer`.
    fn view(&self, layer: usize) -> Result<KvView<'_>>;
    /// Drops every stored token, keeping allocations.
    fn clear(&mut self);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_dims(layers: usize, heads: usize, head_dim: usize, capacity: usize) -> Result<()> {
    if layers == 0 || heads == 0 || head_dim == 0 || capacity == 0 {
        return Err(Error::InvalidConfig(format!(
            "kv cache dims must be positive: layers={layers} heads={heads} head_dim={head_dim} capacity={capacity}"
        )));
    }
    Ok(())
}

fn check_token(k: &[f32], v: &[f32], stride: usize) -> Result<()> {
    if k.len() != stride || v.len() != stride {
        return Err(Error::Shape(format!(
            "kv append expects {stride} values for k and v, got {} and {}",
            k.len(),
            v.len()
        )));
    }
    Ok(())
}

/// Pre-allocated cache; appends never allocate or move stored data.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: usize,
    heads: usize,
    head_dim: usize,
    capacity: usize,
    // [layer][k | v][capacity][heads][head_dim]
    storage: Vec<f32>,
    layer_lens: Vec<usize>,
}

impl KvCache {
    pub fn new(layers: usize, heads: usize, head_dim: usize, capacity: usize) -> Result<Self> {
        check_dims(layers, heads, head_dim, capacity)?;
        let per_buffer = capacity
            .checked_mul(heads)
            .and_then(|n| n.checked_mul(head_dim))
            .ok_or_else(|| Error::InvalidConfig("kv cache size overflows".into()))?;
        let total = per_buffer
            .checked_mul(2 * layers)
            .ok_or_else(|| Error::InvalidConfig("kv cache size overflows".into()))?;
        Ok(Self {
            layers,
            heads,
            head_dim,
            capacity,
            storage: vec![0.0; total],
            layer_lens: vec![0; layers],
        })
    }

    #[inline]
    fn token_stride(&self) -> usize {
        self.heads * self.head_dim
    }

    #[inline]
    fn buffer_len(&self) -> usize {
        self.capacity * self.token_stride()
    }

    /// Bytes of K/V storage: `layers * 2 * capacity * heads * head_dim * 4`.
    pub fn storage_bytes(&self) -> usize {
        self.storage.len() * std::mem::size_of::<f32>()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers {
            return Err(Error::Index(format!(
                "layer {layer} out of range for {} layers",
                self.layers
            )));
        }
        Ok(())
    }
}

impl KvStore for KvCache {
    fn layers(&self) -> usize {
        self.layers
    }

    fn heads(&self) -> usize {
        self.heads
    }

    fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn capacity(&self) -> usize {
        self.capacity
    }

    fn len(&self) -> usize {
        self.layer_lens.iter().copied().min().unwrap_or(0)
    }

    fn layer_len(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.layer_lens[layer])
    }

    fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<usize> {
        self.check_layer(layer)?;
        let stride = self.token_stride();
        check_token(k, v, stride)?;
        let pos = self.layer_lens[layer];
        if pos == self.capacity {
            return Err(Error::CapacityExceeded {
                capacity: self.capacity,
            });
        }
        let buf = self.buffer_len();
        let k_start = 2 * layer * buf + pos * stride;
        let v_start = k_start + buf;
        self.storage[k_start..k_start + stride].copy_from_slice(k);
        self.storage[v_start..v_start + stride].copy_from_slice(v);
        self.layer_lens[layer] = pos + 1;
        Ok(pos)
    }

    fn view(&self, layer: usize) -> Result<KvView<'_>> {
        self.check_layer(layer)?;
        let len = self.layer_lens[layer];
        let buf = self.buffer_len();
        let k_start = 2 * layer * buf;
        let used = len * self.token_stride();
        Ok(KvView {
            keys: &self.storage[k_start..k_start + used],
            values: &self.storage[k_start + buf..k_start + buf + used],
            len,
            heads: self.heads,
            head_dim: self.head_dim,
        })
    }

    fn clear(&mut self) {
        self.layer_lens.iter_mut().for_each(|l| *l = 0);
    }
}

/// Reference cache that rebuilds each layer's history on every append.
#[derive(Debug, Clone)]
pub struct NaiveKvCache {
    heads: usize,
    head_dim: usize,
    capacity: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl NaiveKvCache {
    pub fn new(layers: usize, heads: usize, head_dim: usize, capacity: usize) -> Result<Self> {
        check_dims(layers, heads, head_dim, capacity)?;
        Ok(Self {
            heads,
            head_dim,
            capacity,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        })
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.keys.len() {
            return Err(Error::Index(format!(
                "layer {layer} out of range for {} layers",
                self.keys.len()
            )));
        }
        Ok(())
    }

    fn regrow(old: &[f32], new: &[f32]) -> Vec<f32> {
        let mut grown = Vec::with_capacity(old.len() + new.len());
        grown.extend_from_slice(old);
        grown.extend_from_slice(new);
        grown
    }
}

impl KvStore for NaiveKvCache {
    fn layers(&self) -> usize {
        self.keys.len()
    }

    fn heads(&self) -> usize {
        self.heads
    }

    fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn capacity(&self) -> usize {
        self.capacity
    }

    fn len(&self) -> usize {
        let stride = self.heads * self.head_dim;
        self.keys.iter().map(|k| k.len() / stride).min().unwrap_or(0)
    }

    fn layer_len(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.keys[layer].len() / (self.heads * self.head_dim))
    }

    fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<usize> {
        let pos = self.layer_len(layer)?;
        check_token(k, v, self.heads * self.head_dim)?;
        if pos == self.capacity {
            return Err(Error::CapacityExceeded {
                capacity: self.capacity,
            });
        }
        self.keys[layer] = Self::regrow(&self.keys[layer], k);
        self.values[layer] = Self::regrow(&self.values[layer], v);
        Ok(pos)
    }

    fn view(&self, layer: usize) -> Result<KvView<'_>> {
        let len = self.layer_len(layer)?;
        Ok(KvView {
            keys: &self.keys[layer],
            values: &self.values[layer],
            len,
            heads: self.heads,
            head_dim: self.head_dim,
        })
    }

    fn clear(&mut self) {
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
    }
}
