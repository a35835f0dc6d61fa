use serde::{Deserialize, Serialize};

use crate::error::{ChaiError, Result};
use crate::model::ModelConfig;
use crate::plan::ClusterPlan;

/// Cached rotated keys and values of one layer. Each stored head owns a flat
/// `len x d_h` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    key_heads: Vec<usize>,
    keys: Vec<Vec<f32>>,
    key_slot: Vec<Option<usize>>,
    value_heads: Vec<usize>,
    values: Vec<Vec<f32>>,
    value_slot: Vec<Option<usize>>,
    len: usize,
}

impl LayerCache {
    fn new(num_heads: usize) -> Self {
        LayerCache {
            key_heads: (0..num_heads).collect(),
            keys: vec![Vec::new(); num_heads],
            key_slot: (0..num_heads).map(Some).collect(),
            value_heads: (0..num_heads).collect(),
            values: vec![Vec::new(); num_heads],
            value_slot: (0..num_heads).map(Some).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stored_key_heads(&self) -> &[usize] {
        &self.key_heads
    }

    pub fn stored_value_heads(&self) -> &[usize] {
        &self.value_heads
    }

    pub fn keys(&self, head: usize) -> Option<&[f32]> {
        self.key_slot.get(head)?.map(|s| &self.keys[s][..])
    }

    pub fn values(&self, head: usize) -> Option<&[f32]> {
        self.value_slot.get(head)?.map(|s| &self.values[s][..])
    }

    pub(crate) fn push_keys(&mut self, head: usize, rows: &[f32]) -> Result<()> {
        let slot = self.key_slot[head]
            .ok_or_else(|| ChaiError::Contract(format!("no key storage for head {head}")))?;
        self.keys[slot].extend_from_slice(rows);
        Ok(())
    }

    pub(crate) fn push_values(&mut self, head: usize, rows: &[f32]) -> Result<()> {
        let slot = self.value_slot[head]
            .ok_or_else(|| ChaiError::Contract(format!("no value storage for head {head}")))?;
        self.values[slot].extend_from_slice(rows);
        Ok(())
    }

    pub(crate) fn advance(&mut self, tokens: usize) {
        self.len += tokens;
    }

    /// Number of stored `d_h`-vectors (keys plus values).
    pub fn stored_vectors(&self) -> usize {
        (self.key_heads.len() + self.value_heads.len()) * self.len
    }

    fn retain(&mut self, keep_keys: &[usize], keep_values: Option<&[usize]>) {
        fn compact(
            heads: &mut Vec<usize>,
            rows: &mut Vec<Vec<f32>>,
            slots: &mut [Option<usize>],
            keep: &[usize],
        ) {
            let mut new_heads = Vec::with_capacity(keep.len());
            let mut new_rows = Vec::with_capacity(keep.len());
            for (h, buf) in heads.iter().zip(rows.drain(..)) {
                if keep.contains(h) {
                    new_heads.push(*h);
                    new_rows.push(buf);
                }
            }
            slots.iter_mut().for_each(|s| *s = None);
            for (i, &h) in new_heads.iter().enumerate() {
                slots[h] = Some(i);
            }
            *heads = new_heads;
            *rows = new_rows;
        }
        compact(&mut self.key_heads, &mut self.keys, &mut self.key_slot, keep_keys);
        if let Some(keep) = keep_values {
            compact(&mut self.value_heads, &mut self.values, &mut self.value_slot, keep);
        }
    }
}

/// Per-layer key/value cache for one in-flight sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    num_heads: usize,
    head_dim: usize,
    layers: Vec<LayerCache>,
    pruned: bool,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        KVCache {
            num_heads: config.num_heads,
            head_dim: config.head_dim,
            layers: (0..config.num_layers)
                .map(|_| LayerCache::new(config.num_heads))
                .collect(),
            pruned: false,
        }
    }

    /// Tokens cached (taken from the first layer).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_pruned(&self) -> bool {
        self.pruned
    }

    pub fn layer(&self, layer: usize) -> &LayerCache {
        &self.layers[layer]
    }

    pub(crate) fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerCache> {
        let n = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or_else(|| ChaiError::Argument(format!("layer {layer} of {n}")))
    }

    pub fn stored_vectors(&self) -> usize {
        self.layers.iter().map(LayerCache::stored_vectors).sum()
    }

    /// Bytes of actually stored vectors at `element_width_bytes` per value.
    pub fn stored_bytes(&self, element_width_bytes: usize) -> u64 {
        (self.stored_vectors() * self.head_dim * element_width_bytes) as u64
    }

    pub fn summary(&self, element_width_bytes: usize) -> CacheSummary {
        CacheSummary {
            length: self.len(),
            pruned: self.pruned,
            key_heads: self.layers.iter().map(|l| l.key_heads.len()).collect(),
            value_heads: self.layers.iter().map(|l| l.value_heads.len()).collect(),
            stored_bytes: self.stored_bytes(element_width_bytes),
            element_width_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub length: usize,
    pub pruned: bool,
    pub key_heads: Vec<usize>,
    pub value_heads: Vec<usize>,
    pub stored_bytes: u64,
    pub element_width_bytes: usize,
}

/// Drops the cached keys of every non-representative head. Values are kept.
pub fn prune_cache(cache: KVCache, plan: &ClusterPlan) -> Result<KVCache> {
    prune(cache, plan, false)
}

/// Like [`prune_cache`] but also drops the values of non-representatives,
/// for decoding that reuses the representative's values.
pub fn prune_cache_with_values(cache: KVCache, plan: &ClusterPlan) -> Result<KVCache> {
    prune(cache, plan, true)
}

fn prune(mut cache: KVCache, plan: &ClusterPlan, values_too: bool) -> Result<KVCache> {
    if cache.pruned {
        return Err(ChaiError::Contract("cache is already pruned".into()));
    }
    if plan.layers.len() != cache.layers.len() {
        return Err(ChaiError::Contract(format!(
            "plan has {} layers, cache has {}",
            plan.layers.len(),
            cache.layers.len()
        )));
    }
    for (lc, lp) in cache.layers.iter_mut().zip(&plan.layers) {
        lp.validate(cache.num_heads)?;
        let reps = lp.sorted_representatives();
        lc.retain(&reps, values_too.then_some(&reps[..]));
    }
    cache.pruned = true;
    Ok(cache)
}
