//! Closed-form attention FLOP and KV-cache byte counts under MHA and under
//! a cluster plan.
//!
//! Conventions: a multiply-add is 2 FLOPs, softmax costs 5 FLOPs per score,
//! and a decode step at sequence length `n` attends over `n` positions.
//! Prefill over `n` tokens is the sum of decode steps at lengths `1..=n`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ChaiError, Result};
use crate::model::ModelConfig;
use crate::plan::ClusterPlan;

/// Default cache element width (fp16 storage).
pub const DEFAULT_CACHE_WIDTH_BYTES: usize = 2;

/// How keys and values are stored or computed.
#[derive(Debug, Clone, Copy)]
pub enum CacheLayout<'a> {
    Mha,
    /// Keys and queries for representatives only; all values.
    Clustered(&'a ClusterPlan),
    /// Representatives only for keys, queries and values.
    ClusteredSharedValues(&'a ClusterPlan),
}

impl CacheLayout<'_> {
    fn per_layer(&self, config: &ModelConfig) -> Result<Vec<(usize, usize)>> {
        let h = config.num_heads;
        match self {
            CacheLayout::Mha => Ok(vec![(h, h); config.num_layers]),
            CacheLayout::Clustered(plan) | CacheLayout::ClusteredSharedValues(plan) => {
                plan.validate_for(config)?;
                let shared = matches!(self, CacheLayout::ClusteredSharedValues(_));
                Ok(plan
                    .cluster_counts()
                    .into_iter()
                    .map(|k| (k, if shared { k } else { h }))
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBytes {
    pub key_bytes: u64,
    pub value_bytes: u64,
    pub kv_total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub seq_len: usize,
    pub element_width_bytes: usize,
    pub layers: Vec<LayerBytes>,
    pub key_bytes: u64,
    pub value_bytes: u64,
    pub kv_total_bytes: u64,
    pub baseline_bytes: u64,
    pub savings_fraction: f64,
}

pub fn kv_cache_bytes(
    config: &ModelConfig,
    layout: CacheLayout<'_>,
    seq_len: usize,
    element_width_bytes: usize,
) -> Result<MemoryReport> {
    config.validate()?;
    if seq_len == 0 || element_width_bytes == 0 {
        return Err(ChaiError::Argument(format!(
            "seq_len ({seq_len}) and element width ({element_width_bytes}) must be positive"
        )));
    }
    if seq_len > config.max_seq_len {
        return Err(ChaiError::Argument(format!(
            "seq_len {seq_len} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    let per_head = (seq_len * config.head_dim * element_width_bytes) as u64;
    let layers: Vec<LayerBytes> = layout
        .per_layer(config)?
        .into_iter()
        .map(|(kh, vh)| {
            let key_bytes = kh as u64 * per_head;
            let value_bytes = vh as u64 * per_head;
            LayerBytes {
                key_bytes,
                value_bytes,
                kv_total_bytes: key_bytes + value_bytes,
            }
        })
        .collect();
    let key_bytes = layers.iter().map(|l| l.key_bytes).sum();
    let value_bytes = layers.iter().map(|l| l.value_bytes).sum();
    let kv_total_bytes = key_bytes + value_bytes;
    let baseline_bytes = 2 * (config.num_layers * config.num_heads) as u64 * per_head;
    Ok(MemoryReport {
        seq_len,
        element_width_bytes,
        layers,
        key_bytes,
        value_bytes,
        kv_total_bytes,
        baseline_bytes,
        savings_fraction: 1.0 - kv_total_bytes as f64 / baseline_bytes as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerFlops {
    pub projection_flops: u64,
    pub score_flops: u64,
    pub softmax_flops: u64,
    pub av_flops: u64,
    pub total_flops: u64,
}

impl LayerFlops {
    fn add(&mut self, other: &LayerFlops) {
        self.projection_flops += other.projection_flops;
        self.score_flops += other.score_flops;
        self.softmax_flops += other.softmax_flops;
        self.av_flops += other.av_flops;
        self.total_flops += other.total_flops;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub seq_len: usize,
    pub step_kind: StepKind,
    pub layers: Vec<LayerFlops>,
    pub projection_flops: u64,
    pub score_flops: u64,
    pub softmax_flops: u64,
    pub av_flops: u64,
    pub total_flops: u64,
    pub baseline_flops: u64,
    pub reduction_fraction: f64,
}

/// Attention FLOPs of one decode step at length `n` for a layer computing
/// queries/keys/scores for `qk_heads` heads and `A·V` for `av_heads` heads.
fn decode_layer(config: &ModelConfig, qk_heads: usize, av_heads: usize, n: u64) -> LayerFlops {
    let d = config.model_dim as u64;
    let dh = config.head_dim as u64;
    let qk = qk_heads as u64;
    let projection_flops = 2 * (2 * d * qk * dh) + 2 * (2 * d * d);
    let score_flops = 2 * qk * n * dh;
    let softmax_flops = 5 * qk * n;
    let av_flops = 2 * av_heads as u64 * n * dh;
    LayerFlops {
        projection_flops,
        score_flops,
        softmax_flops,
        av_flops,
        total_flops: projection_flops + score_flops + softmax_flops + av_flops,
    }
}

fn layer_flops(config: &ModelConfig, qk: usize, av: usize, seq_len: usize, kind: StepKind) -> LayerFlops {
    match kind {
        StepKind::Decode => decode_layer(config, qk, av, seq_len as u64),
        StepKind::Prefill => {
            let mut acc = LayerFlops::default();
            for n in 1..=seq_len as u64 {
                acc.add(&decode_layer(config, qk, av, n));
            }
            acc
        }
    }
}

pub fn attention_flops(
    config: &ModelConfig,
    layout: CacheLayout<'_>,
    seq_len: usize,
    kind: StepKind,
) -> Result<FlopReport> {
    config.validate()?;
    let layers: Vec<LayerFlops> = layout
        .per_layer(config)?
        .into_iter()
        .map(|(qk, av)| layer_flops(config, qk, av, seq_len, kind))
        .collect();
    let mut total = LayerFlops::default();
    for l in &layers {
        total.add(l);
    }
    let h = config.num_heads;
    let baseline_flops =
        layer_flops(config, h, h, seq_len, kind).total_flops * config.num_layers as u64;
    let reduction_fraction = if baseline_flops == 0 {
        0.0
    } else {
        1.0 - total.total_flops as f64 / baseline_flops as f64
    };
    Ok(FlopReport {
        seq_len,
        step_kind: kind,
        layers,
        projection_flops: total.projection_flops,
        score_flops: total.score_flops,
        softmax_flops: total.softmax_flops,
        av_flops: total.av_flops,
        total_flops: total.total_flops,
        baseline_flops,
        reduction_fraction,
    })
}

impl MemoryReport {
    /// Flat CSV, one row per layer plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,seq_len,element_width_bytes,key_bytes,value_bytes,kv_total_bytes\n");
        for (l, b) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{l},{},{},{},{},{}",
                self.seq_len, self.element_width_bytes, b.key_bytes, b.value_bytes, b.kv_total_bytes
            );
        }
        let _ = writeln!(
            s,
            "total,{},{},{},{},{}",
            self.seq_len, self.element_width_bytes, self.key_bytes, self.value_bytes, self.kv_total_bytes
        );
        s
    }
}

impl FlopReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,seq_len,projection_flops,score_flops,softmax_flops,av_flops,total_flops\n");
        for (l, f) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{l},{},{},{},{},{},{}",
                self.seq_len, f.projection_flops, f.score_flops, f.softmax_flops, f.av_flops, f.total_flops
            );
        }
        let _ = writeln!(
            s,
            "total,{},{},{},{},{},{}",
            self.seq_len, self.projection_flops, self.score_flops, self.softmax_flops, self.av_flops, self.total_flops
        );
        s
    }
}
