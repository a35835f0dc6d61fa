//! Wall-clock latency of MHA versus clustered decoding across sequence
//! lengths, with the matching closed-form FLOP and cache-byte figures.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::accounting::{attention_flops, kv_cache_bytes, StepKind, DEFAULT_CACHE_WIDTH_BYTES};
use crate::engine::{generate, CalibrationProfile, GenerateOptions, Mode, DEFAULT_WINDOW};
use crate::error::{ChaiError, Result};
use crate::fixture::synthetic_corpus;
use crate::model::Weights;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub seq_lens: Vec<usize>,
    pub modes: Vec<Mode>,
    pub repeats: usize,
    /// Steady-state decode steps timed after cluster identification.
    pub decode_steps: usize,
    pub identify_at: usize,
    pub seed: u64,
    pub cache_width_bytes: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            seq_lens: vec![256, 512, 1024, 2048],
            modes: vec![Mode::Mha, Mode::Chai],
            repeats: 3,
            decode_steps: 16,
            identify_at: DEFAULT_WINDOW,
            seed: 0,
            cache_width_bytes: DEFAULT_CACHE_WIDTH_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub seq_len: usize,
    pub prompt_len: usize,
    pub repeats: usize,
    /// Median prefill time, plus identification for dynamic modes.
    pub ttft_ms: f64,
    /// Median time-to-next-token over steps after the first clustered one.
    pub median_ms: f64,
    /// MHA `median_ms` over this row's, at the same length.
    pub speedup: Option<f64>,
    /// Attention FLOPs of one decode step at `seq_len`.
    pub flops: u64,
    /// KV-cache bytes at `seq_len`.
    pub kv_bytes: u64,
    /// Tokens emitted by the first repeat.
    #[serde(skip)]
    pub tokens: Vec<u32>,
}

pub const BENCH_CSV_HEADER: &str =
    "mode,seq_len,prompt_len,repeats,ttft_ms,median_ms,speedup,flops,kv_bytes";

#[derive(Default)]
struct Sample {
    ttft: Vec<f64>,
    ttnt: Vec<f64>,
    tokens: Vec<u32>,
    plan: Option<crate::plan::ClusterPlan>,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Runs every `(seq_len, mode)` point `repeats` times, sequentially.
///
/// Each run prefills a pseudo-random prompt of `seq_len - steps` tokens and
/// emits `steps = identify_at + 1 + decode_steps` tokens, so the last step
/// attends over `seq_len - 1` positions.
pub fn run_bench(
    weights: &Weights,
    profile: Option<&CalibrationProfile>,
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>> {
    let config = &weights.config;
    if opts.repeats == 0 || opts.decode_steps == 0 {
        return Err(ChaiError::Argument("repeats and decode_steps must be positive".into()));
    }
    let steps = opts.identify_at + 1 + opts.decode_steps;
    let mut rows = Vec::new();
    for &seq_len in &opts.seq_lens {
        if seq_len <= steps || seq_len > config.max_seq_len {
            return Err(ChaiError::Argument(format!(
                "sequence length {seq_len} must be in {}..={}",
                steps + 1,
                config.max_seq_len
            )));
        }
        let prompt_len = seq_len - steps;
        let prompt = synthetic_corpus(config.vocab_size, 1, prompt_len, opts.seed ^ seq_len as u64)
            .pop()
            .expect("one sample");
        // Repeats run modes round-robin so slow drift in machine speed hits
        // every mode alike.
        let mut samples: Vec<Sample> = opts.modes.iter().map(|_| Sample::default()).collect();
        for rep in 0..opts.repeats {
            for (&mode, sample) in opts.modes.iter().zip(&mut samples) {
                let mut gen = GenerateOptions::new(mode, steps);
                gen.identify_at = opts.identify_at;
                gen.seed = opts.seed;
                gen.cache_width_bytes = opts.cache_width_bytes;
                let r = generate(weights, &prompt, &gen, profile)?;
                sample.ttft.push(r.timing.ttft_ms + r.timing.identify_ms.unwrap_or(0.0));
                sample.ttnt.extend_from_slice(&r.timing.step_ms[opts.identify_at + 1..]);
                if rep == 0 {
                    sample.tokens = r.tokens;
                    sample.plan = r.plan;
                }
            }
        }
        let mut point_rows = Vec::new();
        for (&mode, mut sample) in opts.modes.iter().zip(samples) {
            let layout = mode.layout(sample.plan.as_ref());
            let flops = attention_flops(config, layout, seq_len, StepKind::Decode)?.total_flops;
            let kv_bytes =
                kv_cache_bytes(config, layout, seq_len, opts.cache_width_bytes)?.kv_total_bytes;
            point_rows.push(BenchRow {
                mode,
                seq_len,
                prompt_len,
                repeats: opts.repeats,
                ttft_ms: median(&mut sample.ttft),
                median_ms: median(&mut sample.ttnt),
                speedup: None,
                flops,
                kv_bytes,
                tokens: sample.tokens,
            });
        }
        if let Some(base) = point_rows.iter().find(|r| r.mode == Mode::Mha).map(|r| r.median_ms) {
            for r in &mut point_rows {
                r.speedup = Some(base / r.median_ms);
            }
        }
        rows.extend(point_rows);
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        let speedup = r.speedup.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.mode, r.seq_len, r.prompt_len, r.repeats, r.ttft_ms, r.median_ms, speedup, r.flops, r.kv_bytes
        );
    }
    s
}
