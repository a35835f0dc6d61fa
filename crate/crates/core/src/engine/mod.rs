//! End-to-end decoding in MHA, CHAI, CHAI-static and CHAI-QKV modes.
//!
//! Step 1 is the prefill over the prompt and emits the first token; every
//! later step feeds the previously emitted token. Dynamic modes run MHA with
//! tracing for the first `identify_at` steps, cluster each layer's heads on
//! those rows, prune the cache once and decode the rest with the frozen plan.

mod compare;
mod profile;

pub use compare::{compare_outputs, DivergenceReport};
pub use profile::{
    calibrate, sample_features, CalibrationMetadata, CalibrationOptions, CalibrationProfile,
    LayerCalibration, DEFAULT_WINDOW,
};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accounting::{
    attention_flops, kv_cache_bytes, CacheLayout, FlopReport, MemoryReport, StepKind,
    DEFAULT_CACHE_WIDTH_BYTES,
};
use crate::attention::{
    prune_cache, prune_cache_with_values, AttentionPath, AttentionTrace, CacheSummary, KVCache,
    TraceTarget,
};
use crate::clustering::{cluster_heads, derive_seed, extract_features, KMeansOptions};
use crate::error::{ChaiError, Result};
use crate::model::Weights;
use crate::plan::ClusterPlan;
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Mha,
    Chai,
    ChaiStatic,
    ChaiQkv,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Mha, Mode::Chai, Mode::ChaiStatic, Mode::ChaiQkv];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mha => "MHA",
            Mode::Chai => "CHAI",
            Mode::ChaiStatic => "CHAI_STATIC",
            Mode::ChaiQkv => "CHAI_QKV",
        }
    }

    pub fn needs_profile(self) -> bool {
        self != Mode::Mha
    }

    /// Modes that identify clusters online from the request's own rows.
    pub fn is_dynamic(self) -> bool {
        matches!(self, Mode::Chai | Mode::ChaiQkv)
    }

    pub fn reuses_values(self) -> bool {
        self == Mode::ChaiQkv
    }

    pub fn layout(self, plan: Option<&ClusterPlan>) -> CacheLayout<'_> {
        match (self, plan) {
            (_, None) | (Mode::Mha, _) => CacheLayout::Mha,
            (Mode::ChaiQkv, Some(p)) => CacheLayout::ClusteredSharedValues(p),
            (_, Some(p)) => CacheLayout::Clustered(p),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ChaiError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| {
                ChaiError::Argument(format!(
                    "unknown mode {s:?}; expected one of MHA, CHAI, CHAI_STATIC, CHAI_QKV"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub mode: Mode,
    /// Tokens to emit.
    pub steps: usize,
    /// Decode steps run under MHA before dynamic cluster identification.
    pub identify_at: usize,
    pub seed: u64,
    pub kmeans: KMeansOptions,
    pub record_trace: bool,
    pub keep_logits: bool,
    pub cache_width_bytes: usize,
    /// Feed these tokens instead of the model's own picks (teacher forcing).
    pub forced_tokens: Option<Vec<u32>>,
}

impl GenerateOptions {
    pub fn new(mode: Mode, steps: usize) -> Self {
        GenerateOptions {
            mode,
            steps,
            identify_at: DEFAULT_WINDOW,
            seed: 0,
            kmeans: KMeansOptions::default(),
            record_trace: false,
            keep_logits: false,
            cache_width_bytes: DEFAULT_CACHE_WIDTH_BYTES,
            forced_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub ttft_ms: f64,
    /// Wall time of every step, step 1 (prefill) included.
    pub step_ms: Vec<f64>,
    /// Cluster identification and cache pruning, when it ran.
    pub identify_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub mode: Mode,
    pub prompt_len: usize,
    pub tokens: Vec<u32>,
    pub identify_at: usize,
    pub identification_skipped: bool,
    /// The plan takes effect from the step after this one.
    pub plan_applied_after_step: Option<usize>,
    /// Snapshot taken when the plan was built.
    pub identified_plan: Option<ClusterPlan>,
    /// Plan in effect at the final step.
    pub plan: Option<ClusterPlan>,
    pub cache: CacheSummary,
    /// Measured cache bytes after each step.
    pub kv_bytes_per_step: Vec<u64>,
    /// Attention FLOPs of one decode step at the final length.
    pub flops: FlopReport,
    pub memory: MemoryReport,
    pub timing: Timing,
    #[serde(skip)]
    pub trace: Option<AttentionTrace>,
    #[serde(skip)]
    pub logits: Vec<Vec<f32>>,
}

impl GenerationResult {
    /// JSON without the `timing` block, for reproducibility comparisons.
    pub fn deterministic_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("result serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        v
    }
}

/// Builds a plan from the trace window `first..=last` with the profile's
/// per-layer cluster counts.
pub fn identify_plan(
    trace: &AttentionTrace,
    profile: &CalibrationProfile,
    first: usize,
    last: usize,
    kmeans: &KMeansOptions,
) -> Result<ClusterPlan> {
    let layers = profile
        .cluster_counts()
        .into_iter()
        .enumerate()
        .map(|(l, k)| {
            let features = extract_features(trace, l, first..=last)?;
            let seed = derive_seed(kmeans.seed, &[l as u64]);
            cluster_heads(&features, k, &kmeans.with_seed(seed))
        })
        .collect::<Result<_>>()?;
    Ok(ClusterPlan { layers })
}

pub fn generate(
    weights: &Weights,
    prompt: &[u32],
    opts: &GenerateOptions,
    profile: Option<&CalibrationProfile>,
) -> Result<GenerationResult> {
    let config = &weights.config;
    let mode = opts.mode;
    if prompt.is_empty() {
        return Err(ChaiError::Argument("prompt is empty".into()));
    }
    if opts.steps == 0 {
        return Err(ChaiError::Argument("steps must be at least 1".into()));
    }
    if prompt.len() + opts.steps > config.max_seq_len {
        return Err(ChaiError::Argument(format!(
            "prompt length {} + steps {} exceeds max_seq_len {}",
            prompt.len(),
            opts.steps,
            config.max_seq_len
        )));
    }
    if mode.is_dynamic() && opts.identify_at == 0 {
        return Err(ChaiError::Argument("identify_at must be at least 1".into()));
    }
    if let Some(forced) = &opts.forced_tokens {
        if forced.len() + 1 < opts.steps {
            return Err(ChaiError::Argument(format!(
                "{} forced tokens cannot drive {} steps",
                forced.len(),
                opts.steps
            )));
        }
    }
    let profile = match (mode.needs_profile(), profile) {
        (true, None) => {
            return Err(ChaiError::Profile(format!("mode {mode} requires a calibration profile")))
        }
        (true, Some(p)) => {
            p.check_model(config)?;
            Some(p)
        }
        (false, _) => None,
    };

    let identify = mode.is_dynamic() && opts.steps > opts.identify_at;
    let identification_skipped = mode.is_dynamic() && !identify;
    let tracing = opts.record_trace || identify;
    let mut trace = tracing.then(|| AttentionTrace::new(config.num_layers, config.num_heads));

    let mut cache = KVCache::new(config);
    let mut plan: Option<ClusterPlan> = None;
    let mut identified_plan = None;
    let mut plan_applied_after_step = None;
    let mut tokens = Vec::with_capacity(opts.steps);
    let mut logits_out = Vec::new();
    let mut kv_bytes_per_step = Vec::with_capacity(opts.steps);
    let mut timing = Timing::default();

    for step in 1..=opts.steps {
        let started = Instant::now();
        let input: Vec<u32> = if step == 1 {
            prompt.to_vec()
        } else {
            let prev = match &opts.forced_tokens {
                Some(f) => f[step - 2],
                None => tokens[step - 2],
            };
            vec![prev]
        };
        let logits = match &plan {
            Some(p) => weights.forward(
                &input,
                &mut cache,
                AttentionPath::Clustered {
                    plan: p,
                    reuse_values: mode.reuses_values(),
                },
                None,
            )?,
            None => {
                let target = trace.as_mut().map(|t| TraceTarget {
                    trace: t,
                    first_step: step,
                    last_only: true,
                });
                weights.forward(&input, &mut cache, AttentionPath::Mha, target)?
            }
        };
        tokens.push(argmax(&logits) as u32);
        if opts.keep_logits {
            logits_out.push(logits);
        }

        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        timing.step_ms.push(elapsed);
        if step == 1 {
            timing.ttft_ms = elapsed;
        }

        let apply = match mode {
            Mode::ChaiStatic => step == 1,
            Mode::Chai | Mode::ChaiQkv => identify && step == opts.identify_at,
            Mode::Mha => false,
        };
        if apply {
            let started = Instant::now();
            let profile = profile.expect("checked above");
            let p = if mode == Mode::ChaiStatic {
                profile.static_plan.clone()
            } else {
                let t = trace.as_ref().expect("tracing for identification");
                let seed = derive_seed(opts.seed, &[0xC1A1]);
                identify_plan(t, profile, 1, opts.identify_at, &opts.kmeans.with_seed(seed))?
            };
            cache = if mode.reuses_values() {
                prune_cache_with_values(cache, &p)?
            } else {
                prune_cache(cache, &p)?
            };
            identified_plan = Some(p.clone());
            plan = Some(p);
            plan_applied_after_step = Some(step);
            if mode.is_dynamic() {
                timing.identify_ms = Some(started.elapsed().as_secs_f64() * 1e3);
            }
        }
        kv_bytes_per_step.push(cache.stored_bytes(opts.cache_width_bytes));
    }

    let final_len = cache.len();
    let layout = mode.layout(plan.as_ref());
    let flops = attention_flops(config, layout, final_len, StepKind::Decode)?;
    let memory = kv_cache_bytes(config, layout, final_len, opts.cache_width_bytes)?;

    Ok(GenerationResult {
        mode,
        prompt_len: prompt.len(),
        tokens,
        identify_at: opts.identify_at,
        identification_skipped,
        plan_applied_after_step,
        identified_plan,
        plan,
        cache: cache.summary(opts.cache_width_bytes),
        kv_bytes_per_step,
        flops,
        memory,
        timing,
        trace,
        logits: logits_out,
    })
}
