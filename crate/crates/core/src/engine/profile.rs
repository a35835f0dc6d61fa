use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionPath, AttentionTrace, KVCache, TraceTarget};
use crate::clustering::{
    cluster_heads, derive_seed, elbow_select, error_curve, extract_features, FeatureSet,
    KMeansOptions, DEFAULT_ELBOW_THRESHOLD,
};
use crate::error::{ChaiError, Result};
use crate::model::{ModelConfig, Weights};
use crate::plan::ClusterPlan;

pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub layer: usize,
    pub cluster_count: usize,
    /// Mean K-means error for `k = 1..=H`.
    pub elbow_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetadata {
    pub sample_count: usize,
    pub window: usize,
    pub threshold: f64,
    pub seed: u64,
    pub kmeans: KMeansOptions,
    /// Corpus indices that were calibrated on, ascending.
    pub sample_indices: Vec<usize>,
}

/// Offline calibration result: per-layer cluster counts and a static plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub fingerprint: String,
    pub layers: Vec<LayerCalibration>,
    pub static_plan: ClusterPlan,
    pub metadata: CalibrationMetadata,
}

impl CalibrationProfile {
    /// A profile that uses `plan`'s cluster counts and `plan` itself as the
    /// static assignment, without elbow curves.
    pub fn from_plan(config: &ModelConfig, plan: ClusterPlan, seed: u64) -> Result<Self> {
        plan.validate_for(config)?;
        let layers = plan
            .cluster_counts()
            .into_iter()
            .enumerate()
            .map(|(layer, cluster_count)| LayerCalibration {
                layer,
                cluster_count,
                elbow_curve: Vec::new(),
            })
            .collect();
        Ok(CalibrationProfile {
            fingerprint: config.fingerprint(),
            layers,
            static_plan: plan,
            metadata: CalibrationMetadata {
                sample_count: 0,
                window: DEFAULT_WINDOW,
                threshold: DEFAULT_ELBOW_THRESHOLD,
                seed,
                kmeans: KMeansOptions::default().with_seed(seed),
                sample_indices: Vec::new(),
            },
        })
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.cluster_count).collect()
    }

    /// Checks the fingerprint and that the static plan fits the model and
    /// agrees with the per-layer counts.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if self.fingerprint != config.fingerprint() {
            return Err(ChaiError::Profile(format!(
                "profile fingerprint {} does not match model {}",
                self.fingerprint,
                config.fingerprint()
            )));
        }
        self.static_plan
            .validate_for(config)
            .map_err(|e| ChaiError::Profile(e.to_string()))?;
        if self.static_plan.cluster_counts() != self.cluster_counts() {
            return Err(ChaiError::Profile(
                "static plan cluster counts disagree with the per-layer counts".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| ChaiError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| ChaiError::io(path, e))?;
        Self::from_json(&s)
    }

    /// `layer,k,error` rows of every elbow curve.
    pub fn elbow_csv(&self) -> String {
        let mut s = String::from("layer,k,error,chosen\n");
        for l in &self.layers {
            for (i, e) in l.elbow_curve.iter().enumerate() {
                let k = i + 1;
                s.push_str(&format!("{},{k},{e},{}\n", l.layer, u8::from(k == l.cluster_count)));
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub sample_count: usize,
    pub window: usize,
    pub threshold: f64,
    pub seed: u64,
    pub kmeans: KMeansOptions,
    /// Worker threads for per-sample work; results merge in sample order.
    pub threads: usize,
}

impl CalibrationOptions {
    pub fn new(sample_count: usize, seed: u64) -> Self {
        CalibrationOptions {
            sample_count,
            window: DEFAULT_WINDOW,
            threshold: DEFAULT_ELBOW_THRESHOLD,
            seed,
            kmeans: KMeansOptions::default().with_seed(seed),
            threads: 1,
        }
    }
}

/// Runs the first `window` tokens of `sample` through MHA and returns each
/// layer's head features over steps `1..=window`.
pub fn sample_features(weights: &Weights, sample: &[u32], window: usize) -> Result<Vec<FeatureSet>> {
    let config = &weights.config;
    let mut cache = KVCache::new(config);
    let mut trace = AttentionTrace::new(config.num_layers, config.num_heads);
    let target = TraceTarget {
        trace: &mut trace,
        first_step: 1,
        last_only: false,
    };
    weights.forward(&sample[..window], &mut cache, AttentionPath::Mha, Some(target))?;
    (0..config.num_layers)
        .map(|l| extract_features(&trace, l, 1..=window))
        .collect()
}

struct SampleResult {
    features: Vec<FeatureSet>,
    curves: Vec<Vec<f64>>,
}

fn calibrate_sample(
    weights: &Weights,
    sample: &[u32],
    index: usize,
    opts: &CalibrationOptions,
) -> Result<SampleResult> {
    let features = sample_features(weights, sample, opts.window)?;
    let curves = features
        .iter()
        .map(|f| {
            let seed = derive_seed(opts.seed, &[index as u64, f.layer as u64]);
            error_curve(&f.vectors, &opts.kmeans.with_seed(seed))
        })
        .collect::<Result<_>>()?;
    Ok(SampleResult { features, curves })
}

/// Offline calibration: elbow-selected cluster counts per layer from the
/// mean K-means error curve over sampled corpus sequences, plus a static
/// plan clustered from the corpus-mean features.
pub fn calibrate(
    weights: &Weights,
    corpus: &[Vec<u32>],
    opts: &CalibrationOptions,
) -> Result<CalibrationProfile> {
    let config = &weights.config;
    if opts.sample_count == 0 || opts.sample_count > corpus.len() {
        return Err(ChaiError::Argument(format!(
            "sample_count {} must be in 1..={} (corpus size)",
            opts.sample_count,
            corpus.len()
        )));
    }
    if opts.window == 0 || opts.window > config.max_seq_len {
        return Err(ChaiError::Argument(format!("invalid window {}", opts.window)));
    }
    let mut indices: Vec<usize> = if opts.sample_count == corpus.len() {
        (0..corpus.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0x5A3B1E]));
        sample(&mut rng, corpus.len(), opts.sample_count).into_vec()
    };
    indices.sort_unstable();
    if let Some(&i) = indices.iter().find(|&&i| corpus[i].len() < opts.window) {
        return Err(ChaiError::Argument(format!(
            "corpus sample {i} has {} tokens, calibration needs {}",
            corpus[i].len(),
            opts.window
        )));
    }

    let results = run_samples(weights, corpus, &indices, opts)?;

    let h = config.num_heads;
    let n = results.len() as f64;
    let mut layers = Vec::with_capacity(config.num_layers);
    let mut plans = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let mut curve = vec![0.0; h];
        for r in &results {
            for (acc, e) in curve.iter_mut().zip(&r.curves[l]) {
                *acc += e;
            }
        }
        curve.iter_mut().for_each(|e| *e /= n);
        let k = elbow_select(&curve, opts.threshold)?;

        let dim = results[0].features[l].dim();
        let mut mean = vec![vec![0.0; dim]; h];
        for r in &results {
            for (m, v) in mean.iter_mut().zip(&r.features[l].vectors) {
                for (a, b) in m.iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
        mean.iter_mut().flatten().for_each(|v| *v /= n);
        let mean_features = FeatureSet {
            layer: l,
            first_step: 1,
            last_step: opts.window,
            vectors: mean,
        };
        let seed = derive_seed(opts.seed, &[u64::MAX, l as u64]);
        plans.push(cluster_heads(&mean_features, k, &opts.kmeans.with_seed(seed))?);
        layers.push(LayerCalibration {
            layer: l,
            cluster_count: k,
            elbow_curve: curve,
        });
    }

    Ok(CalibrationProfile {
        fingerprint: config.fingerprint(),
        layers,
        static_plan: ClusterPlan { layers: plans },
        metadata: CalibrationMetadata {
            sample_count: opts.sample_count,
            window: opts.window,
            threshold: opts.threshold,
            seed: opts.seed,
            kmeans: opts.kmeans,
            sample_indices: indices,
        },
    })
}

fn run_samples(
    weights: &Weights,
    corpus: &[Vec<u32>],
    indices: &[usize],
    opts: &CalibrationOptions,
) -> Result<Vec<SampleResult>> {
    let threads = opts.threads.clamp(1, indices.len());
    if threads == 1 {
        return indices
            .iter()
            .map(|&i| calibrate_sample(weights, &corpus[i], i, opts))
            .collect();
    }
    let chunk = indices.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&i| calibrate_sample(weights, &corpus[i], i, opts))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(indices.len());
        for h in handles {
            out.extend(h.join().expect("calibration worker panicked")?);
        }
        Ok(out)
    })
}
