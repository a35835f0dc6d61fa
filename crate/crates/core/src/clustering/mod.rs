//! Head clustering: trace features, K-means, elbow selection,
//! representatives, and the correlation/stability/size analyses.

mod kmeans;

pub use kmeans::{derive_seed, kmeans, squared_distance, KMeansOptions, KMeansResult};

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::engine::CalibrationProfile;
use crate::error::{ChaiError, Result};
use crate::plan::{ClusterPlan, LayerPlan};

/// Default relative-drop threshold for [`elbow_select`].
pub const DEFAULT_ELBOW_THRESHOLD: f64 = 0.05;

/// Per-head feature vectors of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub layer: usize,
    /// Decode steps the features were taken from, inclusive.
    pub first_step: usize,
    pub last_step: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// Concatenates each head's probability rows over `window`, right-padding
/// every row with zeros to the length of the window's last row.
pub fn extract_features(
    trace: &AttentionTrace,
    layer: usize,
    window: RangeInclusive<usize>,
) -> Result<FeatureSet> {
    let (first, last) = (*window.start(), *window.end());
    if first > last {
        return Err(ChaiError::Argument(format!("empty step window {first}..={last}")));
    }
    if layer >= trace.num_layers() {
        return Err(ChaiError::InsufficientTrace(format!(
            "trace has {} layers, asked for layer {layer}",
            trace.num_layers()
        )));
    }
    for step in first..=last {
        if !trace.covers(layer, step) {
            return Err(ChaiError::InsufficientTrace(format!(
                "layer {layer} has no complete rows for step {step} (window {first}..={last})"
            )));
        }
    }
    let width = trace.row(layer, 0, last).expect("covered").len();
    let mut vectors = Vec::with_capacity(trace.num_heads());
    for head in 0..trace.num_heads() {
        let mut v = Vec::with_capacity(width * (last - first + 1));
        for step in first..=last {
            let row = trace.row(layer, head, step).expect("covered");
            if row.len() > width {
                return Err(ChaiError::Contract(format!(
                    "step {step} row of length {} exceeds final row length {width}",
                    row.len()
                )));
            }
            v.extend(row.iter().map(|&p| p as f64));
            v.extend(std::iter::repeat(0.0).take(width - row.len()));
        }
        vectors.push(v);
    }
    Ok(FeatureSet {
        layer,
        first_step: first,
        last_step: last,
        vectors,
    })
}

/// K-means error for every `k` in `1..=n`, made non-increasing by carrying
/// the best error forward (a `k + 1` clustering can always match a `k` one).
pub fn error_curve(points: &[Vec<f64>], opts: &KMeansOptions) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(points.len());
    let mut best = f64::INFINITY;
    for k in 1..=points.len() {
        let sub = opts.with_seed(derive_seed(opts.seed, &[k as u64]));
        best = best.min(kmeans(points, k, &sub)?.sse);
        curve.push(best);
    }
    Ok(curve)
}

/// Smallest `k` in `1..H` whose next drop `(err(k) - err(k+1)) / err(1)` is
/// below `threshold`; `H` when the curve never flattens.
pub fn elbow_select(curve: &[f64], threshold: f64) -> Result<usize> {
    if curve.is_empty() {
        return Err(ChaiError::Argument("empty error curve".into()));
    }
    let denom = curve[0].max(1e-12);
    for k in 1..curve.len() {
        if (curve[k - 1] - curve[k]) / denom < threshold {
            return Ok(k);
        }
    }
    Ok(curve.len())
}

/// Member nearest to each centroid; lowest head index on ties.
pub fn choose_representatives(
    points: &[Vec<f64>],
    assignment: &[usize],
    centroids: &[Vec<f64>],
) -> Result<Vec<usize>> {
    if points.len() != assignment.len() {
        return Err(ChaiError::Contract(format!(
            "{} points but {} assignments",
            points.len(),
            assignment.len()
        )));
    }
    let mut best: Vec<Option<(usize, f64)>> = vec![None; centroids.len()];
    for (head, (p, &c)) in points.iter().zip(assignment).enumerate() {
        let centroid = centroids
            .get(c)
            .ok_or_else(|| ChaiError::Contract(format!("head {head} in unknown cluster {c}")))?;
        let d = squared_distance(p, centroid);
        if best[c].map_or(true, |(_, bd)| d < bd) {
            best[c] = Some((head, d));
        }
    }
    best.iter()
        .enumerate()
        .map(|(c, b)| {
            b.map(|(h, _)| h)
                .ok_or_else(|| ChaiError::Contract(format!("cluster {c} is empty")))
        })
        .collect()
}

/// Clusters one layer's head features into `k` groups and returns the
/// canonical plan.
pub fn cluster_heads(features: &FeatureSet, k: usize, opts: &KMeansOptions) -> Result<LayerPlan> {
    let result = kmeans(&features.vectors, k, opts)?;
    let reps = choose_representatives(&features.vectors, &result.assignment, &result.centroids)?;
    Ok(LayerPlan::new(result.assignment, reps)?.canonical())
}

/// Symmetric Pearson correlation matrix. Pairs involving a zero-variance
/// vector are 0, including its diagonal entry.
pub fn correlation_matrix(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let len = vectors.first().map_or(0, Vec::len);
    if let Some(i) = vectors.iter().position(|v| v.len() != len) {
        return Err(ChaiError::Shape(format!(
            "vector {i} has length {}, expected {len}",
            vectors[i].len()
        )));
    }
    if len < 2 && !vectors.is_empty() {
        return Err(ChaiError::Shape(format!(
            "correlation needs vectors of length >= 2, got {len}"
        )));
    }
    let centred: Vec<Option<Vec<f64>>> = vectors
        .iter()
        .map(|v| {
            let mean = v.iter().sum::<f64>() / len as f64;
            let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            (norm > 0.0).then(|| c.iter().map(|x| x / norm).collect())
        })
        .collect();
    let n = vectors.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        let Some(a) = &centred[i] else { continue };
        out[i][i] = 1.0;
        for j in i + 1..n {
            if let Some(b) = &centred[j] {
                let r = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
                out[i][j] = r;
                out[j][i] = r;
            }
        }
    }
    Ok(out)
}

/// Cluster sizes of one layer, largest first.
///
/// Panics if `layer` is out of range for the plan.
pub fn cluster_size_histogram(plan: &ClusterPlan, layer: usize) -> Vec<usize> {
    let lp = &plan.layers[layer];
    let mut sizes = vec![0usize; lp.cluster_count];
    for &c in &lp.assignment {
        sizes[c] += 1;
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub window: usize,
    pub steps: Vec<usize>,
    /// `changes[layer][i]`: heads whose cluster (named by its representative)
    /// differs at `steps[i]` from the previous step.
    pub changes: Vec<Vec<usize>>,
}

/// Re-clusters every layer on the trailing window ending at each step in
/// `from_step..=to_step` and counts membership changes between steps.
pub fn membership_stability(
    trace: &AttentionTrace,
    profile: &CalibrationProfile,
    from_step: usize,
    to_step: usize,
) -> Result<StabilityReport> {
    let w = profile.metadata.window;
    if w == 0 || from_step > to_step {
        return Err(ChaiError::Argument(format!(
            "invalid step range {from_step}..={to_step} with window {w}"
        )));
    }
    let first_trace = trace
        .first_step()
        .ok_or_else(|| ChaiError::InsufficientTrace("trace is empty".into()))?;
    let earliest = first_trace + w - 1;
    if from_step < earliest {
        return Err(ChaiError::InsufficientTrace(format!(
            "a {w}-step window ending at step {from_step} starts before the trace (first step {first_trace})"
        )));
    }
    let counts = profile.cluster_counts();
    if counts.len() != trace.num_layers() {
        return Err(ChaiError::Profile(format!(
            "profile has {} layers, trace has {}",
            counts.len(),
            trace.num_layers()
        )));
    }
    let opts = profile.metadata.kmeans;
    let start = if from_step > earliest { from_step - 1 } else { from_step };
    let mut changes = vec![Vec::new(); counts.len()];
    for (layer, &k) in counts.iter().enumerate() {
        let mut prev: Option<Vec<usize>> = None;
        for s in start..=to_step {
            let features = extract_features(trace, layer, s + 1 - w..=s)?;
            let sub = opts.with_seed(derive_seed(opts.seed, &[layer as u64, s as u64]));
            let plan = cluster_heads(&features, k, &sub)?;
            let labels: Vec<usize> = (0..plan.assignment.len())
                .map(|h| plan.representative_of(h))
                .collect();
            if s >= from_step {
                let count = prev
                    .as_ref()
                    .map_or(0, |p| p.iter().zip(&labels).filter(|(a, b)| a != b).count());
                changes[layer].push(count);
            }
            prev = Some(labels);
        }
    }
    Ok(StabilityReport {
        window: w,
        steps: (from_step..=to_step).collect(),
        changes,
    })
}
