//! Models with known head clusters, for checking that clustering recovers
//! them and that clustered attention is exact on them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::derive_seed;
use crate::error::{ChaiError, Result};
use crate::model::{init_random, make_redundant, ModelConfig, Weights};
use crate::plan::{ClusterPlan, LayerPlan};

/// Random partition of each layer's heads into exactly `counts[l]` clusters
/// of near-equal size, represented by their lowest-index member.
pub fn planted_plan(config: &ModelConfig, counts: &[usize], seed: u64) -> Result<ClusterPlan> {
    if counts.len() != config.num_layers {
        return Err(ChaiError::Argument(format!(
            "{} cluster counts for {} layers",
            counts.len(),
            config.num_layers
        )));
    }
    let h = config.num_heads;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x91A7]));
    let layers = counts
        .iter()
        .map(|&k| {
            if k == 0 || k > h {
                return Err(ChaiError::Argument(format!("cluster count {k} outside 1..={h}")));
            }
            let mut heads: Vec<usize> = (0..h).collect();
            heads.shuffle(&mut rng);
            let mut assignment = vec![0; h];
            for (i, &head) in heads.iter().enumerate() {
                assignment[head] = i % k;
            }
            let reps = (0..k)
                .map(|c| assignment.iter().position(|&a| a == c).expect("every cluster seeded"))
                .collect();
            Ok(LayerPlan::new(assignment, reps)?.canonical())
        })
        .collect::<Result<_>>()?;
    Ok(ClusterPlan { layers })
}

/// Query gain of [`planted_model`]. Random heads at unit gain attend almost
/// uniformly, which leaves planted clusters too close for the elbow rule.
pub const PLANTED_QUERY_GAIN: f32 = 8.0;

/// Calibration window long enough for planted clusters to separate cleanly
/// under the default elbow threshold. Five steps leave some cluster pairs
/// too close together once `k` is around eight.
pub const PLANTED_CALIBRATION_WINDOW: usize = 16;

/// Random weights whose query/key head blocks are shared within each planted
/// cluster, together with the planted plan. Queries are scaled by
/// [`PLANTED_QUERY_GAIN`] before the blocks are shared.
pub fn planted_model(config: &ModelConfig, counts: &[usize], seed: u64) -> Result<(Weights, ClusterPlan)> {
    planted_model_with_gain(config, counts, seed, PLANTED_QUERY_GAIN)
}

pub fn planted_model_with_gain(
    config: &ModelConfig,
    counts: &[usize],
    seed: u64,
    query_gain: f32,
) -> Result<(Weights, ClusterPlan)> {
    let plan = planted_plan(config, counts, seed)?;
    let mut base = init_random(config, seed)?;
    for lw in &mut base.layers {
        lw.wq.data_mut().iter_mut().for_each(|v| *v *= query_gain);
    }
    Ok((make_redundant(&base, &plan)?, plan))
}

/// Pseudo-random token sequences for calibration and benchmarking.
pub fn synthetic_corpus(vocab_size: usize, samples: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC0C0]));
    (0..samples)
        .map(|_| (0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_counts_are_exact() {
        let config = ModelConfig::new(3, 16, 64, 16, 16, 32).unwrap();
        let plan = planted_plan(&config, &[1, 4, 16], 5).unwrap();
        plan.validate_for(&config).unwrap();
        assert_eq!(plan.cluster_counts(), vec![1, 4, 16]);
        assert_eq!(plan, plan.canonical());
        assert_eq!(plan, planted_plan(&config, &[1, 4, 16], 5).unwrap());
    }
}
