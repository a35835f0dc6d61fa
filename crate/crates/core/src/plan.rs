use serde::{Deserialize, Serialize};

use crate::error::{ChaiError, Result};
use crate::model::ModelConfig;

/// Head clustering of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub cluster_count: usize,
    /// Head index to cluster id.
    pub assignment: Vec<usize>,
    /// Cluster id to the head whose queries and keys are computed.
    pub representatives: Vec<usize>,
}

impl LayerPlan {
    pub fn new(assignment: Vec<usize>, representatives: Vec<usize>) -> Result<Self> {
        let plan = LayerPlan {
            cluster_count: representatives.len(),
            assignment,
            representatives,
        };
        plan.validate(plan.assignment.len())?;
        Ok(plan)
    }

    pub fn singletons(num_heads: usize) -> Self {
        LayerPlan {
            cluster_count: num_heads,
            assignment: (0..num_heads).collect(),
            representatives: (0..num_heads).collect(),
        }
    }

    pub fn validate(&self, num_heads: usize) -> Result<()> {
        let k = self.cluster_count;
        if self.assignment.len() != num_heads {
            return Err(ChaiError::Contract(format!(
                "assignment covers {} heads, expected {num_heads}",
                self.assignment.len()
            )));
        }
        if k == 0 || k > num_heads {
            return Err(ChaiError::Contract(format!(
                "cluster count {k} outside 1..={num_heads}"
            )));
        }
        if self.representatives.len() != k {
            return Err(ChaiError::Contract(format!(
                "{} representatives for {k} clusters",
                self.representatives.len()
            )));
        }
        let mut seen = vec![false; k];
        for (h, &c) in self.assignment.iter().enumerate() {
            if c >= k {
                return Err(ChaiError::Contract(format!(
                    "head {h} assigned to cluster {c} of {k}"
                )));
            }
            seen[c] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(ChaiError::Contract(format!("cluster {c} has no heads")));
        }
        for (c, &rep) in self.representatives.iter().enumerate() {
            if rep >= num_heads || self.assignment[rep] != c {
                return Err(ChaiError::Contract(format!(
                    "representative {rep} of cluster {c} is not a member"
                )));
            }
        }
        Ok(())
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(h, _)| h)
            .collect()
    }

    /// Representative head of the cluster containing `head`.
    #[inline]
    pub fn representative_of(&self, head: usize) -> usize {
        self.representatives[self.assignment[head]]
    }

    /// Representatives in ascending head order.
    pub fn sorted_representatives(&self) -> Vec<usize> {
        let mut reps = self.representatives.clone();
        reps.sort_unstable();
        reps
    }

    /// Relabels clusters in order of their first member, so equal partitions
    /// with equal representatives compare equal.
    pub fn canonical(&self) -> LayerPlan {
        let mut relabel = vec![usize::MAX; self.cluster_count];
        let mut next = 0;
        for &c in &self.assignment {
            if relabel[c] == usize::MAX {
                relabel[c] = next;
                next += 1;
            }
        }
        let mut representatives = vec![0; self.cluster_count];
        for (c, &rep) in self.representatives.iter().enumerate() {
            representatives[relabel[c]] = rep;
        }
        LayerPlan {
            cluster_count: self.cluster_count,
            assignment: self.assignment.iter().map(|&c| relabel[c]).collect(),
            representatives,
        }
    }
}

/// Per-layer head clustering for a whole model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub layers: Vec<LayerPlan>,
}

impl ClusterPlan {
    pub fn singletons(config: &ModelConfig) -> Self {
        ClusterPlan {
            layers: vec![LayerPlan::singletons(config.num_heads); config.num_layers],
        }
    }

    /// Contiguous, near-equal head groups with `counts[l]` clusters in layer
    /// `l`; the first head of each group represents it.
    pub fn contiguous(config: &ModelConfig, counts: &[usize]) -> Result<Self> {
        if counts.len() != config.num_layers {
            return Err(ChaiError::Argument(format!(
                "{} cluster counts for {} layers",
                counts.len(),
                config.num_layers
            )));
        }
        let h = config.num_heads;
        let layers = counts
            .iter()
            .map(|&k| {
                if k == 0 || k > h {
                    return Err(ChaiError::Argument(format!(
                        "cluster count {k} outside 1..={h}"
                    )));
                }
                let assignment: Vec<usize> = (0..h).map(|head| head * k / h).collect();
                let representatives = (0..k)
                    .map(|c| assignment.iter().position(|&a| a == c).expect("nonempty"))
                    .collect();
                LayerPlan::new(assignment, representatives)
            })
            .collect::<Result<_>>()?;
        Ok(ClusterPlan { layers })
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.num_layers {
            return Err(ChaiError::Contract(format!(
                "plan has {} layers, model has {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        for (l, lp) in self.layers.iter().enumerate() {
            lp.validate(config.num_heads)
                .map_err(|e| ChaiError::Contract(format!("layer {l}: {e}")))?;
        }
        Ok(())
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.cluster_count).collect()
    }

    pub fn canonical(&self) -> ClusterPlan {
        ClusterPlan {
            layers: self.layers.iter().map(LayerPlan::canonical).collect(),
        }
    }
}
