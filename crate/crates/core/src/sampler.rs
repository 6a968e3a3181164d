//! Stage-aware subnet sampling and the stage schedule.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ConfigSpace};
use crate::rng::{self, Rng};

pub const NUM_STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingPolicy {
    /// Maxnet, then random middles, then the stage's smallest subnet.
    Sandwich,
    /// Maxnet, then uniform draws without replacement.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub epochs: [usize; NUM_STAGES],
    pub k: usize,
    pub policy: SamplingPolicy,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            epochs: [2, 3, 3],
            k: 3,
            policy: SamplingPolicy::Sandwich,
        }
    }
}

impl StagePlan {
    pub fn validate(&self, space: &ConfigSpace) -> Result<()> {
        if self.epochs[0] == 0 {
            return Err(Error::Config("stage 0 needs at least one epoch".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {}", self.k)));
        }
        for stage in 1..NUM_STAGES {
            let available = space.stage_configs(stage).len();
            if self.epochs[stage] > 0 && self.k > available {
                return Err(Error::Config(format!(
                    "K = {} exceeds the {available} configurations available in stage {stage}",
                    self.k
                )));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, dataset_size: usize, batch: usize) -> usize {
        self.epochs.iter().sum::<usize>() * steps_per_epoch(dataset_size, batch)
    }
}

pub fn steps_per_epoch(dataset_size: usize, batch: usize) -> usize {
    dataset_size.div_ceil(batch.max(1))
}

/// Stage of global step `step`; steps past the end stay in the last stage.
pub fn stage_of(step: usize, plan: &StagePlan, dataset_size: usize, batch: usize) -> usize {
    let spe = steps_per_epoch(dataset_size, batch);
    let mut boundary = 0;
    for (stage, &e) in plan.epochs.iter().enumerate() {
        boundary += e * spe;
        if step < boundary {
            return stage;
        }
    }
    NUM_STAGES - 1
}

pub struct SubnetSampler {
    rng: Rng,
    policy: SamplingPolicy,
    k: usize,
}

impl SubnetSampler {
    pub fn new(seed: u64, policy: SamplingPolicy, k: usize) -> Self {
        SubnetSampler {
            rng: rng::seeded(seed),
            policy,
            k,
        }
    }

    /// Configurations for one iteration; element 0 is always the maxnet.
    pub fn sample(&mut self, space: &ConfigSpace, stage: usize) -> Result<Vec<ArchConfig>> {
        let maxnet = space.maxnet();
        if stage == 0 {
            return Ok(vec![maxnet]);
        }
        let pool = space.stage_configs(stage);
        if self.k > pool.len() {
            return Err(Error::Sampling(format!(
                "cannot draw {} distinct configurations from the {} available in stage {stage}",
                self.k,
                pool.len()
            )));
        }
        let mut out = vec![maxnet];
        match self.policy {
            SamplingPolicy::Sandwich => {
                if self.k == 1 {
                    return Ok(out);
                }
                let smallest = pool[0];
                let middle: Vec<ArchConfig> = pool.iter().copied().filter(|c| *c != maxnet && *c != smallest).collect();
                let want = self.k - 2;
                if want > middle.len() {
                    return Err(Error::Sampling(format!("sandwich sampling needs {want} middle configurations")));
                }
                out.extend(sample(&mut self.rng, middle.len(), want).into_iter().map(|i| middle[i]));
                out.push(smallest);
            }
            SamplingPolicy::Uniform => {
                let rest: Vec<ArchConfig> = pool.iter().copied().filter(|c| *c != maxnet).collect();
                out.extend(sample(&mut self.rng, rest.len(), self.k - 1).into_iter().map(|i| rest[i]));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Width;

    fn space() -> ConfigSpace {
        ConfigSpace::new(
            vec![
                Width { hidden: 16, heads: 2, ffn: 32 },
                Width { hidden: 24, heads: 3, ffn: 48 },
                Width { hidden: 32, heads: 4, ffn: 64 },
            ],
            vec![2, 3, 4],
        )
        .unwrap()
    }

    #[test]
    fn stage_zero_is_maxnet_only() {
        let s = space();
        let mut sampler = SubnetSampler::new(1, SamplingPolicy::Sandwich, 3);
        assert_eq!(sampler.sample(&s, 0).unwrap(), vec![s.maxnet()]);
    }

    #[test]
    fn sandwich_shape_and_stage_rules() {
        let s = space();
        let mut sampler = SubnetSampler::new(5, SamplingPolicy::Sandwich, 3);
        let mut shallow = false;
        for _ in 0..1000 {
            let one = sampler.sample(&s, 1).unwrap();
            assert_eq!(one[0], s.maxnet());
            assert!(one.iter().all(|c| c.layers == 4));
            let two = sampler.sample(&s, 2).unwrap();
            assert_eq!(two.len(), 3);
            assert_eq!(two[0], s.maxnet());
            assert_eq!(two[2], s.minnet());
            assert!(two[1] != two[0] && two[1] != two[2]);
            shallow |= two.iter().any(|c| c.layers < 4);
        }
        assert!(shallow);
    }

    #[test]
    fn uniform_draws_are_distinct() {
        let s = space();
        let mut sampler = SubnetSampler::new(2, SamplingPolicy::Uniform, 4);
        for _ in 0..100 {
            let mut v = sampler.sample(&s, 2).unwrap();
            assert_eq!(v[0], s.maxnet());
            v.sort();
            v.dedup();
            assert_eq!(v.len(), 4);
        }
    }

    #[test]
    fn too_many_subnets_is_an_error() {
        let s = space();
        let mut sampler = SubnetSampler::new(0, SamplingPolicy::Sandwich, 4);
        assert!(matches!(sampler.sample(&s, 1), Err(Error::Sampling(_))));
    }

    #[test]
    fn replay_is_identical() {
        let s = space();
        let draw = |seed| {
            let mut sm = SubnetSampler::new(seed, SamplingPolicy::Sandwich, 3);
            (0..50).map(|_| sm.sample(&s, 2).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn stage_boundaries() {
        let plan = StagePlan::default();
        // 100 samples, batch 32 -> 4 steps per epoch
        assert_eq!(stage_of(0, &plan, 100, 32), 0);
        assert_eq!(stage_of(7, &plan, 100, 32), 0);
        assert_eq!(stage_of(8, &plan, 100, 32), 1);
        assert_eq!(stage_of(20, &plan, 100, 32), 2);
        assert_eq!(plan.total_steps(100, 32), 32);
        assert_eq!(stage_of(31, &plan, 100, 32), 2);
    }
}
