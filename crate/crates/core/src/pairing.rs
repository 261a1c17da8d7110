//! Positive-pair construction at three matching granularities.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Episode, Split};
use crate::error::{Error, Result};
use crate::numerics::SeededSampler;

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum PairStrategy {
    #[serde(rename = "episode")]
    ByEpisode,
    #[default]
    #[serde(rename = "instruction")]
    ByInstruction,
    #[serde(rename = "class")]
    ByClass,
}

impl PairStrategy {
    pub const ALL: [PairStrategy; 3] = [
        PairStrategy::ByEpisode,
        PairStrategy::ByInstruction,
        PairStrategy::ByClass,
    ];

    /// The matching key of an episode under this strategy.
    pub fn key(self, ep: &Episode) -> usize {
        match self {
            PairStrategy::ByEpisode => ep.id,
            PairStrategy::ByInstruction => ep.instruction_id,
            PairStrategy::ByClass => ep.class_id,
        }
    }

    pub fn matches(self, a: &Episode, b: &Episode) -> bool {
        self.key(a) == self.key(b)
    }

    /// Flag spelling used on the command line.
    pub fn as_str(self) -> &'static str {
        match self {
            PairStrategy::ByEpisode => "episode",
            PairStrategy::ByInstruction => "instruction",
            PairStrategy::ByClass => "class",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            PairStrategy::ByEpisode => "By Episode",
            PairStrategy::ByInstruction => "By Instruction",
            PairStrategy::ByClass => "By Class",
        }
    }
}

impl fmt::Display for PairStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "episode" | "by-episode" => Ok(PairStrategy::ByEpisode),
            "instruction" | "by-instruction" => Ok(PairStrategy::ByInstruction),
            "class" | "task" | "by-class" | "by-task" => Ok(PairStrategy::ByClass),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (episode|instruction|class)"
            ))),
        }
    }
}

/// `(u-side episode id, e-side episode id)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    pub strategy: PairStrategy,
    pub seed: u64,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn u_ids(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn e_ids(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Draws positive pairs from a fixed pool of episodes.
#[derive(Debug, Clone)]
pub struct PairSampler {
    strategy: PairStrategy,
    /// When set, the keys within a batch are pairwise distinct so in-batch
    /// negatives never share the positive's key. Otherwise only the e-side
    /// episodes are required to be distinct.
    distinct_keys: bool,
    groups: BTreeMap<usize, Vec<usize>>,
    pool_size: usize,
}

impl PairSampler {
    pub fn new(ds: &Dataset, pool: &[usize], strategy: PairStrategy, distinct_keys: bool) -> Self {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &id in pool {
            groups
                .entry(strategy.key(ds.episode(id)))
                .or_default()
                .push(id);
        }
        PairSampler {
            strategy,
            distinct_keys,
            groups,
            pool_size: pool.len(),
        }
    }

    /// Sampler over pre-grouped sample indices (`key -> members`).
    pub fn from_groups(
        strategy: PairStrategy,
        distinct_keys: bool,
        groups: BTreeMap<usize, Vec<usize>>,
    ) -> Self {
        groups
            .values()
            .for_each(|g| assert!(!g.is_empty(), "empty pairing group"));
        let pool_size = groups.values().map(Vec::len).sum();
        PairSampler {
            strategy,
            distinct_keys,
            groups,
            pool_size,
        }
    }

    pub fn for_split(
        ds: &Dataset,
        split: Split,
        strategy: PairStrategy,
        distinct_keys: bool,
    ) -> Self {
        PairSampler::new(ds, &ds.split_ids(split), strategy, distinct_keys)
    }

    pub fn strategy(&self) -> PairStrategy {
        self.strategy
    }

    pub fn key_count(&self) -> usize {
        self.groups.len()
    }

    /// Largest batch this sampler can produce.
    pub fn capacity(&self) -> usize {
        if self.distinct_keys {
            self.key_count()
        } else {
            self.pool_size
        }
    }

    fn partner(&self, group: &[usize], u: usize, rng: &mut SeededSampler) -> usize {
        match self.strategy {
            PairStrategy::ByEpisode => u,
            _ => *rng.choose(group).expect("groups are never empty"),
        }
    }

    pub fn sample(&self, batch_size: usize, rng: &mut SeededSampler) -> Result<PairBatch> {
        let seed = rng.seed();
        if batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        if batch_size > self.capacity() {
            return Err(Error::InsufficientKeys {
                strategy: self.strategy.as_str(),
                requested: batch_size,
                available: self.capacity(),
            });
        }
        let pairs = if self.distinct_keys {
            let mut keys: Vec<usize> = self.groups.keys().copied().collect();
            rng.shuffle(&mut keys);
            keys[..batch_size]
                .iter()
                .map(|k| {
                    let group = &self.groups[k];
                    let u = *rng.choose(group).expect("groups are never empty");
                    (u, self.partner(group, u, rng))
                })
                .collect()
        } else {
            self.sample_overlapping(batch_size, rng)?
        };
        Ok(PairBatch {
            pairs,
            strategy: self.strategy,
            seed,
        })
    }

    fn sample_overlapping(
        &self,
        batch_size: usize,
        rng: &mut SeededSampler,
    ) -> Result<Vec<(usize, usize)>> {
        let mut remaining: BTreeMap<usize, Vec<usize>> = self.groups.clone();
        let mut order: Vec<(usize, usize)> = self
            .groups
            .iter()
            .flat_map(|(&k, members)| members.iter().map(move |&m| (k, m)))
            .collect();
        rng.shuffle(&mut order);
        let mut pairs = Vec::with_capacity(batch_size);
        for (key, u) in order {
            if pairs.len() == batch_size {
                break;
            }
            let avail = remaining.get_mut(&key).expect("key from groups");
            let e = match self.strategy {
                PairStrategy::ByEpisode => {
                    let pos = avail
                        .iter()
                        .position(|&m| m == u)
                        .expect("episode in its own group");
                    avail.swap_remove(pos)
                }
                _ => {
                    if avail.is_empty() {
                        continue;
                    }
                    let i = rng.below(avail.len());
                    avail.swap_remove(i)
                }
            };
            pairs.push((u, e));
        }
        if pairs.len() < batch_size {
            return Err(Error::InsufficientKeys {
                strategy: self.strategy.as_str(),
                requested: batch_size,
                available: pairs.len(),
            });
        }
        Ok(pairs)
    }

    /// One pair per key, in key order. Used for retrieval evaluation.
    pub fn one_per_key(&self, rng: &mut SeededSampler) -> PairBatch {
        let seed = rng.seed();
        let pairs = self
            .groups
            .values()
            .map(|group| {
                let u = *rng.choose(group).expect("groups are never empty");
                (u, self.partner(group, u, rng))
            })
            .collect();
        PairBatch {
            pairs,
            strategy: self.strategy,
            seed,
        }
    }
}

/// A batch of `batch_size` distinct-key positive pairs from the train split.
pub fn build_positive_pairs(
    ds: &Dataset,
    strategy: PairStrategy,
    batch_size: usize,
    seed: u64,
) -> Result<PairBatch> {
    let sampler = PairSampler::for_split(ds, Split::Train, strategy, true);
    sampler.sample(batch_size, &mut SeededSampler::new(seed))
}
