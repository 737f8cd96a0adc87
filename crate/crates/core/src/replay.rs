//! Multi-timescale replay: cascaded FIFO sub-buffers with probabilistic
//! demotion into an overflow buffer.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One stored transition. Observations are the flattened, scaled features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub next_obs: Vec<f64>,
    /// RBs the action consumed, kept so costs can be recomputed for a new budget.
    pub rb_used: u32,
    pub born_step: u64,
}

/// Anything carrying an insertion time.
pub trait Stamped {
    fn born_step(&self) -> u64;
}

impl Stamped for Experience {
    fn born_step(&self) -> u64 {
        self.born_step
    }
}

impl Stamped for u64 {
    fn born_step(&self) -> u64 {
        *self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtrConfig {
    pub sub_capacities: Vec<usize>,
    /// Probability that an item evicted from a sub-buffer moves on to the next one.
    pub promote_prob: f64,
    pub total_cap: usize,
}

impl MtrConfig {
    /// `n_sub` equal sub-buffers sharing `total_cap`.
    pub fn equal_split(n_sub: usize, total_cap: usize, promote_prob: f64) -> Self {
        let n = n_sub.max(1);
        Self {
            sub_capacities: vec![total_cap / n; n],
            promote_prob,
            total_cap,
        }
    }

    /// A single FIFO of `cap` items.
    pub fn fifo(cap: usize) -> Self {
        Self {
            sub_capacities: vec![cap],
            promote_prob: 0.0,
            total_cap: cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_capacities.is_empty() || self.sub_capacities.contains(&0) {
            return Err(invalid("need at least one sub-buffer of positive capacity"));
        }
        if !(0.0..=1.0).contains(&self.promote_prob) {
            return Err(invalid("promote probability must lie in [0, 1]"));
        }
        if self.sub_capacities.iter().sum::<usize>() > self.total_cap {
            return Err(invalid("sub-buffer capacities exceed the total cap"));
        }
        Ok(())
    }
}

/// Where a sampled item was stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Sub(usize),
    Overflow,
}

#[derive(Clone, Debug)]
pub struct MtrBuffer<T> {
    cfg: MtrConfig,
    subs: Vec<VecDeque<T>>,
    overflow: VecDeque<T>,
    /// Items that ever entered each sub-buffer.
    entered: Vec<u64>,
}

impl<T> MtrBuffer<T> {
    pub fn new(cfg: MtrConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.sub_capacities.len();
        Ok(Self {
            subs: cfg.sub_capacities.iter().map(|&c| VecDeque::with_capacity(c + 1)).collect(),
            overflow: VecDeque::new(),
            entered: vec![0; n],
            cfg,
        })
    }

    pub fn config(&self) -> &MtrConfig {
        &self.cfg
    }

    pub fn num_subs(&self) -> usize {
        self.subs.len()
    }

    pub fn len(&self) -> usize {
        self.subs.iter().map(VecDeque::len).sum::<usize>() + self.overflow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sub(&self, i: usize) -> &VecDeque<T> {
        &self.subs[i]
    }

    pub fn overflow(&self) -> &VecDeque<T> {
        &self.overflow
    }

    pub fn sub_lens(&self) -> Vec<usize> {
        self.subs.iter().map(VecDeque::len).collect()
    }

    /// Count of items that have ever entered each sub-buffer.
    pub fn stage_entries(&self) -> &[u64] {
        &self.entered
    }

    pub fn push<R: Rng + ?Sized>(&mut self, item: T, rng: &mut R) {
        self.subs[0].push_back(item);
        self.entered[0] += 1;
        let last = self.subs.len() - 1;
        for k in 0..=last {
            while self.subs[k].len() > self.cfg.sub_capacities[k] {
                let old = self.subs[k].pop_front().expect("over capacity");
                if k < last && rng.random::<f64>() < self.cfg.promote_prob {
                    self.subs[k + 1].push_back(old);
                    self.entered[k + 1] += 1;
                } else {
                    self.overflow.push_back(old);
                }
            }
        }
        while self.len() > self.cfg.total_cap && self.overflow.pop_front().is_some() {}
    }

    /// Uniform sampling with replacement over every stored item.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<(Provenance, &T)>> {
        let len = self.len();
        if len == 0 {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch_size).map(|_| self.locate(rng.random_range(0..len))).collect())
    }

    fn locate(&self, mut idx: usize) -> (Provenance, &T) {
        for (i, s) in self.subs.iter().enumerate() {
            if idx < s.len() {
                return (Provenance::Sub(i), &s[idx]);
            }
            idx -= s.len();
        }
        (Provenance::Overflow, &self.overflow[idx])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Provenance, &T)> {
        self.subs
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |x| (Provenance::Sub(i), x)))
            .chain(self.overflow.iter().map(|x| (Provenance::Overflow, x)))
    }
}

impl<T: Stamped> MtrBuffer<T> {
    /// Histogram of `now_step - born_step` over stored items.
    pub fn age_histogram(&self, now_step: u64) -> BTreeMap<u64, usize> {
        let mut h = BTreeMap::new();
        for (_, x) in self.iter() {
            *h.entry(now_step.saturating_sub(x.born_step())).or_insert(0) += 1;
        }
        h
    }

    pub fn max_age(&self, now_step: u64) -> Option<u64> {
        self.iter().map(|(_, x)| now_step.saturating_sub(x.born_step())).max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cascade(beta: f64) -> MtrBuffer<u64> {
        let mut b = MtrBuffer::new(MtrConfig {
            sub_capacities: vec![2, 2],
            promote_prob: beta,
            total_cap: 10,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 1..=5 {
            b.push(i, &mut rng);
        }
        b
    }

    #[test]
    fn full_promotion_cascade() {
        let b = cascade(1.0);
        assert_eq!(b.sub(0).iter().copied().collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(b.sub(1).iter().copied().collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(b.overflow().iter().copied().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn no_promotion_cascade() {
        let b = cascade(0.0);
        assert_eq!(b.sub(0).iter().copied().collect::<Vec<_>>(), vec![4, 5]);
        assert!(b.sub(1).is_empty());
        assert_eq!(b.overflow().iter().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn overflow_trimmed_to_total_cap() {
        let mut b = MtrBuffer::new(MtrConfig {
            sub_capacities: vec![2, 2],
            promote_prob: 0.0,
            total_cap: 4,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..20u64 {
            b.push(i, &mut rng);
            assert!(b.len() <= 4);
        }
        // oldest overflow entries go first
        assert_eq!(b.overflow().iter().copied().collect::<Vec<_>>(), vec![16, 17]);
    }

    #[test]
    fn single_item_sampled_with_replacement() {
        let mut b = MtrBuffer::new(MtrConfig::fifo(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.push(7u64, &mut rng);
        let s = b.sample_batch(4, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|(p, x)| **x == 7 && *p == Provenance::Sub(0)));
    }

    #[test]
    fn empty_sample_is_error() {
        let b: MtrBuffer<u64> = MtrBuffer::new(MtrConfig::fifo(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_batch(1, &mut rng), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn fresh_fill_ages() {
        let mut b = MtrBuffer::new(MtrConfig {
            sub_capacities: vec![3, 3],
            promote_prob: 1.0,
            total_cap: 6,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..6u64 {
            b.push(i, &mut rng);
        }
        let h = b.age_histogram(5);
        assert_eq!(h.len(), 6);
        assert!((0..6).all(|a| h[&a] == 1));
    }

    #[test]
    fn invalid_configs() {
        assert!(MtrBuffer::<u64>::new(MtrConfig {
            sub_capacities: vec![3, 3],
            promote_prob: 0.5,
            total_cap: 5
        })
        .is_err());
        assert!(MtrBuffer::<u64>::new(MtrConfig {
            sub_capacities: vec![],
            promote_prob: 0.5,
            total_cap: 5
        })
        .is_err());
    }
}
