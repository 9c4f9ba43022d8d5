//! Block-structured synthetic interaction streams with scheduled drift.
//!
//! User `u` belongs to block `u % blocks` and item `i` to block
//! `i % blocks`. At snapshot `t` a user in block `b` prefers item block
//! `(b + rotation(t)) % blocks`; each event lands in the preferred block
//! with probability `within_prob` and otherwise in a uniformly chosen
//! other block.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Interaction;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("{0} must lie in [0, 1], got {1}")]
    Probability(&'static str, f64),
    #[error("need at least as many {0} as blocks ({1} < {2})")]
    TooFew(&'static str, usize, usize),
    #[error("{0} must be positive")]
    Zero(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    pub within_prob: f64,
    pub snapshots: usize,
    /// Events per user in each snapshot.
    pub events_per_user: usize,
    /// Per-snapshot override of `events_per_user`; shorter lists fall back
    /// to the constant for later snapshots.
    pub activity: Vec<usize>,
    /// First snapshot whose affinity is rotated.
    pub drift_start: usize,
    /// Snapshots per extra one-block rotation after `drift_start`; 0 disables drift.
    pub drift_every: usize,
    /// Seconds per snapshot.
    pub granularity: i64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 20,
            items: 20,
            blocks: 2,
            within_prob: 0.95,
            snapshots: 4,
            events_per_user: 4,
            activity: Vec::new(),
            drift_start: 0,
            drift_every: 0,
            granularity: 86_400,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.within_prob) {
            return Err(SynthError::Probability("within_prob", self.within_prob));
        }
        if self.blocks == 0 {
            return Err(SynthError::Zero("blocks"));
        }
        if self.snapshots == 0 {
            return Err(SynthError::Zero("snapshots"));
        }
        if self.granularity <= 0 {
            return Err(SynthError::Zero("granularity"));
        }
        if self.users < self.blocks {
            return Err(SynthError::TooFew("users", self.users, self.blocks));
        }
        if self.items < self.blocks {
            return Err(SynthError::TooFew("items", self.items, self.blocks));
        }
        Ok(())
    }

    /// Block offset applied at snapshot `t`.
    pub fn rotation(&self, t: usize) -> usize {
        if self.drift_every == 0 || t < self.drift_start {
            0
        } else {
            (t - self.drift_start) / self.drift_every + 1
        }
    }

    pub fn events_at(&self, t: usize) -> usize {
        self.activity.get(t).copied().unwrap_or(self.events_per_user)
    }

    pub fn user_block(&self, user: u64) -> usize {
        user as usize % self.blocks
    }

    pub fn item_block(&self, item: u64) -> usize {
        item as usize % self.blocks
    }

    /// Item block preferred by `user` at snapshot `t`.
    pub fn preferred_block(&self, user: u64, t: usize) -> usize {
        (self.user_block(user) + self.rotation(t)) % self.blocks
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub interactions: Vec<Interaction>,
    /// Preferred item block per snapshot, indexed `[t][user block]`.
    pub affinity: Vec<Vec<usize>>,
}

fn block_members(count: usize, blocks: usize, b: usize) -> Vec<u64> {
    (b..count).step_by(blocks).map(|x| x as u64).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, SynthError> {
    spec.validate()?;
    let members: Vec<Vec<u64>> = (0..spec.blocks).map(|b| block_members(spec.items, spec.blocks, b)).collect();
    let mut interactions = Vec::new();
    for t in 0..spec.snapshots {
        let mut rng = seed::rng_keyed(spec.seed, "synth", t as u64);
        let base = t as i64 * spec.granularity;
        for user in 0..spec.users as u64 {
            let pref = spec.preferred_block(user, t);
            for _ in 0..spec.events_at(t) {
                let block = if spec.blocks == 1 || rng.gen::<f64>() < spec.within_prob {
                    pref
                } else {
                    let other = rng.gen_range(0..spec.blocks - 1);
                    if other >= pref {
                        other + 1
                    } else {
                        other
                    }
                };
                let pool = &members[block];
                let item = pool[rng.gen_range(0..pool.len())];
                let timestamp = base + rng.gen_range(0..spec.granularity);
                interactions.push(Interaction { user, item, timestamp });
            }
        }
    }
    interactions.sort_by_key(|r| (r.timestamp, r.user, r.item));
    let affinity = (0..spec.snapshots)
        .map(|t| (0..spec.blocks).map(|b| (b + spec.rotation(t)) % spec.blocks).collect())
        .collect();
    Ok(SyntheticData { interactions, affinity })
}

/// Planted assignment as `kind,id,block` lines followed by
/// `affinity,t,user_block,item_block` lines.
pub fn write_planted(mut w: impl Write, spec: &SyntheticSpec, data: &SyntheticData) -> std::io::Result<()> {
    for u in 0..spec.users as u64 {
        writeln!(w, "user,{u},{}", spec.user_block(u))?;
    }
    for i in 0..spec.items as u64 {
        writeln!(w, "item,{i},{}", spec.item_block(i))?;
    }
    for (t, row) in data.affinity.iter().enumerate() {
        for (b, p) in row.iter().enumerate() {
            writeln!(w, "affinity,{t},{b},{p}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_probabilities_stay_within_block() {
        let spec = SyntheticSpec {
            within_prob: 1.0,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        assert!(!data.interactions.is_empty());
        for r in &data.interactions {
            assert_eq!(spec.user_block(r.user), spec.item_block(r.item));
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn rotation_schedule() {
        let spec = SyntheticSpec {
            drift_start: 2,
            drift_every: 1,
            ..SyntheticSpec::default()
        };
        assert_eq!((0..5).map(|t| spec.rotation(t)).collect::<Vec<_>>(), vec![0, 0, 1, 2, 3]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SyntheticSpec {
            within_prob: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticSpec {
            users: 1,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn timestamps_fall_in_their_snapshot() {
        let spec = SyntheticSpec::default();
        let data = generate_synthetic(&spec).unwrap();
        let per_snapshot = spec.users * spec.events_per_user;
        for t in 0..spec.snapshots as i64 {
            let n = data
                .interactions
                .iter()
                .filter(|r| r.timestamp.div_euclid(spec.granularity) == t)
                .count();
            assert_eq!(n, per_snapshot);
        }
    }
}
