//! Decentralized mode: a committee of size C*log2|S| elected uniformly at
//! random (without replacement) from the full membership at each iteration
//! end, with audits of the size band and the 7/8 good-majority bound.

use std::collections::HashSet;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{uid_is_bad, Uid};

#[derive(Debug, Error, PartialEq)]
pub enum CommitteeError {
    #[error("system of {size} members is smaller than the committee target {target}")]
    TooSmall { size: u64, target: u64 },
}

#[derive(Clone, Debug)]
pub struct CommitteeState {
    members: HashSet<Uid>,
    pub target_size: u64,
    pub c: f64,
    pub elected_at_iteration: u64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CommitteeAudit {
    pub iteration: u64,
    pub size: u64,
    pub target_size: u64,
    pub good_fraction: f64,
    pub size_ok: bool,
    pub majority_ok: bool,
}

/// ceil(C * log2(size)), at least 1.
pub fn committee_target(c: f64, system_size: u64) -> u64 {
    if system_size < 2 {
        return 1;
    }
    (c * (system_size as f64).log2()).ceil().max(1.0) as u64
}

/// Elect `committee_target(c, size)` members uniformly without replacement.
/// `member_at` must map each index in [0, size) to a distinct uid; election
/// sees only the defense-visible membership, never goodness labels.
pub fn elect_committee<R: Rng>(
    system_size: u64,
    member_at: impl Fn(u64) -> Uid,
    c: f64,
    iteration: u64,
    rng: &mut R,
) -> Result<CommitteeState, CommitteeError> {
    let target = committee_target(c, system_size);
    if system_size < target {
        return Err(CommitteeError::TooSmall {
            size: system_size,
            target,
        });
    }
    // Floyd's sampling: k distinct indices in [0, n).
    let mut picked: HashSet<u64> = HashSet::with_capacity(target as usize);
    for j in (system_size - target)..system_size {
        let t = rng.gen_range(0..=j);
        if !picked.insert(t) {
            picked.insert(j);
        }
    }
    let members = picked.into_iter().map(member_at).collect();
    Ok(CommitteeState {
        members,
        target_size: target,
        c,
        elected_at_iteration: iteration,
    })
}

impl CommitteeState {
    pub fn len(&self) -> u64 {
        self.members.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, uid: Uid) -> bool {
        self.members.contains(&uid)
    }

    /// Remove a departed (or purged) ID if it held a seat.
    pub fn on_departure(&mut self, uid: Uid) {
        self.members.remove(&uid);
    }

    pub fn good_count(&self) -> u64 {
        self.members.iter().filter(|&&u| !uid_is_bad(u)).count() as u64
    }

    pub fn audit(&self, iteration: u64) -> CommitteeAudit {
        let size = self.len();
        let good = self.good_count();
        let good_fraction = if size == 0 {
            0.0
        } else {
            good as f64 / size as f64
        };
        CommitteeAudit {
            iteration,
            size,
            target_size: self.target_size,
            good_fraction,
            // size within [(7/9) target, target]
            size_ok: 9 * size >= 7 * self.target_size && size <= self.target_size,
            // good fraction >= 7/8, boundary inclusive
            majority_ok: size > 0 && 8 * good >= 7 * size,
        }
    }
}
