//! Core domain model: identities, the serialized event stream, defense-visible
//! membership with ground-truth audit partitions, and cost accounting.
//!
//! Everything downstream (traces, defenses, adversaries, metrics) is built on
//! these types. Membership-change bookkeeping is done with [`ChangeTracker`],
//! an O(1)-per-event symmetric-difference counter that the test suite checks
//! against brute-force set recomputation.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Virtual identifier. Uids are never reused within a run, even when the same
/// principal rejoins: every join is a fresh ID.
pub type Uid = u64;

/// Adversary-minted uids live in a disjoint range so goodness is decidable
/// from the uid alone (audit convenience; defenses never look at this).
pub const BAD_UID_BASE: Uid = 1 << 62;
/// Mirrored bad-churn streams (estimate experiments) get their own range.
pub const MIRROR_UID_BASE: Uid = (1 << 62) | (1 << 61);

pub fn uid_is_bad(uid: Uid) -> bool {
    uid >= BAD_UID_BASE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdKind {
    Good,
    Bad,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub uid: Uid,
    pub kind: IdKind,
    pub joined_at: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventPayload {
    Join(Identity),
    Depart(Uid),
}

/// A serialized join/departure occurrence. Times strictly increase within a
/// run; generators guarantee uniqueness by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub payload: EventPayload,
}

impl Event {
    pub fn join(time: f64, id: Identity) -> Self {
        Event {
            time,
            payload: EventPayload::Join(id),
        }
    }

    pub fn depart(time: f64, uid: Uid) -> Self {
        Event {
            time,
            payload: EventPayload::Depart(uid),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("stale event at t={event_time} (clock already at t={now})")]
    StaleEvent { now: f64, event_time: f64 },
    #[error("departure of unknown uid {0}")]
    UnknownDeparture(Uid),
    #[error("duplicate uid {0}")]
    DuplicateId(Uid),
    #[error("good population at floor n0={n0}, cannot depart")]
    FloorViolation { n0: usize },
    #[error("invalid config: {0}")]
    Config(String),
}

/// Set of uids with O(1) insert/remove/contains and O(1) access by dense
/// index, so uniform sampling needs no iteration.
#[derive(Clone, Debug, Default)]
pub struct IndexedSet {
    items: Vec<Uid>,
    pos: HashMap<Uid, usize>,
}

impl IndexedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, uid: Uid) -> bool {
        if self.pos.contains_key(&uid) {
            return false;
        }
        self.pos.insert(uid, self.items.len());
        self.items.push(uid);
        true
    }

    pub fn remove(&mut self, uid: Uid) -> bool {
        match self.pos.remove(&uid) {
            None => false,
            Some(idx) => {
                let last = self.items.pop().expect("non-empty");
                if last != uid {
                    self.items[idx] = last;
                    self.pos.insert(last, idx);
                }
                true
            }
        }
    }

    pub fn contains(&self, uid: Uid) -> bool {
        self.pos.contains_key(&uid)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<Uid> {
        self.items.get(idx).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = Uid> + '_ {
        self.items.iter().copied()
    }
}

/// |a △ b| by direct enumeration of both difference sets.
pub fn symmetric_difference_size(a: &HashSet<Uid>, b: &HashSet<Uid>) -> usize {
    a.difference(b).count() + b.difference(a).count()
}

/// Defense-visible membership S(t) plus the audit-only partition into
/// G(t)/B(t). The defense code paths only ever read sizes and sampled
/// members; goodness labels are consulted by monitors and ledgers alone.
#[derive(Clone, Debug)]
pub struct SystemView {
    good: IndexedSet,
    bad: IndexedSet,
    joined_at: HashMap<Uid, f64>,
    pub now: f64,
}

impl SystemView {
    pub fn new(start: f64) -> Self {
        SystemView {
            good: IndexedSet::new(),
            bad: IndexedSet::new(),
            joined_at: HashMap::new(),
            now: start,
        }
    }

    pub fn member_count(&self) -> usize {
        self.good.len() + self.bad.len()
    }

    pub fn good_count(&self) -> usize {
        self.good.len()
    }

    pub fn bad_count(&self) -> usize {
        self.bad.len()
    }

    pub fn is_member(&self, uid: Uid) -> bool {
        self.good.contains(uid) || self.bad.contains(uid)
    }

    pub fn joined_at(&self, uid: Uid) -> Option<f64> {
        self.joined_at.get(&uid).copied()
    }

    /// Member by dense index over good then bad; index order is an
    /// implementation detail but is deterministic for a given event history.
    pub fn member_by_index(&self, idx: usize) -> Option<Uid> {
        if idx < self.good.len() {
            self.good.get(idx)
        } else {
            self.bad.get(idx - self.good.len())
        }
    }

    pub fn good_members(&self) -> HashSet<Uid> {
        self.good.iter().collect()
    }

    pub fn bad_members(&self) -> HashSet<Uid> {
        self.bad.iter().collect()
    }

    pub fn members(&self) -> HashSet<Uid> {
        self.good.iter().chain(self.bad.iter()).collect()
    }

    /// Insert a member directly (system initialization; not an event).
    pub fn seed_member(&mut self, id: Identity) -> Result<(), ModelError> {
        if self.is_member(id.uid) {
            return Err(ModelError::DuplicateId(id.uid));
        }
        match id.kind {
            IdKind::Good => self.good.insert(id.uid),
            IdKind::Bad => self.bad.insert(id.uid),
        };
        self.joined_at.insert(id.uid, id.joined_at);
        Ok(())
    }

    /// Apply one serialized event. Time must strictly increase and departures
    /// must reference a current member.
    pub fn apply_event(&mut self, ev: &Event) -> Result<(), ModelError> {
        if ev.time <= self.now {
            return Err(ModelError::StaleEvent {
                now: self.now,
                event_time: ev.time,
            });
        }
        match ev.payload {
            EventPayload::Join(id) => {
                if self.is_member(id.uid) {
                    return Err(ModelError::DuplicateId(id.uid));
                }
                match id.kind {
                    IdKind::Good => self.good.insert(id.uid),
                    IdKind::Bad => self.bad.insert(id.uid),
                };
                self.joined_at.insert(id.uid, ev.time);
            }
            EventPayload::Depart(uid) => {
                if !self.good.remove(uid) && !self.bad.remove(uid) {
                    return Err(ModelError::UnknownDeparture(uid));
                }
                self.joined_at.remove(&uid);
            }
        }
        self.now = ev.time;
        Ok(())
    }

    /// Departing good ID chosen independently and uniformly at random.
    /// Refuses to go below the n0 floor.
    pub fn sample_uniform_good_departure<R: Rng>(
        &self,
        n0: usize,
        rng: &mut R,
    ) -> Result<Uid, ModelError> {
        if self.good.len() <= n0 {
            return Err(ModelError::FloorViolation { n0 });
        }
        let idx = rng.gen_range(0..self.good.len());
        Ok(self.good.get(idx).expect("index in range"))
    }
}

/// Simulation-wide model parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    /// Minimum good population at any time (model floor, >= 4).
    pub n0: usize,
    /// Fraction of per-round challenge-solving resources the adversary holds.
    pub kappa: f64,
    /// Seconds to solve a 1-hard challenge plus messaging.
    pub round_len: f64,
    /// Max fraction of good IDs departing per round; enforced by generators.
    pub epsilon: f64,
    pub rng_seed: u64,
    /// Simulated seconds.
    pub horizon: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n0: 4,
            kappa: 1.0 / 18.0,
            round_len: 1.0,
            epsilon: 1.0 / 12.0,
            rng_seed: 0,
            horizon: 10_000.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n0 < 4 {
            return Err(ModelError::Config(format!("n0 must be >= 4, got {}", self.n0)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0 / 18.0) {
            return Err(ModelError::Config(format!(
                "kappa must lie in (0, 1/18], got {}",
                self.kappa
            )));
        }
        // The bad-fraction bound needs epsilon < 1/12 in the worst case; the
        // boundary value is accepted because the audited margin is wide.
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0 / 12.0) {
            return Err(ModelError::Config(format!(
                "epsilon must lie in (0, 1/12], got {}",
                self.epsilon
            )));
        }
        if self.round_len <= 0.0 {
            return Err(ModelError::Config("round_len must be positive".into()));
        }
        if self.horizon < 0.0 {
            return Err(ModelError::Config("horizon must be non-negative".into()));
        }
        Ok(())
    }
}

/// One spend-rate sample: rates measured over the window since the previous
/// sample.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LedgerSample {
    pub time: f64,
    pub good_rate: f64,
    pub adversary_rate: f64,
}

/// Cumulative resource-burning spend, split by category. All costs are
/// integer challenge-units; a k-hard challenge costs exactly k.
#[derive(Clone, Debug, Default)]
pub struct CostLedger {
    pub good_entrance: u64,
    pub good_purge: u64,
    pub good_periodic: u64,
    pub adversary_total: u64,
    pub samples: Vec<LedgerSample>,
    last_sample_time: f64,
    last_good: u64,
    last_adv: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn good_total(&self) -> u64 {
        self.good_entrance + self.good_purge + self.good_periodic
    }

    pub fn charge_good_entrance(&mut self, units: u64) {
        self.good_entrance += units;
    }

    pub fn charge_good_purge(&mut self, units: u64) {
        self.good_purge += units;
    }

    pub fn charge_good_periodic(&mut self, units: u64) {
        self.good_periodic += units;
    }

    pub fn charge_adversary(&mut self, units: u64) {
        self.adversary_total += units;
    }

    pub fn sample(&mut self, now: f64) {
        let dt = now - self.last_sample_time;
        if dt <= 0.0 {
            return;
        }
        let good = self.good_total();
        self.samples.push(LedgerSample {
            time: now,
            good_rate: (good - self.last_good) as f64 / dt,
            adversary_rate: (self.adversary_total - self.last_adv) as f64 / dt,
        });
        self.last_sample_time = now;
        self.last_good = good;
        self.last_adv = self.adversary_total;
    }
}

/// Incremental |S(now) △ S(snap)| against the most recent snapshot.
///
/// Relies on two facts that hold throughout the simulator: a joining uid has
/// never been a member before (so it cannot be in the snapshot), and a member
/// was in the snapshot iff it joined at or before the snapshot time. Both are
/// consequences of "every joining ID is treated as a new ID".
#[derive(Clone, Copy, Debug)]
pub struct ChangeTracker {
    pub snap_time: f64,
    pub snap_size: u64,
    pub current_size: u64,
    added: u64,
    removed: u64,
}

impl ChangeTracker {
    pub fn new(now: f64, size: u64) -> Self {
        ChangeTracker {
            snap_time: now,
            snap_size: size,
            current_size: size,
            added: 0,
            removed: 0,
        }
    }

    /// Fresh id joined.
    pub fn note_join(&mut self) {
        self.added += 1;
        self.current_size += 1;
    }

    /// Block of fresh joins (exact equivalent of n note_join calls).
    pub fn note_joins(&mut self, n: u64) {
        self.added += n;
        self.current_size += n;
    }

    /// A current member left; classification is by its join time.
    pub fn note_remove(&mut self, joined_at: f64) {
        if joined_at <= self.snap_time {
            self.removed += 1;
        } else {
            self.added -= 1;
        }
        self.current_size -= 1;
    }

    /// Batch removal: `in_snap` members that predate the snapshot plus
    /// `newer` members that joined after it.
    pub fn note_remove_counts(&mut self, in_snap: u64, newer: u64) {
        self.removed += in_snap;
        self.added -= newer;
        self.current_size -= in_snap + newer;
    }

    pub fn sym_diff(&self) -> u64 {
        self.added + self.removed
    }

    /// |S(now) - S(snap)|: current members that joined after the snapshot.
    pub fn added(&self) -> u64 {
        self.added
    }

    /// Re-snapshot at `now` (membership unchanged by the call itself).
    pub fn reset(&mut self, now: f64) {
        self.snap_time = now;
        self.snap_size = self.current_size;
        self.added = 0;
        self.removed = 0;
    }

    /// GoodJEst trigger: |S(t') △ S(t)| >= ceil((5/8)|S(t')|), in exact
    /// integer form 8·sym >= 5·|S(t')|.
    pub fn fires_five_eighths(&self) -> bool {
        8 * self.sym_diff() >= 5 * self.current_size
    }

    /// Epoch boundary: |G(t') △ G(t)| >= ceil((3/4)|G(t)|) against the size
    /// at the snapshot.
    pub fn fires_three_quarters_of_snap(&self) -> bool {
        4 * self.sym_diff() >= 3 * self.snap_size
    }

    /// Smallest number of additional fresh joins (no other changes) after
    /// which the 5/8 trigger fires, if any. Exact: the trigger condition
    /// after j joins is 8(sym + j) >= 5(size + j).
    pub fn joins_until_five_eighths(&self) -> Option<u64> {
        let lhs = 8 * self.sym_diff();
        let rhs = 5 * self.current_size;
        if lhs >= rhs {
            return Some(0);
        }
        // 8(sym+j) >= 5(size+j)  <=>  3j >= 5*size - 8*sym
        Some((rhs - lhs).div_ceil(3))
    }
}
