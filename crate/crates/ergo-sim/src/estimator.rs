//! GoodJEst: running estimate of the good join rate from the defense-visible
//! membership stream.
//!
//! The estimate updates whenever the symmetric difference against the last
//! snapshot reaches ceil((5/8)|S(now)|); the new estimate is |S(now)| divided
//! by the time since the last update. Updates partition time into
//! consecutive, disjoint intervals. The symmetric difference is tracked
//! incrementally (two counters) rather than by set comparison; the test suite
//! holds the incremental trigger to brute-force recomputation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ChangeTracker;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("cannot initialize the estimator on an empty system")]
    EmptySystem,
    #[error("estimator not initialized")]
    Uninitialized,
    #[error("estimate update with zero elapsed time")]
    ZeroElapsed,
}

/// Which count the update divides by elapsed time.
///
/// `CurrentSize` is the literal rule (|S(t')|). `NewMembers` divides the
/// number of members added since the snapshot instead; it is a non-default
/// variant kept for exploration because it tracks the raw join rate much more
/// tightly on stationary churn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateNumerator {
    #[default]
    CurrentSize,
    NewMembers,
}

/// One closed interval between estimate updates.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IntervalRecord {
    pub index: u64,
    pub start: f64,
    pub end: f64,
    pub size_at_end: u64,
    pub estimate_set: f64,
}

#[derive(Clone, Debug)]
pub struct GoodJEst {
    inner: Option<Inner>,
    /// Heuristic 1: defer a fired trigger to the next purge.
    pub defer_to_purge: bool,
    pub numerator: EstimateNumerator,
}

#[derive(Clone, Debug)]
struct Inner {
    tracker: ChangeTracker,
    estimate: f64,
    t_last: f64,
    interval_index: u64,
    pending: bool,
}

impl GoodJEst {
    pub fn new(defer_to_purge: bool, numerator: EstimateNumerator) -> Self {
        GoodJEst {
            inner: None,
            defer_to_purge,
            numerator,
        }
    }

    pub fn initialized(&self) -> bool {
        self.inner.is_some()
    }

    /// Initialize with the post-bootstrap membership: estimate is the member
    /// count divided by the time initialization took.
    pub fn init(&mut self, now: f64, size: u64, init_duration: f64) -> Result<(), EstimatorError> {
        if size == 0 {
            return Err(EstimatorError::EmptySystem);
        }
        debug_assert!(init_duration > 0.0);
        self.inner = Some(Inner {
            tracker: ChangeTracker::new(now, size),
            estimate: size as f64 / init_duration,
            t_last: now,
            interval_index: 0,
            pending: false,
        });
        Ok(())
    }

    pub fn current_estimate(&self) -> Result<f64, EstimatorError> {
        self.inner
            .as_ref()
            .map(|i| i.estimate)
            .ok_or(EstimatorError::Uninitialized)
    }

    pub fn interval_index(&self) -> u64 {
        self.inner.as_ref().map_or(0, |i| i.interval_index)
    }

    pub fn snapshot_time(&self) -> Option<f64> {
        self.inner.as_ref().map(|i| i.tracker.snap_time)
    }

    pub fn interval_start(&self) -> Option<f64> {
        self.inner.as_ref().map(|i| i.t_last)
    }

    pub fn note_join(&mut self) {
        if let Some(i) = self.inner.as_mut() {
            i.tracker.note_join();
        }
    }

    pub fn note_joins(&mut self, n: u64) {
        if let Some(i) = self.inner.as_mut() {
            i.tracker.note_joins(n);
        }
    }

    pub fn note_remove(&mut self, joined_at: f64) {
        if let Some(i) = self.inner.as_mut() {
            i.tracker.note_remove(joined_at);
        }
    }

    pub fn note_remove_counts(&mut self, in_snap: u64, newer: u64) {
        if let Some(i) = self.inner.as_mut() {
            i.tracker.note_remove_counts(in_snap, newer);
        }
    }

    /// Fresh joins until the trigger would fire with no other changes.
    pub fn joins_until_trigger(&self) -> Option<u64> {
        self.inner.as_ref().and_then(|i| {
            if i.pending {
                None
            } else {
                i.tracker.joins_until_five_eighths()
            }
        })
    }

    /// Call after every membership change. Returns the completed interval
    /// when the estimate updates.
    pub fn on_membership_change(
        &mut self,
        now: f64,
    ) -> Result<Option<IntervalRecord>, EstimatorError> {
        let defer = self.defer_to_purge;
        let inner = self.inner.as_mut().ok_or(EstimatorError::Uninitialized)?;
        if !inner.tracker.fires_five_eighths() {
            return Ok(None);
        }
        if defer {
            inner.pending = true;
            return Ok(None);
        }
        Self::update(inner, self.numerator, now).map(Some)
    }

    /// Heuristic 1: land a pending update at purge time, measuring elapsed
    /// time from the last update to the purge.
    pub fn apply_deferred(&mut self, now: f64) -> Result<Option<IntervalRecord>, EstimatorError> {
        let numerator = self.numerator;
        let inner = self.inner.as_mut().ok_or(EstimatorError::Uninitialized)?;
        if !inner.pending {
            return Ok(None);
        }
        Self::update(inner, numerator, now).map(Some)
    }

    fn update(
        inner: &mut Inner,
        numerator: EstimateNumerator,
        now: f64,
    ) -> Result<IntervalRecord, EstimatorError> {
        let elapsed = now - inner.t_last;
        if elapsed <= 0.0 {
            return Err(EstimatorError::ZeroElapsed);
        }
        let count = match numerator {
            EstimateNumerator::CurrentSize => inner.tracker.current_size,
            EstimateNumerator::NewMembers => inner.tracker.added(),
        };
        let candidate = count as f64 / elapsed;
        // Defensive floor: keep the previous estimate rather than going
        // non-positive.
        if candidate > 0.0 {
            inner.estimate = candidate;
        }
        let record = IntervalRecord {
            index: inner.interval_index,
            start: inner.t_last,
            end: now,
            size_at_end: inner.tracker.current_size,
            estimate_set: inner.estimate,
        };
        inner.t_last = now;
        inner.tracker.reset(now);
        inner.interval_index += 1;
        inner.pending = false;
        Ok(record)
    }
}
