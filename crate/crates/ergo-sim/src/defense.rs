//! The ERGO admission/purge protocol, parameterized by its heuristic set.
//!
//! Step 1: a joining ID is charged 1 plus the number of IDs that joined in
//! the trailing 1/J-hat seconds (clipped at the iteration start by default).
//! Step 2: once joins+departures in the iteration reach ceil(|S(tau)|/11),
//! every member is issued a 1-hard challenge; good IDs always solve within a
//! round, the adversary retains at most a kappa-fraction.
//!
//! Heuristics (combinable):
//!  - H1 aligns estimate updates with purges (lives in the estimator).
//!  - H2 replaces the raw join+depart counter with the symmetric difference
//!    against the iteration-start membership.
//!  - H3 suppresses a due purge while the estimator-derived worst-case bad
//!    fraction stays below 1/6. A hard cap at ceil((27/20)|S(tau)|/11)
//!    events purges regardless, which keeps the population invariant and the
//!    interval-overlap bound intact even when the estimate is off.
//!  - H4 consults a Bernoulli classifier and refuses entry to IDs labeled
//!    bad, at zero charged cost.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ChangeTracker, CostLedger, IdKind};

#[derive(Debug, Error, PartialEq)]
pub enum DefenseError {
    #[error("entrance cost needs a positive estimate, got {0}")]
    BadEstimate(f64),
    #[error("invalid policy: {0}")]
    Policy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefensePolicy {
    pub h1_align_estimate: bool,
    pub h2_symmetric_diff_purge: bool,
    pub h3_invariant_purge: bool,
    /// Classifier accuracy in [0.5, 1]; present iff H4 is enabled.
    pub h4_classifier: Option<f64>,
    /// Clip the entrance-cost window at the iteration start (Figure-style
    /// "last 1/J-hat seconds of the current iteration").
    pub window_truncate_at_iteration: bool,
}

impl Default for DefensePolicy {
    fn default() -> Self {
        DefensePolicy {
            h1_align_estimate: false,
            h2_symmetric_diff_purge: false,
            h3_invariant_purge: false,
            h4_classifier: None,
            window_truncate_at_iteration: true,
        }
    }
}

impl DefensePolicy {
    /// Plain ERGO, no heuristics.
    pub fn base() -> Self {
        Self::default()
    }

    /// ERGO-CH1 = {H1, H2}.
    pub fn ch1() -> Self {
        DefensePolicy {
            h1_align_estimate: true,
            h2_symmetric_diff_purge: true,
            ..Self::default()
        }
    }

    /// ERGO-CH2 = {H1, H2, H3}.
    pub fn ch2() -> Self {
        DefensePolicy {
            h3_invariant_purge: true,
            ..Self::ch1()
        }
    }

    /// ERGO-SF(p) = {H1, H2, H3, H4 with accuracy p}.
    pub fn sf(accuracy: f64) -> Self {
        DefensePolicy {
            h4_classifier: Some(accuracy),
            ..Self::ch2()
        }
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        if let Some(p) = self.h4_classifier {
            if !(0.5..=1.0).contains(&p) {
                return Err(DefenseError::Policy(format!(
                    "classifier accuracy must lie in [0.5, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Hard H3 cap numerator/denominator: joins+departs >= ceil((27/20) * size / 11)
/// always purges. 27/20 keeps the worst-case mid-iteration bad fraction
/// below 1/6 even if every capped join was bad.
const H3_CAP_NUM: u64 = 27;
const H3_CAP_DEN: u64 = 220; // 20 * 11

/// State of the currently open iteration.
#[derive(Clone, Debug)]
pub struct IterationState {
    pub tau: f64,
    pub size_at_tau: u64,
    pub joins: u64,
    pub departs: u64,
    pub iteration_index: u64,
    /// Estimator interval index when the iteration opened (overlap monitor).
    pub interval_index_at_tau: u64,
    /// Time-ordered admitted-join timestamps for the entrance window.
    join_log: VecDeque<f64>,
    /// H2: membership change against the iteration-start snapshot.
    h2: Option<ChangeTracker>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmitOutcome {
    pub admitted: bool,
    pub charged: u64,
}

/// Why (or whether) a purge fires right now.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PurgeDecision {
    /// Trigger not reached.
    Idle,
    /// Trigger reached and not suppressed.
    Fire,
    /// H3 held a due purge back.
    Suppressed,
}

#[derive(Clone, Debug)]
pub struct ErgoDefense {
    pub policy: DefensePolicy,
    /// CCom: entrance hardness is always 1; everything else is identical.
    pub flat_entrance_cost: bool,
    pub kappa: f64,
    pub iter: IterationState,
    /// Per-iteration entrance spend, split by goodness (audit only).
    pub entrance_good_this_iter: u64,
    pub entrance_bad_this_iter: u64,
    pub false_refusals_good: u64,
}

impl ErgoDefense {
    pub fn new(policy: DefensePolicy, flat_entrance_cost: bool, kappa: f64) -> Self {
        ErgoDefense {
            policy,
            flat_entrance_cost,
            kappa,
            iter: IterationState {
                tau: 0.0,
                size_at_tau: 0,
                joins: 0,
                departs: 0,
                iteration_index: 0,
                interval_index_at_tau: 0,
                join_log: VecDeque::new(),
                h2: None,
            },
            entrance_good_this_iter: 0,
            entrance_bad_this_iter: 0,
            false_refusals_good: 0,
        }
    }

    /// Open an iteration at `now` over a system of `size` members.
    pub fn begin_iteration(&mut self, now: f64, size: u64, interval_index: u64) {
        self.iter.tau = now;
        self.iter.size_at_tau = size;
        self.iter.joins = 0;
        self.iter.departs = 0;
        self.iter.interval_index_at_tau = interval_index;
        if self.policy.window_truncate_at_iteration {
            self.iter.join_log.clear();
        }
        self.iter.h2 = self
            .policy
            .h2_symmetric_diff_purge
            .then(|| ChangeTracker::new(now, size));
        self.entrance_good_this_iter = 0;
        self.entrance_bad_this_iter = 0;
    }

    pub fn advance_iteration_index(&mut self) {
        self.iter.iteration_index += 1;
    }

    /// Entrance cost for a join arriving at `now`: 1 plus the joins inside
    /// the trailing 1/estimate window. The candidate itself is excluded.
    pub fn entrance_cost(&self, now: f64, estimate: f64) -> Result<u64, DefenseError> {
        if self.flat_entrance_cost {
            return Ok(1);
        }
        if estimate.is_nan() || estimate <= 0.0 {
            return Err(DefenseError::BadEstimate(estimate));
        }
        let lo = now - 1.0 / estimate;
        // join_log is time-ordered; count entries strictly inside (lo, now).
        let log = &self.iter.join_log;
        let idx = log.partition_point(|&t| t <= lo);
        Ok(1 + (log.len() - idx) as u64)
    }

    fn note_admitted_join(&mut self, now: f64, estimate: f64) {
        self.iter.joins += 1;
        self.iter.join_log.push_back(now);
        if let Some(t) = self.iter.h2.as_mut() {
            t.note_join();
        }
        // Without iteration truncation the log survives purges; age out
        // entries behind the current window so it stays bounded. (An
        // estimate drop at a later update cannot resurrect aged-out joins;
        // the flag is an exploratory variant.)
        if !self.policy.window_truncate_at_iteration && estimate > 0.0 {
            let lo = now - 1.0 / estimate;
            while self.iter.join_log.front().is_some_and(|&t| t <= lo) {
                self.iter.join_log.pop_front();
            }
        }
    }

    pub fn note_departure(&mut self, joined_at: f64) {
        self.iter.departs += 1;
        if let Some(t) = self.iter.h2.as_mut() {
            t.note_remove(joined_at);
        }
    }

    /// Purge-time eviction bookkeeping for the H2 tracker.
    pub fn h2_note_remove_counts(&mut self, in_snap: u64, newer: u64) {
        if let Some(t) = self.iter.h2.as_mut() {
            t.note_remove_counts(in_snap, newer);
        }
    }

    /// Step-1 admission. The classifier (H4), when enabled, labels the ID
    /// correctly with the configured probability; IDs labeled bad are
    /// refused entry at zero charged cost.
    pub fn admit<R: Rng>(
        &mut self,
        kind: IdKind,
        now: f64,
        estimate: f64,
        ledger: &mut CostLedger,
        rng: &mut R,
    ) -> Result<AdmitOutcome, DefenseError> {
        if let Some(accuracy) = self.policy.h4_classifier {
            let correct = rng.gen_bool(accuracy);
            let labeled_bad = match kind {
                IdKind::Bad => correct,
                IdKind::Good => !correct,
            };
            if labeled_bad {
                if kind == IdKind::Good {
                    self.false_refusals_good += 1;
                }
                return Ok(AdmitOutcome {
                    admitted: false,
                    charged: 0,
                });
            }
        }
        let cost = self.entrance_cost(now, estimate)?;
        match kind {
            IdKind::Good => {
                ledger.charge_good_entrance(cost);
                self.entrance_good_this_iter += cost;
            }
            IdKind::Bad => {
                ledger.charge_adversary(cost);
                self.entrance_bad_this_iter += cost;
            }
        }
        self.note_admitted_join(now, estimate);
        Ok(AdmitOutcome {
            admitted: true,
            charged: cost,
        })
    }

    /// Step-2 trigger, evaluated after every membership change.
    pub fn purge_decision(&self, now: f64, current_size: u64, estimate: f64) -> PurgeDecision {
        let size = self.iter.size_at_tau;
        if size == 0 {
            return PurgeDecision::Idle;
        }
        let raw = self.iter.joins + self.iter.departs;
        let triggered = match &self.iter.h2 {
            // |S_now (+) S(tau)| >= ceil(size/11)
            Some(t) => 11 * t.sym_diff() >= size,
            // joins + departs >= ceil(size/11)
            None => 11 * raw >= size,
        };
        if !self.policy.h3_invariant_purge {
            return if triggered { PurgeDecision::Fire } else { PurgeDecision::Idle };
        }
        // Hard cap: purge regardless once raw churn passes (27/20)/11 of the
        // iteration-start size.
        if H3_CAP_DEN * raw >= H3_CAP_NUM * size {
            return PurgeDecision::Fire;
        }
        if !triggered {
            return PurgeDecision::Idle;
        }
        // Estimator-derived worst case: at most kappa*|S(tau)| bad survived
        // the last purge, and at most ceil(elapsed*(total join rate - J))
        // (clamped at joins) bad IDs joined since.
        let elapsed = now - self.iter.tau;
        let expected_good = elapsed * estimate;
        let bad_join_ub = (self.iter.joins as f64 - expected_good).max(0.0).ceil();
        let bad_join_ub = bad_join_ub.min(self.iter.joins as f64);
        let worst_bad = self.kappa * size as f64 + bad_join_ub;
        if worst_bad < current_size as f64 / 6.0 {
            PurgeDecision::Suppressed
        } else {
            PurgeDecision::Fire
        }
    }

    /// Joins (with no departures) until the default trigger fires; used by
    /// the constant-cost block-advance path. Only valid without H2/H3.
    pub fn joins_until_default_trigger(&self) -> u64 {
        debug_assert!(self.iter.h2.is_none() && !self.policy.h3_invariant_purge);
        let size = self.iter.size_at_tau;
        let raw = self.iter.joins + self.iter.departs;
        let threshold = size.div_ceil(11).max(1);
        threshold.saturating_sub(raw).max(1)
    }

    pub fn bulk_admitted_joins(&mut self, n: u64) {
        self.iter.joins += n;
        if let Some(t) = self.iter.h2.as_mut() {
            t.note_joins(n);
        }
    }
}
